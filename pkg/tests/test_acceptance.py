"""Acceptance suite: one test per criterion, each printing a PASS line with
its elapsed time (run with `pytest tests/test_acceptance.py -v -s`).

Numeric tolerances and time bounds are pinned here, not calibrated later.
"""

import time
from contextlib import contextmanager

import numpy as np
import pytest

from conftest import live_supplies, make_contexts, share_of
from pi2pc.demo import build_demo_models
from pi2pc.latency import (
    DEFAULT_PROFILE,
    HwProfile,
    OpGeometry,
    build_latency_table,
    lat_avgpool,
    lat_maxpool,
    lat_relu,
    lat_x2act,
    model_latency,
    ot_flow_costs,
)
from pi2pc.model import LayerSpec, run_plain, run_plain_layer
from pi2pc.nas.search import SearchConfig, run_search, train_fixed
from pi2pc.nas.supernet import make_backbone
from pi2pc.ops import SessionDeps, avgpool2pc, conv2pc, maxpool2pc, relu2pc, run_model, x2act2pc
from pi2pc.otcompare import CompareContext, drelu
from pi2pc.ring import FixedTensor, RingConfig, rand_ring, to_signed
from pi2pc.sharing import beaver_mul, beaver_square, rec, shr
from pi2pc.transport import run_pair

CFG32 = RingConfig(32, 16)
CFG64 = RingConfig(64, 16)
ULP = 2.0**-16


@contextmanager
def criterion(num: int, budget_s: float, desc: str):
    t0 = time.monotonic()
    yield
    dt = time.monotonic() - t0
    assert dt < budget_s, f"criterion {num} exceeded its {budget_s}s budget ({dt:.1f}s)"
    print(f"\nACCEPTANCE {num:2d} PASS ({dt:5.1f}s < {budget_s:g}s): {desc}")


def test_criterion_01_share_round_trip():
    with criterion(1, 1.0, "rec(shr(x)) identity, exhaustive k=8 and 1e5 random k=32"):
        rng = np.random.default_rng(1)
        cfg8 = RingConfig(8, 0)
        x8 = FixedTensor.from_ring(np.arange(256, dtype=np.uint64), cfg8)
        s0, s1 = shr(x8, rng)
        assert np.array_equal(rec(s0, s1).array(), np.arange(256))

        raw = rand_ring(rng, 100_000, CFG32)
        s0, s1 = shr(FixedTensor.from_ring(raw, CFG32), rng)
        assert np.array_equal(rec(s0, s1).data, raw)


def test_criterion_02_beaver_products():
    with criterion(2, 5.0, "1e3 exact Beaver matrix products and 1e3 exact squares"):
        rng = np.random.default_rng(2)
        shape_rng = np.random.default_rng(3)
        sup0, sup1 = live_supplies(CFG32, seed=4)
        cases = []
        for _ in range(1000):
            m, n, p = (int(v) for v in shape_rng.integers(1, 9, 3))
            a = rand_ring(rng, (m, n), CFG32)
            b = rand_ring(rng, (n, p), CFG32)
            ta = FixedTensor.from_ring(a, CFG32)
            tb = FixedTensor.from_ring(b, CFG32)
            cases.append((shr(ta, rng), shr(tb, rng), a, b))
        sq_vals = [rand_ring(rng, int(shape_rng.integers(1, 17)), CFG32) for _ in range(1000)]
        sq_shares = [shr(FixedTensor.from_ring(v, CFG32), rng) for v in sq_vals]

        def party(role, supply):
            def fn(ch):
                outs = []
                for (xs, ys, _, _) in cases:
                    t = supply.take_triple("matmul", xs[role].shape, ys[role].shape)
                    outs.append(beaver_mul(xs[role], ys[role], t, ch))
                sqs = []
                for vs in sq_shares:
                    pair = supply.take_pair(vs[role].shape)
                    sqs.append(beaver_square(vs[role], pair, ch))
                return outs, sqs

            return fn

        results, _ = run_pair(party(0, sup0), party(1, sup1))
        mask = np.uint64(CFG32.mask)
        for (o0, o1), (_, _, a, b) in zip(zip(results[0][0], results[1][0]), cases):
            assert np.array_equal(rec(o0, o1).array(), (a @ b) & mask)
        for (q0, q1), v in zip(zip(results[0][1], results[1][1]), sq_vals):
            assert np.array_equal(rec(q0, q1).data, (v * v) & mask)


def test_criterion_03_drelu_correctness():
    with criterion(3, 30.0, "DReLU exhaustive at k=16 and 1e4 random at k=32 vs sign oracle"):
        cfg16 = RingConfig(16, 0)
        raw16 = np.arange(65536, dtype=np.uint64)
        _, x0, x1 = share_of(raw16, cfg16, seed=5)
        c0, c1 = make_contexts(6)
        outs, _ = run_pair(lambda ch: drelu(x0, c0, ch), lambda ch: drelu(x1, c1, ch))
        got = rec(*outs).array()
        assert np.array_equal(got, (raw16 < 32768).astype(np.uint64))

        raw32 = rand_ring(np.random.default_rng(7), 10_000, CFG32)
        _, y0, y1 = share_of(raw32, CFG32, seed=8)
        c0, c1 = make_contexts(9)
        outs, _ = run_pair(lambda ch: drelu(y0, c0, ch), lambda ch: drelu(y1, c1, ch))
        got = rec(*outs).array()
        assert np.array_equal(got, (raw32 < np.uint64(CFG32.half)).astype(np.uint64))


def test_criterion_04_operator_oracles():
    with criterion(4, 60.0, "operator oracles on 100 random tensors each"):
        rng = np.random.default_rng(10)
        sup0, sup1 = live_supplies(CFG64, seed=11)
        c0, c1 = make_contexts(12)
        d0 = SessionDeps(0, sup0, c0, np.random.default_rng(13), "a")
        d1 = SessionDeps(1, sup1, c1, np.random.default_rng(14), "a")

        relu_cases, max_cases, conv_cases, x2_cases, avg_cases = [], [], [], [], []
        for i in range(100):
            v = rng.normal(0, 2, int(rng.integers(8, 64)))
            relu_cases.append((FixedTensor.from_real(v, CFG64), shr(FixedTensor.from_real(v, CFG64), rng, "a")))
            c = int(rng.integers(1, 3))
            img = rng.normal(0, 2, (c, 4, 4))
            max_cases.append((FixedTensor.from_real(img, CFG64), shr(FixedTensor.from_real(img, CFG64), rng, "a")))
            ic, oc = int(rng.integers(1, 3)), int(rng.integers(1, 4))
            x = rng.normal(0, 1, (ic, 5, 5))
            layer = LayerSpec(
                "conv", out_channels=oc, kernel=(3, 3), padding=(1, 1),
                weights=FixedTensor.from_real(rng.normal(0, 0.5, (ic * 9, oc)), CFG64).array(),
                bias=FixedTensor.from_real(rng.normal(0, 0.1, oc), CFG64).array(),
            )
            conv_cases.append((FixedTensor.from_real(x, CFG64), shr(FixedTensor.from_real(x, CFG64), rng, "a"), layer, (ic, 5, 5)))
            xl = LayerSpec("x2act", w1=float(rng.uniform(-0.5, 0.5)), w2=float(rng.uniform(-1.5, 1.5)),
                           b=float(rng.uniform(-1, 1)), c=1.0, n_x=int(rng.integers(1, 32)))
            xv = rng.normal(0, 1.5, 32)
            x2_cases.append((FixedTensor.from_real(xv, CFG64), shr(FixedTensor.from_real(xv, CFG64), rng, "a"), xl))
            av = rng.normal(0, 2, (2, 4, 4))
            avg_cases.append((FixedTensor.from_real(av, CFG64), shr(FixedTensor.from_real(av, CFG64), rng, "a")))

        pool_layer = LayerSpec("maxpool", kernel=(2, 2), stride=(2, 2))
        avg_layer = LayerSpec("avgpool", kernel=(2, 2), stride=(2, 2))

        def party(role, deps):
            def fn(ch):
                deps.compare.ensure_setup(ch)
                out = {"relu": [], "max": [], "conv": [], "x2": [], "avg": []}
                for _, ss in relu_cases:
                    out["relu"].append(relu2pc(ss[role], deps, ch))
                for t, ss in max_cases:
                    out["max"].append(maxpool2pc(ss[role], pool_layer, deps, ch, t.shape))
                for _, ss, layer, shp in conv_cases:
                    out["conv"].append(conv2pc(ss[role], layer, deps, ch, shp))
                for _, ss, layer in x2_cases:
                    out["x2"].append(x2act2pc(ss[role], layer, deps, ch))
                for t, ss in avg_cases:
                    out["avg"].append(avgpool2pc(ss[role], avg_layer, t.shape))
                return out

            return fn

        results, _ = run_pair(party(0, d0), party(1, d1))

        for i, (t, _) in enumerate(relu_cases):
            got = rec(results[0]["relu"][i], results[1]["relu"][i]).data
            want = run_plain_layer(t.data, LayerSpec("relu"), CFG64, t.shape)
            assert np.array_equal(got, want), "relu must match exactly"
        for i, (t, _) in enumerate(max_cases):
            got = rec(results[0]["max"][i], results[1]["max"][i]).data
            want = run_plain_layer(t.array(), pool_layer, CFG64, t.shape).reshape(-1)
            assert np.array_equal(got, want), "maxpool must match exactly"
        for i, (t, _, layer, shp) in enumerate(conv_cases):
            got = rec(results[0]["conv"][i], results[1]["conv"][i]).data
            want = run_plain_layer(t.array(), layer, CFG64, shp).reshape(-1)
            fan_in = shp[0] * 9
            diff = np.abs(to_signed(got - want, CFG64))
            assert diff.max() <= fan_in + 1, f"conv beyond (fan-in+1) ULP: {diff.max()}"
        for i, (t, _, layer) in enumerate(x2_cases):
            got = rec(results[0]["x2"][i], results[1]["x2"][i]).data
            want = run_plain_layer(t.data, layer, CFG64, t.shape)
            assert np.abs(to_signed(got - want, CFG64)).max() <= 2, "x2act beyond 2 ULP"
        for i, (t, _) in enumerate(avg_cases):
            got = rec(results[0]["avg"][i], results[1]["avg"][i]).data
            want = run_plain_layer(t.array(), avg_layer, CFG64, t.shape).reshape(-1)
            assert np.abs(to_signed(got - want, CFG64)).max() <= 2, "avgpool beyond 2 ULP"


def test_criterion_05_end_to_end_argmax():
    with criterion(5, 120.0, "bundled 2-conv CNN, 100 inputs, secure vs plaintext argmax >= 99%"):
        model, _ = build_demo_models()
        rng = np.random.default_rng(15)
        inputs = [rng.normal(0, 1, (1, 8, 8)) for _ in range(100)]
        sup0, sup1 = live_supplies(model.config, seed=16)
        share_rng = np.random.default_rng(17)
        shares = [shr(FixedTensor.from_real(x, model.config), share_rng, "e2e") for x in inputs]

        def party(role, supply):
            def fn(ch):
                deps = SessionDeps(role, supply, CompareContext(role, np.random.default_rng(18 + role)),
                                   np.random.default_rng(20 + role), "e2e")
                return [run_model(model, s[role], deps, ch)[0] for s in shares]

            return fn

        results, _ = run_pair(party(0, sup0), party(1, sup1))
        agree = 0
        for x, o0, o1 in zip(inputs, results[0], results[1]):
            want = int(np.argmax(run_plain(model, FixedTensor.from_real(x, model.config)).to_real()))
            got = int(np.argmax(rec(o0, o1).to_real()))
            agree += int(got == want)
        assert agree >= 99, f"argmax agreement {agree}/100"


def test_criterion_06_communication_accounting():
    with criterion(6, 60.0, "drelu payload == COMM_2+COMM_3+COMM_4 model, zero deviation"):
        for fi in (2, 8, 16):
            for ic in (1, 4):
                n = fi * fi * ic
                raw = rand_ring(np.random.default_rng(fi * 10 + ic), n, CFG32)
                _, x0, x1 = share_of(raw, CFG32, seed=fi + ic)
                c0, c1 = make_contexts(30 + fi + ic)

                def party(x, c):
                    def fn(ch):
                        c.ensure_setup(ch)
                        mark = len(ch.transcript.entries)
                        out = drelu(x, c, ch)
                        return out, sum(e.payload_bytes for e in ch.transcript.entries[mark:])

                    return fn

                outs, _ = run_pair(party(x0, c0), party(x1, c1))
                h = HwProfile(t_bc=0.0)
                costs = ot_flow_costs(OpGeometry(fi=fi, ic=ic), h)
                model_bits = (costs["COMM_2"] + costs["COMM_3"] + costs["COMM_4"]) * h.rt_bw_bits
                assert outs[0][1] * 8 == model_bits, f"FI={fi} IC={ic}: {outs[0][1]*8} != {model_bits}"
                assert outs[1][1] * 8 == model_bits
                got = rec(outs[0][0], outs[1][0]).array()
                assert np.array_equal(got, (raw < np.uint64(CFG32.half)).astype(np.uint64))


def test_criterion_07_latency_formulas():
    with criterion(7, 30.0, "golden latency values exact to 1e-12 + monotonicity over 1e3 geometries"):
        h = HwProfile(pp=1, freq=2e8, rt_bw=1e9, t_bc=0.0)
        c = ot_flow_costs(OpGeometry(fi=2, ic=1), h)
        assert c["CMP_2"] == pytest.approx(1.088e-5, rel=1e-12)
        assert c["COMM_2"] == pytest.approx(2.56e-7, rel=1e-12)
        assert lat_avgpool(OpGeometry(fi=2, ic=1), h) == pytest.approx(4e-8, rel=1e-12)

        rng = np.random.default_rng(31)
        for _ in range(1000):
            fi = int(rng.integers(1, 64))
            ic = int(rng.integers(1, 128))
            g = OpGeometry(fi=fi, ic=ic)
            for lat in (lat_relu, lat_maxpool, lat_x2act, lat_avgpool):
                assert lat(OpGeometry(fi=fi + 1, ic=ic), DEFAULT_PROFILE) > lat(g, DEFAULT_PROFILE)
                assert lat(OpGeometry(fi=fi, ic=ic + 1), DEFAULT_PROFILE) > lat(g, DEFAULT_PROFILE)


def test_criterion_08_maxpool_relu_gap():
    with criterion(8, 10.0, "maxpool - relu latency gap equals 3*T_bc on 100 random profiles"):
        rng = np.random.default_rng(32)
        for _ in range(100):
            h = HwProfile(
                pp=int(rng.integers(1, 32)),
                freq=float(rng.uniform(1e7, 2e9)),
                rt_bw=float(rng.uniform(1e7, 1e11)),
                t_bc=float(rng.uniform(0, 5e-3)),
            )
            g = OpGeometry(fi=int(rng.integers(1, 64)), ic=int(rng.integers(1, 64)))
            gap = lat_maxpool(g, h) - lat_relu(g, h)
            assert gap == pytest.approx(3 * h.t_bc, rel=1e-9, abs=1e-15)


def test_criterion_09_autodiff_and_bilevel():
    with criterion(9, 60.0, "gradient checks 1e-4, bilevel delta-alpha 1e-3, exact quadratic hessian"):
        from test_autodiff import TestGradientChecks
        from test_nas import QuadraticProblem, TestDartsStep, _null_opts
        from pi2pc.nas.search import darts_step

        checks = TestGradientChecks()
        checks.test_mlp()
        checks.test_conv_pool_gated_net()
        checks.test_randomized_small_graphs()

        p = QuadraticProblem()
        diag = darts_step(p, *_null_opts(p), None, None, xi=0.1)
        v = float(diag["dw_prime"][0])
        assert float(diag["da_hess"][0]) == pytest.approx(-v, rel=1e-9)

        TestDartsStep().test_composed_map_finite_difference()


def test_criterion_10_search_behavior():
    with criterion(10, 290.0, "lambda=0 within 2% of best fixed; big lambda finds min-latency arch"):
        seeds = [0, 1, 2, 3, 4]
        probe = make_backbone("toy", seed=0)
        table = build_latency_table(probe.candidate_chains(), DEFAULT_PROFILE)
        spans = [float(table.layer_costs(li).max() - table.layer_costs(li).min()) for li in (0, 1)]
        min_lat_arch = [int(np.argmin(table.layer_costs(li))) for li in (0, 1)]
        lam_mid = 5.0 / min(spans)
        lam_big = 100.0 / min(spans)

        def derived_latency(choices):
            return sum(table.layer_costs(li)[c] for li, c in enumerate(choices))

        acc_ok, minlat_ok = 0, 0
        for seed in seeds:
            lat_by_lambda = []
            choices0 = None
            for lam in (0.0, lam_mid, lam_big):
                t0 = time.monotonic()
                res = run_search(SearchConfig(
                    backbone="toy", lambda_lat=lam, epochs=6, seed=seed, data_n=360, batch=30))
                assert time.monotonic() - t0 < 300.0, "single search run exceeded 5 min"
                lat_by_lambda.append(derived_latency(res.choices))
                if lam == 0.0:
                    choices0 = res.choices
                if lam == lam_big:
                    minlat_ok += int(res.choices == min_lat_arch)
            assert all(b <= a + 1e-15 for a, b in zip(lat_by_lambda, lat_by_lambda[1:])), (
                f"seed {seed}: Lat(alpha*) not nonincreasing in lambda: {lat_by_lambda}")

            from pi2pc.nas.data import blobs, split
            x, y = blobs(360, seed=seed)
            data = split(x, y, 0.5, seed=seed)
            best_fixed = 0.0
            for c0 in range(4):
                for c1 in range(2):
                    sn = make_backbone("toy", seed=seed + 50)
                    best_fixed = max(best_fixed, train_fixed(sn, [c0, c1], data[0], data[1],
                                                             epochs=6, batch=30, seed=seed))
            sn = make_backbone("toy", seed=seed + 50)
            searched_acc = train_fixed(sn, choices0, data[0], data[1], epochs=6, batch=30, seed=seed)
            acc_ok += int(searched_acc >= best_fixed - 0.02)

        assert acc_ok >= 4, f"lambda=0 accuracy clause held on {acc_ok}/5 seeds"
        assert minlat_ok >= 4, f"min-latency clause held on {minlat_ok}/5 seeds"


def test_criterion_11_polynomial_speedup_echo():
    with criterion(11, 10.0, "all-polynomial variant predicted > 5x faster than ReLU/MaxPool baseline"):
        poly, relu = build_demo_models()
        ratio = model_latency(relu, DEFAULT_PROFILE) / model_latency(poly, DEFAULT_PROFILE)
        assert ratio > 5.0, f"bundled cnn ratio {ratio:.1f}"

        from pi2pc.nas.supernet import export_fixed
        sn = make_backbone("toy", seed=33)
        base = export_fixed(sn, [0, 0])   # relu + maxpool everywhere
        fast = export_fixed(sn, [3, 1])   # x2act + avgpool everywhere
        ratio2 = model_latency(base, DEFAULT_PROFILE) / model_latency(fast, DEFAULT_PROFILE)
        assert ratio2 > 5.0, f"toy-arch ratio {ratio2:.1f}"
