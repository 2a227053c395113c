import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from conftest import make_contexts, share_of
from pi2pc.latency import (
    DEFAULT_PROFILE,
    HwProfile,
    OpGeometry,
    arch_latency,
    build_latency_table,
    lat_avgpool,
    lat_conv,
    lat_maxpool,
    lat_relu,
    lat_x2act,
    model_latency,
    model_layer_latencies,
    op_latency,
    ot_flow_costs,
)
from pi2pc.otcompare import drelu
from pi2pc.ring import RingConfig, rand_ring
from pi2pc.transport import run_pair

REL = 1e-12


class TestGoldenValues:
    def test_cmp2(self):
        h = HwProfile(pp=1, freq=2e8, rt_bw=1e9, t_bc=0.0)
        c = ot_flow_costs(OpGeometry(fi=2, ic=1), h)
        assert c["CMP_2"] == pytest.approx(1.088e-5, rel=REL)

    def test_comm2(self):
        h = HwProfile(pp=1, freq=2e8, rt_bw=1e9, t_bc=0.0)  # 8e9 bits/s
        c = ot_flow_costs(OpGeometry(fi=2, ic=1), h)
        assert c["COMM_2"] == pytest.approx(2.56e-7, rel=REL)

    def test_all_flow_terms(self):
        h = HwProfile(pp=1, freq=2e8, rt_bw=1e9, t_bc=0.0)
        c = ot_flow_costs(OpGeometry(fi=2, ic=1), h)
        n = 4
        assert c["CMP_3"] == pytest.approx(32 * 81 * n / 2e8, rel=REL)
        assert c["CMP_4"] == pytest.approx((32 * 64 + 1) * n / 2e8, rel=REL)
        assert c["COMM_3"] == pytest.approx(32 * 64 * n / 8e9, rel=REL)
        assert c["COMM_4"] == pytest.approx(32 * n / 8e9, rel=REL)
        assert c["COMM_1"] == pytest.approx(32 / 8e9, rel=REL)

    def test_avgpool(self):
        h = HwProfile(pp=1, freq=2e8, rt_bw=1e9, t_bc=0.0)
        assert lat_avgpool(OpGeometry(fi=2, ic=1), h) == pytest.approx(4e-8, rel=REL)

    def test_fi_doubling_quadruples_variable_terms(self):
        h = HwProfile(pp=1, freq=2e8, rt_bw=1e9, t_bc=0.0)
        c1 = ot_flow_costs(OpGeometry(fi=4, ic=3), h)
        c2 = ot_flow_costs(OpGeometry(fi=8, ic=3), h)
        for key in ("CMP_2", "CMP_3", "CMP_4", "COMM_2", "COMM_3", "COMM_4"):
            assert c2[key] == pytest.approx(4 * c1[key], rel=REL)

    def test_relu_is_flow_sum(self):
        h = DEFAULT_PROFILE
        g = OpGeometry(fi=8, ic=4)
        c = ot_flow_costs(g, h)
        want = sum(c[k] for k in ("CMP_2", "CMP_3", "CMP_4", "COMM_1", "COMM_2", "COMM_3", "COMM_4"))
        assert lat_relu(g, h) == pytest.approx(want, rel=REL)


class TestOperatorRelations:
    def test_maxpool_minus_relu_is_3tbc(self):
        rng = np.random.default_rng(1)
        for _ in range(100):
            h = HwProfile(
                pp=int(rng.integers(1, 16)),
                freq=float(rng.uniform(5e7, 1e9)),
                rt_bw=float(rng.uniform(1e8, 1e10)),
                t_bc=float(rng.uniform(0, 1e-3)),
            )
            g = OpGeometry(fi=int(rng.integers(1, 64)), ic=int(rng.integers(1, 128)))
            gap = lat_maxpool(g, h) - lat_relu(g, h)
            assert gap == pytest.approx(3 * h.t_bc, rel=1e-9, abs=1e-15)

    def test_x2act_beats_relu_at_scale(self):
        g = OpGeometry(fi=32, ic=64)
        assert lat_x2act(g, DEFAULT_PROFILE) < lat_relu(g, DEFAULT_PROFILE)

    @given(
        fi=st.integers(1, 128),
        ic=st.integers(1, 256),
    )
    @settings(max_examples=200)
    def test_monotone_in_geometry(self, fi, ic):
        h = DEFAULT_PROFILE
        for lat in (lat_relu, lat_maxpool, lat_x2act, lat_avgpool):
            g = OpGeometry(fi=fi, ic=ic)
            assert lat(OpGeometry(fi=fi + 1, ic=ic), h) > lat(g, h)
            assert lat(OpGeometry(fi=fi, ic=ic + 1), h) > lat(g, h)

    def test_monotone_in_profile(self):
        rng = np.random.default_rng(2)
        for _ in range(200):
            g = OpGeometry(fi=int(rng.integers(1, 64)), ic=int(rng.integers(1, 64)))
            base = HwProfile(pp=4, freq=2e8, rt_bw=1e9, t_bc=0.0)
            for lat in (lat_relu, lat_maxpool, lat_x2act, lat_avgpool):
                v = lat(g, base)
                assert lat(g, HwProfile(pp=8, freq=2e8, rt_bw=1e9, t_bc=0.0)) < v
                assert lat(g, HwProfile(pp=4, freq=4e8, rt_bw=1e9, t_bc=0.0)) < v
                if lat is not lat_avgpool:
                    assert lat(g, HwProfile(pp=4, freq=2e8, rt_bw=2e9, t_bc=0.0)) < v

    def test_conv_monotone(self):
        h = DEFAULT_PROFILE
        g = OpGeometry(fi=8, ic=4, oc=8, kernel=(3, 3), padding=(1, 1))
        g_big = OpGeometry(fi=16, ic=4, oc=8, kernel=(3, 3), padding=(1, 1))
        assert lat_conv(g_big, h) > lat_conv(g, h)


class TestLatencyTable:
    def _toy_chains(self):
        g_conv = OpGeometry(fi=8, ic=1, oc=8, kernel=(3, 3), padding=(1, 1))
        g_act = OpGeometry(fi=8, ic=8)
        g_conv2 = OpGeometry(fi=4, ic=8, oc=16, kernel=(3, 3), padding=(1, 1))
        g_act2 = OpGeometry(fi=4, ic=16)
        layer1 = [
            [("conv", g_conv), ("relu", g_act), ("maxpool", g_act)],
            [("conv", g_conv), ("relu", g_act), ("avgpool", g_act)],
            [("conv", g_conv), ("x2act", g_act), ("maxpool", g_act)],
            [("conv", g_conv), ("x2act", g_act), ("avgpool", g_act)],
        ]
        layer2 = [
            [("conv", g_conv2), ("relu", g_act2)],
            [("conv", g_conv2), ("x2act", g_act2)],
        ]
        return [layer1, layer2]

    def test_toy_supernet_has_six_entries(self):
        table = build_latency_table(self._toy_chains(), DEFAULT_PROFILE)
        assert len(table) == 6

    def test_empty_supernet(self):
        assert len(build_latency_table([], DEFAULT_PROFILE)) == 0

    def test_entries_match_direct_calls(self):
        chains = self._toy_chains()
        table = build_latency_table(chains, DEFAULT_PROFILE)
        for li, layer in enumerate(chains):
            for ci, stages in enumerate(layer):
                want = sum(op_latency(k, g, DEFAULT_PROFILE) for k, g in stages)
                assert table.get(li, ci) == pytest.approx(want, rel=REL)

    def test_arch_latency_one_hot_and_uniform(self):
        table = build_latency_table(self._toy_chains(), DEFAULT_PROFILE)
        one_hot = [np.array([0, 0, 0, 1.0]), np.array([1.0, 0])]
        got = arch_latency(table, one_hot)
        assert got == pytest.approx(table.get(0, 3) + table.get(1, 0), rel=REL)
        uniform = [np.full(4, 0.25), np.full(2, 0.5)]
        want = table.layer_costs(0).mean() + table.layer_costs(1).mean()
        assert arch_latency(table, uniform) == pytest.approx(want, rel=REL)

    def test_arch_latency_from_zero_alpha(self):
        table = build_latency_table(self._toy_chains(), DEFAULT_PROFILE)
        # alpha = 0 -> uniform theta; hand summation
        theta = [np.exp(np.zeros(4)) / 4, np.exp(np.zeros(2)) / 2]
        hand = float(theta[0] @ table.layer_costs(0) + theta[1] @ table.layer_costs(1))
        assert arch_latency(table, theta) == pytest.approx(hand, rel=REL)

    def test_arch_latency_bounds_and_linearity(self):
        table = build_latency_table(self._toy_chains(), DEFAULT_PROFILE)
        rng = np.random.default_rng(3)
        for _ in range(50):
            th = []
            for li in (0, 1):
                v = rng.random(4 if li == 0 else 2)
                th.append(v / v.sum())
            val = arch_latency(table, th)
            lo = table.layer_costs(0).min() + table.layer_costs(1).min()
            hi = table.layer_costs(0).max() + table.layer_costs(1).max()
            assert lo - 1e-15 <= val <= hi + 1e-15

    def test_dimension_mismatch(self):
        table = build_latency_table(self._toy_chains(), DEFAULT_PROFILE)
        with pytest.raises(ValueError):
            arch_latency(table, [np.array([1.0])])
        with pytest.raises(ValueError):
            arch_latency(table, [np.full(3, 1 / 3), np.full(2, 0.5)])


class TestModelPrediction:
    def test_per_layer_sums_to_total(self):
        from pi2pc.demo import build_demo_models

        poly, relu = build_demo_models()
        rows = model_layer_latencies(poly, DEFAULT_PROFILE)
        assert sum(s for _, s in rows) == pytest.approx(model_latency(poly, DEFAULT_PROFILE), rel=REL)
        assert model_latency(relu, DEFAULT_PROFILE) > model_latency(poly, DEFAULT_PROFILE)


class TestModelEngineTie:
    def test_drelu_comm_prediction_matches_transcript(self):
        """Modeled comparison-flow communication time == transcript-derived
        payload time plus 4 T_bc, with header overhead < 1% at 1024 elements."""
        cfg = RingConfig(32, 16)
        h = DEFAULT_PROFILE
        fi, ic = 32, 1
        n = fi * fi * ic
        _, x0, x1 = share_of(rand_ring(np.random.default_rng(4), n, cfg), cfg, seed=5)
        c0, c1 = make_contexts(6)
        _, (ch0, _) = run_pair(lambda ch: drelu(x0, c0, ch), lambda ch: drelu(x1, c1, ch))

        costs = ot_flow_costs(OpGeometry(fi=fi, ic=ic), h)
        modeled = sum(costs[k] for k in ("COMM_1", "COMM_2", "COMM_3", "COMM_4"))

        tr = ch0.transcript
        payload_time = 8 * tr.payload_bytes() / h.rt_bw_bits + 4 * h.t_bc
        assert payload_time == pytest.approx(modeled, rel=REL)

        with_headers = 8 * (tr.payload_bytes() + tr.header_bytes()) / h.rt_bw_bits + 4 * h.t_bc
        assert abs(with_headers - modeled) / modeled < 0.01


class TestHwProfile:
    def test_toml_round_trip(self, tmp_path):
        p = tmp_path / "hw.toml"
        p.write_text(DEFAULT_PROFILE.to_toml())
        back = HwProfile.from_toml(p)
        assert back == DEFAULT_PROFILE

    def test_validation(self):
        with pytest.raises(ValueError):
            HwProfile(pp=0)
        with pytest.raises(ValueError):
            HwProfile(t_bc=-1)
        with pytest.raises(ValueError):
            OpGeometry(fi=0, ic=1)
