import numpy as np
import pytest

from pi2pc.latency import DEFAULT_PROFILE, LatencyTable, build_latency_table
from pi2pc.nas.autodiff import Tensor, param, softmax, stack_weighted
from pi2pc.nas.data import blobs, load_images8, save_images8, spiral, split
from pi2pc.nas.optim import SGD, Adam
from pi2pc.nas.posttrain import ReplacementSchedule, finetune_replacement, forward_blend
from pi2pc.nas.search import (
    PassCounter,
    SearchConfig,
    SupernetProblem,
    darts_step,
    run_search,
    theta_entropy,
    train_fixed,
)
from pi2pc.nas.supernet import make_backbone, select_candidates, straight_through_init


class TestGatedForward:
    def test_uniform_alpha_gives_mean(self):
        th = softmax(param(np.zeros(2)))
        assert np.allclose(th.data, [0.5, 0.5])
        a = Tensor(np.full((2, 2), 4.0))
        b = Tensor(np.zeros((2, 2)))
        out = stack_weighted([a, b], th)
        assert np.allclose(out.data, 2.0)

    def test_log3_alpha(self):
        th = softmax(param(np.array([np.log(3.0), 0.0])))
        assert np.allclose(th.data, [0.75, 0.25], atol=1e-12)

    def test_saturated_alpha(self):
        sn = make_backbone("toy", seed=0)
        x = np.random.default_rng(1).normal(0, 1, (2, 1, 8, 8))
        th_sat = [softmax(param(np.array([20.0, 0, 0, 0]))), softmax(param(np.array([20.0, 0])))]
        mixed = sn.forward(x, th_sat)
        fixed = sn.forward_fixed(x, [0, 0])
        assert np.abs(mixed.data - fixed.data).max() < 1e-6

    def test_theta_rows_sum_to_one(self):
        rng = np.random.default_rng(2)
        for _ in range(100):
            th = softmax(param(rng.normal(0, 5, rng.integers(2, 8))))
            assert abs(th.data.sum() - 1.0) < 1e-9


class TestLoss:
    def _problem(self, lam):
        sn = make_backbone("toy", seed=3)
        alphas = sn.new_arch_params()
        table = build_latency_table(sn.candidate_chains(), DEFAULT_PROFILE)
        return SupernetProblem(sn, alphas, lam, table), table

    def test_lambda_zero_is_pure_ce(self):
        x, y = blobs(16, seed=4)
        p0, table0 = self._problem(0.0)
        p1, _ = self._problem(1.0)
        l0 = p0.loss("trn", (x, y))
        l1 = p1.loss("trn", (x, y))
        assert l1.data - l0.data > 0  # same seeds: CE identical, gap = latency term
        assert table0.reads == 0  # lambda = 0 never consults the table

    def test_lambda_doubles_latency_term(self):
        x, y = blobs(16, seed=5)
        pa, _ = self._problem(1000.0)
        pb, _ = self._problem(2000.0)
        pc, _ = self._problem(0.0)
        ce = float(pc.loss("trn", (x, y)).data)
        ta = float(pa.loss("trn", (x, y)).data) - ce
        tb = float(pb.loss("trn", (x, y)).data) - ce
        assert tb == pytest.approx(2 * ta, rel=1e-9)

    def test_latency_gradient_matches_analytic(self):
        p, table = self._problem(1.0)
        alpha = p.arch[0]
        alpha.data[:] = np.array([0.5, -0.3, 0.2, 0.0])
        thetas = p.thetas()
        lat = p.latency_term(thetas)
        lat.backward()
        z = np.exp(alpha.data - alpha.data.max())
        th = z / z.sum()
        costs = table.layer_costs(0)
        want = th * (costs - float(th @ costs))
        assert np.allclose(alpha.grad, want, rtol=1e-9, atol=1e-18)


class QuadraticProblem:
    """zeta(omega, alpha) = 0.5 (omega - alpha)^2 on both splits."""

    def __init__(self, w0=1.7, a0=0.4):
        self.weights = [param(w0)]
        self.arch = [param(a0)]
        self.counter = PassCounter()

    def loss(self, split, batch):
        self.counter.forwards += 1
        d = self.weights[0] - self.arch[0]
        return d.square() * 0.5

    def backward(self, loss):
        self.counter.backwards += 1
        loss.backward()


class ToyProblem:
    """Distinct train/val objectives on scalar omega, alpha."""

    def __init__(self, w0=0.9, a0=0.3):
        self.weights = [param(w0)]
        self.arch = [param(a0)]
        self.counter = PassCounter()

    def loss(self, split, batch):
        self.counter.forwards += 1
        w, a = self.weights[0], self.arch[0]
        if split == "trn":
            return (w - a * 0.7).square() * 0.5
        return (w * a - 1.0).square() * 0.5

    def backward(self, loss):
        self.counter.backwards += 1
        loss.backward()


def _null_opts(problem):
    return SGD(problem.weights, lr=0.0, momentum=0.0), Adam(problem.arch, lr=0.0)


class TestDartsStep:
    def test_xi_zero_reduces_to_first_order(self):
        p = ToyProblem()
        w0, a0 = float(p.weights[0].data), float(p.arch[0].data)
        diag = darts_step(p, *_null_opts(p), None, None, xi=0.0)
        # omega' = omega, so d_alpha' is the plain validation gradient
        want = (w0 * a0 - 1.0) * w0
        assert float(diag["da_prime"][0]) == pytest.approx(want, rel=1e-12)
        assert float(diag["da"][0]) == pytest.approx(want, rel=1e-12)

    def test_quadratic_hessian_is_exact(self):
        p = QuadraticProblem()
        diag = darts_step(p, *_null_opts(p), None, None, xi=0.1)
        # d2 zeta / domega dalpha = -1, so the hessian-vector term is -dw_prime
        v = float(diag["dw_prime"][0])
        assert float(diag["da_hess"][0]) == pytest.approx(-v, rel=1e-9)

    def test_composed_map_finite_difference(self):
        xi = 0.05
        p = ToyProblem()
        w0, a0 = float(p.weights[0].data), float(p.arch[0].data)
        diag = darts_step(p, *_null_opts(p), None, None, xi=xi)

        def composed(alpha):
            grad_trn = w0 - 0.7 * alpha  # d zeta_trn / d omega
            w_virtual = w0 - xi * grad_trn
            return 0.5 * (w_virtual * alpha - 1.0) ** 2

        h = 1e-6
        want = (composed(a0 + h) - composed(a0 - h)) / (2 * h)
        got = float(diag["da"][0])
        assert abs(got - want) / max(abs(want), 1e-12) < 1e-3

    def test_pass_counts(self):
        p = QuadraticProblem()
        darts_step(p, *_null_opts(p), None, None, xi=0.1)
        assert p.counter.forwards == 5
        assert p.counter.backwards == 6

    def test_zero_table_reads_at_lambda_zero(self):
        sn = make_backbone("toy", seed=6)
        alphas = sn.new_arch_params()
        table = build_latency_table(sn.candidate_chains(), DEFAULT_PROFILE)
        problem = SupernetProblem(sn, alphas, 0.0, table)
        x, y = blobs(64, seed=7)
        w_opt = SGD(problem.weights, lr=0.05)
        a_opt = Adam(alphas, lr=3e-4)
        for _ in range(3):
            darts_step(problem, w_opt, a_opt, (x[:32], y[:32]), (x[32:], y[32:]), xi=0.05)
        assert table.reads == 0

    @pytest.mark.filterwarnings("ignore::RuntimeWarning")
    def test_nan_aborts_with_diagnostics(self):
        p = QuadraticProblem(w0=1e300, a0=-1e300)  # overflow -> NaN in the graph
        with pytest.raises(FloatingPointError):
            darts_step(p, *_null_opts(p), None, None, xi=0.1)


class TestStpai:
    def test_near_identity_at_init(self):
        rng = np.random.default_rng(8)
        x2 = straight_through_init(rng, c=1.0, n_x=9)
        x = Tensor(np.array([-1.0, 2.0]))
        out = x2.apply(x)
        assert np.abs(out.data - np.array([-1.0, 2.0])).max() < 1e-3

    def test_w2_is_one_and_others_small(self):
        rng = np.random.default_rng(9)
        x2 = straight_through_init(rng)
        assert float(x2.w2.data) == 1.0
        assert abs(float(x2.w1.data)) < 1e-3
        assert abs(float(x2.b.data)) < 1e-3

    def test_w1_gradient_nonzero(self):
        rng = np.random.default_rng(10)
        x2 = straight_through_init(rng, c=1.0, n_x=4)
        x = Tensor(np.array([2.0]))
        out = x2.apply(x)
        out.sum().backward()
        # d delta / d w1 = (c / sqrt(n_x)) x^2 = 0.5 * 4 = 2
        assert float(x2.w1.grad) == pytest.approx(2.0, rel=1e-12)

    def test_ten_inits_stay_close_to_identity(self):
        xs = np.linspace(-10, 10, 401)
        worst = 0.0
        for seed in range(10):
            x2 = straight_through_init(np.random.default_rng(100 + seed), c=1.0, n_x=9)
            out = x2.apply(Tensor(xs))
            worst = max(worst, float(np.abs(out.data - xs).max()))
        assert worst < 1e-2


class TestDeriveArch:
    def test_argmax(self):
        alphas = [param(np.array([2.0, -1.0]))]
        assert select_candidates(alphas) == [0]

    def test_shift_invariance(self):
        a = np.array([0.3, -0.8, 1.2, 0.0])
        assert select_candidates([param(a)]) == select_candidates([param(a + 5.0)])

    def test_tie_breaks_to_lower_latency(self):
        table = LatencyTable()
        table.put(0, 0, 5.0)
        table.put(0, 1, 2.0)
        alphas = [param(np.array([1.0, 1.0]))]  # exact tie
        assert select_candidates(alphas, table) == [1]

    def test_derived_model_runs_in_plain_engine(self):
        from pi2pc.model import run_plain
        from pi2pc.nas.supernet import derive_arch
        from pi2pc.ring import FixedTensor

        sn = make_backbone("toy", seed=11)
        alphas = sn.new_arch_params()
        model = derive_arch(sn, alphas)
        x = FixedTensor.from_real(np.random.default_rng(12).normal(0, 1, (1, 8, 8)), model.config)
        logits = run_plain(model, x)
        assert logits.shape == (3,)

    def test_derived_matches_float_forward(self):
        # quantized secure-model forward tracks the float supernet forward
        from pi2pc.model import run_plain
        from pi2pc.nas.supernet import export_fixed
        from pi2pc.ring import FixedTensor

        sn = make_backbone("toy", seed=13)
        choices = [3, 1]
        model = export_fixed(sn, choices)
        x = np.random.default_rng(14).normal(0, 1, (1, 1, 8, 8))
        want = sn.forward_fixed(x, choices).data[0]
        got = run_plain(model, FixedTensor.from_real(x[0], model.config)).to_real()
        assert np.abs(got - want).max() < 1e-2


class TestReplacement:
    def test_linear_schedule(self):
        sched = ReplacementSchedule(ramp_epochs=10)
        assert sched.s(0) == 0.0
        assert sched.s(5) == 0.5
        assert sched.s(10) == 1.0
        assert sched.s(15) == 1.0
        ss = [sched.s(e) for e in range(16)]
        assert all(b >= a for a, b in zip(ss, ss[1:]))

    def test_blend_endpoints(self):
        sn = make_backbone("toy", seed=15)
        x = np.random.default_rng(16).normal(0, 1, (2, 1, 8, 8))
        base, targ = [0, 0], [3, 1]
        at0 = forward_blend(sn, x, base, targ, 0.0)
        assert np.array_equal(at0.data, sn.forward_fixed(x, base).data)
        at1 = forward_blend(sn, x, base, targ, 1.0)
        assert np.array_equal(at1.data, sn.forward_fixed(x, targ).data)

    def test_finetune_reaches_full_replacement(self):
        sn = make_backbone("toy", seed=17)
        x, y = blobs(120, seed=18)
        d = split(x, y, 0.5, seed=18)
        hist = finetune_replacement(
            sn, [0, 0], [3, 1], d[0], d[1], ReplacementSchedule(ramp_epochs=4), epochs=5, batch=30
        )
        assert hist[-1]["s"] == 1.0
        assert hist[-1]["val_acc"] > 0.5  # does not collapse


class TestSearchDriver:
    def test_smoke_and_log(self):
        cfg = SearchConfig(epochs=2, data_n=120, seed=19, batch=30)
        res = run_search(cfg)
        assert len(res.choices) == 2
        assert res.counter.forwards == 5 * len(res.log_rows)
        assert res.counter.backwards == 6 * len(res.log_rows)
        csv = res.log_csv()
        header = csv.splitlines()[0]
        assert header == "iter,zeta_trn,zeta_val,lat_alpha,theta"
        assert len(csv.splitlines()) == len(res.log_rows) + 1

    def test_entropy(self):
        assert theta_entropy([param(np.zeros(4))]) == pytest.approx(1.0)
        assert theta_entropy([param(np.array([50.0, 0.0]))]) < 0.01

    def test_train_fixed_learns(self):
        x, y = blobs(240, seed=20)
        d = split(x, y, 0.5, seed=20)
        sn = make_backbone("toy", seed=21)
        acc = train_fixed(sn, [1, 1], d[0], d[1], epochs=6, batch=30, seed=22)
        assert acc > 0.8


class TestData:
    def test_blobs_shapes(self):
        x, y = blobs(50, seed=23)
        assert x.shape == (50, 1, 8, 8)
        assert set(np.unique(y)).issubset({0, 1, 2})

    def test_spiral_shapes(self):
        x, y = spiral(90, seed=24)
        assert x.shape == (90, 2)
        assert len(np.unique(y)) == 3

    def test_images8_round_trip(self, tmp_path):
        x, y = blobs(10, seed=25)
        p = tmp_path / "batch.npz"
        save_images8(p, x, y)
        xb, yb = load_images8(p)
        assert np.array_equal(xb, x) and np.array_equal(yb, y)

    def test_images8_validates(self, tmp_path):
        with pytest.raises(ValueError):
            save_images8(tmp_path / "bad.npz", np.zeros((2, 1, 4, 4)), np.zeros(2))


class TestSeparateConvMode:
    def test_per_candidate_weights(self):
        shared = make_backbone("toy", seed=26, shared=True)
        sep = make_backbone("toy", seed=26, shared=False)
        assert len(shared.blocks[0].conv_w) == 1
        assert len(sep.blocks[0].conv_w) == 4
        assert len(sep.blocks[1].conv_w) == 2
        # candidates really use distinct parameters
        x = np.random.default_rng(27).normal(0, 1, (2, 1, 8, 8))
        a = sep.forward_fixed(x, [0, 0]).data
        sep.blocks[0].conv_w[1].data += 10.0  # candidate 1's conv
        b = sep.forward_fixed(x, [0, 0]).data
        assert np.array_equal(a, b)  # candidate 0 untouched
        c = sep.forward_fixed(x, [1, 0]).data
        assert not np.allclose(b, c)

    def test_search_runs_in_separate_mode(self):
        cfg = SearchConfig(epochs=1, data_n=60, seed=28, batch=30, shared_conv=False)
        res = run_search(cfg)
        assert len(res.choices) == 2

    def test_export_uses_selected_candidate_weights(self):
        from pi2pc.nas.supernet import export_fixed

        sep = make_backbone("toy", seed=29, shared=False)
        m0 = export_fixed(sep, [0, 0])
        m1 = export_fixed(sep, [1, 0])
        assert not np.array_equal(m0.layers[0].weights, m1.layers[0].weights)
