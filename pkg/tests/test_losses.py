import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from physop import losses as L
from physop.ad import Tape, Tensor, grad, ops
from physop.ad.ops import value_of
from physop.datagen import X_GRID, sample_ic
from physop.errors import ConfigError
from physop.losses import (
    AnalyticModel,
    Batch,
    CollocationSet,
    DiffBackendConfig,
    LossWeights,
    NonFiniteDerivative,
    StepUnderflow,
    compute_data_loss,
    compute_ic_loss,
    compute_ic_prime_loss,
    compute_pde_loss,
    derivatives,
    fdm_derivatives,
    fdm_error_curve,
    optimal_step_size,
    predicted_min_rel_error,
    sample_collocation,
    total_loss,
)
from physop.model import Bound, ModelConfig, OperatorNet
from physop.symbolic import build_residual

FWD = DiffBackendConfig("forward_ad")
REV = DiffBackendConfig("reverse_ad")
FDM = DiffBackendConfig("fdm", step=1e-4)


def batch_of(family, params, n=2, labels=None, lt=None, lx=None):
    u0 = np.stack([sample_ic(i)[1] for i in range(n)])
    exprs = [build_residual(family, params)] * n
    kw = {}
    if labels is not None:
        kw = dict(labels=labels, label_t=np.asarray(lt), label_x=np.asarray(lx))
    return Batch(u0, exprs, **kw)


def tiny_model(seed=0):
    cfg = ModelConfig(embed_dim=8, heads=2, patch=32, data_layers=1, symbol_layers=1,
                      fusion_layers=1, decoder_layers=1, k_per=2, init_std=0.3, seed=seed)
    net = OperatorNet(cfg)
    return net, net.init_params()


def TX(M=16, seed=0):
    return sample_collocation("resample", M, 0, seed)


class TestConfig:
    def test_negative_weight(self):
        with pytest.raises(ConfigError):
            LossWeights(pde=-1.0)

    def test_unknown_backend(self):
        with pytest.raises(ConfigError):
            DiffBackendConfig("symbolic")

    def test_zero_fdm_step(self):
        with pytest.raises(ConfigError):
            DiffBackendConfig("fdm", step=0.0)

    def test_precision_alias(self):
        assert DiffBackendConfig("fdm", precision="bf16_emulated").dtype == "bf16"


class TestCollocation:
    def test_fixed_is_constant(self):
        a = sample_collocation("fixed", 50, 0, 3)
        b = sample_collocation("fixed", 50, 1000, 3)
        np.testing.assert_array_equal(a.points, b.points)

    def test_resample_changes(self):
        a = sample_collocation("resample", 50, 0, 3)
        b = sample_collocation("resample", 50, 1, 3)
        assert not np.array_equal(a.points, b.points)
        np.testing.assert_array_equal(a.points, sample_collocation("resample", 50, 0, 3).points)

    @settings(max_examples=30, deadline=None)
    @given(st.integers(1, 300), st.integers(0, 10**6))
    def test_in_unit_square(self, M, it):
        c = sample_collocation("resample", M, it, 0)
        assert c.M == M
        assert np.all((c.points >= 0) & (c.points < 1))

    def test_bad_inputs(self):
        with pytest.raises(ConfigError):
            sample_collocation("resample", 0, 0, 0)
        with pytest.raises(ConfigError):
            sample_collocation("adaptive", 5, 0, 0)


class TestPdeLoss:
    def test_zero_model_advection(self):
        model = AnalyticModel(lambda t, x: ops.mul(t, 0.0))
        loss, R = compute_pde_loss(model, batch_of("Adv", (0.5,)), TX(), FWD)
        assert float(value_of(loss)) == 0.0
        assert R.shape == (2, 16)

    @pytest.mark.parametrize("backend", [FWD, REV])
    def test_decaying_sine_diffusion(self, backend):
        q = 0.003
        f = lambda t, x: ops.mul(ops.exp(ops.neg(t)), ops.sin(ops.mul(x, 2 * np.pi)))  # noqa: E731
        tx = TX(32, seed=4)
        loss, R = compute_pde_loss(AnalyticModel(f), batch_of("Diff", (q,)), tx, backend)
        r = np.exp(-tx.t) * np.sin(2 * np.pi * tx.x) * (-1 + q * 4 * np.pi**2)
        np.testing.assert_allclose(np.asarray(value_of(R))[0], r, atol=1e-12)
        assert abs(float(value_of(loss)) - np.mean(r**2)) <= 1e-10

    def test_backends_agree_on_network(self):
        net, params = tiny_model()
        model = Bound(net, params)
        b = Batch(np.stack([sample_ic(i)[1] for i in range(3)]),
                  [build_residual("Burgers", (1.0, 0.01)), build_residual("KG", (1.0, 0.1)),
                   build_residual("Cons-Sin", (1.0, 0.01))])
        tx = TX(24, seed=2)
        fwd = float(value_of(compute_pde_loss(model, b, tx, FWD)[0]))
        fdm = float(value_of(compute_pde_loss(model, b, tx, FDM)[0]))
        with Tape():
            rev = float(value_of(compute_pde_loss(model, b, tx, REV)[0]))
        assert abs(fwd - fdm) <= 1e-4 * fwd
        assert abs(fwd - rev) <= 1e-12 * fwd

    def test_non_finite_derivative(self):
        f = lambda t, x: ops.div(1.0, ops.sub(x, 0.5))  # noqa: E731
        tx = CollocationSet(np.array([0.1, 0.2]), np.array([0.3, 0.5]))
        with pytest.raises(NonFiniteDerivative) as exc:
            with np.errstate(all="ignore"):
                compute_pde_loss(AnalyticModel(f), batch_of("Adv", (0.5,), n=1), tx, FWD)
        assert exc.value.index == (0, 1)

    def test_zero_residual_zero_gradient(self):
        # Adv with the exact travelling wave: residual vanishes for any amplitude
        q = build_residual("Adv", (0.5,)).params[0]
        tx = TX(20)
        with Tape():
            a = Tensor(1.3, requires_grad=True)
            f = lambda t, x: ops.mul(a, ops.sin(ops.mul(ops.sub(x, ops.mul(t, q)), 2 * np.pi)))  # noqa: E731
            loss, _ = compute_pde_loss(AnalyticModel(f), batch_of("Adv", (0.5,)), tx, FWD)
            g = grad(loss, a)
        assert abs(float(value_of(loss))) < 1e-25
        assert abs(float(value_of(g))) < 1e-12


class TestOtherLosses:
    def test_ic_exact(self):
        spec, u0 = sample_ic(0)
        model = AnalyticModel(lambda t, x: ops.add(ops.mul(t, 0.0), spec(X_GRID)))
        b = Batch(u0[None], [build_residual("Adv", (0.5,))])
        assert float(value_of(compute_ic_loss(model, b))) == pytest.approx(0.0, abs=1e-28)

    def test_ic_zero_model_unit_ic(self):
        model = AnalyticModel(lambda t, x: ops.mul(x, 0.0))
        b = Batch(np.ones((2, 128)), [build_residual("Adv", (0.5,))] * 2)
        assert float(value_of(compute_ic_loss(model, b))) == 1.0

    def test_ic_zero_model_sine(self):
        u0 = (np.sin(2 * np.pi * X_GRID) + 1) / 2
        model = AnalyticModel(lambda t, x: ops.mul(x, 0.0))
        b = Batch(u0[None], [build_residual("Adv", (0.5,))])
        ref = sum(v * v for v in u0) / 128
        assert float(value_of(compute_ic_loss(model, b))) == pytest.approx(ref, rel=1e-14)

    @pytest.mark.parametrize(
        "fn, ref",
        [
            (lambda t, x: ops.add(x, ops.mul(t, 0.0)), 0.0),
            (lambda t, x: ops.add(t, ops.mul(x, 0.0)), 1.0),
            (lambda t, x: ops.mul(ops.sin(t), ops.cos(ops.mul(x, 2 * np.pi))), 0.5),
        ],
    )
    @pytest.mark.parametrize("backend", [FWD, FDM])
    def test_ic_prime(self, fn, ref, backend):
        b = batch_of("Wave", (0.5,))
        got = float(value_of(compute_ic_prime_loss(AnalyticModel(fn), b, backend)))
        assert got == pytest.approx(ref, abs=1e-8)

    def test_ic_prime_first_order_batch(self):
        model = AnalyticModel(lambda t, x: t)
        assert float(value_of(compute_ic_prime_loss(model, batch_of("Adv", (0.5,)), FWD))) == 0.0

    def test_data_loss(self):
        model = AnalyticModel(lambda t, x: ops.mul(t, 0.0))
        labels = np.full((2, 2, 3), 2.0)
        b = batch_of("Adv", (0.5,), labels=labels, lt=[0, 2], lx=[0, 4, 8])
        assert float(value_of(compute_data_loss(model, b))) == 4.0
        assert float(value_of(compute_data_loss(model, batch_of("Adv", (0.5,))))) == 0.0


class TestTotal:
    def _parts(self, w):
        f = lambda t, x: ops.add(ops.sin(ops.mul(x, 2 * np.pi)), t)  # noqa: E731
        b = batch_of("Wave", (0.5,), labels=np.ones((2, 1, 2)), lt=[2], lx=[0, 64])
        return total_loss(AnalyticModel(f), b, w, TX(), FWD)

    def test_total_is_weighted_sum(self):
        w = LossWeights(0.5, 2.0, 3.0, 0.25)
        r = self._parts(w)
        assert r.total == pytest.approx(0.5 * r.pde + 2 * r.ic + 3 * r.ic_prime + 0.25 * r.data, rel=1e-15)

    @settings(max_examples=20, deadline=None)
    @given(st.sampled_from(["pde", "ic", "ic_prime", "data"]), st.floats(0.1, 10))
    def test_linearity(self, term, scale):
        base = self._parts(LossWeights())
        scaled = self._parts(LossWeights(**dict(LossWeights().as_dict(), **{term: scale})))
        delta = scaled.total - base.total
        # the subtraction of two totals carries rounding on the scale of the totals
        floor = 1e-14 * max(abs(base.total), abs(scaled.total))
        assert delta == pytest.approx((scale - 1) * getattr(base, term), rel=1e-12, abs=floor)

    def test_zero_weights_skip_backend(self, monkeypatch):
        def boom(*a, **k):
            raise AssertionError("backend called")

        monkeypatch.setattr(L, "derivatives", boom)
        r = self._parts(LossWeights(pde=0.0, ic=1.0, ic_prime=0.0, data=1.0))
        assert r.pde == 0.0 and r.ic_prime == 0.0 and r.ic > 0

    def test_gradient_matches_fd(self):
        net, params = tiny_model(seed=3)
        b = batch_of("Burgers", (1.0, 0.01), labels=np.random.default_rng(0).uniform(size=(2, 2, 4)),
                     lt=[0, 4], lx=[0, 32, 64, 96])
        tx = TX(12)
        w = LossWeights()
        report, g = L.loss_and_grad(net, params, b, w, tx, FWD)
        rng = np.random.default_rng(1)
        for i in rng.choice(params.size, 10, replace=False):
            def f(v, i=i):
                p = params.copy()
                p.flat[i] = v
                return total_loss(Bound(net, p), b, w, tx, FWD).total

            h = 1e-5
            x0 = params.flat[i]
            ref = (-f(x0 + 2 * h) + 8 * f(x0 + h) - 8 * f(x0 - h) + f(x0 - 2 * h)) / (12 * h)
            assert abs(g[i] - ref) <= 1e-4 * abs(ref) + 1e-9


class TestFdm:
    def test_affine_first_derivative_exact(self):
        model = AnalyticModel(lambda t, x: ops.add(ops.mul(x, 3.0), ops.mul(t, -2.0)))
        tx = TX(8)
        d = fdm_derivatives(model, L._Rows(1), tx.t, tx.x, 1e-3, "f64", {"u_t", "u_x"})
        np.testing.assert_allclose(value_of(d["u_x"]), 3.0, rtol=1e-12)
        np.testing.assert_allclose(value_of(d["u_t"]), -2.0, rtol=1e-12)

    def test_sine_second_derivative(self):
        model = AnalyticModel(lambda t, x: ops.sin(ops.mul(x, 2 * np.pi)))
        d = fdm_derivatives(model, L._Rows(1), np.zeros(1), np.array([0.25]), 1e-3, "f64", {"u_xx"})
        ref = -4 * np.pi**2
        assert abs(float(value_of(d["u_xx"])[0, 0]) - ref) <= 1e-4 * abs(ref)

    def test_bf16_round_off_dominates(self):
        e64, e_bf = fdm_error_curve([2**-8], "f64")[0], fdm_error_curve([2**-8], "bf16")[0]
        assert e_bf > 100 * e64

    def test_step_underflow(self):
        model = AnalyticModel(lambda t, x: x)
        with pytest.raises(StepUnderflow):
            fdm_derivatives(model, L._Rows(1), np.zeros(1), np.array([0.5]), 1e-4, "bf16", {"u_x"})
        with pytest.raises(StepUnderflow):
            fdm_derivatives(model, L._Rows(1), np.zeros(1), np.array([0.5]), 1e-17, "f64", {"u_x"})

    def test_random_network_channels(self):
        net, params = tiny_model(seed=7)
        model = Bound(net, params)
        b = batch_of("KG", (1.0, 0.1))
        ctx = model.encode(b.u0, b.exprs)
        tx = TX(64, seed=9)
        need = {"u_t", "u_tt", "u_x", "u_xx"}
        a = derivatives(model, ctx, tx.t, tx.x, need, FWD)
        f = derivatives(model, ctx, tx.t, tx.x, need, FDM)
        for ch in need:
            va, vf = np.asarray(value_of(a[ch])), np.asarray(value_of(f[ch]))
            ok = np.abs(va - vf) <= 1e-4 * np.abs(va)
            assert ok.mean() >= 0.99, ch


class TestStepLaw:
    def test_f32_optimum(self):
        R = (2 * np.pi) ** 4
        assert optimal_step_size(2.0**-23, 2, R) == pytest.approx(0.0030, abs=5e-5)

    def test_f64_optimum(self):
        d = optimal_step_size(2.0**-52, 2, (2 * np.pi) ** 4)
        assert 1e-7 <= d <= 0.01
        assert d == pytest.approx(1.94e-5, rel=1e-2)

    @settings(max_examples=30)
    @given(st.floats(1.0, 1e6), st.floats(1.0, 1e6))
    def test_monotone_in_R(self, r1, r2):
        lo, hi = sorted((r1, r2))
        assert optimal_step_size(1e-7, 2, hi) <= optimal_step_size(1e-7, 2, lo)

    def test_floor_ratio_f16_f64(self):
        R = (2 * np.pi) ** 4
        ratio = predicted_min_rel_error(2.0**-10, 2, R) / predicted_min_rel_error(2.0**-52, 2, R)
        assert ratio == pytest.approx(2.0**21, rel=1e-12)

    def test_floor_n2_formula(self):
        assert predicted_min_rel_error(1e-8, 2, 100.0) == pytest.approx(np.sqrt(1e-8 * 100), rel=1e-14)
        assert predicted_min_rel_error(0.0, 2, 100.0) == 0.0

    def test_invalid(self):
        with pytest.raises(ValueError):
            optimal_step_size(0.0, 2, 1.0)
        with pytest.raises(ValueError):
            optimal_step_size(1e-8, 3, 1.0)


class TestChunkedSweep:
    @staticmethod
    def mixed():
        rng = np.random.default_rng(2)
        u0 = np.stack([sample_ic(i)[1] for i in range(5)])
        exprs = [build_residual("Wave", (0.5,)), build_residual("Diff", (0.01,)),
                 build_residual("Adv", (0.5,)), build_residual("Wave", (1.0,)),
                 build_residual("Burgers", (1.0, 0.01))]
        b = Batch(u0, exprs, rng.uniform(size=(5, 2, 3)), np.array([0, 8]), np.array([0, 32, 64]))
        d = Batch(u0[:3], exprs[:3], rng.uniform(size=(3, 2, 3)), np.array([4, 8]), np.array([1, 2, 3]))
        return b, d

    @settings(max_examples=8, deadline=None)
    @given(st.integers(1, 6), st.booleans())
    def test_matches_full_batch(self, chunks, separate):
        net, params = tiny_model(seed=5)
        b, d = self.mixed()
        d = d if separate else None
        w = LossWeights(0.7, 1.3, 2.0, 0.5)
        full, g = L.loss_and_grad(net, params, b, w, TX(10), FWD, d)
        part, gc = L.loss_and_grad(net, params, b, w, TX(10), FWD, d, chunks=chunks)
        for k in ("pde", "ic", "ic_prime", "data", "total"):
            assert getattr(part, k) == pytest.approx(getattr(full, k), rel=1e-12)
        np.testing.assert_allclose(part.residual, full.residual, rtol=1e-12, atol=1e-14)
        np.testing.assert_allclose(gc, g, rtol=1e-10, atol=1e-13)

    def test_take(self):
        b, _ = self.mixed()
        s = b.take([3, 0])
        assert s.exprs == [b.exprs[3], b.exprs[0]]
        np.testing.assert_array_equal(s.labels, b.labels[[3, 0]])
        np.testing.assert_array_equal(s.second_order, [True, True])
