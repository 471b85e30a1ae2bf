import math

import numpy as np
import pytest
from scipy import integrate

from svolterra import kernels as K
from svolterra.special import gamma_fn


def doubly_slice_sq_exact(alpha, beta, t, T):
    """Closed form (1-2a)^-1 (T-t)^(1-2a) t^(-2b) of the squared slice."""
    return (T - t) ** (1 - 2 * alpha) / ((1 - 2 * alpha) * t ** (2 * beta))


class TestSliceL2:
    def test_doubly_singular_closed_form(self):
        T = 1.0
        for alpha, beta in [(0.3, 0.2), (0.1, 0.0), (0.45, 0.4)]:
            k = K.make_doubly_singular(alpha, beta, horizon=T)
            for t in (0.2, 0.5, 0.9):
                expected = doubly_slice_sq_exact(alpha, beta, t, T)
                assert K.slice_l2(k, t, T) ** 2 == pytest.approx(expected,
                                                                 rel=1e-12)

    def test_constant_kernel_full_slice(self):
        k = K.make_constant(1.0, horizon=1.0, orientation=K.ANTICAUSAL)
        assert K.slice_l2(k, 0.0, 1.0) == pytest.approx(math.sqrt(1.0),
                                                        rel=1e-14)

    def test_counterexample_sup_slice_is_sqrt_two(self):
        k = K.make_counterexample_sup(1.0)
        for t in (0.0, 0.3, 0.99):
            assert K.slice_l2(k, t, 1.0) ** 2 == pytest.approx(2.0, rel=1e-13)

    def test_invalid_interval(self):
        k = K.make_constant(1.0)
        with pytest.raises(ValueError):
            K.slice_l2(k, 0.5, 0.5)

    def test_divergent_slice_flagged(self):
        # squared fractional exponent -1.2 is not integrable at the diagonal
        k = K.make_fractional(0.4, K.ANTICAUSAL)
        assert K.slice_l2(k, 0.2, 1.0) == math.inf


class TestTriangleNorm:
    def test_steep_fractional_diverges(self):
        # lag^-0.6 squared diverges at the diagonal
        k = K.make_fractional(0.4, K.CAUSAL)
        assert K.triangle_l2_norm(k) == math.inf

    def test_unit_kernel_triangle_area(self):
        k = K.make_constant(1.0, horizon=1.0, orientation=K.ANTICAUSAL)
        assert K.triangle_l2_norm(k) ** 2 == pytest.approx(0.5, rel=1e-10)

    def test_doubly_singular_against_nested_adaptive_oracle(self):
        alpha = beta = 0.3
        k = K.make_doubly_singular(alpha, beta, horizon=1.0)
        got = K.triangle_l2_norm(k) ** 2

        def inner(t):
            val, _ = integrate.quad(
                lambda s: (s - t) ** (-2 * alpha) * t ** (-2 * beta),
                t, 1.0, limit=400, epsabs=1e-13, epsrel=1e-12)
            return val

        oracle = []
        import warnings
        with warnings.catch_warnings():
            warnings.simplefilter("ignore", integrate.IntegrationWarning)
            for epsrel in (1e-8, 1e-10):
                val, _ = integrate.quad(inner, 0.0, 1.0, limit=400,
                                        epsrel=epsrel, epsabs=1e-13)
                oracle.append(val)
        assert oracle[0] == pytest.approx(oracle[1], abs=1e-6)
        assert got == pytest.approx(oracle[1], abs=1e-6)
        # Beta-function closed form agrees too
        from scipy.special import beta as beta_fn
        closed = beta_fn(1 - 2 * beta, 2 - 2 * alpha) / (1 - 2 * alpha)
        assert got == pytest.approx(closed, rel=1e-8)


class TestFindPartition:
    def test_square_integrable_convolution_always_feasible(self):
        h = lambda r: np.power(np.maximum(r, 1e-300), -0.1)
        h2 = lambda r: np.maximum(r, 0.0) ** 0.8 / 0.8
        k = K.make_convolution(h, 1.0, K.CAUSAL, h_sq_antiderivative=h2,
                               diag_exponent=0.1)
        for eps in (1.0, 0.5, 0.25, 0.125):
            part = K.find_partition(k, eps)
            assert isinstance(part, K.Partition)
            assert part.breakpoints[0] == 0.0
            assert part.breakpoints[-1] == 1.0
            assert K.reverify_partition(k, part, eps) is None

    def test_counterexample_infeasible_below_sqrt2(self):
        k = K.make_counterexample_sup(1.0)
        res = K.find_partition(k, 1.0)
        assert isinstance(res, K.PartitionInfeasible)
        assert res.reason == "mathematical"
        assert res.witness_t > 0.9
        assert res.measured_sup >= 1.0

    def test_counterexample_feasible_above_sqrt2(self):
        k = K.make_counterexample_sup(1.0)
        part = K.find_partition(k, 1.5)
        assert isinstance(part, K.Partition)
        assert len(part) == 1

    def test_zero_kernel_single_interval(self):
        k = K.make_constant(0.0, horizon=2.0, orientation=K.ANTICAUSAL)
        part = K.find_partition(k, 0.01)
        assert part.breakpoints == (0.0, 2.0)

    def test_eps_validation(self):
        with pytest.raises(ValueError):
            K.find_partition(K.make_constant(1.0), 0.0)

    def test_budget_infeasibility_distinct_from_mathematical(self):
        # lag^-0.25 slices need ~16k subintervals at eps = 0.125, far over
        # the cap, while terminal intervals do shrink below the bound
        h = lambda r: np.power(np.maximum(r, 1e-300), -0.25)
        h2 = lambda r: np.maximum(r, 0.0) ** 0.5 / 0.5
        k = K.make_convolution(h, 1.0, K.CAUSAL, h_sq_antiderivative=h2,
                               diag_exponent=0.25)
        res = K.find_partition(k, 0.125, cap=512)
        assert isinstance(res, K.PartitionInfeasible)
        assert res.reason == "budget"

    def test_left_edge_blowup_is_mathematical(self):
        res = K.find_partition(K.make_doubly_singular(0.2, 0.3), 1.0)
        assert isinstance(res, K.PartitionInfeasible)
        assert res.reason == "mathematical"
        assert res.witness_t < 0.05


class TestClassify:
    def test_doubly_singular_sample(self):
        # in the square-integrable class always, partitionable only at beta=0
        rep = K.classify(K.make_doubly_singular(0.3, 0.0),
                         eps_grid=(1.0, 0.5))
        assert rep.in_L2 and rep.in_scriptL2
        rep = K.classify(K.make_doubly_singular(0.3, 0.2),
                         eps_grid=(1.0, 0.5))
        assert rep.in_L2 and not rep.in_scriptL2
        assert rep.script_norm == math.inf

    def test_shifted_inverse_sqrt_counterexample(self):
        # partition condition passes, esssup condition fails
        k = K._shifted_inverse_sqrt(1.0)
        rep = K.classify(k, eps_grid=(1.0, 0.5, 0.25))
        assert rep.script_norm == math.inf
        assert all(isinstance(p, K.Partition)
                   for p in rep.partition_results.values())
        assert not rep.in_scriptL2

    def test_unit_kernel_everything(self):
        rep = K.classify(K.make_constant(1.0, orientation=K.ANTICAUSAL),
                         eps_grid=(1.0, 0.5))
        assert rep.in_L2 and rep.in_scriptL2 and rep.in_K0

    def test_square_integrable_convolution_in_script_class(self):
        h = lambda r: np.power(np.maximum(r, 1e-300), -0.1)
        h2 = lambda r: np.maximum(r, 0.0) ** 0.8 / 0.8
        k = K.make_convolution(h, 1.0, K.CAUSAL, h_sq_antiderivative=h2,
                               diag_exponent=0.1)
        rep = K.classify(k, eps_grid=(1.0, 0.5, 0.25))
        assert rep.in_scriptL2 and rep.in_L2

    def test_completely_monotone_representative_all_classes(self):
        k = K.make_exp_sum([0.8, 0.4], [3.0, 0.5], orientation=K.ANTICAUSAL)
        rep = K.classify(k, eps_grid=(1.0, 0.5, 0.25))
        assert rep.in_L2 and rep.in_scriptL2 and rep.in_K0

    def test_borderline_log_kernel_in_script_class(self):
        # h(r) = 1/(sqrt(r) |log r|) is square integrable near 0 but in no
        # better power class; its convolution kernel still passes both
        # slice conditions (closed antiderivative -1/log r)
        T = 0.5

        def h(r):
            r = np.maximum(np.asarray(r, dtype=float), 1e-300)
            return 1.0 / (np.sqrt(r) * np.abs(np.log(r)))

        def h2(r):
            r = np.asarray(r, dtype=float)
            with np.errstate(divide="ignore"):
                return np.where(r <= 0.0, 0.0, -1.0 / np.log(r))

        k = K.make_convolution(h, T, K.ANTICAUSAL,
                               h_sq_antiderivative=h2, diag_exponent=0.5)
        rep = K.classify(k, eps_grid=(1.0, 0.7))
        assert rep.in_L2 and rep.in_scriptL2

    def test_inclusion_invariant(self):
        for kern in [K.make_doubly_singular(0.2, 0.0),
                     K.make_doubly_singular(0.2, 0.3),
                     K.make_counterexample_sup(1.0),
                     K._shifted_inverse_sqrt(1.0)]:
            rep = K.classify(kern, eps_grid=(1.0,))
            if rep.in_scriptL2:
                assert rep.in_L2

    def test_report_json_roundtrip(self):
        import json
        rep = K.classify(K.make_constant(1.0, orientation=K.ANTICAUSAL),
                         eps_grid=(1.0,))
        data = json.loads(rep.to_json())
        assert data["in_scriptL2"] is True
        assert set(data) >= {"label", "l2_triangle_norm", "script_norm",
                             "partition_results", "in_L2", "in_scriptL2",
                             "in_K0", "diagnostics"}


class TestK0Membership:
    def test_fractional_member_with_closed_form_sliding(self):
        alpha = 0.3
        k = K.make_fractional(alpha, K.CAUSAL)
        member, diag = K.k0_membership(k)
        assert member
        # sliding slice has closed form eps^alpha / alpha
        for eps, val in zip(diag["sliding_eps"], diag["sliding_values"]):
            assert val == pytest.approx(eps ** alpha / alpha, rel=1e-10)

    def test_gripenberg_style_member(self):
        def ev(t, s):
            return np.full_like(np.asarray(s, dtype=float), 1.0 / t)

        k = K.Kernel("gripenberg", K.CAUSAL, 1.0, ev, (0.0, 0.0),
                     cell_fn=lambda t, a, b: (b - a) / t)
        member, diag = K.k0_membership(k)
        assert member
        assert diag["sup_l1_slice"] == pytest.approx(1.0, rel=1e-12)

    def test_zero_kernel_member(self):
        member, _ = K.k0_membership(K.make_constant(0.0))
        assert member

    def test_anticausal_rejected(self):
        with pytest.raises(ValueError):
            K.k0_membership(K.make_constant(1.0, orientation=K.ANTICAUSAL))


class TestFbmKernels:
    def test_half_hurst_reduces_to_unit_kernel(self):
        k = K.make_fbm_full(0.5)
        ss = np.array([0.1, 0.35, 0.7])
        assert np.allclose(k(0.9, ss), 1.0, atol=1e-12)
        assert K._fbm_F(2.0, 0.5) == 0.0
        assert K._fbm_c(0.5) == pytest.approx(1.0, rel=1e-14)

    def test_F_dual_quadrature_oracle(self):
        v1 = K._fbm_F(2.0, 0.3, method="product")
        v2 = K._fbm_F(2.0, 0.3, method="substitution")
        assert v1 == pytest.approx(v2, abs=1e-8)

    def test_rl_kernel_scaling(self):
        H = 0.7
        k = K.make_fbm_rl(H)
        lag = 0.3
        assert k(0.8, 0.5) == pytest.approx(
            lag ** (H - 0.5) / gamma_fn(H + 0.5), rel=1e-13)

    def test_full_kernel_positive_and_bounded_inside(self):
        for H in (0.3, 0.7):
            k = K.make_fbm_full(H)
            ts = np.linspace(0.15, 0.95, 7)
            for t in ts:
                vals = k(t, np.linspace(0.05, t - 0.05, 9))
                assert np.all(np.isfinite(vals))
                assert np.all(vals > 0)

    def test_full_kernel_against_lower_limit_integral_form(self):
        # for H > 1/2 the same kernel has the independent representation
        # c_H (H - 1/2) s^(1/2-H) int_s^t (u-s)^(H-3/2) u^(H-1/2) du: both
        # vanish at the diagonal and share the t-derivative, so agreement
        # validates the ratio-integral construction end to end
        import warnings
        from scipy import integrate

        H = 0.7
        k = K.make_fbm_full(H)
        cH = K._fbm_c(H)

        def reference(t, s):
            # weighted rule: weight (u-s)^(H-3/2), smooth factor u^(H-1/2)
            with warnings.catch_warnings():
                warnings.simplefilter("ignore",
                                      integrate.IntegrationWarning)
                val, _ = integrate.quad(lambda u: u ** (H - 0.5), s, t,
                                        weight="alg",
                                        wvar=(H - 1.5, 0.0), limit=200)
            return cH * (H - 0.5) * s ** (0.5 - H) * val

        for (t, s) in [(0.8, 0.2), (0.9, 0.5), (0.5, 0.45), (1.0, 0.1)]:
            ours = float(np.asarray(k(t, np.array(s))))
            assert ours == pytest.approx(reference(t, s), rel=1e-7)


class TestProductWeights:
    def test_fractional_weights_sum_exact(self):
        alpha = 0.6
        k = K.make_fractional(alpha, K.CAUSAL)
        t = 0.875
        grid = np.linspace(0.0, t, 17)
        w = K.product_weights(k, t, grid)
        assert w.sum() == pytest.approx(t ** alpha / alpha, rel=1e-12)

    def test_exp_sum_weights_sum_exact(self):
        k = K.make_exp_sum([1.0, 0.5], [2.0, 0.0])
        t = 0.75
        grid = np.linspace(0.0, t, 13)
        w = K.product_weights(k, t, grid)
        expected = (1.0 - math.exp(-2 * t)) / 2.0 + 0.5 * t
        assert w.sum() == pytest.approx(expected, rel=1e-12)

    def test_anticausal_orientation_guard(self):
        k = K.make_fractional(0.75, K.ANTICAUSAL)
        with pytest.raises(ValueError):
            K.product_weights(k, 0.5, np.linspace(0.0, 0.4, 5))
        w = K.product_weights(k, 0.5, np.linspace(0.5, 1.0, 6))
        assert w.sum() == pytest.approx(0.5 ** 0.75 / 0.75, rel=1e-12)


class TestConfigParsing:
    def test_known_names(self):
        k = K.kernel_from_config({"name": "fractional", "alpha": 0.75})
        assert k.meta["alpha"] == 0.75
        k = K.kernel_from_config({"name": "doubly_singular", "alpha": 0.2,
                                  "beta": 0.1, "T": 2.0})
        assert k.horizon == 2.0

    def test_unknown_name(self):
        with pytest.raises(ValueError):
            K.kernel_from_config({"name": "nope"})
        with pytest.raises(ValueError):
            K.kernel_from_config({})


class TestKernelInvariants:
    def test_negative_kernel_rejected(self):
        def ev(t, s):
            return np.asarray(s) - t - 10.0

        with pytest.raises(ValueError):
            K.Kernel("bad", K.ANTICAUSAL, 1.0, ev)

    def test_mirror_preserves_values(self):
        k = K.make_doubly_singular(0.3, 0.2)
        mk = K.mirror_kernel(k)
        assert mk.orientation == K.CAUSAL
        assert mk(0.7, 0.2) == pytest.approx(float(k(0.2, np.array(0.7))),
                                             rel=1e-13)
