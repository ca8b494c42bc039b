"""Regime process: hazards, intensity matrices, samplers, and the generator."""
import numpy as np
import pytest
import scipy.stats as st
from hypothesis import given, settings
from hypothesis import strategies as hst

from smjd.errors import AgeBeyondSupport
from smjd.rng import stream
from smjd.semi_markov import (CustomHolding, ExponentialHolding, RegimeModel,
                              RegimeState, WeibullHolding, apply_generator_L,
                              hazard_rate, intensity_matrix,
                              sample_holding_time, simulate_ctmc,
                              simulate_regime_direct, simulate_regime_thinning)


# ---------------------------------------------------------------------------
# hazard_rate
# ---------------------------------------------------------------------------

class TestHazardRate:
    def test_exponential_hazard_is_constant(self, exp2_model):
        assert hazard_rate(exp2_model, 0, 0.7) == pytest.approx(2.0)
        assert hazard_rate(exp2_model, 0, 0.0) == pytest.approx(2.0)
        assert hazard_rate(exp2_model, 1, 1.3) == pytest.approx(3.0)

    def test_weibull_shape_one_is_exponential(self):
        model = RegimeModel(kernel=np.array([[0.0, 1.0], [1.0, 0.0]]),
                            holding=(WeibullHolding(1.0, 1.0),
                                     WeibullHolding(1.0, 1.0)))
        for y in (0.0, 0.3, 2.5):
            assert hazard_rate(model, 0, y) == pytest.approx(1.0)

    def test_weibull_hazard_against_scipy(self):
        model = RegimeModel(kernel=np.array([[0.0, 1.0], [1.0, 0.0]]),
                            holding=(WeibullHolding(2.0, 1.0),
                                     WeibullHolding(2.0, 1.0)))
        # analytic hazard (k/s)(y/s)^{k-1}
        assert hazard_rate(model, 0, 0.5) == pytest.approx(1.0)
        dist = st.weibull_min(2.0, scale=1.0)
        for y in (0.2, 0.5, 1.1):
            oracle = dist.pdf(y) / dist.sf(y)
            assert hazard_rate(model, 0, y) == pytest.approx(oracle, rel=1e-10)

    def test_age_beyond_support_raises(self):
        # holding time uniform on [0,1]: cdf hits 1 at y=1
        uni = CustomHolding(
            pdf=lambda y: np.where((np.asarray(y) >= 0) & (np.asarray(y) <= 1),
                                   1.0, 0.0),
            cdf=lambda y: np.clip(np.asarray(y, dtype=float), 0.0, 1.0),
            hazard_bound_value=1e6, window=0.999)
        model = RegimeModel(kernel=np.array([[0.0, 1.0], [1.0, 0.0]]),
                            holding=(uni, uni))
        assert hazard_rate(model, 0, 0.5) == pytest.approx(2.0)  # 1/(1-0.5)
        with pytest.raises(AgeBeyondSupport):
            hazard_rate(model, 0, 1.5)


# ---------------------------------------------------------------------------
# intensity_matrix
# ---------------------------------------------------------------------------

class TestIntensityMatrix:
    def test_two_state_exponential(self):
        model = RegimeModel(kernel=np.array([[0.0, 1.0], [1.0, 0.0]]),
                            holding=(ExponentialHolding(2.0),
                                     ExponentialHolding(2.0)))
        Q = intensity_matrix(model, 0.3)
        assert np.allclose(Q, [[-2.0, 2.0], [2.0, -2.0]], atol=1e-12)

    def test_three_state_uniform_kernel_unit_hazard(self):
        kernel = np.full((3, 3), 0.5)
        np.fill_diagonal(kernel, 0.0)
        model = RegimeModel(kernel=kernel,
                            holding=tuple(ExponentialHolding(1.0)
                                          for _ in range(3)))
        Q = intensity_matrix(model, 0.0)
        assert np.allclose(np.diag(Q), -1.0, atol=1e-12)
        off = Q[~np.eye(3, dtype=bool)]
        assert np.allclose(off, 0.5, atol=1e-12)

    @settings(max_examples=25, deadline=None)
    @given(y=hst.floats(min_value=0.0, max_value=3.0))
    def test_row_sums_vanish(self, y):
        kernel = np.array([[0.0, 0.25, 0.75],
                           [0.6, 0.0, 0.4],
                           [0.1, 0.9, 0.0]])
        model = RegimeModel(kernel=kernel,
                            holding=(WeibullHolding(1.5, 0.8),
                                     WeibullHolding(2.0, 1.0),
                                     ExponentialHolding(0.7)))
        Q = intensity_matrix(model, y)
        assert np.max(np.abs(Q.sum(axis=1))) < 1e-12
        assert np.all(Q[~np.eye(3, dtype=bool)] >= 0)


# ---------------------------------------------------------------------------
# model validation
# ---------------------------------------------------------------------------

class TestModelValidation:
    def test_rows_must_be_stochastic(self):
        with pytest.raises(ValueError):
            RegimeModel(kernel=np.array([[0.0, 0.5], [1.0, 0.0]]),
                        holding=(ExponentialHolding(1.0),
                                 ExponentialHolding(1.0)))

    def test_diagonal_must_be_zero(self):
        with pytest.raises(ValueError):
            RegimeModel(kernel=np.array([[0.5, 0.5], [1.0, 0.0]]),
                        holding=(ExponentialHolding(1.0),
                                 ExponentialHolding(1.0)))

    def test_kernel_must_be_irreducible(self):
        kernel = np.array([[0.0, 1.0, 0.0],
                           [1.0, 0.0, 0.0],
                           [0.5, 0.5, 0.0]])  # state 2 unreachable
        with pytest.raises(ValueError):
            RegimeModel(kernel=kernel,
                        holding=tuple(ExponentialHolding(1.0)
                                      for _ in range(3)))

    def test_single_state_degenerate_model_allowed(self, single_regime):
        path = simulate_regime_direct(single_regime, RegimeState(0, 0.0), 5.0,
                                      stream(0, "t"))
        assert path.events == []


# ---------------------------------------------------------------------------
# sample_holding_time
# ---------------------------------------------------------------------------

class _FixedUniform:
    """Duck-typed generator returning a fixed uniform draw."""

    def __init__(self, u):
        self.u = u

    def random(self):
        return self.u


class TestSampleHoldingTime:
    def test_exponential_inverse_cdf(self, exp2_model):
        tau = sample_holding_time(exp2_model, 0, _FixedUniform(0.5))
        assert tau == pytest.approx(np.log(2.0) / 2.0, rel=1e-12)

    def test_small_draw_gives_small_holding(self, exp2_model):
        tau = sample_holding_time(exp2_model, 0, _FixedUniform(1e-12))
        assert 0.0 <= tau < 1e-11

    def test_weibull_inverse_cdf(self):
        model = RegimeModel(kernel=np.array([[0.0, 1.0], [1.0, 0.0]]),
                            holding=(WeibullHolding(2.0, 1.0),
                                     WeibullHolding(2.0, 1.0)))
        tau = sample_holding_time(model, 0, _FixedUniform(1.0 - np.exp(-1.0)))
        assert tau == pytest.approx(1.0, rel=1e-10)

    def test_custom_distribution_bisection_against_scipy(self):
        gam = st.gamma(2.0, scale=0.5)
        hold = CustomHolding(pdf=gam.pdf, cdf=gam.cdf,
                             hazard_bound_value=10.0, window=10.0)
        model = RegimeModel(kernel=np.array([[0.0, 1.0], [1.0, 0.0]]),
                            holding=(hold, hold))
        for u in (0.1, 0.5, 0.9):
            tau = sample_holding_time(model, 0, _FixedUniform(u))
            assert tau == pytest.approx(gam.ppf(u), abs=1e-8)

    def test_residual_life_conditioning(self, exp2_model):
        # memoryless: residual law at any age equals the unconditional law
        tau0 = sample_holding_time(exp2_model, 0, _FixedUniform(0.5), age=0.0)
        tau1 = sample_holding_time(exp2_model, 0, _FixedUniform(0.5), age=2.0)
        assert tau1 == pytest.approx(tau0, rel=1e-9)

    def test_samples_match_distribution(self):
        model = RegimeModel(kernel=np.array([[0.0, 1.0], [1.0, 0.0]]),
                            holding=(WeibullHolding(1.7, 0.9),
                                     ExponentialHolding(1.0)))
        rng = stream(123, "holding")
        draws = np.array([sample_holding_time(model, 0, rng)
                          for _ in range(4000)])
        d, p = st.kstest(draws, st.weibull_min(1.7, scale=0.9).cdf)
        assert p > 0.01


# ---------------------------------------------------------------------------
# samplers
# ---------------------------------------------------------------------------

class TestSamplers:
    def test_zero_hazard_means_no_events(self):
        frozen = CustomHolding(
            pdf=lambda y: np.zeros_like(np.asarray(y, dtype=float)),
            cdf=lambda y: np.zeros_like(np.asarray(y, dtype=float)),
            hazard_bound_value=1e-12, window=100.0)
        model = RegimeModel(kernel=np.array([[0.0, 1.0], [1.0, 0.0]]),
                            holding=(frozen, frozen))
        path = simulate_regime_thinning(model, RegimeState(0, 0.0), 10.0,
                                        stream(1, "t"))
        assert path.events == []

    def test_mean_sojourn_exponential(self, exp2_model):
        rng = stream(7, "sojourn")
        sojourns = []
        t_origin = RegimeState(0, 0.0)
        while len(sojourns) < 4000:
            path = simulate_regime_direct(exp2_model, t_origin, 50.0, rng)
            prev_t, prev_s = 0.0, 0
            for t, s in path.events:
                if prev_s == 0:
                    sojourns.append(t - prev_t)
                prev_t, prev_s = t, s
        sojourns = np.array(sojourns[:4000])
        se = sojourns.std(ddof=1) / np.sqrt(len(sojourns))
        assert abs(sojourns.mean() - 0.5) < 3 * se

    def test_first_jump_time_ks(self, exp2_model):
        rng = stream(11, "firstjump")
        firsts = np.array([simulate_regime_direct(
            exp2_model, RegimeState(0, 0.0), 100.0, rng).events[0][0]
            for _ in range(5000)])
        d, p = st.kstest(firsts, st.expon(scale=0.5).cdf)
        assert d < 0.025 and p > 0.01

    def test_thinning_accepts_exponential_without_rejection(self, exp2_model):
        # constant hazard: direct and thinning agree in law; smoke-compare
        rng_a, rng_b = stream(3, "a"), stream(3, "b")
        ta = [simulate_regime_thinning(exp2_model, RegimeState(0, 0.0), 50.0,
                                       rng_a) for _ in range(50)]
        counts = [len(p.events) for p in ta]
        assert np.mean(counts) > 0

    def test_thinning_vs_direct_holding_times(self, weibull3_model):
        def sojourn_sample(simulate, tag):
            rng = stream(17, tag)
            out = []
            while len(out) < 4000:
                path = simulate(weibull3_model, RegimeState(0, 0.0), 30.0, rng)
                prev = 0.0
                for t, _ in path.events:
                    out.append(t - prev)
                    prev = t
            return np.array(out[:4000])

        a = sojourn_sample(simulate_regime_direct, "direct")
        b = sojourn_sample(simulate_regime_thinning, "thin")
        d, p = st.ks_2samp(a, b)
        assert p > 0.01

    def test_transition_frequencies_match_kernel(self, weibull3_model):
        rng = stream(19, "trans")
        counts = np.zeros((3, 3))
        for _ in range(400):
            path = simulate_regime_thinning(weibull3_model,
                                            RegimeState(0, 0.0), 30.0, rng)
            prev = 0
            for _, s in path.events:
                counts[prev, s] += 1
                prev = s
        freq = counts / np.maximum(counts.sum(axis=1, keepdims=True), 1)
        off = ~np.eye(3, dtype=bool)
        assert np.max(np.abs(freq[off] - weibull3_model.kernel[off])) < 0.03

    def test_ctmc_matches_direct_exponential(self, exp2_model):
        # same law: compare time-average occupancy of state 0
        def occupancy(simulate, *args):
            rng = stream(29, args[0])
            tot = 0.0
            for _ in range(300):
                if args[0] == "ctmc":
                    path = simulate_ctmc([2.0, 3.0], exp2_model.kernel,
                                         RegimeState(0, 0.0), 20.0, rng)
                else:
                    path = simulate_regime_direct(exp2_model,
                                                  RegimeState(0, 0.0), 20.0,
                                                  rng)
                ts = np.linspace(0.0, 20.0, 400)
                th, _ = path.state_at(ts)
                tot += np.mean(th == 0)
            return tot / 300

        a = occupancy(simulate_regime_direct, "direct")
        b = occupancy(simulate_ctmc, "ctmc")
        assert abs(a - b) < 0.02
        assert abs(a - 0.6) < 0.02  # stationary occupancy 3/(2+3)


# ---------------------------------------------------------------------------
# path structure / age dynamics
# ---------------------------------------------------------------------------

class TestRegimePath:
    def test_event_times_strictly_increasing(self, weibull3_model):
        rng = stream(5, "inc")
        for _ in range(20):
            path = simulate_regime_direct(weibull3_model, RegimeState(1, 0.0),
                                          10.0, rng)
            times = [t for t, _ in path.events]
            assert all(b > a for a, b in zip(times, times[1:]))
            states = [path.origin.theta] + [s for _, s in path.events]
            assert all(b != a for a, b in zip(states, states[1:]))

    def test_age_unit_slope_and_reset(self, exp2_model):
        rng = stream(9, "age")
        path = simulate_regime_direct(exp2_model, RegimeState(0, 0.4), 10.0,
                                      rng)
        assert len(path.events) > 0
        t1 = path.events[0][0]
        # before the first event, age = initial age + elapsed time
        th, y = path.state_at(np.array([0.0, t1 / 2]))
        assert np.allclose(y, [0.4, 0.4 + t1 / 2])
        # right-continuous evaluation just after an event: age resets to ~0
        th2, y2 = path.state_at(np.array([t1]), side="right")
        assert y2[0] == pytest.approx(0.0, abs=1e-12)

    def test_state_at_with_no_events(self, single_regime):
        path = simulate_regime_direct(single_regime, RegimeState(0, 0.3), 2.0,
                                      stream(0, "z"))
        th, y = path.state_at(np.array([0.0, 1.0, 2.0]))
        assert np.all(th == 0)
        assert np.allclose(y, [0.3, 1.3, 2.3])


# ---------------------------------------------------------------------------
# apply_generator_L
# ---------------------------------------------------------------------------

class TestGeneratorL:
    def test_constant_function_annihilated(self, weibull3_model):
        for i in range(3):
            for y in (0.0, 0.5, 1.5):
                val = apply_generator_L(weibull3_model,
                                        lambda i_, y_: 4.2, i, y,
                                        dphi_dy=lambda i_, y_: 0.0)
                assert val == pytest.approx(0.0, abs=1e-12)

    def test_linear_age_function(self):
        model = RegimeModel(kernel=np.array([[0.0, 1.0], [1.0, 0.0]]),
                            holding=(WeibullHolding(2.0, 1.0),
                                     WeibullHolding(2.0, 1.0)))
        y = 0.7
        val = apply_generator_L(model, lambda i, yy: yy, 0, y,
                                dphi_dy=lambda i, yy: 1.0)
        # drift 1 minus hazard * (age lost on reset)
        assert val == pytest.approx(1.0 - hazard_rate(model, 0, y) * y,
                                    rel=1e-10)

    def test_pure_switch_term(self):
        model = RegimeModel(kernel=np.array([[0.0, 1.0], [1.0, 0.0]]),
                            holding=(ExponentialHolding(2.0),
                                     ExponentialHolding(2.0)))
        val = apply_generator_L(model, lambda i, y: 1.0 if i == 0 else 3.0,
                                0, 0.9, dphi_dy=lambda i, y: 0.0)
        assert val == pytest.approx(4.0, rel=1e-12)  # 2 * (3 - 1)

    def test_finite_difference_age_derivative(self):
        model = RegimeModel(kernel=np.array([[0.0, 1.0], [1.0, 0.0]]),
                            holding=(ExponentialHolding(1.0),
                                     ExponentialHolding(1.0)))
        analytic = apply_generator_L(model, lambda i, y: np.sin(y), 0, 0.4,
                                     dphi_dy=lambda i, y: np.cos(y))
        fd = apply_generator_L(model, lambda i, y: np.sin(y), 0, 0.4)
        assert fd == pytest.approx(analytic, abs=1e-8)

    def test_exponential_holding_gives_age_independent_generator(self,
                                                                 exp2_model):
        def phi(i, y):
            return float(i + 1) * 1.7

        vals = [apply_generator_L(exp2_model, phi, 0, y,
                                  dphi_dy=lambda i, y: 0.0)
                for y in np.linspace(0.0, 3.0, 40)]
        assert np.ptp(vals) < 1e-9
