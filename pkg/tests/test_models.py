import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from smoothfix.decay import ExpDecay, SegmentDecay, StepDecay, TabulatedDecay
from smoothfix.errors import ConditionDViolated, ConfigError, DegenerateWeights, SubcriticalCount
from smoothfix.models import (
    CommonRandomWeight,
    FixedWeights,
    RandomCountFixedWeight,
    ShotNoise,
    exp_shot_noise,
    geometric_model,
    model_from_json,
    sample_points,
    sample_size_biased_node,
    sum_weights_moment,
    t_beta,
    t_beta_derivative,
    two_point_model,
    validate_model,
)

EXACT_MODELS = [
    FixedWeights([0.5, 0.5]),
    FixedWeights([0.7, 0.2, 0.1]),
    two_point_model(),
    geometric_model(),
    exp_shot_noise(),
]


class TestValidate:
    def test_unit_weights_degenerate(self):
        with pytest.raises(DegenerateWeights):
            validate_model(FixedWeights([1.0, 1.0]))

    def test_halves_ok(self):
        validate_model(FixedWeights([0.5, 0.5]))

    def test_geometric_ok(self):
        m = geometric_model(0.5, 0.5)
        validate_model(m)
        assert m.mean_count() == pytest.approx(2.0)

    def test_single_weight_subcritical(self):
        with pytest.raises(SubcriticalCount):
            validate_model(FixedWeights([0.5]))

    def test_shot_noise_has_infinite_count(self):
        validate_model(exp_shot_noise())

    def test_bad_probabilities_rejected(self):
        with pytest.raises(ConfigError):
            CommonRandomWeight(2, [(0.5, 0.3), (0.2, 0.3)])


class TestSamplePoints:
    def test_fixed_weights_exact(self):
        ps = sample_points(FixedWeights([0.5, 0.5]), np.random.default_rng(0))
        np.testing.assert_array_equal(ps.weights, [0.5, 0.5])
        assert ps.truncation_bound == 0.0

    def test_shot_noise_horizon(self):
        m = exp_shot_noise()
        assert m.horizon(1e-8) == pytest.approx(math.log(1e8), rel=1e-9)
        ps = sample_points(m, np.random.default_rng(1), tail_tol=1e-8)
        assert ps.truncation_bound <= 1e-8 * (1 + 1e-9)
        assert np.all(ps.weights >= 1e-8 * (1 - 1e-9))
        assert np.all(np.diff(ps.weights) <= 0)

    def test_two_point_equal_weights(self):
        rng = np.random.default_rng(2)
        for _ in range(20):
            w = sample_points(two_point_model(), rng).weights
            assert w.size == 2 and w[0] == w[1]
            assert w[0] in (4 / 3, 1 / 5)

    def test_truncation_bound_covers_discarded_mass(self):
        # for h = e^{-t} the discarded mean is exactly e^{-T}
        m = exp_shot_noise()
        for tol in (1e-3, 1e-6, 1e-10):
            T = m.horizon(tol)
            assert math.exp(-T) <= tol * (1 + 1e-9)


class TestMoments:
    def test_t_fixed(self):
        assert t_beta(FixedWeights([0.5, 0.5]), 1.5).value == pytest.approx(2**-0.5, abs=1e-12)

    def test_t_shot_noise(self):
        assert t_beta(exp_shot_noise(), 2.0).value == pytest.approx(0.5, abs=1e-12)

    @pytest.mark.parametrize("model", EXACT_MODELS, ids=lambda m: type(m).__name__)
    def test_condition_d1(self, model):
        assert t_beta(model, 1.0).value == pytest.approx(1.0, abs=1e-12)

    def test_derivatives(self):
        assert t_beta_derivative(FixedWeights([0.5, 0.5]), 1.0).value == pytest.approx(-math.log(2), abs=1e-12)
        assert t_beta_derivative(exp_shot_noise(), 1.0).value == pytest.approx(-1.0, abs=1e-12)
        expected = 2 * (16 / 34 * math.log(4 / 3) + 1 / 34 * math.log(1 / 5))
        assert t_beta_derivative(two_point_model(), 2.0).value == pytest.approx(expected, abs=1e-12)

    def test_sum_moments(self):
        assert sum_weights_moment(geometric_model(), 2.0).value == pytest.approx(1.5, abs=1e-12)
        assert sum_weights_moment(FixedWeights([0.5, 0.5]), 3.0).value == pytest.approx(1.0, abs=1e-12)
        est = sum_weights_moment(exp_shot_noise(), 1.0, rng=np.random.default_rng(3))
        assert abs(est.value - 1.0) < 1e-9 + 4 * est.std_error

    @pytest.mark.parametrize("model", EXACT_MODELS, ids=lambda m: type(m).__name__)
    @pytest.mark.parametrize("beta", [0.5, 1.0, 1.5, 2.0])
    def test_monte_carlo_matches_exact(self, model, beta):
        exact = t_beta(model, beta).value
        mc = t_beta(model, beta, 100_000, np.random.default_rng(int(beta * 10)), exact=False)
        assert abs(mc.value - exact) <= 4 * mc.std_error + 1e-9

    @pytest.mark.parametrize("model", EXACT_MODELS, ids=lambda m: type(m).__name__)
    def test_t_convex(self, model):
        betas = np.linspace(0.3, 4.0, 20)
        t = np.array([t_beta(model, b).value for b in betas])
        assert np.all(np.diff(t, 2) >= -1e-12)


class TestSizeBiasedNode:
    def test_fixed_deterministic(self):
        M, N = sample_size_biased_node(FixedWeights([0.5, 0.5]), 1.0, np.random.default_rng(0), count=100)
        np.testing.assert_allclose(M, 0.5)
        np.testing.assert_allclose(N, 1.0)

    def test_geometric_mean_n(self):
        M, N = sample_size_biased_node(geometric_model(), 1.0, np.random.default_rng(1), count=200_000)
        np.testing.assert_allclose(M, 0.5)
        assert np.all(np.isclose(2 * N, np.round(2 * N)))
        se = N.std() / math.sqrt(N.size)
        assert abs(N.mean() - 1.5) < 4 * se

    @pytest.mark.parametrize("model", [two_point_model(), geometric_model(), exp_shot_noise()],
                             ids=["two-point", "geometric", "shot-noise"])
    def test_m_identity(self, model):
        # E g(M) = E sum X^beta g(X^beta): g = id gives t(2 beta), g = log gives beta t'(beta)
        M, _ = sample_size_biased_node(model, 1.0, np.random.default_rng(5), count=200_000)
        se = M.std() / math.sqrt(M.size)
        assert abs(M.mean() - t_beta(model, 2.0).value) <= 4 * se + 1e-12
        lm = np.log(M)
        assert abs(lm.mean() - t_beta_derivative(model, 1.0).value) <= 4 * lm.std() / math.sqrt(M.size) + 1e-12

    def test_pool_resampling_matches(self):
        M, N = sample_size_biased_node(geometric_model(), 1.0, np.random.default_rng(6), count=20_000, pool=1024)
        assert abs(N.mean() - 1.5) < 0.05

    def test_condition_d_required(self):
        with pytest.raises(ConditionDViolated):
            sample_size_biased_node(FixedWeights([0.5, 0.5]), 2.0, np.random.default_rng(0))


class TestDecay:
    @settings(max_examples=50, deadline=None)
    @given(st.floats(0.1, 5.0), st.floats(0.5, 3.0), st.floats(0.01, 0.99))
    def test_exp_round_trip(self, rate, scale, frac):
        h = ExpDecay(rate, scale)
        x = frac * scale
        assert h(h.inverse(x)) == pytest.approx(x, rel=1e-9)

    @settings(max_examples=50, deadline=None)
    @given(st.lists(st.floats(0.01, 2.0), min_size=2, max_size=8), st.floats(0.05, 0.95))
    def test_tabulated_round_trip(self, steps, frac):
        t = np.concatenate([[0.0], np.cumsum(steps)])
        h = np.linspace(2.0, 0.1, t.size)
        prof = TabulatedDecay(t, h)
        x = 0.1 + frac * 1.9
        assert prof(prof.inverse(x)) == pytest.approx(x, rel=1e-9)

    def test_generalized_inverse_of_step(self):
        h = StepDecay(0.5, 2.0)
        assert h.inverse(0.3) == pytest.approx(2.0)
        assert h.inverse(0.5) == 0.0
        assert h.integral() == pytest.approx(1.0)

    def test_segment_integral(self):
        h = SegmentDecay([(1.0, "const", 1.0, None), (math.inf, "exp", 0.5, 2.0)])
        assert h.integral() == pytest.approx(1.0 + 0.5 * 2.0, rel=1e-12)

    def test_increasing_rejected(self):
        with pytest.raises(ConfigError):
            TabulatedDecay([0.0, 1.0], [0.5, 1.0])


class TestJson:
    @pytest.mark.parametrize("model", EXACT_MODELS, ids=lambda m: type(m).__name__)
    def test_round_trip(self, model):
        again = model_from_json(model.to_json())
        for b in (0.5, 1.0, 2.0):
            assert again.exact_t(b) == pytest.approx(model.exact_t(b), rel=1e-14)

    def test_fraction_strings(self):
        m = model_from_json({"kind": "CommonRandomWeight", "count": 2,
                             "atoms": [["4/3", "9/34"], ["1/5", "25/34"]]})
        assert m.exact_t(2.0) == pytest.approx(1.0, abs=1e-14)

    def test_unknown_kind(self):
        with pytest.raises(ConfigError):
            model_from_json({"kind": "Nope"})

    def test_random_count_atoms(self):
        m = model_from_json({"kind": "RandomCountFixedWeight", "weight": 0.25,
                             "count": {"atoms": [[2, 0.5], [6, 0.5]]}})
        assert isinstance(m, RandomCountFixedWeight)
        assert m.exact_t(1.0) == pytest.approx(1.0)

    def test_shot_noise_json(self):
        m = model_from_json({"kind": "ShotNoise", "h": {"name": "exp", "rate": 1.0}})
        assert isinstance(m, ShotNoise)
