import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from smoothfix.criteria import NEGATIVE, OSCILLATING
from smoothfix.decay import ExpDecay, SegmentDecay, TabulatedDecay
from smoothfix.errors import ConfigError, MassDeficit, NoNontrivialSolution, ZeroMean
from smoothfix.laws import Exponential
from smoothfix.montecarlo import EmpiricalDist, ks_distance
from smoothfix.pitmanyor import (
    NuLaw,
    PitmanYorProblem,
    cdf_distance,
    check_existence,
    h_to_nu,
    nu_to_h,
    solve_pitman_yor,
    tabulate_inverse,
    verify_size_bias_equation,
)

UNIFORM = PitmanYorProblem.build("Uniform(0,1)")
T = np.linspace(0.0, 30.0, 3001)

# unit-mean fixed point of Y = sum Y_i h(tau_i) with h = c on [0, 1/c):
# E Y^2 = 1/(1-c), E Y^3 = (1 + 3c/(1-c)) / (1 - c^2)
HALF_M2 = 2.0
HALF_M3 = 16.0 / 3.0


def rng(seed=0):
    return np.random.default_rng(seed)


class TestNuLaw:
    def test_uniform_moments(self):
        nu = NuLaw.uniform()
        assert nu.mean() == pytest.approx(0.5)
        assert nu.log_moments() == pytest.approx((-1.0, 1.0))

    def test_merges_atoms(self):
        nu = NuLaw(((0.5, 0.25), (0.5, 0.25), (2.0, 0.5)))
        assert nu.atoms == ((0.5, 0.5), (2.0, 0.5))

    def test_mass_must_be_one(self):
        with pytest.raises(ConfigError):
            NuLaw(((0.5, 0.3),))

    def test_inverse_moment_tail_uniform(self):
        x = np.array([1e-3, 0.1, 0.5, 0.9])
        np.testing.assert_allclose(NuLaw.uniform().inverse_moment_tail(x), -np.log(x), rtol=1e-12)

    def test_from_cdf(self):
        nu = NuLaw.from_cdf([0.0, 0.5, 1.0], [0.2, 0.6, 1.0])
        assert nu.mass_at_zero == pytest.approx(0.2)
        assert nu.cdf(0.25) == pytest.approx(0.4)

    def test_json_round_trip(self):
        nu = NuLaw(((0.5, 0.5),), ((0.0, 1.0, 0.5),))
        assert NuLaw.from_json(nu.to_json()) == nu

    def test_sample_mean(self):
        x = NuLaw(((2.0, 0.25),), ((0.0, 1.0, 0.75),)).sample(200_000, rng())
        assert x.mean() == pytest.approx(0.25 * 2 + 0.75 * 0.5, abs=0.01)


class TestNuToH:
    def test_uniform_is_exponential(self):
        h = nu_to_h(UNIFORM)
        np.testing.assert_allclose(h(T), np.exp(-T), atol=1e-12, rtol=0)

    def test_point_mass_is_step(self):
        h = nu_to_h(PitmanYorProblem.build(NuLaw.point(0.5)))
        np.testing.assert_allclose(h(np.array([0.0, 1.0, 1.999])), 0.5)
        assert h(2.5) == 0.0

    @pytest.mark.parametrize("g", [0.0, 0.3, 0.9])
    def test_integral(self, g):
        h = nu_to_h(PitmanYorProblem.build("Uniform(0,1)", gamma0=g))
        assert h.integral() == pytest.approx(1.0 - g, abs=1e-12)

    def test_inverse_matches_tabulation(self):
        x, H = tabulate_inverse(UNIFORM, 200)
        np.testing.assert_allclose(nu_to_h(UNIFORM).inverse(x), H, rtol=1e-9)


class TestRoundTrip:
    @pytest.mark.parametrize("nu", [
        NuLaw.uniform(),
        NuLaw.point(0.5),
        NuLaw.point(2.0),
        NuLaw(((0.25, 0.5), (1.5, 0.5))),
        NuLaw(((0.5, 0.25),), ((0.0, 1.0, 0.75),)),
    ], ids=["uniform", "half", "two", "two-atom", "mixed"])
    def test_nu_h_nu(self, nu):
        back = h_to_nu(nu_to_h(PitmanYorProblem.build(nu)))
        assert cdf_distance(nu, back) < 1e-9

    @settings(max_examples=40, deadline=None)
    @given(st.floats(0.05, 3.0), st.floats(0.05, 3.0), st.floats(0.05, 0.95))
    def test_two_atom_laws(self, a, b, p):
        nu = NuLaw(((a, p), (b, 1 - p)))
        assert cdf_distance(nu, h_to_nu(nu_to_h(PitmanYorProblem.build(nu)))) < 1e-9

    def test_exp_decay_to_uniform(self):
        assert cdf_distance(h_to_nu(ExpDecay(1.0)), NuLaw.uniform()) < 1e-9

    def test_h_nu_h(self):
        h = SegmentDecay([(0.5, "const", 0.8, None), (math.inf, "exp", 0.6, 0.3)])
        lam = 1.0 / h.integral()
        back = nu_to_h(PitmanYorProblem.build(h_to_nu(h, lam)))
        # intensity lam rescales time: the recovered profile is h(u / lam); skip the jump at 0.5
        t = T + 1e-3
        np.testing.assert_allclose(back(t * lam), h(t), atol=1e-9)

    def test_tabulated_profile(self):
        h = TabulatedDecay([0.0, 1.0, 2.0], [1.0, 0.5, 0.0])
        nu = h_to_nu(h, 1.0 / h.integral())
        assert nu.mean() > 0 and abs(sum(p for _, p in nu.atoms) + sum(q for *_, q in nu.pieces) - 1) < 1e-12

    def test_gamma0_atom(self):
        nu = h_to_nu(ExpDecay(1.0), lam=0.5)
        assert nu.mass_at_zero == pytest.approx(0.5)

    def test_mass_deficit(self):
        with pytest.raises(MassDeficit):
            h_to_nu(ExpDecay(1.0), lam=2.0)
        with pytest.raises(MassDeficit):
            h_to_nu(ExpDecay(1.0), lam=1.0, gamma0=0.2)


class TestExistence:
    def test_uniform_negative(self):
        assert check_existence(UNIFORM, rng=rng()).verdict == NEGATIVE

    def test_balanced_atoms_oscillate(self):
        nu = NuLaw(((2.0, 0.5), (0.5, 0.5)))
        assert check_existence(nu, rng=rng()).verdict == OSCILLATING
        with pytest.raises(NoNontrivialSolution):
            solve_pitman_yor(PitmanYorProblem.build(nu), 1000, 2, rng())

    def test_atom_at_zero_negative(self):
        assert check_existence(PitmanYorProblem.build(NuLaw.point(1.0), gamma0=0.5)).verdict == NEGATIVE


class TestSolve:
    @pytest.mark.parametrize("seed", [0, 1])
    def test_uniform_gives_exponential(self, seed):
        mu = solve_pitman_yor(UNIFORM, 50_000, 12, rng(seed))
        assert ks_distance(mu, Exponential(1.0)) < 0.03
        assert mu.diagnostics["drift"] == NEGATIVE

    def test_half_point_moments(self):
        mu = solve_pitman_yor(PitmanYorProblem.build(NuLaw.point(0.5)), 100_000, 20, rng(2))
        y = mu.samples
        assert y.mean() == pytest.approx(1.0)
        assert np.mean(y**2) == pytest.approx(HALF_M2, rel=0.05)
        assert np.mean(y**3) == pytest.approx(HALF_M3, rel=0.12)

    def test_target_mean(self):
        mu = solve_pitman_yor(PitmanYorProblem.build("Uniform(0,1)", m=3.0), 20_000, 8, rng(3))
        assert mu.mean() == pytest.approx(3.0)


class TestSizeBiasEquation:
    @pytest.mark.parametrize("nu", [
        NuLaw.uniform(),
        NuLaw.point(0.5),
        NuLaw(((0.25, 0.5), (1.2, 0.5))),
        NuLaw(((0.5, 0.25),), ((0.0, 1.0, 0.75),)),
        NuLaw.uniform(0.2, 0.9),
    ], ids=["uniform", "half", "two-atom", "mixed", "shifted-uniform"])
    def test_solutions_pass(self, nu):
        prob = PitmanYorProblem.build(nu)
        mu = solve_pitman_yor(prob, 50_000, 15, rng(4))
        assert verify_size_bias_equation(mu, prob, 50_000, rng(5), threshold=0.03).passed

    def test_exponential_pool_closed_form(self):
        mu = EmpiricalDist(rng(6).exponential(1.0, 200_000))
        chk = verify_size_bias_equation(mu, UNIFORM, 100_000, rng(7))
        assert chk.passed and chk.left_mean == pytest.approx(2.0, abs=0.05)

    def test_wrong_law_fails(self):
        # A = 1 leaves only delta_0 / infinite solutions; a unit point mass is not one
        chk = verify_size_bias_equation(EmpiricalDist(np.ones(1000)), NuLaw.point(1.0), 10_000, rng(8))
        assert not chk.passed
        assert chk.ks == pytest.approx(1.0)

    def test_zero_mean(self):
        with pytest.raises(ZeroMean):
            verify_size_bias_equation(EmpiricalDist(np.zeros(10)), UNIFORM, 100, rng())


class TestProblemJson:
    def test_round_trip(self):
        p = PitmanYorProblem.build({"atoms": [["1/2", "1/2"]], "pieces": [[0, 1, "1/2"]]}, m=2.0)
        q = PitmanYorProblem.from_json(p.to_json())
        assert q == p

    def test_gamma0_mixing(self):
        p = PitmanYorProblem.from_json({"nu": "Uniform(0,1)", "gamma0": 0.25})
        assert p.gamma0 == 0.25 and p.nu.mean() == pytest.approx(0.375)

    def test_missing_nu(self):
        with pytest.raises(ConfigError):
            PitmanYorProblem.from_json({"gamma0": 0.1})
