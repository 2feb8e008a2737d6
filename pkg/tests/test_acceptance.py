"""Thirteen end-to-end acceptance checks at their stated tolerances."""
import json
import math
import os
import time

import numpy as np
import pytest

from smoothfix import cli
from smoothfix.criteria import check_regular_variation, solve_beta_roots, theorem2_verdict
from smoothfix.decay import ExpDecay
from smoothfix.laws import Exponential, PointMass
from smoothfix.lst import (
    LSTGrid,
    contraction_ratios,
    default_grid,
    estimate_alpha_m,
    inverse_stable_transform,
    picard_iterate,
    picard_step,
    stable_transform,
)
from smoothfix.models import exp_shot_noise, geometric_model, oscillating_model, t_beta, two_point_model
from smoothfix.montecarlo import (
    EmpiricalDist,
    from_law,
    ks_distance,
    population_step,
    simulate_brw_martingale,
    simulate_spine_perpetuity,
)
from smoothfix.pitmanyor import (
    NuLaw,
    PitmanYorProblem,
    cdf_distance,
    h_to_nu,
    nu_to_h,
    solve_pitman_yor,
    verify_size_bias_equation,
)
from smoothfix.tails import check_moment_condition, compute_cb, sample_fixed_point

pytestmark = pytest.mark.slow

S = default_grid()
EXP1 = Exponential(1.0)
CONFIGS = os.path.join(os.path.dirname(__file__), os.pardir, "configs")


def exp_phi(s):
    return 1.0 / (1.0 + s)


def test_01_exponential_fixed_point(record_criterion):
    seed = LSTGrid.from_law(PointMass(1.0), S)
    t0 = time.perf_counter()
    res = picard_iterate(seed, geometric_model(), max_iter=50, tol=1e-7, mc_budget=10_000,
                         rng=np.random.default_rng(1), reference=exp_phi, raise_on_failure=False)
    elapsed = time.perf_counter() - t0
    err = res.lst.sup_distance(exp_phi)
    ok = err < 1e-3 and res.iterations <= 50 and elapsed < 30.0
    record_criterion(1, ok, f"sup error {err:.2e} after {res.iterations} iterations in {elapsed:.2f} s")
    assert ok


def test_02_shot_noise_flagship(record_criterion):
    model = exp_shot_noise()
    step = picard_step(LSTGrid.from_law(EXP1, S), model, method="poisson")
    err = step.sup_distance(exp_phi)
    pool = from_law(EXP1, 100_000, np.random.default_rng(2))
    ks = ks_distance(population_step(model, pool, 100_000, np.random.default_rng(3)), EXP1)
    ok = err < 1e-6 and ks < 0.02
    record_criterion(2, ok, f"Poisson step sup error {err:.2e}, population KS {ks:.4f}")
    assert ok


def test_03_spine_perpetuity(record_criterion):
    res = simulate_spine_perpetuity(geometric_model(), 1.0, 60, 100_000, np.random.default_rng(4))
    ev = float(res.v.mean())
    ok = abs(ev - 2.0) <= 0.05
    record_criterion(3, ok, f"E V = {ev:.4f} (target 2)")
    assert ok


def test_04_brw_martingale(record_criterion):
    t0 = time.perf_counter()
    res = simulate_brw_martingale(geometric_model(), 1.0, 12, 10_000, np.random.default_rng(5))
    elapsed = time.perf_counter() - t0
    z = res.to_dist()
    mean, m2, ks = z.mean(), z.moment(2.0), ks_distance(z, EXP1)
    ok = abs(mean - 1.0) <= 0.03 and abs(m2 - 2.0) <= 0.1 and ks < 0.02 and elapsed < 60.0
    record_criterion(4, ok, f"mean {mean:.4f}, second moment {m2:.4f}, KS {ks:.4f}, {elapsed:.2f} s")
    assert ok


def test_05_condition_d_roots(record_criterion):
    model = two_point_model()
    r = solve_beta_roots(model)
    resid = max(abs(t_beta(model, b).value - 1.0) for b in r.roots)
    ok = len(r.roots) == 2 and np.allclose(r.roots, [1.0, 2.0], atol=1e-9) and resid < 1e-9
    record_criterion(5, ok, f"roots {[round(b, 12) for b in r.roots]}, max residual {resid:.1e}")
    assert ok


def test_06_existence_verdicts(record_criterion):
    hits = {"geometric": 0, "shot-noise": 0, "oscillating": 0}
    for seed in range(100):
        for name, model in (("geometric", geometric_model()), ("shot-noise", exp_shot_noise())):
            rep = theorem2_verdict(model, 100_000, np.random.default_rng(seed))
            hits[name] += rep.theorem2_case == "a" and rep.exists and rep.alpha == pytest.approx(1.0)
        rep = theorem2_verdict(oscillating_model(), 100_000, np.random.default_rng(seed))
        hits["oscillating"] += not rep.exists
    ok = all(v == 100 for v in hits.values())
    record_criterion(6, ok, ", ".join(f"{k} {v}/100" for k, v in hits.items()))
    assert ok


def test_07_tail_behavior(record_criterion):
    model = two_point_model()
    fp = sample_fixed_point(model, 1_000_000, np.random.default_rng(7))
    rep = compute_cb(model, fp, 2.0, rng=np.random.default_rng(8))
    hill = rep.hill_estimate.index
    ok = (fp.dist.size >= 1_000_000 and abs(hill - 2.0) <= 0.15 and rep.plateau.spread < 0.25
          and rep.agreement() < 0.30 and rep.dominance["holds_in_tail"])
    record_criterion(7, ok, f"Hill {hill:.3f}, plateau spread {rep.plateau.spread:.1%}, "
                            f"C_b formula {rep.cb_formula.value:.3f} vs plateau {rep.cb_empirical.value:.3f} "
                            f"({rep.agreement():.1%}), dominance in tail {rep.dominance['holds_in_tail']}")
    assert ok


def test_08_moment_condition(record_criterion):
    geo = check_moment_condition(geometric_model(), 2.0, rng=np.random.default_rng(9))
    two = check_moment_condition(two_point_model(), 2.0, rng=np.random.default_rng(10))
    ew2 = geo.fixed_point_second_moment.value
    ok = geo.verdict and abs(ew2 - 2.0) <= 0.1 and not two.verdict
    record_criterion(8, ok, f"geometric verdict {geo.verdict} with E W^2 = {ew2:.4f}; b=2 model verdict {two.verdict}")
    assert ok


def test_09_contraction(record_criterion):
    passes = 0
    worst = -math.inf
    for seed in range(20):
        rng = np.random.default_rng(100 + seed)
        nu1 = from_law(EXP1, 20_000, rng).with_mean(1.0)
        nu2 = EmpiricalDist(np.ones(20_000))
        rs = contraction_ratios(geometric_model(), nu1, nu2, [1.2, 1.5, 1.8], rng=rng)
        gap = max(r.ratio - r.t_p for r in rs)
        worst = max(worst, gap)
        passes += gap <= 0.05
    ok = passes == 20
    record_criterion(9, ok, f"{passes}/20 seeds, largest ratio - t(p) = {worst:.4f}")
    assert ok


def test_10_stable_transformation(record_criterion):
    d = stable_transform(EmpiricalDist(np.ones(100_000)), 0.5, np.random.default_rng(11))
    dev = float(np.max(np.abs(d.lst(S) - np.exp(-np.sqrt(S)))))
    grid = stable_transform(LSTGrid.from_law(PointMass(1.0), S), 0.5)
    am = estimate_alpha_m(grid)
    base = LSTGrid.from_law(EXP1, S)
    rt = float(np.max(np.abs(inverse_stable_transform(stable_transform(base, 0.5), 0.5).values - base.values)))
    ok = dev < 0.01 and abs(am.alpha - 0.5) <= 0.02 and abs(am.m - 1.0) <= 0.05 and rt < 1e-6
    record_criterion(10, ok, f"empirical deviation {dev:.4f}, (alpha, m) = ({am.alpha:.4f}, {am.m:.4f}), "
                             f"round trip {rt:.1e}")
    assert ok


def test_11_pitman_yor(record_criterion):
    prob = PitmanYorProblem.build("Uniform(0,1)")
    t = np.linspace(0.0, 40.0, 4001)
    h = nu_to_h(prob)
    h_err = float(np.max(np.abs(h(t) - np.exp(-t))))
    round_trips = [
        cdf_distance(nu, h_to_nu(nu_to_h(PitmanYorProblem.build(nu))))
        for nu in (NuLaw.uniform(), NuLaw.point(0.5), NuLaw(((0.25, 0.5), (1.5, 0.5))),
                   NuLaw(((0.5, 0.25),), ((0.0, 1.0, 0.75),)))
    ]
    rt = max(round_trips + [cdf_distance(NuLaw.uniform(), h_to_nu(ExpDecay(1.0)))])
    # the KS check starts from a point mass so the iteration has to do the work
    mu = solve_pitman_yor(prob, 100_000, 30, np.random.default_rng(12),
                          seed_pool=EmpiricalDist(np.ones(100_000)))
    ks = ks_distance(mu, EXP1)
    passes = 0
    for seed in range(20):
        rng = np.random.default_rng(200 + seed)
        sol = solve_pitman_yor(prob, 100_000, 10, rng)
        passes += verify_size_bias_equation(sol, prob, 100_000, rng).passed
    ok = h_err < 1e-12 and ks < 0.03 and passes == 20 and rt < 1e-9
    record_criterion(11, ok, f"h error {h_err:.1e}, KS to Exp(1) {ks:.4f}, size-bias check {passes}/20, "
                             f"round trip {rt:.1e}")
    assert ok


def test_12_regular_variation(record_criterion):
    base = LSTGrid.from_law(EXP1, S)
    one = check_regular_variation(base, 1.0).exponent
    half = check_regular_variation(stable_transform(base, 0.5), 0.5).exponent
    ok = abs(one - 1.0) <= 0.02 and abs(half - 0.5) <= 0.02
    record_criterion(12, ok, f"exponents {one:.4f} and {half:.4f}")
    assert ok


def test_13_determinism(record_criterion, tmp_path):
    tails_cfg = json.load(open(os.path.join(CONFIGS, "tails_two_point.json")))
    tails_cfg["budgets"].update(replicas=200_000, pool_size=40_000, pool_iterations=30)
    tails_path = tmp_path / "tails.json"
    tails_path.write_text(json.dumps(tails_cfg))
    configs = {
        "criteria": os.path.join(CONFIGS, "criteria_geometric.json"),
        "simulate": os.path.join(CONFIGS, "simulate_geometric.json"),
        "tails": str(tails_path),
    }
    same = {}
    sink = open(os.devnull, "w")
    for name, path in configs.items():
        outs = []
        for workers in (1, 8):
            out = tmp_path / f"{name}-{workers}"
            assert cli.run(path, out=str(out), workers=workers, stream=sink) == 0
            outs.append(out)
        files = sorted(os.listdir(outs[0]))
        same[name] = files == sorted(os.listdir(outs[1])) and all(
            (outs[0] / f).read_bytes() == (outs[1] / f).read_bytes() for f in files)
    ok = all(same.values())
    record_criterion(13, ok, ", ".join(f"{k} {'identical' if v else 'DIFFERENT'}" for k, v in same.items()))
    assert ok
