"""Command-line front end.

``smoothfix run config.json`` executes one scenario and writes report.json
plus command-specific CSV files into the output directory. Outputs are
staged in a temporary directory and moved into place only when the
command finishes, so a tool failure (exit 2) leaves nothing behind. A
negative mathematical verdict (exit 1) still writes report.json with the
reason.

``smoothfix report a.csv b.csv`` compares two sample files.
"""

from __future__ import annotations

import argparse
import json
import math
import os
import shutil
import sys
import tempfile
from dataclasses import dataclass, field

import numpy as np

from . import __version__, criteria, lst, montecarlo, parallel, pitmanyor, tails
from .errors import ConfigError, SmoothfixError, TooFewSamples, VerdictError
from .estimates import Estimate
from .laws import PointMass, law_from_json
from .models import DEFAULT_TAIL_TOL, model_from_json, validate_model

COMMANDS = ("criteria", "iterate-lst", "simulate", "spine", "tails", "stable", "pitman-yor", "report")
NEEDS_MODEL = ("criteria", "iterate-lst", "simulate", "spine", "tails")
MAX_SEED = 2**64 - 1


@dataclass
class Scenario:
    command: str
    seed: int
    model: object | None
    parameters: dict
    budgets: dict
    output: str
    raw: dict = field(default_factory=dict)

    def budget(self, key, default):
        return int(self.budgets.get(key, default))

    def param(self, key, default=None):
        return self.parameters.get(key, default)


def _positive_int(v, what):
    if isinstance(v, bool) or not isinstance(v, (int, float)) or v != int(v) or v <= 0:
        raise ConfigError(f"{what} must be a positive integer, got {v!r}")
    return int(v)


def parse_scenario(raw, seed=None, out=None) -> Scenario:
    if not isinstance(raw, dict):
        raise ConfigError("config must be a JSON object")
    command = raw.get("command")
    if command not in COMMANDS:
        raise ConfigError(f"unknown command {command!r}; expected one of {', '.join(COMMANDS)}")
    if seed is None:
        seed = raw.get("seed")
    if seed is None:
        raise ConfigError("config needs a seed")
    if isinstance(seed, bool) or not isinstance(seed, int) or not 0 <= seed <= MAX_SEED:
        raise ConfigError("seed must be an unsigned 64-bit integer")
    budgets = raw.get("budgets", {})
    if not isinstance(budgets, dict):
        raise ConfigError("budgets must be an object")
    budgets = {k: _positive_int(v, f"budget {k!r}") for k, v in budgets.items()}
    params = raw.get("parameters", {})
    if not isinstance(params, dict):
        raise ConfigError("parameters must be an object")
    model = None
    if command in NEEDS_MODEL:
        if "model" not in raw:
            raise ConfigError(f"command {command!r} needs a model")
        model = model_from_json(raw["model"])
        validate_model(model)
    output = out or raw.get("output")
    if not output:
        raise ConfigError("no output directory (config 'output' or --out)")
    return Scenario(command, int(seed), model, params, budgets, str(output), raw)


# ---------------------------------------------------------------------------
# serialization


def _clean(obj):
    """JSON-safe copy: numpy scalars to Python, non-finite floats to strings."""
    if isinstance(obj, dict):
        return {str(k): _clean(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_clean(v) for v in obj]
    if isinstance(obj, np.ndarray):
        return [_clean(v) for v in obj.tolist()]
    if isinstance(obj, (bool, np.bool_)):
        return bool(obj)
    if isinstance(obj, (int, np.integer)):
        return int(obj)
    if isinstance(obj, (float, np.floating)):
        x = float(obj)
        if math.isnan(x):
            return "nan"
        if math.isinf(x):
            return "inf" if x > 0 else "-inf"
        return x
    if isinstance(obj, Estimate):
        return obj.to_json()
    return obj


def dump_json(obj, path):
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        json.dump(_clean(obj), fh, sort_keys=True, indent=2)
        fh.write("\n")


def write_csv(path, header, rows):
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        fh.write(",".join(header) + "\n")
        for row in rows:
            fh.write(",".join("" if v is None else repr(float(v)) if not isinstance(v, str) else v
                              for v in row) + "\n")


# ---------------------------------------------------------------------------
# commands


def _grid(sc: Scenario):
    g = sc.param("grid", {})
    return lst.default_grid(int(g.get("points", 200)), float(g.get("lo", 1e-6)), float(g.get("hi", 1e3)))


def _law(obj, default):
    return law_from_json(obj) if obj is not None else default


def cmd_criteria(sc: Scenario, rng, out):
    rep = criteria.theorem2_verdict(sc.model, sc.budget("mc_budget", 100_000), rng,
                                    float(sc.param("search_max", 8.0)),
                                    float(sc.param("tail_tol", DEFAULT_TAIL_TOL)))
    rows = []
    betas = np.linspace(float(sc.param("search_min", 0.05)), float(sc.param("search_max", 8.0)), 160)
    try:
        rows = [(b, sc.model.exact_t(b)) for b in betas]
    except (NotImplementedError, SmoothfixError):
        rows = []
    files = []
    if rows:
        write_csv(os.path.join(out, "t_curve.csv"), ["beta", "t"], rows)
        files.append("t_curve.csv")
    return rep.to_json(), files


def cmd_iterate_lst(sc: Scenario, rng, out):
    s = _grid(sc)
    seed_law = _law(sc.param("seed_law"), PointMass(1.0))
    seed = lst.LSTGrid.from_law(seed_law, s)
    ref_law = sc.param("reference")
    reference = lst.LSTGrid.from_law(law_from_json(ref_law), s) if ref_law is not None else None
    method = str(sc.param("method", "auto"))
    res = lst.picard_iterate(seed, sc.model, sc.budget("iterations", 500), float(sc.param("tol", 1e-9)),
                             sc.budget("replicas", 10_000), rng, method, reference,
                             tail_tol=float(sc.param("tail_tol", DEFAULT_TAIL_TOL)))
    res.lst.to_csv(os.path.join(out, "lst.csv"))
    write_csv(os.path.join(out, "trace.csv"), ["iteration", "change", "error"], res.trace_rows())
    exact = method == "exact" or (method == "auto" and sc.model.realization_law() is not None)

    def tag(v):
        if exact:
            return Estimate.exact(v)
        # step-to-step change is the noise level of a Monte Carlo iterate
        return Estimate.monte_carlo(v, float(res.changes[-1]))

    result = {
        "iterations": res.iterations,
        "converged": res.converged,
        "final_change": tag(float(res.changes[-1])),
        "method": method,
        "invariants": res.lst.check_invariants(),
    }
    if res.errors is not None:
        result["sup_error"] = tag(float(res.errors[-1]))
    try:
        am = lst.estimate_alpha_m(res.lst)
        result["alpha_m"] = {"alpha": tag(am.alpha), "m": tag(am.m), "residual": am.residual}
    except VerdictError as exc:
        result["alpha_m"] = {"error": str(exc)}
    return result, ["lst.csv", "trace.csv"]


def _sample_summary(x, reference=None):
    x = np.asarray(x, dtype=float)
    out = {"count": int(x.size), "mean": Estimate.from_samples(x),
           "second_moment": Estimate.from_samples(x * x)}
    if reference is not None:
        out["ks_to_reference"] = Estimate.monte_carlo(
            montecarlo.ks_distance(montecarlo.EmpiricalDist(x), reference), 1.0 / math.sqrt(x.size))
    return out


def cmd_simulate(sc: Scenario, rng, out):
    res = montecarlo.simulate_brw_martingale(
        sc.model, float(sc.param("gamma", 1.0)), int(sc.param("n", 12)), sc.budget("replicas", 10_000),
        rng, tail_tol=float(sc.param("tail_tol", DEFAULT_TAIL_TOL)))
    ref = sc.param("reference")
    result = _sample_summary(res.samples, law_from_json(ref) if ref is not None else None)
    result.update({"generation": res.generation, "gamma": res.gamma,
                   "censored_fraction": res.censored_fraction, "max_population": res.max_population,
                   "truncation_bound": res.truncation_bound})
    res.to_dist().to_csv(os.path.join(out, "samples.csv"))
    return result, ["samples.csv"]


def cmd_spine(sc: Scenario, rng, out):
    res = montecarlo.simulate_spine_perpetuity(
        sc.model, float(sc.param("beta", 1.0)), int(sc.param("depth", 60)), sc.budget("replicas", 100_000),
        rng, tail_tol=float(sc.param("tail_tol", DEFAULT_TAIL_TOL)))
    result = {"v": Estimate.from_samples(res.v), "v1": Estimate.from_samples(res.v1),
              "v2": Estimate.from_samples(res.v2), "depth": res.depth, "steps_used": res.steps_used,
              "max_residual_product": res.max_residual_product}
    write_csv(os.path.join(out, "spine.csv"), ["v1", "v2"], zip(res.v1, res.v2))
    return result, ["spine.csv"]


def cmd_tails(sc: Scenario, rng, out):
    model = sc.model
    p = float(sc.param("p", 2.0))
    moment = tails.check_moment_condition(model, p, sc.budget("mc_budget", 100_000), rng)
    b = sc.param("b")
    b = float(b) if b is not None else tails.tail_root_b(model, float(sc.param("b_max", 8.0)))
    fp = tails.sample_fixed_point(model, sc.budget("replicas", 1_000_000), rng,
                                  sc.budget("pool_size", 200_000), sc.budget("pool_iterations", 60))
    rep = tails.compute_cb(model, fp, b, sc.budget("cb_budget", 1_000_000), rng,
                           hill_k_fraction=float(sc.param("hill_k_fraction", 1e-5)),
                           top_count=int(sc.param("top_count", 500)))
    body = rep.to_json()
    grid = dict(body.pop("grid"))
    write_csv(os.path.join(out, "cb_grid.csv"), ["y", "mu_minus_n", "se"],
              zip(grid.pop("y"), grid.pop("mu_minus_n"), grid.pop("se")))
    body["grid"] = grid
    body.pop("plateau")
    body["plateau"] = {"median": rep.plateau.median, "spread": rep.plateau.spread,
                       "octave_ratio": rep.plateau.octave_ratio}
    body["agreement"] = rep.agreement()
    write_csv(os.path.join(out, "plateau.csv"), ["x", "xb_tail"], rep.plateau.rows())
    files = ["cb_grid.csv", "plateau.csv"]
    if sc.param("write_samples", False):
        fp.dist.to_csv(os.path.join(out, "samples.csv"))
        files.append("samples.csv")
    return {"moment": moment.to_json(), "fixed_point": fp.to_json(), "tail": body}, files


def cmd_stable(sc: Scenario, rng, out):
    alpha = float(sc.param("alpha", 0.5))
    base_law = _law(sc.param("base"), PointMass(1.0))
    s = _grid(sc)
    grid = lst.stable_transform(lst.LSTGrid.from_law(base_law, s), alpha)
    base = montecarlo.from_law(base_law, sc.budget("replicas", 100_000), rng)
    sample = lst.stable_transform(base, alpha, rng)
    emp = sample.lst(grid.s)
    dev = float(np.max(np.abs(emp - grid.values)))
    back = lst.inverse_stable_transform(grid, alpha)
    fit = lst.estimate_alpha_m(grid)
    result = {
        "alpha": alpha,
        "alpha_m": {"alpha": Estimate.exact(fit.alpha), "m": Estimate.exact(fit.m),
                    "residual": fit.residual},
        "empirical_sup_deviation": Estimate.monte_carlo(dev, 1.0 / math.sqrt(sample.size)),
        "round_trip_error": Estimate.exact(float(np.max(np.abs(back.tail - lst.LSTGrid.from_law(
            base_law, s).tail)))),
    }
    write_csv(os.path.join(out, "stable_lst.csv"), ["s", "phi", "phi_empirical"],
              zip(grid.s, grid.values, emp))
    return result, ["stable_lst.csv"]


def cmd_pitman_yor(sc: Scenario, rng, out):
    raw = sc.param("problem")
    if raw is None:
        raise ConfigError("pitman-yor needs parameters.problem")
    prob = pitmanyor.PitmanYorProblem.from_json(raw)
    drift = pitmanyor.check_existence(prob, rng=rng)
    result = {"problem": prob.to_json(), "drift": drift.to_json()}
    h = pitmanyor.nu_to_h(prob, sc.budget("resolution", pitmanyor.DEFAULT_RESOLUTION))
    result["h_integral"] = Estimate.exact(h.integral())
    x, H = pitmanyor.tabulate_inverse(prob, sc.budget("resolution", pitmanyor.DEFAULT_RESOLUTION))
    write_csv(os.path.join(out, "h_inverse.csv"), ["x", "h_inverse"], zip(x, H))
    t = np.unique(np.concatenate([H[np.isfinite(H)], [0.0]]))
    write_csv(os.path.join(out, "h.csv"), ["t", "h"], zip(t, h(t)))
    files = ["h_inverse.csv", "h.csv"]
    if drift.verdict != criteria.NEGATIVE:
        raise pitmanyor.NoNontrivialSolution(f"log A walk is {drift.verdict}; only delta_0 solves")
    mu = pitmanyor.solve_pitman_yor(prob, sc.budget("replicas", 100_000), sc.budget("iterations", 30), rng)
    chk = pitmanyor.verify_size_bias_equation(mu, prob, sc.budget("verify_replicas", 100_000), rng,
                                              float(sc.param("threshold", pitmanyor.KS_THRESHOLD)))
    result["solution"] = _sample_summary(mu.samples)
    result["solution"]["stabilized"] = mu.diagnostics["stabilized"]
    result["size_bias_check"] = chk.to_json()
    result["size_bias_check"]["ks"] = Estimate.monte_carlo(chk.ks, math.sqrt(2.0 / chk.replicas))
    mu.to_csv(os.path.join(out, "samples.csv"))
    files.append("samples.csv")
    return result, files


def compare_samples(a_path, b_path) -> dict:
    try:
        a = montecarlo.EmpiricalDist.from_csv(a_path)
        b = montecarlo.EmpiricalDist.from_csv(b_path)
    except (OSError, ValueError) as exc:
        raise ConfigError(f"cannot read samples: {exc}") from exc
    out = {"ks": Estimate.exact(montecarlo.ks_distance(a, b)), "files": {}}
    for name, path, d in (("a", a_path, a), ("b", b_path, b)):
        entry = {"path": os.path.basename(str(path)), "size": d.size,
                 "mean": Estimate.from_samples(d.samples) if d.weights is None else Estimate.exact(d.mean()),
                 "second_moment": Estimate.exact(d.moment(2.0))}
        try:
            entry["hill"] = tails.hill_estimate(d).to_json()
        except TooFewSamples:
            entry["hill"] = None
        out["files"][name] = entry
    return out


def cmd_report(sc: Scenario, rng, out):
    a, b = sc.param("a"), sc.param("b")
    if a is None or b is None:
        raise ConfigError("report needs parameters.a and parameters.b")
    return compare_samples(a, b), []


HANDLERS = {
    "criteria": cmd_criteria,
    "iterate-lst": cmd_iterate_lst,
    "simulate": cmd_simulate,
    "spine": cmd_spine,
    "tails": cmd_tails,
    "stable": cmd_stable,
    "pitman-yor": cmd_pitman_yor,
    "report": cmd_report,
}


# ---------------------------------------------------------------------------
# driver


def _finish(stage, out):
    os.makedirs(out, exist_ok=True)
    for name in sorted(os.listdir(stage)):
        shutil.move(os.path.join(stage, name), os.path.join(out, name))


def execute(sc: Scenario, stream=None) -> int:
    stream = stream or sys.stderr
    parent = os.path.dirname(os.path.abspath(sc.output)) or "."
    os.makedirs(parent, exist_ok=True)
    stage = tempfile.mkdtemp(prefix=".smoothfix-", dir=parent)
    try:
        rng = np.random.default_rng(sc.seed)
        report = {"artifact": {"name": "smoothfix", "version": __version__},
                  "command": sc.command, "seed": sc.seed, "config": sc.raw}
        try:
            result, files = HANDLERS[sc.command](sc, rng, stage)
            report.update(status="ok", results=result, files=sorted(files))
            code = 0
        except VerdictError as exc:
            for name in os.listdir(stage):
                os.remove(os.path.join(stage, name))
            report.update(status="verdict-failure", error={"type": type(exc).__name__, "message": str(exc)})
            code = exc.exit_code
            print(f"verdict: {type(exc).__name__}: {exc}", file=stream)
        dump_json(report, os.path.join(stage, "report.json"))
        _finish(stage, sc.output)
        return code
    finally:
        shutil.rmtree(stage, ignore_errors=True)


def run(config_path, seed=None, out=None, workers=None, stream=None) -> int:
    """Run one scenario file; returns the process exit code."""
    stream = stream or sys.stderr
    try:
        if workers is not None:
            parallel.set_default_workers(workers)
        try:
            with open(config_path, encoding="utf-8") as fh:
                raw = json.load(fh)
        except (OSError, json.JSONDecodeError) as exc:
            raise ConfigError(f"cannot load config {config_path}: {exc}") from exc
        sc = parse_scenario(raw, seed, out)
        return execute(sc, stream)
    except SmoothfixError as exc:
        print(f"error: {type(exc).__name__}: {exc}", file=stream)
        return exc.exit_code
    except (ValueError, KeyError, TypeError, OSError) as exc:
        print(f"error: {type(exc).__name__}: {exc}", file=stream)
        return 2
    finally:
        parallel.set_default_workers(None)


def report_files(a, b, out=None, stream=None) -> int:
    stream = stream or sys.stdout
    try:
        res = compare_samples(a, b)
    except SmoothfixError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return exc.exit_code
    text = json.dumps(_clean(res), sort_keys=True, indent=2)
    if out:
        os.makedirs(out, exist_ok=True)
        dump_json(res, os.path.join(out, "report.json"))
    print(text, file=stream)
    return 0


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="smoothfix", description=__doc__.splitlines()[0])
    p.add_argument("--version", action="version", version=f"smoothfix {__version__}")
    sub = p.add_subparsers(dest="action", required=True)
    r = sub.add_parser("run", help="execute a scenario config")
    r.add_argument("config")
    r.add_argument("--seed", type=int)
    r.add_argument("--out")
    r.add_argument("--workers", type=int, help=f"worker threads (fallback: ${parallel.ENV_VAR})")
    c = sub.add_parser("report", help="compare two sample CSV files")
    c.add_argument("a")
    c.add_argument("b")
    c.add_argument("--out")
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    if args.action == "run":
        return run(args.config, args.seed, args.out, args.workers)
    return report_files(args.a, args.b, args.out)


if __name__ == "__main__":
    sys.exit(main())
