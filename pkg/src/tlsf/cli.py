"""Command-line front end: ``tlsf eval|optimize|retrieve|fit|report``.

Exit codes: 0 success, 2 user or configuration error, 3 numerical failure.
Set ``TLSF_LOG`` to error, info or debug for log output on stderr.
"""
from __future__ import annotations

import argparse
import csv
import json
import logging
import os
import sys
from concurrent.futures import ProcessPoolExecutor
from pathlib import Path

import numpy as np

from .bayesopt import BoConfig, GpError, OptimizationAborted, OptimizationTrace, SkillProblem, gp_slices, optimize
from .harness import BUILDERS, ConfigError, ExperimentConfig, bundled, signed_distance
from .robustness import RobustnessConfig, clause_breakdown, robustness
from .skill import (
    BoundsError,
    Layout,
    SkillModel,
    SkillModelError,
    current_values,
    fit_model,
    read_demo_csv,
    retrieve_chain,
    state_sequence,
)
from .stl import RegionSpec, Signal, StlError, load_predicate_table, parse_stl, to_text

EXIT_OK, EXIT_USER, EXIT_NUMERIC = 0, 2, 3
LOG_LEVELS = {"error": logging.ERROR, "info": logging.INFO, "debug": logging.DEBUG}

log = logging.getLogger("tlsf")


class UsageError(ValueError):
    pass


def _fmt(v: float) -> str:
    """Nine significant digits, trailing zeros kept."""
    return format(float(v), "#.9g")


def _setup_logging() -> None:
    level = os.environ.get("TLSF_LOG", "error").lower()
    if level not in LOG_LEVELS:
        raise UsageError(f"TLSF_LOG must be one of {sorted(LOG_LEVELS)}, got {level!r}")
    logging.basicConfig(level=LOG_LEVELS[level], stream=sys.stderr, format="%(levelname)s %(name)s: %(message)s")


def _read_json(path) -> dict:
    path = Path(path)
    try:
        return json.loads(path.read_text())
    except FileNotFoundError:
        raise UsageError(f"{path}: no such file") from None
    except json.JSONDecodeError as exc:
        raise UsageError(f"{path}: {exc}") from None


# ----------------------------------------------------------------------- eval


def load_spec(path):
    """Formula from a JSON file with ``stl``, ``predicates`` and optional regions.

    Experiment configs work too: their scene regions are used.
    """
    d = _read_json(path)
    if "stl" not in d:
        raise UsageError(f"{path}: missing 'stl'")
    regions = d.get("regions", d.get("scene", {}).get("regions", []))
    table = load_predicate_table(d.get("predicates", {}), [RegionSpec.from_dict(r) for r in regions])
    return parse_stl(d["stl"], table)


def cmd_eval(args) -> int:
    phi = load_spec(args.spec)
    sig = Signal.from_csv(args.signal, dt=args.dt)
    cfg = RobustnessConfig(args.semantics or "space", 1.0 if args.nu is None else args.nu)
    r = robustness(phi, sig, args.t, cfg)
    verdict = "SAT" if r.value > 0 else "UNSAT"
    print(f"{_fmt(r.value)} {verdict}")
    for clause, v in clause_breakdown(phi, sig, args.t, cfg):
        print(f"  {_fmt(v.value):>16}  {to_text(clause)}")
    return EXIT_OK


# ------------------------------------------------------------------- optimize


def resolve_experiment(source: str) -> ExperimentConfig:
    """A config path, or the name of a bundled experiment (``phi1``, ``phi1.json``)."""
    p = Path(source)
    if p.exists():
        return ExperimentConfig.load(p)
    stem = p.name[:-5] if p.name.endswith(".json") else p.name
    if stem in BUILDERS:
        return bundled(stem)
    raise UsageError(f"{source}: no such config file or bundled experiment (known: {', '.join(sorted(BUILDERS))})")


def _apply_overrides(exp: ExperimentConfig, semantics, nu, iterations) -> ExperimentConfig:
    rc = exp.robustness
    exp.robustness = RobustnessConfig(semantics or rc.semantics, rc.nu if nu is None else nu)
    if iterations is not None:
        bo = exp.bo.to_dict()
        bo["N"] = iterations
        bo["M"] = min(bo["M"], iterations)
        exp.bo = BoConfig.from_dict(bo)
    return exp


def _transitions(models) -> list:
    out = []
    for m in models:
        out.append(
            {
                "transition": m.transition.tolist(),
                "edges": [[int(i), int(j), float(m.transition[i, j])] for i, j in zip(*np.nonzero(m.transition))],
                "state_sequence": [[int(k), int(n)] for k, n in state_sequence(m)],
            }
        )
    return out


def write_params(path, labels, values) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["name", "value"])
        for lab, v in zip(labels, values):
            w.writerow([lab, repr(float(v))])


def read_params(path, labels) -> np.ndarray:
    """Parameter values from a ``name,value`` file or from a trace CSV's best row."""
    with open(path, newline="") as fh:
        rows = [r for r in csv.reader(fh) if r]
    if not rows:
        raise UsageError(f"{path}: empty parameter file")
    if rows[0][:2] == ["iter", "reward"]:
        data = OptimizationTrace.read_csv(path)
        if data["delta"].shape[1] != len(labels):
            raise UsageError(f"{path}: trace has {data['delta'].shape[1]} parameters, model layout has {len(labels)}")
        return data["delta"][int(np.argmax(data["reward"]))]
    if rows[0] != ["name", "value"]:
        raise UsageError(f"{path}: expected a 'name,value' header or a trace CSV")
    given = {}
    for r in rows[1:]:
        try:
            given[r[0]] = float(r[1])
        except (IndexError, ValueError):
            raise UsageError(f"{path}: bad row {r!r}") from None
    unknown = sorted(set(given) - set(labels))
    missing = [lab for lab in labels if lab not in given]
    if unknown or missing:
        raise UsageError(f"{path}: unknown parameters {unknown}, missing {missing}")
    return np.array([given[lab] for lab in labels])


def run_experiment(exp: ExperimentConfig, seed: int, out: Path) -> dict:
    """Optimise ``exp`` with ``seed`` and write every artifact into ``out``."""
    out.mkdir(parents=True, exist_ok=True)
    bo = exp.bo.to_dict()
    bo["seed"] = seed
    cfg = BoConfig.from_dict(bo)
    problem = exp.problem()
    phi = exp.formula()
    run = exp.executor()
    try:
        trace = optimize(problem, None, phi, run, cfg, exp.robustness)
    except OptimizationAborted as exc:
        if exc.trace is not None and len(exc.trace):
            exc.trace.to_csv(out / "trace.csv")
        raise
    best = problem.apply(trace.best_delta)
    traj = retrieve_chain(best)
    sig = run(traj)
    paths = {
        "config": out / "config.json",
        "trace": out / "trace.csv",
        "best_params": out / "best_params.csv",
        "best_trajectory": out / "best_trajectory.csv",
        "signed_distance": out / "signed_distance.csv",
        "gp_slices": out / "gp_slices.json",
        "transitions": out / "transitions.json",
    }
    exp.save(paths["config"])
    trace.to_csv(paths["trace"])
    write_params(paths["best_params"], trace.labels, trace.best_delta)
    traj.to_csv(paths["best_trajectory"])
    with open(paths["signed_distance"], "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["t"] + [r.name for r in exp.scene.regions])
        cols = [signed_distance(traj.positions, r) for r in exp.scene.regions]
        for i, t in enumerate(traj.times):
            w.writerow([repr(float(t))] + [repr(float(c[i])) for c in cols])
    paths["gp_slices"].write_text(json.dumps(gp_slices(trace), indent=1) + "\n")
    paths["transitions"].write_text(
        json.dumps({"before": _transitions(exp.models), "after": _transitions(best)}, indent=1) + "\n"
    )
    initial = np.concatenate([current_values(m, lay) for m, lay in zip(exp.models, exp.layouts)])
    report = {
        "experiment": exp.name,
        "config_digest": exp.digest(),
        "trace_digest": trace.digest(),
        "seed": seed,
        "robustness": {"semantics": exp.robustness.semantics, "nu": exp.robustness.nu},
        "best_iteration": trace.best_index,
        "best_reward": trace.best_reward,
        "best_delta": dict(zip(trace.labels, map(float, trace.best_delta))),
        "initial_delta": dict(zip(trace.labels, map(float, initial))),
        "clauses": [
            {"clause": to_text(c), "value": v.value} for c, v in clause_breakdown(phi, sig, 0.0, exp.robustness)
        ],
        "max_force": float(np.max(sig["f"])),
        "iterations": [
            {"iter": i, "reward": r, "best_reward": float(b)}
            for i, (r, b) in enumerate(zip(trace.rewards, trace.best_so_far()))
        ],
        "artifacts": {k: str(v) for k, v in paths.items()},
    }
    (out / "report.json").write_text(json.dumps(report, indent=1) + "\n")
    return report


def _replicate(job) -> dict:
    source, overrides, seed, out = job
    exp = _apply_overrides(resolve_experiment(source), *overrides)
    return run_experiment(exp, seed, Path(out))


def _print_report(rep: dict) -> None:
    print(f"{rep['experiment']} seed {rep['seed']}: best reward {_fmt(rep['best_reward'])} at iteration {rep['best_iteration']}")
    print(f"  {'parameter':<12} {'initial':>12} {'best':>12} {'change':>12}")
    for lab, v in rep["best_delta"].items():
        v0 = rep["initial_delta"][lab]
        print(f"  {lab:<12} {v0:>12.6g} {v:>12.6g} {v - v0:>+12.6g}")


def cmd_optimize(args) -> int:
    overrides = (args.semantics, args.nu, args.iterations)
    exp = _apply_overrides(resolve_experiment(args.config), *overrides)
    out = Path(args.out)
    seed = exp.bo.seed if args.seed is None else args.seed
    if args.replicates < 1:
        raise UsageError("--replicates must be at least 1")
    if args.replicates == 1:
        _print_report(run_experiment(exp, seed, out))
        return EXIT_OK
    jobs = [(args.config, overrides, seed + r, str(out / f"seed_{seed + r}")) for r in range(args.replicates)]
    with ProcessPoolExecutor(max_workers=min(args.replicates, os.cpu_count() or 1)) as pool:
        reports = list(pool.map(_replicate, jobs))
    for rep in reports:
        _print_report(rep)
    return EXIT_OK


# ------------------------------------------------------------------- retrieve


def cmd_retrieve(args) -> int:
    d = _read_json(args.model) if Path(args.model).exists() else None
    if d is not None and "means" in d:
        models = [SkillModel.from_dict(d)]
        if args.params is not None:
            if args.layout is None:
                layouts = [Layout(tuple(_layout_entries_from_params(args.params)))]
            else:
                layouts = [Layout.from_dict(_read_json(args.layout))]
        else:
            layouts = [Layout()]
    else:
        exp = resolve_experiment(args.model)
        models, layouts = exp.models, exp.layouts
    if args.params is not None:
        problem = SkillProblem(models, layouts)
        values = read_params(args.params, problem.labels())
        models = problem.apply(values)
    traj = retrieve_chain(models)
    traj.to_csv(args.out)
    print(f"wrote {len(traj)} samples to {args.out}")
    return EXIT_OK


_LABEL_KIND = (("muS", "duration"), ("mu", "mean"), ("A", "transition"))


def _layout_entries_from_params(path) -> list:
    """Recover layout entries from ``mu0.x``/``muS0``/``A01`` style labels."""
    with open(path, newline="") as fh:
        rows = [r for r in csv.reader(fh) if r]
    if not rows or rows[0] != ["name", "value"]:
        raise UsageError(f"{path}: a bare model needs a 'name,value' parameter file (or --layout)")
    entries = []
    for r in rows[1:]:
        lab = r[0]
        try:
            if lab.startswith("muS"):
                entries.append(("duration", int(lab[3:])))
            elif lab.startswith("mu"):
                k, axis = lab[2:].split(".")
                entries.append(("mean", (int(k), "xyz".index(axis))))
            elif lab.startswith("A") and len(lab) == 3:
                entries.append(("transition", (int(lab[1]), int(lab[2]))))
            else:
                raise ValueError
        except ValueError:
            raise UsageError(f"{path}: cannot interpret parameter name {lab!r}") from None
    return entries


# ------------------------------------------------------------------------ fit


def cmd_fit(args) -> int:
    t, P = read_demo_csv(args.demo)
    m = fit_model(t, P, args.K, dt=args.dt, horizon=args.horizon)
    m.save(args.out)
    print(f"fitted K={m.K} model over {m.horizon:g} s to {args.out}")
    return EXIT_OK


# --------------------------------------------------------------------- report


def cmd_report(args) -> int:
    root = Path(args.run)
    found = sorted(root.glob("**/report.json"))
    if not found:
        raise UsageError(f"{root}: no report.json found")
    for path in found:
        rep = _read_json(path)
        data = OptimizationTrace.read_csv(path.parent / "trace.csv")
        best = data["best_reward"]
        if np.any(np.diff(best) < 0):
            raise UsageError(f"{path.parent}: best_reward column is not monotone")
        first = next((i for i, r in enumerate(data["reward"]) if r > 0), None)
        print(
            f"{path.parent}: {rep['experiment']} seed {rep['seed']}  iterations {len(best)}  "
            f"best {_fmt(best[-1])}  first satisfied {first if first is not None else '-'}  "
            f"digest {rep['trace_digest'][:12]}"
        )
        for c in rep["clauses"]:
            print(f"  {_fmt(c['value']):>16}  {c['clause']}")
    return EXIT_OK


# ------------------------------------------------------------------------ main


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="tlsf", description="STL-driven refinement of demonstrated skills.")
    sub = ap.add_subparsers(dest="command", required=True)

    def semantics(p, default_note):
        p.add_argument("--semantics", choices=("space", "new"), default=None, help=f"robustness semantics ({default_note})")
        p.add_argument("--nu", type=float, default=None, help="sharpness of the smooth conjunction")

    p = sub.add_parser("eval", help="robustness of a specification on a signal CSV")
    p.add_argument("spec", help="JSON with stl, predicates and optional regions")
    p.add_argument("signal", help="CSV with a t column and one column per channel")
    p.add_argument("--t", type=float, default=0.0, help="evaluation time (s)")
    p.add_argument("--dt", type=float, default=None, help="sample period if the CSV has no t column")
    semantics(p, "default space")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("optimize", help="Bayesian optimisation of an experiment")
    p.add_argument("config", help="experiment JSON, or phi1/phi2/phi3")
    p.add_argument("--seed", type=int, default=None)
    p.add_argument("--replicates", type=int, default=1, help="independent seeds seed..seed+n-1 in parallel")
    p.add_argument("--iterations", type=int, default=None, help="override the evaluation budget N")
    p.add_argument("--out", default="run")
    semantics(p, "default from config")
    p.set_defaults(func=cmd_optimize)

    p = sub.add_parser("retrieve", help="trajectory of a model, optionally with a parameter overlay")
    p.add_argument("model", help="model JSON, experiment JSON, or phi1/phi2/phi3")
    p.add_argument("--params", default=None, help="name,value CSV or a trace CSV (best row)")
    p.add_argument("--layout", default=None, help="layout JSON for a bare model")
    p.add_argument("--out", default="trajectory.csv")
    p.set_defaults(func=cmd_retrieve)

    p = sub.add_parser("fit", help="fit a skill model to one demonstration")
    p.add_argument("demo", help="CSV with t,x,y,z columns")
    p.add_argument("--K", type=int, required=True)
    p.add_argument("--dt", type=float, default=0.05)
    p.add_argument("--horizon", type=float, default=None)
    p.add_argument("--out", default="model.json")
    p.set_defaults(func=cmd_fit)

    p = sub.add_parser("report", help="summarise run directories written by optimize")
    p.add_argument("run")
    p.set_defaults(func=cmd_report)
    return ap


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return EXIT_OK if exc.code == 0 else EXIT_USER
    try:
        _setup_logging()
        return args.func(args)
    except (GpError, OptimizationAborted, np.linalg.LinAlgError, FloatingPointError) as exc:
        print(f"tlsf: numerical failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except (UsageError, ConfigError, StlError, SkillModelError, BoundsError, OSError, ValueError, KeyError) as exc:
        print(f"tlsf: error: {exc}", file=sys.stderr)
        return EXIT_USER


if __name__ == "__main__":
    sys.exit(main())
