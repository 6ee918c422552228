"""Command-line front end: ``survdtr {simulate,fit,evaluate,cv,bench}``.

Exit status is 0 on success, 2 on a usage error and 1 when the command
fails; failures print a single diagnostic line on stderr.  Every command
that writes files also writes a ``manifest.json`` recording the arguments,
seed, configuration hash and library versions.
"""
from __future__ import annotations

import argparse
import hashlib
import json
import logging
import os
import platform
import sys
from pathlib import Path

import numpy as np

from . import __version__
from .dataset import DataError, build_time_grid, format_float, load_dir, write_long_csv
from .estimator import km_value_hard
from .geometry import PolicySet
from .optimizer import FitConfig, fit_policy
from .propensity import FittedPropensity, UniformPropensity, fit_propensity_models
from .simbench import ScenarioSpec, format_table, run_benchmark, simulate
from .tuning import TuningGrid, cross_validate

log = logging.getLogger("survdtr")


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(message)


def _threads(value) -> int:
    if value is not None:
        return max(1, int(value))
    env = os.environ.get("DTR_THREADS")
    if env:
        return max(1, int(env))
    return os.cpu_count() or 1


def _read_json(path) -> dict:
    path = Path(path)
    if not path.is_file():
        raise UsageError(f"no such file: {path}")
    with open(path) as fh:
        return json.load(fh)


def _config_hash(*docs) -> str:
    blob = json.dumps(docs, sort_keys=True, default=str).encode()
    return hashlib.sha256(blob).hexdigest()


def _write_manifest(out_dir: Path, command: str, argv, seed, configs, outputs) -> None:
    manifest = {
        "command": command,
        "argv": list(argv),
        "seed": seed,
        "config_sha256": _config_hash(*configs),
        "versions": {
            "survdtr": __version__,
            "python": platform.python_version(),
            "numpy": np.__version__,
        },
        "outputs": sorted(outputs),
    }
    with open(out_dir / "manifest.json", "w") as fh:
        json.dump(manifest, fh, indent=2, sort_keys=True)
        fh.write("\n")


def _write_json(path: Path, doc) -> None:
    with open(path, "w") as fh:
        json.dump(doc, fh, indent=2)
        fh.write("\n")


def _propensity(kind: str, data, stages: int):
    """``uniform``, ``fitted`` (fit on ``data``) or a path to a saved model JSON."""
    if kind == "uniform":
        return UniformPropensity(data.K)
    if kind == "fitted":
        return fit_propensity_models(data, stages)
    return FittedPropensity.from_dict(_read_json(kind))


# ---------------------------------------------------------------------------


def cmd_simulate(args, argv) -> None:
    spec = ScenarioSpec(
        example_id=args.example,
        n_train=args.n,
        censor_rate=args.censor,
        t_g=args.tg,
        seed=args.seed,
        index_convention=args.index_convention,
    )
    data, truth = simulate(spec)
    out = Path(args.out)
    write_long_csv(data, out)
    truth_doc = truth.to_dict()
    truth_doc["scenario"] = {k: v for k, v in vars(spec).items()}
    _write_json(out / "truth.json", truth_doc)
    _write_manifest(
        out, "simulate", argv, args.seed, [truth_doc["scenario"]],
        ["subjects.csv", "stages.csv", "design.json", "truth.json"],
    )
    print(f"wrote {data.n} subjects to {out} (censoring {1 - data.event.mean():.3f}, c0 {truth.c0:.6g})")


def cmd_fit(args, argv) -> None:
    doc = _read_json(args.config)
    prop_kind = doc.pop("propensity", args.propensity)
    n_stages = doc.pop("n_stages", None)
    if args.tg is not None:
        doc["t_g"] = args.tg
    if args.seed is not None:
        doc["seed"] = args.seed
    if "t_g" not in doc:
        raise UsageError("fit configuration needs t_g (in the config file or via --tg)")
    config = FitConfig.from_dict(doc)
    data = load_dir(args.train)
    grid = build_time_grid(data, config.t_g)
    stages = max(grid.m_g, n_stages or 0)
    prop = _propensity(prop_kind, data, stages)
    result = fit_policy(data, config, prop, n_stages=stages, grid=grid)
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    _write_json(out, result.policy.to_dict())
    summary = out.with_name(out.stem + ".summary.json")
    _write_json(summary, result.summary())
    outputs = [out.name, summary.name]
    if isinstance(prop, FittedPropensity):
        prop_path = out.with_name(out.stem + ".propensity.json")
        _write_json(prop_path, prop.to_dict())
        outputs.append(prop_path.name)
    _write_manifest(out.parent, "fit", argv, config.seed, [config.to_dict(), prop_kind], outputs)
    print(f"objective {result.objective:.6g} after {result.iterations} iterations (converged={result.converged})")


def cmd_evaluate(args, argv) -> None:
    policy = PolicySet.from_dict(_read_json(args.policy))
    data = load_dir(args.test)
    grid = build_time_grid(data, args.tg)
    prop = _propensity(args.propensity, data, grid.m_g)
    value = km_value_hard(data, policy, prop, grid)
    line = f"{format_float(args.tg)},{format_float(value)}"
    if args.out:
        out = Path(args.out)
        out.parent.mkdir(parents=True, exist_ok=True)
        with open(out, "w") as fh:
            fh.write("t_g,value\n" + line + "\n")
        _write_manifest(out.parent, "evaluate", argv, None, [args.tg, args.propensity], [out.name])
    print(format_float(value))


def cmd_cv(args, argv) -> None:
    grid_doc = _read_json(args.grid)
    base_doc = dict(grid_doc.pop("fit", {}))
    if args.config:
        base_doc.update(_read_json(args.config))
    prop_kind = base_doc.pop("propensity", args.propensity)
    n_stages = base_doc.pop("n_stages", None)
    if args.tg is not None:
        base_doc["t_g"] = args.tg
    if "t_g" not in base_doc:
        raise UsageError("cross-validation needs t_g (in the grid's 'fit' block, --config or --tg)")
    base = FitConfig.from_dict(base_doc)
    grid = TuningGrid.from_dict(grid_doc)
    data = load_dir(args.train)
    if prop_kind == "uniform":
        prop = UniformPropensity(data.K)
    elif prop_kind == "fitted":
        prop = fit_propensity_models
    else:
        raise UsageError("cv propensity must be 'uniform' or 'fitted'")
    result = cross_validate(data, grid, base, prop, n_stages=n_stages)
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    with open(out, "w") as fh:
        fh.write(result.to_csv())
    _write_manifest(out.parent, "cv", argv, grid.seed, [grid.to_dict(), base.to_dict(), prop_kind], [out.name])
    print(f"b={format_float(result.b)} lambda={format_float(result.lam)} score={format_float(result.best_score)}")


def cmd_bench(args, argv) -> None:
    doc = _read_json(args.config)
    scenarios = doc.get("scenarios") or [doc.get("scenario", {})]
    grid = TuningGrid.from_dict(doc["grid"]) if "grid" in doc else None
    fit_doc = doc.get("fit", {})
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    threads = _threads(args.threads)
    reports, outputs = [], []
    for i, sdoc in enumerate(scenarios):
        spec = ScenarioSpec.from_dict(sdoc)
        base = FitConfig.from_dict({**fit_doc, "t_g": spec.t_g})
        kwargs = {"base_config": base, "threads": threads}
        if grid is not None:
            kwargs["tuning_grid"] = grid
        report = run_benchmark(spec, **kwargs)
        reports.append(report)
        name = f"replications_{i + 1}_example{spec.example_id}_tg{spec.t_g:g}.csv"
        with open(out / name, "w") as fh:
            fh.write(report.to_csv())
        outputs.append(name)
        log.info("scenario %d done: mean %.4f sd %.4f", i + 1, report.mean, report.sd)
    with open(out / "summary.csv", "w") as fh:
        cols = ["example", "stage", "t_g", "censor_rate", "replications", "failed", "mean", "sd"]
        fh.write(",".join(cols) + "\n")
        for r in reports:
            row = r.row()
            fh.write(",".join(format_float(row[c]) if isinstance(row[c], float) else str(row[c]) for c in cols) + "\n")
    table = format_table(reports)
    with open(out / "table.txt", "w") as fh:
        fh.write(table)
    outputs += ["summary.csv", "table.txt"]
    seeds = [ScenarioSpec.from_dict(s).seed for s in scenarios]
    _write_manifest(out, "bench", argv, seeds, [doc], outputs)
    print(table, end="")


# ---------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="survdtr", description="Survival-maximizing dynamic treatment regimes.")
    parser.add_argument("-v", "--verbose", action="count", default=0)
    parser.add_argument("--threads", type=int, default=None, help="worker cap (default: DTR_THREADS or all cores)")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    p = sub.add_parser("simulate", help="draw a sample from one of the simulation designs")
    p.add_argument("--example", type=int, required=True, choices=(1, 2, 3, 4))
    p.add_argument("--n", type=int, required=True)
    p.add_argument("--censor", type=float, required=True, help="target censoring rate")
    p.add_argument("--tg", type=float, required=True)
    p.add_argument("--seed", type=int, required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--index-convention", default="stage_coord", choices=("stage_coord", "flat"))

    p = sub.add_parser("fit", help="learn a policy from training data")
    p.add_argument("--train", required=True)
    p.add_argument("--config", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--tg", type=float, default=None)
    p.add_argument("--seed", type=int, default=None)
    p.add_argument("--propensity", default="uniform", help="uniform, fitted, or a saved model JSON")

    p = sub.add_parser("evaluate", help="estimated survival at t_g of a policy on test data")
    p.add_argument("--policy", required=True)
    p.add_argument("--test", required=True)
    p.add_argument("--tg", type=float, required=True)
    p.add_argument("--propensity", default="uniform", help="uniform, fitted, or a saved model JSON")
    p.add_argument("--out", default=None, help="CSV file for the result")

    p = sub.add_parser("cv", help="cross-validate (b, lambda)")
    p.add_argument("--train", required=True)
    p.add_argument("--grid", required=True)
    p.add_argument("--config", default=None)
    p.add_argument("--tg", type=float, default=None)
    p.add_argument("--propensity", default="uniform", choices=("uniform", "fitted"))
    p.add_argument("--out", default="cv.csv")

    p = sub.add_parser("bench", help="replicated simulate/tune/fit/evaluate runs")
    p.add_argument("--config", required=True)
    p.add_argument("--out", default="bench")
    return parser


COMMANDS = {
    "simulate": cmd_simulate,
    "fit": cmd_fit,
    "evaluate": cmd_evaluate,
    "cv": cmd_cv,
    "bench": cmd_bench,
}


def run(argv=None) -> int:
    argv = list(sys.argv[1:] if argv is None else argv)
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except UsageError as exc:
        print(f"survdtr: usage error: {exc}", file=sys.stderr)
        return 2
    except SystemExit as exc:  # --help
        return int(exc.code or 0)
    logging.basicConfig(
        level=logging.WARNING - 10 * min(args.verbose, 2),
        format="%(levelname)s %(name)s: %(message)s",
    )
    try:
        COMMANDS[args.command](args, argv)
    except UsageError as exc:
        print(f"survdtr: usage error: {exc}", file=sys.stderr)
        return 2
    except (DataError, ValueError, KeyError, OSError, json.JSONDecodeError) as exc:
        msg = str(exc).splitlines()[0] if str(exc) else type(exc).__name__
        print(f"survdtr: error: {msg}", file=sys.stderr)
        return 1
    return 0


def main() -> None:
    sys.exit(run())


if __name__ == "__main__":
    main()
