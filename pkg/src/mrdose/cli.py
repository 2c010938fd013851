"""Command-line interface: ``mrdose {simulate,estimate,reproduce-table1}``."""

from __future__ import annotations

import argparse
import csv
import io
import itertools
import json
import logging
import math
import sys
from pathlib import Path
from typing import Optional, Sequence

from .data import DataError, load_csv, write_csv
from .elweights import SolverFailure
from .estimators import KINDS, EstimationError, ate, evaluate, parse_estimator
from .family import DEFAULT_FAMILY, ModelFamily, load_family
from .glm import GlmError, fit_binomial, fit_gaussian
from .gps import GpsModel
from .sim import DgpSpec, ExperimentConfig, TABLE1_ESTIMATORS, reference_checks, run_experiment, simulate_dataset

log = logging.getLogger("mrdose")

DEFAULT_SEED = 20240101
DESK_REPLICATIONS = 200
FULL_REPLICATIONS = 1000


class CommandError(RuntimeError):
    """A command-level failure (exit code 1)."""


def valid_estimator_names(n_ps: int, n_or: int) -> list:
    names = []
    for bits in itertools.product("01", repeat=n_ps + n_or):
        digits = "".join(bits)
        for kind in KINDS:
            try:
                names.append(parse_estimator(f"{kind}_{digits}", n_ps, n_or).name)
            except ValueError:
                pass
    order = {k: i for i, k in enumerate(KINDS)}
    return sorted(set(names), key=lambda s: (order[s.split("_")[0]], s))


def _positive_int(text: str) -> int:
    try:
        value = int(text)
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected a positive integer, got {text!r}") from None
    if value < 1:
        raise argparse.ArgumentTypeError(f"expected a positive integer, got {value}")
    return value


def _estimator_list(values: Optional[Sequence[str]]) -> list:
    if not values:
        return []
    return [v.strip() for item in values for v in item.split(",") if v.strip()]


def _resolve_estimators(parser, names, family: ModelFamily, default):
    names = names or list(default)
    n_ps, n_or = len(family.ps), len(family.outcome)
    valid = valid_estimator_names(n_ps, n_or)
    specs = []
    for name in names:
        try:
            specs.append(parse_estimator(name, n_ps, n_or))
        except ValueError as exc:
            parser.error(f"{exc}\nvalid estimator names: {', '.join(valid)}")
    return specs


def _load_models(parser, path: Optional[str]) -> ModelFamily:
    if path is None:
        return DEFAULT_FAMILY
    try:
        return load_family(path)
    except (OSError, ValueError) as exc:
        parser.error(f"cannot read model family {path}: {exc}")


def _dgp_from_args(args) -> DgpSpec:
    base = DgpSpec()
    return DgpSpec(
        n=args.n,
        ps_coef=tuple(args.ps_coef) if args.ps_coef else base.ps_coef,
        or_coef=tuple(args.or_coef) if args.or_coef else base.or_coef,
    )


def _emit(text: str, output: Optional[str]) -> None:
    if output is None or output == "-":
        sys.stdout.write(text)
        if not text.endswith("\n"):
            sys.stdout.write("\n")
    else:
        Path(output).write_text(text if text.endswith("\n") else text + "\n", encoding="utf-8")


def _clean(obj):
    """JSON-safe copy: numpy scalars to Python, non-finite floats to null."""
    if isinstance(obj, dict):
        return {str(k): _clean(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_clean(v) for v in obj]
    if hasattr(obj, "item") and not isinstance(obj, (str, bytes)):
        obj = obj.item()
    if isinstance(obj, float) and not math.isfinite(obj):
        return None
    return obj


# ---------------------------------------------------------------- simulate


def cmd_simulate(args, parser) -> int:
    ds = simulate_dataset(_dgp_from_args(args), args.seed)
    try:
        write_csv(ds, args.output)
    except OSError as exc:
        raise CommandError(f"cannot write {args.output}: {exc}") from None
    log.info("wrote %d rows to %s", ds.n, args.output)
    return 0


# ---------------------------------------------------------------- estimate


def estimate_dataset(ds, family: ModelFamily, specs) -> dict:
    """Fit the referenced models and evaluate every estimator at every level."""
    ps_used = sorted({i for s in specs for i in s.ps_indices})
    or_used = sorted({i for s in specs for i in s.or_indices})
    ps_models = [None] * len(family.ps)
    or_fits = [None] * len(family.outcome)
    model_report = {"ps": {}, "or": {}}
    for i in ps_used:
        spec = family.ps[i]
        try:
            fit = fit_binomial(ds, spec)
        except GlmError as exc:
            model_report["ps"][spec.name or f"ps{i + 1}"] = {"error": str(exc)}
            continue
        ps_models[i] = GpsModel(fit)
        model_report["ps"][spec.name or f"ps{i + 1}"] = {
            "link": spec.link,
            "coefficients": [float(c) for c in fit.coefficients],
            "converged": fit.converged,
            "iterations": fit.iterations,
        }
    for i in or_used:
        spec = family.outcome[i]
        try:
            fit = fit_gaussian(ds, spec)
        except GlmError as exc:
            model_report["or"][spec.name or f"or{i + 1}"] = {"error": str(exc)}
            continue
        or_fits[i] = fit
        model_report["or"][spec.name or f"or{i + 1}"] = {
            "coefficients": [float(c) for c in fit.coefficients],
            "residual_variance": fit.residual_variance,
        }

    levels = list(range(ds.q_levels))
    out = {
        "dataset": {
            "n": ds.n,
            "q_levels": ds.q_levels,
            "levels": {str(q): q for q in levels},
            "group_sizes": [int(m) for m in ds.group_sizes()],
        },
        "models": model_report,
        "estimators": {},
    }
    for spec in specs:
        cells = []
        results = {}
        missing = [i for i in spec.ps_indices if ps_models[i] is None] + [
            i for i in spec.or_indices if or_fits[i] is None
        ]
        for q in levels:
            cell = {"level": q, "apo": None, "ate_vs_0": None, "status": "ok", "diagnostics": {}}
            if missing:
                cell["status"] = "failed"
                cell["error"] = "a required model failed to fit"
            else:
                try:
                    res = evaluate(spec, ds, ps_models, or_fits, q)
                    results[q] = res
                    cell["apo"] = res.value
                    cell["diagnostics"] = res.diagnostics
                except (EstimationError, SolverFailure, DataError) as exc:
                    cell["status"] = "failed"
                    cell["error"] = str(exc)
            cells.append(cell)
        if 0 in results:
            for cell in cells:
                if cell["level"] in results:
                    cell["ate_vs_0"] = ate(results[cell["level"]], results[0])
        out["estimators"][spec.name] = cells
    return out


def _estimate_csv(report: dict) -> str:
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(["estimator", "level", "apo", "ate_vs_0", "status"])
    for name, cells in report["estimators"].items():
        for c in cells:
            writer.writerow(
                [
                    name,
                    c["level"],
                    "" if c["apo"] is None else repr(c["apo"]),
                    "" if c["ate_vs_0"] is None else repr(c["ate_vs_0"]),
                    c["status"],
                ]
            )
    return buf.getvalue()


def _estimate_table(report: dict) -> str:
    lines = [f"n={report['dataset']['n']}  Q={report['dataset']['q_levels']}  group sizes={report['dataset']['group_sizes']}"]
    lines.append(f"{'estimator':<10} {'level':>5} {'APO':>10} {'ATE vs 0':>10}  status")
    for name, cells in report["estimators"].items():
        for c in cells:
            apo = "NA" if c["apo"] is None else f"{c['apo']:.3f}"
            eff = "NA" if c["ate_vs_0"] is None else f"{c['ate_vs_0']:.3f}"
            lines.append(f"{name:<10} {c['level']:>5} {apo:>10} {eff:>10}  {c['status']}")
    return "\n".join(lines)


def cmd_estimate(args, parser) -> int:
    family = _load_models(parser, args.models)
    specs = _resolve_estimators(parser, _estimator_list(args.estimators), family, TABLE1_ESTIMATORS)
    try:
        ds = load_csv(args.data, q_levels=args.q)
    except (OSError, DataError) as exc:
        raise CommandError(str(exc)) from None
    for spec in family.ps:
        if spec.trials is not None and spec.trials != ds.q_levels - 1:
            raise CommandError(f"propensity model {spec.name!r} declares {spec.trials} trials, data have Q-1={ds.q_levels - 1}")
    report = estimate_dataset(ds, family, specs)
    if args.format == "json":
        text = json.dumps(_clean(report), indent=2, allow_nan=False)
    elif args.format == "csv":
        text = _estimate_csv(report)
    else:
        text = _estimate_table(report)
    _emit(text, args.output)
    failed = sum(c["status"] != "ok" for cells in report["estimators"].values() for c in cells)
    if failed:
        log.warning("%d estimator cell(s) failed", failed)
    return 1 if (args.strict and failed) else 0


# ------------------------------------------------------- reproduce-table1


def cmd_reproduce_table1(args, parser) -> int:
    family = _load_models(parser, args.models)
    specs = _resolve_estimators(parser, _estimator_list(args.estimators), family, TABLE1_ESTIMATORS)
    replications = args.replications or (FULL_REPLICATIONS if args.full else DESK_REPLICATIONS)
    cfg = ExperimentConfig(
        dgp=_dgp_from_args(args),
        replications=replications,
        seed=args.seed,
        estimators=tuple(s.name for s in specs),
        family=family,
    )
    report = run_experiment(cfg, workers=args.workers)
    payload = report.to_json()
    if replications < 2:
        payload["comparison"] = {"skipped": "variance undefined with fewer than 2 replications"}
        verdict = None
    else:
        checks = reference_checks(report)
        verdict = all(c["passed"] for c in checks) if checks else None
        payload["comparison"] = {
            "verdict": None if verdict is None else ("PASS" if verdict else "FAIL"),
            "checks": checks,
        }

    if args.format == "json":
        text = json.dumps(_clean(payload), indent=2, allow_nan=False)
    elif args.format == "csv":
        text = report.to_csv()
    else:
        text = report.format_table()
        comp = payload["comparison"]
        if "checks" in comp:
            text += "\n\n" + "\n".join(
                f"{'PASS' if c['passed'] else 'FAIL'}  {c['check']:<18} {c['estimator']:<8} level {c['level']}  "
                f"value={c['value']:.4f}  target={c['target']:.4f}  tol={c['tolerance']}"
                for c in comp["checks"]
            )
            text += f"\n\nverdict: {comp['verdict']}"
        else:
            text += f"\n\ncomparison skipped: {comp['skipped']}"
    _emit(text, args.output)
    failed_cells = int(report.failures.sum())
    if failed_cells:
        log.warning("%d estimator cell(s) failed across replications", failed_cells)
    if args.strict and (failed_cells or verdict is False):
        return 1
    return 0


# ------------------------------------------------------------------ parser


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="mrdose",
        description="Multiply robust and doubly robust average potential outcome estimation "
        "for multivalued treatments.",
    )
    parser.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = parser.add_subparsers(dest="command", required=True)

    def dgp_args(p, n_default):
        p.add_argument("--n", type=_positive_int, default=n_default, help="sample size")
        p.add_argument("--seed", type=int, default=DEFAULT_SEED)
        p.add_argument("--ps-coef", type=float, nargs=3, metavar=("C0", "C1", "C2"),
                       help="logit success-probability coefficients (default -0.5 0.1 -0.2)")
        p.add_argument("--or-coef", type=float, nargs=5, metavar=("B0", "B1", "B2", "B3", "B4"),
                       help="outcome mean coefficients for 1, d, d^2, x, x^2 (default 1 2 -0.35 2 3)")

    p_sim = sub.add_parser("simulate", help="write a simulated dataset to CSV")
    dgp_args(p_sim, 10000)
    p_sim.add_argument("-o", "--output", required=True, help="output CSV path")
    p_sim.set_defaults(func=cmd_simulate)

    p_est = sub.add_parser("estimate", help="estimate APOs from a CSV dataset")
    p_est.add_argument("data", help="CSV with header y,d,x1,...,xp")
    p_est.add_argument("--models", help="model-family JSON (default: built-in family)")
    p_est.add_argument("--estimators", action="append", help="comma-separated names, e.g. MR_1111,DR_1010")
    p_est.add_argument("--q", type=_positive_int, help="number of treatment levels (default 1 + max(d))")
    p_est.add_argument("--format", choices=("json", "csv", "table"), default="json")
    p_est.add_argument("-o", "--output", help="output path (default stdout)")
    p_est.add_argument("--strict", action="store_true", help="exit 1 if any estimator cell fails")
    p_est.set_defaults(func=cmd_estimate)

    p_rep = sub.add_parser("reproduce-table1", help="run the Monte Carlo study and compare with reference values")
    dgp_args(p_rep, 10000)
    p_rep.add_argument("--replications", type=_positive_int, help=f"default {DESK_REPLICATIONS}")
    p_rep.add_argument("--full", action="store_true", help=f"use {FULL_REPLICATIONS} replications")
    p_rep.add_argument("--workers", type=_positive_int, default=1)
    p_rep.add_argument("--models", help="model-family JSON (default: built-in family)")
    p_rep.add_argument("--estimators", action="append", help="comma-separated names (default: all nine)")
    p_rep.add_argument("--format", choices=("json", "csv", "table"), default="json")
    p_rep.add_argument("-o", "--output", help="output path (default stdout)")
    p_rep.add_argument("--strict", action="store_true", help="exit 1 on failed cells or a FAIL verdict")
    p_rep.set_defaults(func=cmd_reproduce_table1)
    return parser


def main(argv: Optional[Sequence[str]] = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s: %(message)s")
    try:
        return args.func(args, parser)
    except CommandError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
