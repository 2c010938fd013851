"""Simulation design, replication engine and summary tables.

Data-generating process::

    X ~ U[x_low, x_high]
    D | X ~ Bin(trials, expit(c0 + c1 X + c2 X^2))
    Y | X, D ~ N(b0 + b1 D + b2 D^2 + b3 X + b4 X^2, outcome_variance)

Random numbers come from numpy's PCG64. Replication ``r`` draws from
``SeedSequence(base_seed, spawn_key=(r,))``, so each replication's stream
depends only on ``(base_seed, r)`` and not on scheduling.
"""

from __future__ import annotations

import csv
import io
import math
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from typing import Optional, Union

import numpy as np

from .data import Dataset
from .elweights import SolverFailure
from .estimators import EstimationError, EstimatorSpec, evaluate, parse_estimator
from .family import DEFAULT_FAMILY, ModelFamily
from .glm import GlmError, PropensityFit, fit_binomial, fit_gaussian
from .gps import GpsModel

__all__ = [
    "DgpSpec",
    "ExperimentConfig",
    "ExperimentReport",
    "TABLE1_ESTIMATORS",
    "REFERENCE_TABLE1",
    "simulate_dataset",
    "true_apo",
    "true_gps_model",
    "replication_seed",
    "run_replication",
    "run_experiment",
    "reference_checks",
]

TABLE1_ESTIMATORS = (
    "DR_1010",
    "DR_1001",
    "DR_0110",
    "DR_0101",
    "MR_1101",
    "MR_1110",
    "MR_1011",
    "MR_0111",
    "MR_1111",
)

# Published Monte Carlo results (R=1000, n=10000): av_est, emp_var, bias per level 0..3.
REFERENCE_TABLE1 = {
    "Truth": (7.253, 8.903, 9.853, 10.103),
    "DR_1010": ((7.255, 8.902, 9.853, 10.103), (0.008, 0.006, 0.005, 0.008), (0.002, -0.001, 0.000, 0.000)),
    "DR_1001": ((7.238, 8.903, 9.850, 10.109), (0.073, 0.015, 0.012, 0.071), (-0.015, 0.001, -0.002, 0.006)),
    "DR_0110": ((7.253, 8.901, 9.853, 10.103), (0.008, 0.006, 0.005, 0.008), (0.000, -0.001, 0.000, 0.000)),
    "DR_0101": ((7.010, 8.784, 9.969, 10.479), (0.071, 0.014, 0.011, 0.061), (-0.243, -0.118, 0.117, 0.377)),
    "MR_1101": ((7.251, 8.899, 9.852, 10.098), (0.009, 0.006, 0.005, 0.009), (-0.002, -0.004, -0.001, -0.005)),
    "MR_1110": ((7.247, 8.899, 9.848, 10.099), (0.008, 0.005, 0.005, 0.009), (-0.006, -0.004, -0.005, -0.006)),
    "MR_1011": ((7.250, 8.905, 9.854, 10.105), (0.008, 0.006, 0.005, 0.009), (-0.003, 0.002, 0.002, 0.002)),
    "MR_0111": ((7.249, 8.899, 9.851, 10.098), (0.008, 0.005, 0.005, 0.008), (-0.004, -0.003, -0.002, -0.005)),
    "MR_1111": ((7.248, 8.899, 9.850, 10.096), (0.008, 0.005, 0.005, 0.009), (-0.005, -0.004, -0.003, -0.007)),
}

BIAS_TOL = 0.03
MISSPEC_TOL = 0.08
TRUTH_TOL = 0.01
VAR_RATIO = (0.5, 2.0)
CONSISTENT_ESTIMATORS = ("DR_1010", "DR_1001", "DR_0110", "MR_1101", "MR_1110", "MR_1011", "MR_0111", "MR_1111")


@dataclass(frozen=True)
class DgpSpec:
    n: int = 10000
    x_low: float = -2.5
    x_high: float = 2.5
    trials: int = 3
    ps_coef: tuple = (-0.5, 0.1, -0.2)
    or_coef: tuple = (1.0, 2.0, -0.35, 2.0, 3.0)
    outcome_variance: float = 2.0

    def __post_init__(self) -> None:
        if int(self.n) < 1:
            raise ValueError("n must be >= 1")
        if not self.outcome_variance > 0:
            raise ValueError("outcome_variance must be positive")
        if not self.x_high > self.x_low:
            raise ValueError("x_high must exceed x_low")
        if int(self.trials) < 1:
            raise ValueError("trials must be >= 1")
        if len(self.ps_coef) != 3 or len(self.or_coef) != 5:
            raise ValueError("ps_coef needs 3 and or_coef needs 5 coefficients")

    def propensity(self, x):
        c0, c1, c2 = self.ps_coef
        return 1.0 / (1.0 + np.exp(-(c0 + c1 * x + c2 * x * x)))

    def mean_outcome(self, x, d):
        b0, b1, b2, b3, b4 = self.or_coef
        return b0 + b1 * d + b2 * d * d + b3 * x + b4 * x * x

    def with_n(self, n: int) -> "DgpSpec":
        return DgpSpec(n, self.x_low, self.x_high, self.trials, self.ps_coef, self.or_coef, self.outcome_variance)


SeedLike = Union[int, np.random.SeedSequence, np.random.Generator]


def _generator(seed: SeedLike) -> np.random.Generator:
    if isinstance(seed, np.random.Generator):
        return seed
    if isinstance(seed, np.random.SeedSequence):
        return np.random.Generator(np.random.PCG64(seed))
    return np.random.Generator(np.random.PCG64(np.random.SeedSequence(int(seed))))


def replication_seed(base_seed: int, r: int) -> np.random.SeedSequence:
    return np.random.SeedSequence(int(base_seed), spawn_key=(int(r),))


def simulate_dataset(dgp: DgpSpec, seed: SeedLike) -> Dataset:
    """Draw ``dgp.n`` units: covariates, then treatments, then outcomes."""
    rng = _generator(seed)
    x = rng.uniform(dgp.x_low, dgp.x_high, size=dgp.n)
    d = rng.binomial(dgp.trials, dgp.propensity(x))
    y = rng.normal(dgp.mean_outcome(x, d), math.sqrt(dgp.outcome_variance))
    return Dataset(y, d, x.reshape(-1, 1), dgp.trials + 1)


def true_apo(level: int, dgp: DgpSpec = DgpSpec()) -> float:
    """``E[Y(level)]`` in closed form using the first two moments of the uniform law."""
    if not 0 <= int(level) <= dgp.trials:
        raise ValueError(f"level {level} out of range 0..{dgp.trials}")
    a, b = dgp.x_low, dgp.x_high
    ex = 0.5 * (a + b)
    ex2 = (b - a) ** 2 / 12.0 + ex**2
    b0, b1, b2, b3, b4 = dgp.or_coef
    d = float(level)
    return b0 + b1 * d + b2 * d * d + b3 * ex + b4 * ex2


def true_gps_model(dgp: DgpSpec = DgpSpec()) -> GpsModel:
    """The generating propensity as a (non-fitted) GPS model."""
    spec = DEFAULT_FAMILY.ps[0]
    return GpsModel(PropensityFit(spec, np.array(dgp.ps_coef, dtype=np.float64), dgp.trials))


@dataclass(frozen=True)
class ExperimentConfig:
    dgp: DgpSpec = DgpSpec()
    replications: int = 200
    seed: int = 20240101
    estimators: tuple = TABLE1_ESTIMATORS
    family: ModelFamily = DEFAULT_FAMILY

    def __post_init__(self) -> None:
        object.__setattr__(self, "estimators", tuple(self.estimators))
        if int(self.replications) < 1:
            raise ValueError("replications must be >= 1")
        if not self.estimators:
            raise ValueError("estimator list is empty")
        for name in self.estimators:
            parse_estimator(name, len(self.family.ps), len(self.family.outcome))

    @property
    def specs(self) -> list:
        return [parse_estimator(e, len(self.family.ps), len(self.family.outcome)) for e in self.estimators]

    def to_json(self) -> dict:
        d = self.dgp
        return {
            "n": d.n,
            "replications": self.replications,
            "seed": self.seed,
            "estimators": list(self.estimators),
            "dgp": {
                "x_low": d.x_low,
                "x_high": d.x_high,
                "trials": d.trials,
                "ps_coef": list(d.ps_coef),
                "or_coef": list(d.or_coef),
                "outcome_variance": d.outcome_variance,
            },
            "family": self.family.to_json(),
            "rng": "numpy PCG64; replication r seeded by SeedSequence(seed, spawn_key=(r,))",
        }


@dataclass
class ReplicationResult:
    index: int
    estimates: np.ndarray  # estimators x levels, NaN where the cell failed
    iterations: np.ndarray  # solver iterations for MR cells, 0 otherwise
    min_slack: np.ndarray
    clamp_events: np.ndarray
    errors: list = field(default_factory=list)


def run_replication(cfg: ExperimentConfig, r: int) -> ReplicationResult:
    specs = cfg.specs
    q = cfg.dgp.trials + 1
    shape = (len(specs), q)
    est = np.full(shape, np.nan)
    iters = np.zeros(shape, dtype=np.int64)
    slack = np.full(shape, np.nan)
    clamps = np.zeros(shape, dtype=np.int64)
    errors = []

    ds = simulate_dataset(cfg.dgp, replication_seed(cfg.seed, r))
    ps_used = {i for s in specs for i in s.ps_indices}
    or_used = {i for s in specs for i in s.or_indices}
    ps_models, or_fits = [], []
    for i, spec in enumerate(cfg.family.ps):
        fitted = None
        if i in ps_used:
            try:
                fitted = GpsModel(fit_binomial(ds, spec))
            except GlmError as exc:
                errors.append(f"ps[{i}]: {exc}")
        ps_models.append(fitted)
    for i, spec in enumerate(cfg.family.outcome):
        fitted = None
        if i in or_used:
            try:
                fitted = fit_gaussian(ds, spec)
            except GlmError as exc:
                errors.append(f"or[{i}]: {exc}")
        or_fits.append(fitted)

    for e, spec in enumerate(specs):
        if any(ps_models[i] is None for i in spec.ps_indices) or any(
            or_fits[i] is None for i in spec.or_indices
        ):
            continue
        for level in range(q):
            try:
                res = evaluate(spec, ds, ps_models, or_fits, level)
            except (EstimationError, SolverFailure) as exc:
                errors.append(f"{spec.name} level {level}: {exc}")
                continue
            est[e, level] = res.value
            iters[e, level] = res.diagnostics.get("iterations", 0)
            slack[e, level] = res.diagnostics.get("min_slack", np.nan)
            clamps[e, level] = res.diagnostics.get("clamp_events", 0)
    return ReplicationResult(r, est, iters, slack, clamps, errors)


def _run_indexed(args):
    cfg, r = args
    return run_replication(cfg, r)


def _json_float(v: float) -> Optional[float]:
    return None if not math.isfinite(v) else float(v)


@dataclass
class ExperimentReport:
    config: ExperimentConfig
    truth: np.ndarray
    estimates: np.ndarray  # replications x estimators x levels
    iterations: np.ndarray
    min_slack: np.ndarray
    clamp_events: np.ndarray
    errors: list

    @property
    def estimator_names(self) -> tuple:
        return self.config.estimators

    @property
    def levels(self) -> list:
        return list(range(self.truth.shape[0]))

    @property
    def successes(self) -> np.ndarray:
        return np.sum(np.isfinite(self.estimates), axis=0)

    @property
    def failures(self) -> np.ndarray:
        return self.config.replications - self.successes

    @property
    def av_est(self) -> np.ndarray:
        with np.errstate(invalid="ignore"):
            return np.array(
                [[_mean(self.estimates[:, e, q]) for q in self.levels] for e in range(len(self.estimator_names))]
            )

    @property
    def emp_var(self) -> np.ndarray:
        """Unbiased sample variance; 0 where fewer than two replications succeeded."""
        return np.array(
            [[_var(self.estimates[:, e, q]) for q in self.levels] for e in range(len(self.estimator_names))]
        )

    @property
    def bias(self) -> np.ndarray:
        return self.av_est - self.truth[None, :]

    @property
    def variance_flag(self) -> np.ndarray:
        """True where the variance is undefined (fewer than two successes)."""
        return self.successes < 2

    def row(self, name: str) -> dict:
        e = self.estimator_names.index(name)
        return {
            "av_est": self.av_est[e],
            "emp_var": self.emp_var[e],
            "bias": self.bias[e],
            "failures": self.failures[e],
        }

    def to_json(self) -> dict:
        av, var, bias = self.av_est, self.emp_var, self.bias
        out = {
            "config": self.config.to_json(),
            "levels": self.levels,
            "truth": [float(t) for t in self.truth],
            "estimators": {},
            "errors": list(self.errors),
        }
        for e, name in enumerate(self.estimator_names):
            mr_cells = self.iterations[:, e, :]
            out["estimators"][name] = {
                "av_est": [_json_float(v) for v in av[e]],
                "emp_var": [_json_float(v) for v in var[e]],
                "bias": [_json_float(v) for v in bias[e]],
                "successes": [int(v) for v in self.successes[e]],
                "failures": [int(v) for v in self.failures[e]],
                "variance_flag": [bool(v) for v in self.variance_flag[e]],
                "diagnostics": {
                    "max_solver_iterations": [int(v) for v in mr_cells.max(axis=0)],
                    "min_barrier_slack": [_json_float(_nanmin(self.min_slack[:, e, q])) for q in self.levels],
                    "clamp_events": [int(v) for v in self.clamp_events[:, e, :].sum(axis=0)],
                },
            }
        return out

    def table_rows(self, digits: Optional[int] = 3) -> list:
        """Rows of the summary table: Truth, then AvEst/EmpVar/Bias per estimator."""

        def fmt(v):
            if not math.isfinite(v):
                return "NA"
            return f"{v:.{digits}f}" if digits is not None else repr(float(v))

        rows = [["Truth", ""] + [fmt(t) for t in self.truth]]
        av, var, bias = self.av_est, self.emp_var, self.bias
        for e, name in enumerate(self.estimator_names):
            rows.append([name, "AvEst"] + [fmt(v) for v in av[e]])
            rows.append([name, "EmpVar"] + [fmt(v) for v in var[e]])
            rows.append([name, "Bias"] + [fmt(v) for v in bias[e]])
        return rows

    def to_csv(self, digits: Optional[int] = 3) -> str:
        buf = io.StringIO()
        writer = csv.writer(buf, lineterminator="\n")
        writer.writerow(["estimator", "statistic"] + [str(q) for q in self.levels])
        writer.writerows(self.table_rows(digits))
        return buf.getvalue()

    def format_table(self) -> str:
        rows = [["", ""] + [str(q) for q in self.levels]] + self.table_rows(3)
        widths = [max(len(r[c]) for r in rows) for c in range(len(rows[0]))]
        lines = []
        for i, r in enumerate(rows):
            lines.append("  ".join(cell.ljust(widths[c]) if c < 2 else cell.rjust(widths[c]) for c, cell in enumerate(r)))
            if i == 0 or i == 1:
                lines.append("-" * len(lines[-1]))
        return "\n".join(lines)


def _mean(v: np.ndarray) -> float:
    v = v[np.isfinite(v)]
    return float(np.mean(v)) if v.size else float("nan")


def _var(v: np.ndarray) -> float:
    v = v[np.isfinite(v)]
    if v.size == 0:
        return float("nan")
    if v.size < 2:
        return 0.0
    return float(np.var(v, ddof=1))


def _nanmin(v: np.ndarray) -> float:
    v = v[np.isfinite(v)]
    return float(v.min()) if v.size else float("nan")


def run_experiment(cfg: ExperimentConfig, workers: int = 1) -> ExperimentReport:
    """Run every replication and stack results in replication order.

    Statistics are computed from the index-ordered stack, so they do not depend
    on ``workers`` or completion order.
    """
    indices = range(cfg.replications)
    if workers <= 1:
        results = [run_replication(cfg, r) for r in indices]
    else:
        chunk = max(1, cfg.replications // (4 * workers))
        with ProcessPoolExecutor(max_workers=workers) as pool:
            results = list(pool.map(_run_indexed, [(cfg, r) for r in indices], chunksize=chunk))
    results.sort(key=lambda res: res.index)
    truth = np.array([true_apo(q, cfg.dgp) for q in range(cfg.dgp.trials + 1)])
    errors = [f"replication {res.index}: {msg}" for res in results for msg in res.errors]
    return ExperimentReport(
        config=cfg,
        truth=truth,
        estimates=np.stack([res.estimates for res in results]),
        iterations=np.stack([res.iterations for res in results]),
        min_slack=np.stack([res.min_slack for res in results]),
        clamp_events=np.stack([res.clamp_events for res in results]),
        errors=errors,
    )


def reference_checks(report: ExperimentReport) -> list:
    """Compare a report with the published reference values.

    Returns one dict per check with keys ``check``, ``estimator``, ``level``,
    ``value``, ``target``, ``tolerance`` and ``passed``. Estimators absent from
    the report are skipped.
    """
    checks = []
    names = report.estimator_names
    if len(report.levels) != 4:
        return checks
    for q in report.levels:
        truth_ref = REFERENCE_TABLE1["Truth"][q]
        checks.append(
            _check("truth", "Truth", q, report.truth[q], truth_ref, TRUTH_TOL,
                   abs(report.truth[q] - truth_ref) <= TRUTH_TOL)
        )
    bias = report.bias
    var = report.emp_var
    for name in CONSISTENT_ESTIMATORS:
        if name not in names:
            continue
        e = names.index(name)
        for q in report.levels:
            b = bias[e, q]
            checks.append(_check("bias", name, q, b, 0.0, BIAS_TOL, bool(abs(b) <= BIAS_TOL)))
    if "DR_0101" in names:
        e = names.index("DR_0101")
        for q in report.levels:
            ref = REFERENCE_TABLE1["DR_0101"][2][q]
            b = bias[e, q]
            checks.append(_check("misspecified_bias", "DR_0101", q, b, ref, MISSPEC_TOL, bool(abs(b - ref) <= MISSPEC_TOL)))
    if "DR_1010" in names:
        e = names.index("DR_1010")
        lo, hi = VAR_RATIO
        for q in report.levels:
            ref = REFERENCE_TABLE1["DR_1010"][1][q]
            v = var[e, q]
            checks.append(
                _check("variance", "DR_1010", q, v, ref, [lo * ref, hi * ref], bool(lo * ref <= v <= hi * ref))
            )
    return checks


def _check(kind, name, level, value, target, tol, passed) -> dict:
    return {
        "check": kind,
        "estimator": name,
        "level": int(level),
        "value": _json_float(float(value)),
        "target": float(target),
        "tolerance": tol,
        "passed": bool(passed),
    }
