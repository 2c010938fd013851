"""Average potential outcome estimators: REG, IPW, DR and MR.

Estimator names follow ``KIND_<mask>``: the mask has one digit per postulated
propensity model followed by one digit per outcome model, ``1`` meaning the
model is used. With two of each, ``DR_1001`` combines the first propensity
model with the second outcome model and ``MR_1111`` uses all four.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .data import Dataset
from .elweights import SolverFailure, build_constraints, mr_weights, solve_rho
from .glm import PROB_CLAMP, OutcomeFit, predict_or_matrix
from .gps import GpsModel, gps_pmf_matrix

__all__ = [
    "EstimationError",
    "EmptyGroupError",
    "EstimatorSpec",
    "ApoEstimate",
    "KINDS",
    "parse_estimator",
    "ipw_mean",
    "dr_mean",
    "reg_apo",
    "ipw_apo",
    "dr_apo",
    "mr_apo",
    "ate",
    "evaluate",
]

KINDS = ("REG", "IPW", "DR", "MR")


class EstimationError(RuntimeError):
    """An estimator cannot produce a value for this level."""


class EmptyGroupError(EstimationError):
    pass


@dataclass(frozen=True)
class EstimatorSpec:
    kind: str
    ps_mask: tuple
    or_mask: tuple

    def __post_init__(self) -> None:
        object.__setattr__(self, "ps_mask", tuple(bool(b) for b in self.ps_mask))
        object.__setattr__(self, "or_mask", tuple(bool(b) for b in self.or_mask))
        if self.kind not in KINDS:
            raise ValueError(f"unknown estimator kind {self.kind!r}; expected one of {KINDS}")
        n_ps, n_or = sum(self.ps_mask), sum(self.or_mask)
        needs = {"DR": (1, 1), "IPW": (1, 0), "REG": (0, 1)}
        if self.kind in needs and (n_ps, n_or) != needs[self.kind]:
            want = needs[self.kind]
            raise ValueError(
                f"{self.kind} needs exactly {want[0]} propensity and {want[1]} outcome model(s)"
            )
        if self.kind == "MR" and n_ps + n_or == 0:
            raise ValueError("MR needs at least one model")

    @property
    def name(self) -> str:
        digits = "".join("1" if b else "0" for b in self.ps_mask + self.or_mask)
        return f"{self.kind}_{digits}"

    @property
    def ps_indices(self) -> list:
        return [i for i, b in enumerate(self.ps_mask) if b]

    @property
    def or_indices(self) -> list:
        return [i for i, b in enumerate(self.or_mask) if b]


def parse_estimator(name: str, n_ps: int = 2, n_or: int = 2) -> EstimatorSpec:
    """Parse ``KIND_digits`` for a family of ``n_ps`` propensity and ``n_or`` outcome models."""
    kind, sep, digits = name.strip().partition("_")
    kind = kind.upper()
    if not sep or kind not in KINDS:
        raise ValueError(f"cannot parse estimator name {name!r}; expected e.g. 'MR_1111'")
    if len(digits) != n_ps + n_or or set(digits) - {"0", "1"}:
        raise ValueError(
            f"estimator {name!r} needs {n_ps + n_or} mask digits of 0/1 "
            f"({n_ps} propensity then {n_or} outcome)"
        )
    bits = [c == "1" for c in digits]
    return EstimatorSpec(kind, tuple(bits[:n_ps]), tuple(bits[n_ps:]))


@dataclass(frozen=True)
class ApoEstimate:
    level: int
    value: float
    estimator: str = ""
    diagnostics: dict = field(default_factory=dict)


def ipw_mean(indicator, y, pi) -> float:
    """``n^-1 sum I_i Y_i / pi_i``."""
    indicator = np.asarray(indicator, dtype=np.float64)
    return float(np.mean(indicator * np.asarray(y, dtype=np.float64) / np.asarray(pi, dtype=np.float64)))


def dr_mean(indicator, y, pi, a) -> float:
    """``n^-1 sum [I_i Y_i / pi_i - (I_i - pi_i) / pi_i * a_i]``."""
    indicator = np.asarray(indicator, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    pi = np.asarray(pi, dtype=np.float64)
    a = np.asarray(a, dtype=np.float64)
    return float(np.mean(indicator * y / pi - (indicator - pi) / pi * a))


def _require_group(ds: Dataset, level: int) -> np.ndarray:
    ind = ds.indicator(level)
    if not ind.any():
        raise EmptyGroupError(f"no units observed at treatment level {level}")
    return ind


def _gps_with_clamp_count(model: GpsModel, ds: Dataset, level: int):
    raw = gps_pmf_matrix(model, ds.covariates, level, clamp=False)
    clamped = gps_pmf_matrix(model, ds.covariates, level)
    return clamped, int(np.count_nonzero(raw < PROB_CLAMP) + np.count_nonzero(raw > 1.0 - PROB_CLAMP))


def reg_apo(ds: Dataset, or_fit: OutcomeFit, level: int, name: str = "REG") -> ApoEstimate:
    _require_group(ds, level)
    value = float(np.mean(predict_or_matrix(or_fit, ds.covariates, level)))
    return ApoEstimate(int(level), value, name)


def ipw_apo(ds: Dataset, gps_model: GpsModel, level: int, name: str = "IPW") -> ApoEstimate:
    ind = _require_group(ds, level)
    pi, clamps = _gps_with_clamp_count(gps_model, ds, level)
    return ApoEstimate(int(level), ipw_mean(ind, ds.outcomes, pi), name, {"clamp_events": clamps})


def dr_apo(ds: Dataset, gps_model: GpsModel, or_fit: OutcomeFit, level: int, name: str = "DR") -> ApoEstimate:
    ind = _require_group(ds, level)
    pi, clamps = _gps_with_clamp_count(gps_model, ds, level)
    a = predict_or_matrix(or_fit, ds.covariates, level)
    return ApoEstimate(int(level), dr_mean(ind, ds.outcomes, pi, a), name, {"clamp_events": clamps})


def mr_apo(
    ds: Dataset,
    ps_models: Sequence[GpsModel],
    or_fits: Sequence[OutcomeFit],
    level: int,
    name: str = "MR",
) -> ApoEstimate:
    """Weighted group mean ``sum_{i in group} w_i Y_i`` with calibration weights.

    Raises :class:`SolverFailure` when the weight problem degenerates.
    """
    _require_group(ds, level)
    cs = build_constraints(ds, ps_models, or_fits, level)
    sol = solve_rho(cs)
    if not sol.converged:
        raise SolverFailure(f"{name} level {level}: weight solver status {sol.status!r}", sol)
    w = mr_weights(sol, cs)
    value = float(w @ ds.outcomes[cs.group.members])
    diag = sol.diagnostics()
    diag["group_size"] = cs.group.size
    return ApoEstimate(int(level), value, name, diag)


def ate(apo_a: ApoEstimate, apo_b: ApoEstimate) -> float:
    """Difference ``apo_a - apo_b`` of two estimates from the same estimator."""
    if apo_a.estimator != apo_b.estimator:
        raise ValueError(
            f"cannot difference estimates from {apo_a.estimator!r} and {apo_b.estimator!r}"
        )
    return apo_a.value - apo_b.value


def evaluate(
    spec: EstimatorSpec,
    ds: Dataset,
    ps_models: Sequence[GpsModel],
    or_fits: Sequence[OutcomeFit],
    level: int,
) -> ApoEstimate:
    """Run ``spec`` at ``level`` against fitted families indexed by its masks."""
    if len(spec.ps_mask) != len(ps_models) or len(spec.or_mask) != len(or_fits):
        raise ValueError(
            f"{spec.name} expects {len(spec.ps_mask)} propensity and {len(spec.or_mask)} outcome models"
        )
    ps = [ps_models[i] for i in spec.ps_indices]
    ors = [or_fits[i] for i in spec.or_indices]
    if spec.kind == "REG":
        return reg_apo(ds, ors[0], level, spec.name)
    if spec.kind == "IPW":
        return ipw_apo(ds, ps[0], level, spec.name)
    if spec.kind == "DR":
        return dr_apo(ds, ps[0], ors[0], level, spec.name)
    return mr_apo(ds, ps, ors, level, spec.name)
