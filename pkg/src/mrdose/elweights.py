"""Empirical-likelihood calibration weights for one treatment level.

For level ``d_q`` every postulated model contributes one centred constraint
column: propensity models give ``pi_j(d_q | X_i) - theta_j`` and outcome models
give ``a_k(X_i, d_q) - eta_k``, with the centring means taken over all ``n``
units. The multiplier ``rho`` minimises

    F(rho) = -(1/n) * sum_{i in group} log(1 + rho' g_i)

over the open polytope where every ``1 + rho' g_i`` is positive. At the
minimiser ``sum_{i in group} g_i / (1 + rho' g_i) = 0`` and the weights
``w_i ∝ 1 / (1 + rho' g_i)`` are positive, sum to one, and balance every
constraint column over the group.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np
from scipy import linalg

from .data import Dataset, TreatmentGroup, treatment_group
from .glm import OutcomeFit, predict_or_matrix
from .gps import GpsModel, gps_pmf_matrix

__all__ = [
    "DomainViolation",
    "SolverFailure",
    "ConstraintSystem",
    "MRSolution",
    "build_constraints",
    "constraint_system_from_matrix",
    "fn_objective",
    "fn_grad_hess",
    "solve_rho",
    "mr_weights",
]

BOUNDARY_MARGIN = 1e-10
DEGENERATE_SLACK = 1e-8
ARMIJO = 1e-4
GRAD_TOL = 1e-9
DECREMENT_TOL = 1e-12
MAX_ITER = 100
HESSIAN_RIDGE = 1e-12
ROOT_IDENTITY_TOL = 1e-6
_MAX_BACKTRACK = 60
_ESCAPE_BOUND = 1e12


class DomainViolation(ValueError):
    """``rho`` lies outside the region where every ``1 + rho' g_i > 0``."""


class SolverFailure(RuntimeError):
    """The weight problem has no usable solution for this group."""

    def __init__(self, message: str, solution: Optional["MRSolution"] = None):
        super().__init__(message)
        self.solution = solution


@dataclass(frozen=True, eq=False)
class ConstraintSystem:
    level: int
    g: np.ndarray
    theta: np.ndarray
    eta: np.ndarray
    group: TreatmentGroup

    @property
    def n(self) -> int:
        return int(self.g.shape[0])

    @property
    def dim(self) -> int:
        return int(self.g.shape[1])

    @property
    def group_rows(self) -> np.ndarray:
        return self.g[self.group.members]


@dataclass(frozen=True, eq=False)
class MRSolution:
    rho: np.ndarray
    weights: Optional[np.ndarray]
    objective: float
    grad_norm: float
    iterations: int
    status: str
    min_slack: float
    dropped_columns: tuple = field(default=())

    @property
    def converged(self) -> bool:
        return self.status == "converged"

    def diagnostics(self) -> dict:
        return {
            "status": self.status,
            "iterations": self.iterations,
            "grad_norm": self.grad_norm,
            "min_slack": self.min_slack,
            "objective": self.objective,
        }


def build_constraints(
    ds: Dataset,
    ps_models: Sequence[GpsModel],
    or_fits: Sequence[OutcomeFit],
    level: int,
) -> ConstraintSystem:
    """Assemble the centred constraint matrix, propensity columns first."""
    if not ps_models and not or_fits:
        raise ValueError("at least one propensity or outcome model is required")
    group = treatment_group(ds, level)
    cols = [gps_pmf_matrix(m, ds.covariates, level) for m in ps_models]
    cols += [predict_or_matrix(f, ds.covariates, level) for f in or_fits]
    raw = np.column_stack(cols)
    means = raw.mean(axis=0)
    g = raw - means
    g.setflags(write=False)
    J = len(ps_models)
    return ConstraintSystem(int(level), g, means[:J].copy(), means[J:].copy(), group)


def constraint_system_from_matrix(g, members=None, level: int = 0) -> ConstraintSystem:
    """Wrap a ready-made constraint matrix (no centring applied).

    ``members`` defaults to every row.
    """
    g = np.array(g, dtype=np.float64)
    if g.ndim == 1:
        g = g.reshape(-1, 1)
    g.setflags(write=False)
    if members is None:
        members = np.arange(g.shape[0])
    members = np.asarray(members, dtype=np.int64)
    members.setflags(write=False)
    return ConstraintSystem(level, g, np.empty(0), np.empty(0), TreatmentGroup(level, members))


def _slack(G: np.ndarray, rho: np.ndarray) -> np.ndarray:
    return 1.0 + G @ rho


def _check_domain(slack: np.ndarray) -> None:
    if slack.size and not np.all(slack > 0):
        raise DomainViolation(f"rho outside the domain: min(1 + rho'g_i) = {slack.min():.3g}")


def fn_objective(cs: ConstraintSystem, rho) -> float:
    rho = np.asarray(rho, dtype=np.float64)
    s = _slack(cs.group_rows, rho)
    _check_domain(s)
    return -float(np.sum(np.log(s))) / cs.n


def fn_grad_hess(cs: ConstraintSystem, rho):
    """Gradient and Hessian of the objective at ``rho``."""
    rho = np.asarray(rho, dtype=np.float64)
    G = cs.group_rows
    s = _slack(G, rho)
    _check_domain(s)
    scaled = G / s[:, None]
    grad = -scaled.sum(axis=0) / cs.n
    hess = (scaled.T @ scaled) / cs.n
    hess = 0.5 * (hess + hess.T)
    return grad, hess


def _newton_direction(grad: np.ndarray, hess: np.ndarray) -> np.ndarray:
    try:
        factor = linalg.cho_factor(hess, lower=True, check_finite=False)
        step = linalg.cho_solve(factor, -grad, check_finite=False)
        if np.all(np.isfinite(step)):
            return step
    except linalg.LinAlgError:
        pass
    ridged = hess + HESSIAN_RIDGE * np.eye(hess.shape[0])
    try:
        factor = linalg.cho_factor(ridged, lower=True, check_finite=False)
        return linalg.cho_solve(factor, -grad, check_finite=False)
    except linalg.LinAlgError:
        return -np.linalg.pinv(hess) @ grad


def _weights_from_slack(s: np.ndarray) -> np.ndarray:
    m = s.shape[0]
    inv = 1.0 / (m * s)
    return inv / inv.sum()


def _polish(G, n, rho, step, grad_norm):
    cand = rho + step
    s = _slack(G, cand)
    if np.min(s) < BOUNDARY_MARGIN:
        return None
    g = float(np.max(np.abs((G / s[:, None]).sum(axis=0) / n)))
    if g > grad_norm:
        return None
    return cand, s, g


def solve_rho(cs: ConstraintSystem) -> MRSolution:
    """Minimise the barrier objective by damped Newton from ``rho = 0``.

    Columns that vanish on every group row carry no information and keep
    ``rho = 0``; they are reported in ``dropped_columns``.
    """
    m = cs.group.size
    if m < 1:
        raise SolverFailure(f"level {cs.level}: treatment group is empty")
    G_full = cs.group_rows
    active = np.flatnonzero(np.any(G_full != 0.0, axis=0))
    dropped = tuple(int(c) for c in np.setdiff1d(np.arange(cs.dim), active))
    G = G_full[:, active]
    n = cs.n

    def objective(r):
        return -float(np.sum(np.log(_slack(G, r)))) / n

    rho = np.zeros(active.size)
    s = np.ones(m)
    f = 0.0
    status = "max_iter"
    it = 0
    grad_norm = 0.0
    for it in range(MAX_ITER + 1):
        scaled = G / s[:, None]
        grad = -scaled.sum(axis=0) / n
        grad_norm = float(np.max(np.abs(grad))) if grad.size else 0.0
        # every root has sum 1/(1 + rho'g_i) = m; a small gradient without it means rho is escaping
        at_root = abs(np.sum(1.0 / s) / m - 1.0) < ROOT_IDENTITY_TOL
        if grad_norm == 0.0 and at_root:
            status = "converged"
            break
        hess = (scaled.T @ scaled) / n
        step = _newton_direction(grad, 0.5 * (hess + hess.T))
        slope = float(grad @ step)
        if slope >= 0:
            step, slope = -grad, -float(grad @ grad)
        if at_root and (grad_norm < GRAD_TOL or math.sqrt(max(-slope, 0.0)) < DECREMENT_TOL):
            # the gradient test is absolute; one more Newton step makes rho accurate
            # when F is flat near the root
            polished = _polish(G, n, rho, step, grad_norm)
            if polished is not None:
                rho, s, grad_norm = polished
            status = "converged"
            break
        if it == MAX_ITER:
            break
        t = 1.0
        accepted = False
        for _ in range(_MAX_BACKTRACK):
            cand = rho + t * step
            s_cand = _slack(G, cand)
            if np.min(s_cand) >= BOUNDARY_MARGIN:
                f_cand = -float(np.sum(np.log(s_cand))) / n
                if f_cand < f + ARMIJO * t * slope:
                    accepted = True
                    break
            t *= 0.5
        if not accepted:
            # decrease below round-off of F: fall back to the full step if it shrinks the gradient
            cand = rho + step
            s_cand = _slack(G, cand)
            g_cand = None
            if np.min(s_cand) >= BOUNDARY_MARGIN:
                g_cand = -(G / s_cand[:, None]).sum(axis=0) / n
            if g_cand is None or np.max(np.abs(g_cand)) >= grad_norm:
                # round-off floor: accept the current point only if it is a root
                status = "converged" if grad_norm < GRAD_TOL and at_root else "degenerate"
                break
            f_cand = -float(np.sum(np.log(s_cand))) / n
        rho, s, f = cand, s_cand, f_cand
        if np.max(np.abs(rho)) * max(np.max(np.abs(G)), 1.0) > _ESCAPE_BOUND:
            status = "degenerate"
            break

    min_slack = float(np.min(s))
    if status == "converged" and min_slack < DEGENERATE_SLACK:
        status = "degenerate"
    full_rho = np.zeros(cs.dim)
    full_rho[active] = rho
    weights = _weights_from_slack(s) if status == "converged" else None
    return MRSolution(
        rho=full_rho,
        weights=weights,
        objective=objective(rho) if active.size else 0.0,
        grad_norm=grad_norm,
        iterations=it,
        status=status,
        min_slack=min_slack,
        dropped_columns=dropped,
    )


def mr_weights(sol: MRSolution, cs: ConstraintSystem) -> np.ndarray:
    """Normalised weights ``1 / (m (1 + rho' g_i))`` over the group members."""
    if not sol.converged:
        raise SolverFailure(f"level {cs.level}: solver status is {sol.status!r}", sol)
    s = _slack(cs.group_rows, sol.rho)
    _check_domain(s)
    return _weights_from_slack(s)
