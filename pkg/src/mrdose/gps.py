"""Generalized propensity scores from a fitted binomial model.

``pi(d_q | x) = C(N, d_q) p(x)^d_q (1 - p(x))^(N - d_q)`` with ``p`` the fitted
success probability.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy import special

from .glm import PROB_CLAMP, PropensityFit, design_matrix, inverse_link

__all__ = ["GpsModel", "success_prob", "success_probs", "gps_pmf", "gps_pmf_matrix", "gps_table"]


@dataclass(frozen=True)
class GpsModel:
    fit: PropensityFit

    @property
    def trials(self) -> int:
        return self.fit.trials

    @property
    def name(self) -> str:
        return self.fit.spec.name


def _linear_predictor(model: GpsModel, x: np.ndarray) -> np.ndarray:
    return design_matrix(model.fit.spec.features, x) @ model.fit.coefficients


def success_probs(model: GpsModel, x, clamp: bool = True) -> np.ndarray:
    """Success probability for each row of the covariate matrix ``x``."""
    p = inverse_link(model.fit.spec.link, _linear_predictor(model, x))
    if clamp:
        p = np.clip(p, PROB_CLAMP, 1.0 - PROB_CLAMP)
    return p


def success_prob(model: GpsModel, x) -> float:
    x = np.atleast_1d(np.asarray(x, dtype=np.float64)).reshape(1, -1)
    return float(success_probs(model, x)[0])


def _pmf(p: np.ndarray, trials: int, level: int) -> np.ndarray:
    if not 0 <= level <= trials:
        raise ValueError(f"level {level} out of range 0..{trials}")
    # exponent 0 with base 0 evaluates to 1, which is what the pmf needs
    return special.comb(trials, level, exact=True) * p**level * (1.0 - p) ** (trials - level)


def gps_pmf_matrix(model: GpsModel, x, level: int, clamp: bool = True) -> np.ndarray:
    """``pi(level | x_i)`` for each row of ``x``; clamped below at 1e-12."""
    pmf = _pmf(success_probs(model, x, clamp=clamp), model.trials, int(level))
    return np.maximum(pmf, PROB_CLAMP) if clamp else pmf


def gps_pmf(model: GpsModel, x, level: int, clamp: bool = True) -> float:
    x = np.atleast_1d(np.asarray(x, dtype=np.float64)).reshape(1, -1)
    return float(gps_pmf_matrix(model, x, level, clamp=clamp)[0])


def gps_table(model: GpsModel, x, clamp: bool = True) -> np.ndarray:
    """n x (N + 1) matrix of level probabilities."""
    p = success_probs(model, x, clamp=clamp)
    table = np.column_stack([_pmf(p, model.trials, q) for q in range(model.trials + 1)])
    return np.maximum(table, PROB_CLAMP) if clamp else table
