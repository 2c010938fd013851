"""Feature maps and maximum-likelihood fits for the postulated models.

Propensity models are binomial GLMs over the treatment levels, ``D ~ Bin(N, p(x))``
with ``link(p(x)) = alpha' f(x)``. Outcome models are Gaussian with identity
link, ``E[Y | X, D] = beta' f(x, d)``, fitted by least squares.

Covariate indices in feature terms are 1-based (``x1`` is the first column),
matching the CSV header convention.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np
from scipy import special

from .data import Dataset

__all__ = [
    "GlmError",
    "SeparationError",
    "SingularDesignError",
    "FeatureTerm",
    "Intercept",
    "CovariatePower",
    "CovariateExp",
    "TreatmentPower",
    "PropensityModelSpec",
    "PropensityFit",
    "OutcomeModelSpec",
    "OutcomeFit",
    "PROB_CLAMP",
    "design_row",
    "design_matrix",
    "link_function",
    "inverse_link",
    "binomial_loglik",
    "fit_binomial",
    "fit_gaussian",
    "predict_or",
    "predict_or_matrix",
    "term_from_json",
    "term_to_json",
]

PROB_CLAMP = 1e-12
LINKS = ("logit", "cloglog")

_MAX_ITER = 100
_COEF_TOL = 1e-8
_LOGLIK_TOL = 1e-10
_MAX_HALVINGS = 30
_SEPARATION_NORM = 1e4
_RIDGE = 1e-10
_DIVERGENCE_STEP = 1e-3


class GlmError(RuntimeError):
    """Model fitting failed."""


class SeparationError(GlmError):
    """Coefficient norm diverged during IRLS."""


class SingularDesignError(GlmError):
    """Design (or weighted design) is rank deficient."""


@dataclass(frozen=True)
class FeatureTerm:
    """One basis function of a design row."""

    kind: str
    j: Optional[int] = None
    k: Optional[int] = None

    def __post_init__(self) -> None:
        if self.kind not in ("intercept", "covpow", "covexp", "trtpow"):
            raise ValueError(f"unknown feature kind {self.kind!r}")
        if self.kind in ("covpow", "covexp"):
            if self.j is None or int(self.j) < 1:
                raise ValueError(f"{self.kind} needs a covariate index j >= 1")
        if self.kind in ("covpow", "trtpow"):
            if self.k is None or int(self.k) != self.k or int(self.k) < 1:
                raise ValueError(f"{self.kind} needs a positive integer exponent k")

    @property
    def uses_treatment(self) -> bool:
        return self.kind == "trtpow"

    def label(self) -> str:
        if self.kind == "intercept":
            return "1"
        if self.kind == "covpow":
            return f"x{self.j}" if self.k == 1 else f"x{self.j}^{self.k}"
        if self.kind == "covexp":
            return f"exp(x{self.j})"
        return "d" if self.k == 1 else f"d^{self.k}"


def Intercept() -> FeatureTerm:
    return FeatureTerm("intercept")


def CovariatePower(j: int, k: int = 1) -> FeatureTerm:
    return FeatureTerm("covpow", j=j, k=k)


def CovariateExp(j: int) -> FeatureTerm:
    return FeatureTerm("covexp", j=j)


def TreatmentPower(k: int = 1) -> FeatureTerm:
    return FeatureTerm("trtpow", k=k)


def term_to_json(term: FeatureTerm) -> dict:
    out = {"kind": term.kind}
    if term.j is not None:
        out["j"] = int(term.j)
    if term.k is not None:
        out["k"] = int(term.k)
    return out


def term_from_json(obj: dict) -> FeatureTerm:
    if not isinstance(obj, dict) or "kind" not in obj:
        raise ValueError(f"feature term must be an object with a 'kind': {obj!r}")
    extra = set(obj) - {"kind", "j", "k"}
    if extra:
        raise ValueError(f"unexpected keys {sorted(extra)} in feature term {obj!r}")
    return FeatureTerm(obj["kind"], obj.get("j"), obj.get("k"))


@dataclass(frozen=True)
class PropensityModelSpec:
    """Binomial model for the success probability ``p(x)``; ``trials`` is ``Q - 1``."""

    link: str
    features: tuple
    trials: Optional[int] = None
    name: str = ""

    def __post_init__(self) -> None:
        object.__setattr__(self, "features", tuple(self.features))
        if self.link not in LINKS:
            raise ValueError(f"unknown link {self.link!r}; expected one of {LINKS}")
        if not self.features:
            raise ValueError("propensity model needs at least one feature")
        if any(t.uses_treatment for t in self.features):
            raise ValueError("propensity features may not depend on the treatment")
        if self.trials is not None and int(self.trials) < 1:
            raise ValueError("trials must be >= 1")


@dataclass(frozen=True)
class OutcomeModelSpec:
    """Gaussian identity-link outcome regression on ``(x, d)``."""

    features: tuple
    name: str = ""

    def __post_init__(self) -> None:
        object.__setattr__(self, "features", tuple(self.features))
        if not self.features:
            raise ValueError("outcome model needs at least one feature")


@dataclass(frozen=True)
class PropensityFit:
    spec: PropensityModelSpec
    coefficients: np.ndarray
    trials: int
    converged: bool = True
    iterations: int = 0
    loglik: float = float("nan")
    loglik_trace: tuple = field(default=(), repr=False)

    def __post_init__(self) -> None:
        coef = np.array(self.coefficients, dtype=np.float64)
        if coef.shape != (len(self.spec.features),):
            raise ValueError("coefficient length must match the feature count")
        coef.setflags(write=False)
        object.__setattr__(self, "coefficients", coef)


@dataclass(frozen=True)
class OutcomeFit:
    spec: OutcomeModelSpec
    coefficients: np.ndarray
    residual_variance: float = float("nan")
    converged: bool = True

    def __post_init__(self) -> None:
        coef = np.array(self.coefficients, dtype=np.float64)
        if coef.shape != (len(self.spec.features),):
            raise ValueError("coefficient length must match the feature count")
        coef.setflags(write=False)
        object.__setattr__(self, "coefficients", coef)


def _term_column(term: FeatureTerm, x: np.ndarray, d: Optional[np.ndarray]) -> np.ndarray:
    n = x.shape[0]
    if term.kind == "intercept":
        return np.ones(n)
    if term.kind == "trtpow":
        if d is None:
            raise ValueError("treatment value required by a treatment term")
        return np.asarray(d, dtype=np.float64) ** term.k
    if term.j > x.shape[1]:
        raise IndexError(f"covariate index x{term.j} out of range (p={x.shape[1]})")
    col = x[:, term.j - 1]
    if term.kind == "covpow":
        return col**term.k
    return np.exp(col)


def design_matrix(features: Sequence[FeatureTerm], x, d=None) -> np.ndarray:
    """Stack design rows for covariate matrix ``x`` (n x p).

    ``d`` may be a scalar level, broadcast over all rows, or a length-n vector.
    """
    x = np.asarray(x, dtype=np.float64)
    if x.ndim == 1:
        x = x.reshape(-1, 1)
    if d is not None:
        d = np.broadcast_to(np.asarray(d, dtype=np.float64), (x.shape[0],))
    elif any(t.uses_treatment for t in features):
        raise ValueError("treatment value required by a treatment term")
    return np.column_stack([_term_column(t, x, d) for t in features]) if features else np.empty((x.shape[0], 0))


def design_row(features: Sequence[FeatureTerm], x, d=None) -> np.ndarray:
    x = np.atleast_1d(np.asarray(x, dtype=np.float64))
    return design_matrix(features, x.reshape(1, -1), d)[0]


def link_function(link: str, p):
    p = np.asarray(p, dtype=np.float64)
    if link == "logit":
        return special.logit(p)
    if link == "cloglog":
        return np.log(-np.log1p(-p))
    raise ValueError(f"unknown link {link!r}")


def inverse_link(link: str, eta):
    """Unclamped inverse link."""
    eta = np.asarray(eta, dtype=np.float64)
    if link == "logit":
        return special.expit(eta)
    if link == "cloglog":
        return -np.expm1(-np.exp(eta))
    raise ValueError(f"unknown link {link!r}")


def _mean_and_derivative(link: str, eta: np.ndarray):
    if link == "logit":
        mu = special.expit(eta)
        dmu = mu * (1.0 - mu)
    else:
        e = np.exp(np.minimum(eta, 700.0))
        mu = -np.expm1(-e)
        dmu = e * np.exp(-e)
    mu = np.clip(mu, PROB_CLAMP, 1.0 - PROB_CLAMP)
    return mu, np.maximum(dmu, 1e-300)


def binomial_loglik(p: np.ndarray, successes: np.ndarray, trials: int) -> float:
    """Binomial log-likelihood without the constant combinatorial term."""
    p = np.clip(p, PROB_CLAMP, 1.0 - PROB_CLAMP)
    return float(np.sum(successes * np.log(p) + (trials - successes) * np.log1p(-p)))


def _wls_solve(X: np.ndarray, z: np.ndarray, w: np.ndarray) -> np.ndarray:
    sw = np.sqrt(w)
    A = X * sw[:, None]
    b = z * sw
    coef, _, rank, _ = np.linalg.lstsq(A, b, rcond=None)
    if rank == X.shape[1]:
        return coef
    # one retry with a small ridge; the SVD reports rank on the augmented system
    p = X.shape[1]
    A_r = np.vstack([A, np.sqrt(_RIDGE) * np.eye(p)])
    b_r = np.concatenate([b, np.zeros(p)])
    coef, _, rank, _ = np.linalg.lstsq(A_r, b_r, rcond=None)
    if rank < p:
        raise SingularDesignError("weighted normal equations are singular")
    return coef


def fit_binomial(ds: Dataset, spec: PropensityModelSpec) -> PropensityFit:
    """Maximum-likelihood binomial GLM by IRLS with step-halving.

    Starts from all-zero coefficients. A step that lowers the log-likelihood is
    halved up to 30 times. Stops when the largest coefficient change is below
    1e-8 or the log-likelihood changes by less than 1e-10, after at most
    100 iterations; ``converged`` is False otherwise.
    """
    trials = ds.q_levels - 1
    if spec.trials is not None and spec.trials != trials:
        raise ValueError(f"spec has {spec.trials} trials but the data have Q - 1 = {trials}")
    X = design_matrix(spec.features, ds.covariates)
    s = ds.treatments.astype(np.float64)
    yprop = s / trials

    def loglik_at(beta):
        mu, _ = _mean_and_derivative(spec.link, X @ beta)
        return binomial_loglik(mu, s, trials)

    beta = np.zeros(X.shape[1])
    ll = loglik_at(beta)
    trace = [ll]
    converged = False
    it = 0
    for it in range(1, _MAX_ITER + 1):
        eta = X @ beta
        mu, dmu = _mean_and_derivative(spec.link, eta)
        w = trials * dmu**2 / (mu * (1.0 - mu))
        z = eta + (yprop - mu) / dmu
        proposal = _wls_solve(X, z, w)
        step = proposal - beta
        new_beta, new_ll = proposal, loglik_at(proposal)
        halvings = 0
        while not (new_ll >= ll) and halvings < _MAX_HALVINGS:
            step *= 0.5
            halvings += 1
            new_beta = beta + step
            new_ll = loglik_at(new_beta)
        if not (new_ll >= ll):
            # no ascent direction found within the halving budget
            break
        if np.linalg.norm(new_beta) > _SEPARATION_NORM:
            raise SeparationError(
                f"coefficient norm exceeded {_SEPARATION_NORM:g}; the data are likely separated"
            )
        delta = np.max(np.abs(new_beta - beta))
        dll = new_ll - ll
        beta, ll = new_beta, new_ll
        trace.append(ll)
        if delta < _COEF_TOL:
            converged = True
            break
        if abs(dll) < _LOGLIK_TOL:
            # a flat likelihood with coefficients still running off is separation, not convergence
            if delta > _DIVERGENCE_STEP * max(1.0, float(np.linalg.norm(beta))):
                raise SeparationError(
                    "log-likelihood is flat while the coefficients keep growing; the data are likely separated"
                )
            converged = True
            break

    return PropensityFit(
        spec=spec,
        coefficients=beta,
        trials=trials,
        converged=converged and bool(np.all(np.isfinite(beta))),
        iterations=it,
        loglik=ll,
        loglik_trace=tuple(trace),
    )


def fit_gaussian(ds: Dataset, spec: OutcomeModelSpec) -> OutcomeFit:
    """Ordinary least squares on ``(f(X_i, D_i), Y_i)``."""
    X = design_matrix(spec.features, ds.covariates, ds.treatments)
    n, k = X.shape
    if n <= k:
        raise SingularDesignError(f"need more units than terms (n={n}, terms={k})")
    coef, _, rank, _ = np.linalg.lstsq(X, ds.outcomes, rcond=None)
    if rank < k:
        raise SingularDesignError(f"outcome design has rank {rank} < {k} terms")
    resid = ds.outcomes - X @ coef
    return OutcomeFit(spec=spec, coefficients=coef, residual_variance=float(resid @ resid / (n - k)))


def predict_or(fit: OutcomeFit, x, d) -> float:
    """Outcome-model prediction ``a(x, d)`` for one unit."""
    return float(design_row(fit.spec.features, x, d) @ fit.coefficients)


def predict_or_matrix(fit: OutcomeFit, x, d) -> np.ndarray:
    """Predictions for every row of ``x`` at treatment ``d`` (scalar or vector)."""
    return design_matrix(fit.spec.features, x, d) @ fit.coefficients
