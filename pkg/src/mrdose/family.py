"""Postulated model families and their JSON form.

Schema::

    {
      "ps": [{"name": "pi1", "link": "logit",
              "terms": [{"kind": "intercept"}, {"kind": "covpow", "j": 1, "k": 1}]}],
      "or": [{"name": "a1",
              "terms": [{"kind": "intercept"}, {"kind": "trtpow", "k": 1}]}]
    }

Term kinds: ``intercept``; ``covpow`` (covariate ``j`` to power ``k``);
``covexp`` (``exp`` of covariate ``j``); ``trtpow`` (treatment to power ``k``,
outcome models only). ``j`` is 1-based. ``name`` is optional.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path
from typing import Union

from .data import Dataset
from .glm import (
    CovariateExp,
    CovariatePower,
    Intercept,
    OutcomeModelSpec,
    PropensityModelSpec,
    TreatmentPower,
    fit_binomial,
    fit_gaussian,
    term_from_json,
    term_to_json,
)
from .gps import GpsModel

__all__ = ["ModelFamily", "FittedFamily", "DEFAULT_FAMILY", "fit_family", "load_family"]


@dataclass(frozen=True)
class ModelFamily:
    ps: tuple
    outcome: tuple

    def __post_init__(self) -> None:
        object.__setattr__(self, "ps", tuple(self.ps))
        object.__setattr__(self, "outcome", tuple(self.outcome))
        if not self.ps and not self.outcome:
            raise ValueError("model family is empty")

    def to_json(self) -> dict:
        return {
            "ps": [
                {"name": s.name, "link": s.link, "terms": [term_to_json(t) for t in s.features]}
                for s in self.ps
            ],
            "or": [{"name": s.name, "terms": [term_to_json(t) for t in s.features]} for s in self.outcome],
        }

    @classmethod
    def from_json(cls, obj: dict) -> "ModelFamily":
        if not isinstance(obj, dict):
            raise ValueError("model family must be a JSON object")
        unknown = set(obj) - {"ps", "or"}
        if unknown:
            raise ValueError(f"unknown top-level keys {sorted(unknown)}")
        ps = []
        for i, entry in enumerate(obj.get("ps", [])):
            try:
                ps.append(
                    PropensityModelSpec(
                        link=entry["link"],
                        features=[term_from_json(t) for t in entry["terms"]],
                        name=entry.get("name", f"pi{i + 1}"),
                    )
                )
            except (KeyError, TypeError) as exc:
                raise ValueError(f"ps[{i}]: missing or malformed field {exc}") from None
        outcome = []
        for i, entry in enumerate(obj.get("or", [])):
            try:
                outcome.append(
                    OutcomeModelSpec(
                        features=[term_from_json(t) for t in entry["terms"]],
                        name=entry.get("name", f"a{i + 1}"),
                    )
                )
            except (KeyError, TypeError) as exc:
                raise ValueError(f"or[{i}]: missing or malformed field {exc}") from None
        return cls(tuple(ps), tuple(outcome))


def load_family(path: Union[str, Path]) -> ModelFamily:
    with Path(path).open(encoding="utf-8") as fh:
        return ModelFamily.from_json(json.load(fh))


# Two propensity models (logit-quadratic and a cloglog with an exp(x) term) and
# two outcome models (quadratic in d and x, and linear in both).
DEFAULT_FAMILY = ModelFamily(
    ps=(
        PropensityModelSpec("logit", (Intercept(), CovariatePower(1, 1), CovariatePower(1, 2)), name="pi1"),
        PropensityModelSpec("cloglog", (Intercept(), CovariatePower(1, 1), CovariateExp(1)), name="pi2"),
    ),
    outcome=(
        OutcomeModelSpec(
            (Intercept(), TreatmentPower(1), TreatmentPower(2), CovariatePower(1, 1), CovariatePower(1, 2)),
            name="a1",
        ),
        OutcomeModelSpec((Intercept(), TreatmentPower(1), CovariatePower(1, 1)), name="a2"),
    ),
)


@dataclass(frozen=True)
class FittedFamily:
    ps: tuple
    outcome: tuple


def fit_family(ds: Dataset, family: ModelFamily, ps_used=None, or_used=None) -> FittedFamily:
    """Fit every model in ``family`` (or only the indices given) to ``ds``.

    Unfitted slots are ``None``.
    """
    ps = tuple(
        GpsModel(fit_binomial(ds, spec)) if ps_used is None or i in ps_used else None
        for i, spec in enumerate(family.ps)
    )
    outcome = tuple(
        fit_gaussian(ds, spec) if or_used is None or i in or_used else None
        for i, spec in enumerate(family.outcome)
    )
    return FittedFamily(ps, outcome)
