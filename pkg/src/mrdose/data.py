"""Observed data: outcomes, treatment levels and covariates.

Treatment levels are consecutive integers ``0..Q-1``. ``Q`` defaults to
``1 + max(d)`` and may be raised by the caller so that levels absent from the
sample are still declared (estimators then reject them explicitly).
"""

from __future__ import annotations

import csv
import math
import re
from dataclasses import dataclass
from pathlib import Path
from typing import Optional, Union

import numpy as np
import numpy.typing as npt

__all__ = [
    "DataError",
    "Dataset",
    "TreatmentGroup",
    "load_csv",
    "write_csv",
    "treatment_group",
]

_COVARIATE_RE = re.compile(r"^x([1-9][0-9]*)$")


class DataError(ValueError):
    """Raised when observed data are malformed."""


def _frozen(a: npt.ArrayLike, dtype) -> np.ndarray:
    arr = np.array(a, dtype=dtype, copy=True)
    arr.setflags(write=False)
    return arr


@dataclass(frozen=True, eq=False)
class Dataset:
    """Observed triples ``(y_i, d_i, x_i)`` for ``n`` units.

    Arrays are copied and made read-only on construction.
    """

    outcomes: np.ndarray
    treatments: np.ndarray
    covariates: np.ndarray
    q_levels: int

    def __post_init__(self) -> None:
        y = _frozen(self.outcomes, np.float64)
        d_raw = np.asarray(self.treatments)
        x = np.array(self.covariates, dtype=np.float64, copy=True)
        if x.ndim == 1:
            x = x.reshape(-1, 1)
        if y.ndim != 1:
            raise DataError("outcomes must be one-dimensional")
        n = y.shape[0]
        if n < 1:
            raise DataError("dataset must contain at least one unit")
        if d_raw.shape != (n,):
            raise DataError(f"treatments has shape {d_raw.shape}, expected ({n},)")
        if x.ndim != 2 or x.shape[0] != n:
            raise DataError(f"covariates has shape {x.shape}, expected ({n}, p)")
        if not (np.all(np.isfinite(y)) and np.all(np.isfinite(x))):
            raise DataError("non-finite value in outcomes or covariates")
        d_float = np.asarray(d_raw, dtype=np.float64)
        if not np.all(np.isfinite(d_float)) or np.any(d_float != np.round(d_float)):
            raise DataError("treatment values must be integers")
        d = d_float.astype(np.int64)
        q = int(self.q_levels)
        if q < 2:
            raise DataError(f"q_levels must be at least 2, got {q}")
        if d.min() < 0 or d.max() >= q:
            raise DataError(f"treatment values must lie in 0..{q - 1}")
        x.setflags(write=False)
        d.setflags(write=False)
        object.__setattr__(self, "outcomes", y)
        object.__setattr__(self, "treatments", d)
        object.__setattr__(self, "covariates", x)
        object.__setattr__(self, "q_levels", q)

    @classmethod
    def from_arrays(cls, y, d, x, q_levels: Optional[int] = None) -> "Dataset":
        d_arr = np.asarray(d)
        if q_levels is None:
            q_levels = max(int(np.max(d_arr)) + 1, 2) if d_arr.size else 2
        return cls(y, d_arr, x, q_levels)

    @property
    def n(self) -> int:
        return int(self.outcomes.shape[0])

    @property
    def p(self) -> int:
        return int(self.covariates.shape[1])

    def group_sizes(self) -> np.ndarray:
        return np.bincount(self.treatments, minlength=self.q_levels)

    def indicator(self, level: int) -> np.ndarray:
        """``I_{d_q}(D_i)`` as a float vector."""
        _check_level(self, level)
        return (self.treatments == level).astype(np.float64)

    def equals(self, other: "Dataset") -> bool:
        return (
            self.q_levels == other.q_levels
            and np.array_equal(self.outcomes, other.outcomes)
            and np.array_equal(self.treatments, other.treatments)
            and np.array_equal(self.covariates, other.covariates)
        )


@dataclass(frozen=True)
class TreatmentGroup:
    level: int
    members: np.ndarray

    @property
    def size(self) -> int:
        return int(self.members.shape[0])


def _check_level(ds: Dataset, level: int) -> None:
    if not (0 <= int(level) < ds.q_levels):
        raise DataError(f"level {level} out of range 0..{ds.q_levels - 1}")


def treatment_group(ds: Dataset, level: int) -> TreatmentGroup:
    """Units receiving ``level``, as ascending 0-based row indices."""
    _check_level(ds, level)
    members = np.flatnonzero(ds.treatments == level)
    members.setflags(write=False)
    return TreatmentGroup(int(level), members)


def _parse_float(text: str, row: int, col: str) -> float:
    try:
        value = float(text)
    except ValueError:
        raise DataError(f"row {row}, column {col!r}: cannot parse {text!r} as a number") from None
    if not math.isfinite(value):
        raise DataError(f"row {row}, column {col!r}: non-finite value {text!r}")
    return value


def load_csv(path: Union[str, Path], q_levels: Optional[int] = None) -> Dataset:
    """Read a ``y,d,x1,...,xp`` CSV file.

    Row numbers in error messages count the header as row 1.
    """
    path = Path(path)
    with path.open(newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        try:
            header = [h.strip() for h in next(reader)]
        except StopIteration:
            raise DataError(f"{path}: empty file") from None
        for required in ("y", "d"):
            if required not in header:
                raise DataError(f"{path}: missing column {required!r}")
        cov_cols = {}
        for pos, name in enumerate(header):
            m = _COVARIATE_RE.match(name)
            if m:
                cov_cols[int(m.group(1))] = pos
            elif name not in ("y", "d"):
                raise DataError(f"{path}: unexpected column {name!r}")
        if len(set(header)) != len(header):
            raise DataError(f"{path}: duplicate column names")
        p = len(cov_cols)
        if p == 0:
            raise DataError(f"{path}: missing column 'x1'")
        for j in range(1, p + 1):
            if j not in cov_cols:
                raise DataError(f"{path}: missing column 'x{j}'")
        iy, id_ = header.index("y"), header.index("d")
        xcols = [cov_cols[j] for j in range(1, p + 1)]

        ys, ds, xs = [], [], []
        for rownum, row in enumerate(reader, start=2):
            if not row or all(not c.strip() for c in row):
                continue
            if len(row) != len(header):
                raise DataError(
                    f"row {rownum}: expected {len(header)} fields, found {len(row)}"
                )
            ys.append(_parse_float(row[iy], rownum, "y"))
            dval = _parse_float(row[id_], rownum, "d")
            if dval < 0 or not dval.is_integer():
                raise DataError(
                    f"row {rownum}, column 'd': treatment must be a non-negative integer, got {row[id_]!r}"
                )
            ds.append(int(dval))
            xs.append([_parse_float(row[c], rownum, header[c]) for c in xcols])

    if not ys:
        raise DataError(f"{path}: no data rows")
    inferred = max(ds) + 1
    if q_levels is None:
        q = max(inferred, 2)
    else:
        q = int(q_levels)
        if q < inferred:
            raise DataError(f"q override {q} is smaller than 1 + max(d) = {inferred}")
    x = np.array(xs, dtype=np.float64).reshape(len(ys), p)
    return Dataset(np.array(ys), np.array(ds, dtype=np.int64), x, q)


def write_csv(ds: Dataset, path: Union[str, Path]) -> None:
    """Write ``ds`` so that :func:`load_csv` recovers it exactly."""
    header = ["y", "d"] + [f"x{j}" for j in range(1, ds.p + 1)]
    with Path(path).open("w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(header)
        for i in range(ds.n):
            writer.writerow(
                [repr(float(ds.outcomes[i])), int(ds.treatments[i])]
                + [repr(float(v)) for v in ds.covariates[i]]
            )
