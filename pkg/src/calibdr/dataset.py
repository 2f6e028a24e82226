"""Observed data, CSV ingestion and the regressor basis f(X).

The basis always carries a leading constant column.  Covariate columns can
be standardized to sample mean 0 and variance 1 for the solver; fitted
coefficients are mapped back to the raw scale with
:func:`destandardize_coefficients`.
"""

from __future__ import annotations

import csv
import fnmatch
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np
from numpy.typing import NDArray

MISSING_TOKENS = frozenset({"", "NA", "na", "NaN", "nan"})

# Fraction of n below which an interaction column's nonzero count is dropped.
DEFAULT_INTERACTION_FRACTION = 0.008


class DataError(ValueError):
    """Raised for malformed input data or an invalid basis request."""


def _frozen(a: NDArray) -> NDArray:
    a = np.ascontiguousarray(a)
    a.setflags(write=False)
    return a


@dataclass(frozen=True)
class ObservedData:
    """Rows of (Y, T, X).

    ``y`` holds ``nan`` where the outcome is missing.  Outcome availability is
    checked lazily by whichever loss or estimator reads it.
    """

    t: NDArray
    y: NDArray
    x: NDArray
    x_names: tuple[str, ...] = ()

    def __post_init__(self) -> None:
        t = np.asarray(self.t, dtype=float)
        y = np.asarray(self.y, dtype=float)
        x = np.asarray(self.x, dtype=float)
        if x.ndim == 1:
            x = x[:, None]
        if t.ndim != 1 or y.shape != t.shape or x.shape[0] != t.shape[0]:
            raise DataError("t, y and x must have a common number of rows")
        bad = np.flatnonzero((t != 0) & (t != 1))
        if bad.size:
            raise DataError(f"treatment must be 0 or 1 (row {bad[0]} has {t[bad[0]]!r})")
        if not t.any() or t.all():
            raise DataError("need at least one treated and one untreated row")
        if x.shape[1] == 0:
            raise DataError("at least one covariate column is required")
        if not np.all(np.isfinite(x)):
            raise DataError("covariates must be finite")
        names = tuple(self.x_names) or tuple(f"x{j + 1}" for j in range(x.shape[1]))
        if len(names) != x.shape[1]:
            raise DataError("x_names length does not match covariate columns")
        object.__setattr__(self, "t", _frozen(t))
        object.__setattr__(self, "y", _frozen(y))
        object.__setattr__(self, "x", _frozen(x))
        object.__setattr__(self, "x_names", names)

    @property
    def n(self) -> int:
        return self.t.shape[0]

    @property
    def d_raw(self) -> int:
        return self.x.shape[1]

    @property
    def y_missing(self) -> NDArray:
        return np.isnan(self.y)

    def flipped(self) -> "ObservedData":
        """Same rows with treatment labels swapped (T -> 1 - T)."""
        return ObservedData(1.0 - self.t, self.y, self.x, self.x_names)

    def require_outcome(self, arm: int) -> None:
        """Raise unless Y is observed on every row with T == arm."""
        rows = np.flatnonzero((self.t == arm) & np.isnan(self.y))
        if rows.size:
            raise DataError(f"outcome missing on row {rows[0]} with T={arm}")


def _resolve_columns(header: Sequence[str], patterns: Sequence[str]) -> list[str]:
    out: list[str] = []
    for pat in patterns:
        hits = [h for h in header if fnmatch.fnmatchcase(h, pat)] if any(
            ch in pat for ch in "*?[") else ([pat] if pat in header else [])
        if not hits:
            raise DataError(f"column {pat!r} not found in header")
        out.extend(h for h in hits if h not in out)
    return out


def load_csv(path: str | Path, y_col: str, t_col: str,
             x_cols: Sequence[str] | str) -> ObservedData:
    """Read a headered CSV file.

    Parameters
    ----------
    path : str or Path
        UTF-8, comma separated, one header row.
    y_col, t_col : str
        Outcome and treatment column names.  Empty or ``NA`` outcome cells
        become missing.
    x_cols : sequence of str or str
        Covariate names or glob patterns (``"x*"``); a single string is split
        on commas.

    Raises
    ------
    DataError
        On a malformed numeric cell (row and column are named), a treatment
        value outside {0, 1}, or when no covariate columns are selected.
    """
    if isinstance(x_cols, str):
        x_cols = [c.strip() for c in x_cols.split(",") if c.strip()]
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        try:
            header = [h.strip() for h in next(reader)]
        except StopIteration:
            raise DataError(f"{path}: empty file") from None
        for col in (y_col, t_col):
            if col not in header:
                raise DataError(f"column {col!r} not found in header")
        xs = [c for c in _resolve_columns(header, x_cols) if c not in (y_col, t_col)]
        if not xs:
            raise DataError("no covariate columns selected")
        iy, it = header.index(y_col), header.index(t_col)
        ix = [header.index(c) for c in xs]

        ts: list[float] = []
        ys: list[float] = []
        rows: list[list[float]] = []
        for lineno, rec in enumerate(reader, start=2):
            if not rec or all(not c.strip() for c in rec):
                continue
            if len(rec) != len(header):
                raise DataError(f"line {lineno}: expected {len(header)} fields, got {len(rec)}")

            def num(j: int) -> float:
                cell = rec[j].strip()
                try:
                    v = float(cell)
                except ValueError:
                    raise DataError(
                        f"line {lineno}, column {header[j]!r}: not a number: {cell!r}") from None
                if not math.isfinite(v):
                    raise DataError(f"line {lineno}, column {header[j]!r}: non-finite value")
                return v

            tv = num(it)
            if tv not in (0.0, 1.0):
                raise DataError(f"line {lineno}: treatment value {rec[it].strip()!r} is not 0 or 1")
            ycell = rec[iy].strip()
            ys.append(math.nan if ycell in MISSING_TOKENS else num(iy))
            ts.append(tv)
            rows.append([num(j) for j in ix])
    if not rows:
        raise DataError(f"{path}: no data rows")
    return ObservedData(np.array(ts), np.array(ys), np.array(rows), tuple(xs))


@dataclass(frozen=True)
class StandardizationRecord:
    """Per-column (mean, scale) used to standardize basis columns 1..p."""

    means: NDArray
    scales: NDArray

    def __post_init__(self) -> None:
        means = np.asarray(self.means, dtype=float)
        scales = np.asarray(self.scales, dtype=float)
        if means.shape != scales.shape or means.ndim != 1:
            raise DataError("means and scales must be vectors of equal length")
        if not np.all(scales > 0):
            raise DataError("standardization scales must be strictly positive")
        object.__setattr__(self, "means", _frozen(means))
        object.__setattr__(self, "scales", _frozen(scales))

    @property
    def p(self) -> int:
        return self.means.shape[0]

    @classmethod
    def identity(cls, p: int) -> "StandardizationRecord":
        return cls(np.zeros(p), np.ones(p))


def destandardize_coefficients(coef: NDArray, record: StandardizationRecord) -> NDArray:
    """Map coefficients on the standardized basis to the raw covariate scale.

    The linear predictor is unchanged row by row: slopes are divided by the
    scales and the intercept absorbs ``sum(b_j * m_j / s_j)``.
    """
    coef = np.asarray(coef, dtype=float)
    if coef.shape != (record.p + 1,):
        raise DataError(f"coefficient length {coef.shape} does not match 1 + p = {record.p + 1}")
    slopes = coef[1:] / record.scales
    out = np.empty_like(coef)
    out[1:] = slopes
    out[0] = coef[0] - slopes @ record.means
    return out


def standardize_coefficients(coef: NDArray, record: StandardizationRecord) -> NDArray:
    """Inverse of :func:`destandardize_coefficients`."""
    coef = np.asarray(coef, dtype=float)
    if coef.shape != (record.p + 1,):
        raise DataError(f"coefficient length {coef.shape} does not match 1 + p = {record.p + 1}")
    out = np.empty_like(coef)
    out[1:] = coef[1:] * record.scales
    out[0] = coef[0] + coef[1:] @ record.means
    return out


@dataclass(frozen=True)
class RegressorBasis:
    """Design matrix ``f`` (n x (1+p)) whose column 0 is identically 1."""

    f: NDArray
    names: tuple[str, ...]
    standardization: StandardizationRecord | None = None
    raw: NDArray | None = field(default=None, repr=False)

    def __post_init__(self) -> None:
        f = np.asarray(self.f, dtype=float)
        if f.ndim != 2 or f.shape[1] < 1 or not np.all(f[:, 0] == 1.0):
            raise DataError("basis column 0 must be the constant 1")
        object.__setattr__(self, "f", _frozen(f))
        if self.raw is not None:
            object.__setattr__(self, "raw", _frozen(np.asarray(self.raw, dtype=float)))
        if len(self.names) != f.shape[1] - 1:
            raise DataError("names must label columns 1..p")

    @property
    def n(self) -> int:
        return self.f.shape[0]

    @property
    def p(self) -> int:
        return self.f.shape[1] - 1

    def raw_coefficients(self, coef: NDArray) -> NDArray:
        if self.standardization is None:
            return np.asarray(coef, dtype=float).copy()
        return destandardize_coefficients(coef, self.standardization)

    def take(self, rows: NDArray) -> "RegressorBasis":
        """Row subset sharing this basis' column definitions."""
        raw = None if self.raw is None else self.raw[rows]
        return RegressorBasis(self.f[rows], self.names, self.standardization, raw)


def _pairwise(x: NDArray, names: Sequence[str], min_nonzero: int) -> tuple[NDArray, list[str]]:
    cols = [x]
    out_names = list(names)
    d = x.shape[1]
    for j in range(d):
        prod = x[:, j:j + 1] * x[:, j + 1:]
        keep = np.count_nonzero(prod, axis=0) >= min_nonzero
        # a constant product carries no information beyond the intercept
        keep &= prod.max(axis=0) > prod.min(axis=0)
        idx = np.flatnonzero(keep)
        if idx.size:
            cols.append(prod[:, idx])
            out_names.extend(f"{names[j]}:{names[j + 1 + k]}" for k in idx)
    return np.hstack(cols), out_names


def build_basis(data: ObservedData, standardize: bool = True, expansion: str = "raw",
                min_nonzero: int | None = None) -> RegressorBasis:
    """Construct f(X) = (1, f_1(X), ..., f_p(X)).

    Parameters
    ----------
    data : ObservedData
    standardize : bool
        Standardize columns 1..p to sample mean 0, variance 1 (ddof=0).
    expansion : {"raw", "pairwise"}
        ``"pairwise"`` appends all two-way products x_j * x_k (j < k),
        dropping products with fewer than ``min_nonzero`` nonzero entries.
    min_nonzero : int, optional
        Defaults to ``ceil(0.008 * n)``.
    """
    x = data.x
    names = list(data.x_names)
    if standardize:
        const = np.flatnonzero(x.max(axis=0) == x.min(axis=0))
        if const.size:
            raise DataError(f"covariate {names[const[0]]!r} is constant; cannot standardize")
    if expansion == "raw":
        z = x.copy()
    elif expansion == "pairwise":
        if min_nonzero is None:
            min_nonzero = math.ceil(DEFAULT_INTERACTION_FRACTION * data.n - 1e-9)
        z, names = _pairwise(x, names, min_nonzero)
    else:
        raise DataError(f"unknown expansion {expansion!r}")

    record = None
    raw = z
    if standardize:
        means = z.mean(axis=0)
        centered = z - means
        scales = np.sqrt((centered ** 2).mean(axis=0))
        record = StandardizationRecord(means, scales)
        z = centered / scales
    f = np.hstack([np.ones((data.n, 1)), z])
    return RegressorBasis(f, tuple(names), record, raw)
