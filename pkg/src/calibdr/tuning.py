"""Zero-solution penalty threshold and K-fold cross-validation over lambda."""

from __future__ import annotations

import re
from dataclasses import dataclass

import numpy as np
from numpy.typing import NDArray

from .solver import PenalizedFit, SolverOptions, fit_path
from .losses import Loss


@dataclass(frozen=True)
class GridSpec:
    """Grid ``lambda_max / divisor**j`` for ``j = 0 .. num_points - 1``."""

    num_points: int = 11
    divisor: float = 2.0

    @classmethod
    def parse(cls, text: str) -> "GridSpec":
        """``pow2:11`` (halving) or ``pow2q:25`` (quarter powers of two)."""
        m = re.fullmatch(r"(pow2q?):(\d+)", text.strip())
        if not m or int(m.group(2)) < 1:
            raise ValueError(f"bad grid spec {text!r}; expected pow2:N or pow2q:N")
        return cls(int(m.group(2)), 2.0 if m.group(1) == "pow2" else 2.0 ** 0.25)

    def grid(self, lam_max: float) -> NDArray:
        return lam_max / self.divisor ** np.arange(self.num_points)

    def __str__(self) -> str:
        kind = "pow2" if self.divisor == 2.0 else "pow2q"
        return f"{kind}:{self.num_points}"


SIMULATION_GRID = GridSpec(11, 2.0)
APPLICATION_GRID = GridSpec(25, 2.0 ** 0.25)


def lambda_max(loss: Loss) -> float:
    """Smallest penalty whose solution has all slopes zero.

    The largest slope-gradient magnitude at the intercept-only stationary
    point.  For the logistic likelihood this is
    ``max_j |mean((T - mean(T)) f_j)|`` and for the treated-arm calibration
    loss ``max_j |mean((T / mean(T) - 1) f_j)|``.
    """
    g = loss.evaluate(loss.intercept_start()).gradient
    if g.shape[0] < 2:
        return 0.0
    return float(np.abs(g[1:]).max())


@dataclass
class CvResult:
    selected_lambda: float
    selected_index: int
    grid: NDArray
    cv_values: NDArray
    valid: NDArray
    fold_assignment: NDArray
    seed: int
    k: int


def stratified_folds(t: NDArray, k: int, seed: int) -> NDArray:
    """Random fold labels in ``0..k-1``, stratified by treatment.

    Treated rows are dealt round-robin in random order, then untreated rows
    continue the same rotation, so total fold sizes differ by at most one
    and each arm is spread as evenly as possible.
    """
    t = np.asarray(t)
    n1, n0 = int((t == 1).sum()), int((t == 0).sum())
    if n1 < k or n0 < k:
        raise ValueError(f"cannot place a treated and an untreated row in each of {k} folds")
    rng = np.random.default_rng(seed)
    folds = np.empty(t.shape[0], dtype=int)
    treated = rng.permutation(np.flatnonzero(t == 1))
    untreated = rng.permutation(np.flatnonzero(t == 0))
    folds[treated] = np.arange(n1) % k
    folds[untreated] = (n1 + np.arange(n0)) % k
    return folds


def cross_validate(loss: Loss, grid: GridSpec | NDArray = SIMULATION_GRID, k: int = 5,
                   seed: int = 0, opts: SolverOptions | None = None,
                   lam_max: float | None = None) -> CvResult:
    """Select lambda by K-fold cross-validation on the loss itself.

    For each fold the penalized loss is minimized on the other folds over the
    whole grid (warm-started) and the unpenalized loss is evaluated on the
    held-out rows.  Companion fits inside WL/WCAL losses stay fixed.  A grid
    point with any non-convergent fold fit is excluded from selection; ties
    go to the larger lambda.
    """
    if k < 2:
        raise ValueError("need at least 2 folds")
    if loss.n < 2 * k:
        raise ValueError(f"need n >= {2 * k} rows for {k}-fold cross-validation")
    if isinstance(grid, GridSpec):
        lam_max = lambda_max(loss) if lam_max is None else lam_max
        lambdas = grid.grid(lam_max)
    else:
        lambdas = np.asarray(grid, dtype=float)
    folds = stratified_folds(loss.t, k, seed)
    held = np.zeros((k, lambdas.size))
    ok = np.ones(lambdas.size, dtype=bool)
    for fold in range(k):
        test = folds == fold
        train_loss = loss.subset(np.flatnonzero(~test))
        test_loss = loss.subset(np.flatnonzero(test))
        for j, fit in enumerate(fit_path(train_loss, lambdas, opts)):
            ok[j] &= fit.converged
            held[fold, j] = test_loss.value(fit.coefficients)
    cv = held.mean(axis=0)
    cv[~np.isfinite(cv)] = np.inf
    ok &= np.isfinite(cv)
    if not ok.any():
        raise RuntimeError(f"{loss.kind.label}: no grid point converged on every fold")
    best = int(np.flatnonzero(ok)[np.argmin(cv[ok])])
    return CvResult(float(lambdas[best]), best, lambdas, cv, ok, folds, seed, k)


def fit_selected(loss: Loss, cv: CvResult, opts: SolverOptions | None = None) -> PenalizedFit:
    """Full-sample fit at the selected lambda, warm-started down the grid."""
    return fit_path(loss, cv.grid[: cv.selected_index + 1], opts)[-1]
