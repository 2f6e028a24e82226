"""Lasso-penalized minimization of the losses in :mod:`calibdr.losses`.

Minimizes ``loss(theta) + lam * ||theta[1:]||_1`` (intercept unpenalized).
Each outer iteration builds the quadratic model from the loss gradient and
curvature weights, solves the penalized quadratic by active-set coordinate
descent, and backtracks along the resulting direction on the true penalized
objective.  Convergence is certified by :func:`check_kkt`.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np
from numpy.typing import NDArray

from .losses import Loss, LossKind, NonFiniteLoss

try:
    from numba import njit
except ImportError:  # pragma: no cover - pure-Python fallback
    def njit(*args, **kwargs):
        if args and callable(args[0]):
            return args[0]
        return lambda fn: fn

log = logging.getLogger(__name__)

# diagonal damping of the quadratic model; vanishes at a fixed point
_PROX_DAMPING = 1e-10
_ARMIJO = 1e-4
# |logit| beyond this means the penalized objective has no finite minimizer
_ETA_LIMIT = 500.0
# coordinate-descent sweeps before an exact active-set step is tried
_CD_BURST = 50


@dataclass(frozen=True)
class SolverOptions:
    kkt_tol: float = 1e-6
    max_outer: int = 200
    max_inner: int = 10000
    line_search_shrink: float = 0.5
    min_step: float = 1e-10

    def __post_init__(self) -> None:
        if self.kkt_tol <= 0 or self.max_outer < 1 or self.max_inner < 1 or self.min_step <= 0:
            raise ValueError("solver bounds must be positive")
        if not 0.0 < self.line_search_shrink < 1.0:
            raise ValueError("line_search_shrink must lie in (0, 1)")


@dataclass(frozen=True)
class KktReport:
    passed: bool
    tol: float
    slack: NDArray
    failing: tuple[int, ...]

    @property
    def max_violation(self) -> float:
        return float(self.slack.max())

    @property
    def worst(self) -> int:
        return int(np.argmax(self.slack))


@dataclass
class PenalizedFit:
    coefficients: NDArray
    lam: float
    loss_kind: LossKind
    objective: float
    outer_iterations: int
    converged: bool
    kkt_report: KktReport
    status: str = "converged"
    objective_history: list[float] = field(default_factory=list, repr=False)

    @property
    def active_set(self) -> NDArray:
        return np.flatnonzero(self.coefficients[1:] != 0.0) + 1


def penalized_objective(value: float, theta: NDArray, lam: float) -> float:
    return value + lam * float(np.abs(theta[1:]).sum())


def kkt_slack(gradient: NDArray, theta: NDArray, lam: float) -> NDArray:
    """Per-coordinate violation of the KKT conditions (0 when satisfied).

    Intercept: ``|g_0|``.  Zero slope: ``max(|g_j| - lam, 0)``.  Nonzero
    slope: ``|g_j + lam * sign(theta_j)|``.
    """
    g = np.asarray(gradient, dtype=float)
    slack = np.empty_like(g)
    slack[0] = abs(g[0])
    th = theta[1:]
    gs = g[1:]
    slack[1:] = np.where(th == 0.0, np.maximum(np.abs(gs) - lam, 0.0),
                         np.abs(gs + lam * np.sign(th)))
    return slack


def _report(gradient: NDArray, theta: NDArray, lam: float, tol: float) -> KktReport:
    slack = kkt_slack(gradient, theta, lam)
    failing = tuple(int(j) for j in np.flatnonzero(slack > tol))
    return KktReport(not failing, tol, slack, failing)


def check_kkt(fit: PenalizedFit, loss: Loss, tol: float | None = None) -> KktReport:
    """Certify optimality of ``fit`` for ``loss`` at tolerance ``tol``."""
    tol = fit.kkt_report.tol if tol is None else tol
    ev = loss.evaluate(fit.coefficients)
    return _report(ev.gradient, fit.coefficients, fit.lam, tol)


@njit(cache=True)
def _cd_block(H, G, theta, lam, penalized, tol, max_sweeps):
    """Cyclic coordinate descent on 0.5 d'Hd + G'd + lam*|theta|_1 (block).

    ``G`` is the gradient of the smooth part at ``theta`` and is updated in
    place together with ``theta``.  Returns (sweeps used, converged).
    """
    k = theta.shape[0]
    for sweep in range(max_sweeps):
        for j in range(k):
            a = H[j, j]
            old = theta[j]
            z = old - G[j] / a
            if penalized[j]:
                thr = lam / a
                if z > thr:
                    new = z - thr
                elif z < -thr:
                    new = z + thr
                else:
                    new = 0.0
            else:
                new = z
            d = new - old
            if d != 0.0:
                for i in range(k):
                    G[i] += H[i, j] * d
                theta[j] = new
        worst = 0.0
        for j in range(k):
            g = G[j]
            if not penalized[j]:
                v = abs(g)
            elif theta[j] > 0.0:
                v = abs(g + lam)
            elif theta[j] < 0.0:
                v = abs(g - lam)
            else:
                v = abs(g) - lam
            if v > worst:
                worst = v
        if worst <= tol:
            return sweep + 1, True
    return max_sweeps, False


def _polish(h: NDArray, g: NDArray, theta: NDArray, lam: float, penalized: NDArray,
            max_steps: int) -> int:
    """Active-set steps on the block quadratic with signs held fixed.

    Solves the stationarity equations on the current support exactly; if a
    coordinate would change sign, steps only to its zero crossing and drops
    it.  Each step lowers the penalized quadratic.  Updates ``g`` and
    ``theta`` in place and returns the number of linear solves.
    """
    for step in range(max_steps):
        act = np.flatnonzero(~penalized | (theta != 0.0))
        sgn = np.where(penalized[act], np.sign(theta[act]), 0.0)
        try:
            d = np.linalg.solve(h[np.ix_(act, act)], -(g[act] + lam * sgn))
        except np.linalg.LinAlgError:
            return step
        new = theta[act] + d
        cross = np.flatnonzero((sgn != 0.0) & (np.sign(new) != sgn))
        frac = 1.0
        if cross.size:
            ratios = -theta[act][cross] / d[cross]
            k = int(np.argmin(ratios))
            frac = float(ratios[k])
        theta[act] += frac * d
        g += h[:, act] @ (frac * d)
        if not cross.size:
            return step + 1
        j = act[cross[k]]
        g -= h[:, j] * theta[j]
        theta[j] = 0.0
    return max_steps


def _solve_quadratic(f: NDArray, w: NDArray, grad: NDArray, theta_k: NDArray, lam: float,
                     tol: float, max_inner: int) -> NDArray:
    """Minimize the penalized quadratic model around ``theta_k``.

    Hessian columns ``F' diag(w) F / n`` are formed only for coordinates in
    the working set; a full gradient pass admits KKT violators.
    """
    n, dim = f.shape
    theta = theta_k.copy()
    damping = _PROX_DAMPING * (1.0 + float(w.mean()))
    cols: dict[int, NDArray] = {}
    sweeps = 0
    while True:
        delta = theta - theta_k
        g_full = grad + f.T @ (w * (f @ delta)) / n + damping * delta
        slack = kkt_slack(g_full, theta, lam)
        if slack.max() <= tol or sweeps >= max_inner:
            return theta
        work = np.flatnonzero((slack > tol) | (theta != 0.0))
        work = np.union1d(work, [0])
        missing = [j for j in work if j not in cols]
        if missing:
            block = f.T @ (w[:, None] * f[:, missing]) / n
            for pos, j in enumerate(missing):
                cols[j] = block[:, pos]
        h = np.stack([cols[j][work] for j in work], axis=1)
        h[np.diag_indices_from(h)] += damping
        g_work = g_full[work].copy()
        th_work = theta[work].copy()
        penalized = work != 0
        # tighter inner target so the full-gradient pass rarely adds rounds
        used, done = _cd_block(h, g_work, th_work, float(lam), penalized, 0.1 * tol,
                               min(_CD_BURST, max_inner - sweeps))
        sweeps += used
        if not done and sweeps < max_inner:
            # slow coordinate descent on correlated columns: finish the
            # current support exactly
            sweeps += _polish(h, g_work, th_work, float(lam), penalized,
                              min(work.size, max_inner - sweeps))
        theta[work] = th_work


def fit_penalized(loss: Loss, lam: float, init: NDArray | None = None,
                  opts: SolverOptions | None = None) -> PenalizedFit:
    """Lasso-penalized fit of ``loss`` at penalty ``lam``.

    Returns the best iterate found.  ``converged`` is True iff the KKT
    certificate passes at ``opts.kkt_tol``; non-convergence is reported, not
    raised.

    Raises
    ------
    NonFiniteLoss
        If the loss is not finite at the starting point.
    """
    opts = opts or SolverOptions()
    if lam < 0:
        raise ValueError("lam must be nonnegative")
    theta = loss.intercept_start() if init is None else np.array(init, dtype=float)
    if theta.shape != (loss.dim,):
        raise ValueError(f"init has length {theta.shape}, expected {loss.dim}")
    ev = loss.evaluate(theta)
    obj = penalized_objective(ev.value, theta, lam)
    history = [obj]
    inner_tol = 1e-2 * opts.kkt_tol
    report = _report(ev.gradient, theta, lam, opts.kkt_tol)
    bounded = loss.kind.is_outcome and loss.kind.link == "identity"
    status = "converged"
    it = 0
    while not report.passed:
        if it >= opts.max_outer:
            status = "max_outer"
            break
        it += 1
        target = _solve_quadratic(loss.f, ev.curvature_weights, ev.gradient, theta, lam,
                                  inner_tol, opts.max_inner)
        direction = target - theta
        l1 = float(np.abs(theta[1:]).sum())
        decrease = float(ev.gradient @ direction) + lam * (float(np.abs(target[1:]).sum()) - l1)
        step = 1.0
        accepted = False
        while step >= opts.min_step:
            cand = theta + step * direction
            try:
                ev_c = loss.evaluate(cand)
            except NonFiniteLoss:
                step *= opts.line_search_shrink
                continue
            obj_c = penalized_objective(ev_c.value, cand, lam)
            if obj_c <= obj + _ARMIJO * step * min(decrease, 0.0):
                accepted = True
                break
            step *= opts.line_search_shrink
        if not accepted:
            log.debug("%s: line search stalled at outer iteration %d", loss.kind.label, it)
            status = "line_search"
            break
        theta, ev, obj = cand, ev_c, obj_c
        history.append(obj)
        report = _report(ev.gradient, theta, lam, opts.kkt_tol)
        if not bounded and not report.passed and np.abs(loss.f @ theta).max() > _ETA_LIMIT:
            status = "diverged"
            break
    if report.passed:
        status = "converged"
    return PenalizedFit(theta, float(lam), loss.kind, obj, it, report.passed, report,
                        status, history)


def fit_path(loss: Loss, lambdas, opts: SolverOptions | None = None,
             init: NDArray | None = None) -> list[PenalizedFit]:
    """Warm-started fits over a strictly descending penalty grid."""
    lambdas = np.asarray(lambdas, dtype=float)
    if lambdas.ndim != 1 or lambdas.size == 0:
        raise ValueError("lambdas must be a nonempty vector")
    if np.any(np.diff(lambdas) >= 0):
        raise ValueError("lambda grid must be strictly descending")
    fits: list[PenalizedFit] = []
    start = init
    for lam in lambdas:
        try:
            fit = fit_penalized(loss, lam, start, opts)
        except NonFiniteLoss:
            if start is None:
                raise
            fit = fit_penalized(loss, lam, None, opts)
        fits.append(fit)
        # a diverged iterate is a poor warm start
        start = fit.coefficients if fit.status != "diverged" else None
    return fits
