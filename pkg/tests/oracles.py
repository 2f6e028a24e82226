"""Independent reference implementations used by the tests.

Loss values are written directly from their defining formulas (no shared
code with the package), and penalized minimizers are found by brute force:
a coarse grid followed by cyclic golden-section coordinate minimization.
"""

from __future__ import annotations

import itertools
import math

import numpy as np


def _expit(u):
    return 1.0 / (1.0 + np.exp(-u))


def loss_value(variant: str, theta, f, t, y=None, link="identity", arm=1, companion=None):
    """Average loss over all n rows for one variant, straight from the formula."""
    eta = f @ theta
    n = f.shape[0]
    if variant == "ml_ps":
        return float(np.sum(np.log1p(np.exp(eta)) - t * eta) / n)
    if variant == "cal_ps":
        if arm == 1:
            return float(np.sum(t * np.exp(-eta) + (1 - t) * eta) / n)
        return float(np.sum((1 - t) * np.exp(eta) - t * eta) / n)
    cum = 0.5 * eta ** 2 if link == "identity" else np.log1p(np.exp(eta))
    if variant in ("ml_or", "wl_or"):
        on = (t == arm).astype(float)
        yy = np.where(on == 1, y, 0.0)
        if variant == "ml_or":
            w = on
        else:
            g = f @ companion
            w = on * (np.exp(-g) if arm == 1 else np.exp(g))
        return float(np.sum(w * (cum - yy * eta)) / n)
    if variant == "wcal_ps":
        a = f @ companion
        w = np.ones(n) if link == "identity" else _expit(a) * (1 - _expit(a))
        return float(np.sum(w * (t * np.exp(-eta) + (1 - t) * eta)) / n)
    raise ValueError(variant)


def _golden(fun, lo, hi, tol=1e-12, iters=200):
    r = (math.sqrt(5.0) - 1.0) / 2.0
    a, b = lo, hi
    c, d = b - r * (b - a), a + r * (b - a)
    fc, fd = fun(c), fun(d)
    for _ in range(iters):
        if b - a < tol:
            break
        if fc < fd:
            b, d, fd = d, c, fc
            c = b - r * (b - a)
            fc = fun(c)
        else:
            a, c, fc = c, d, fd
            d = a + r * (b - a)
            fd = fun(d)
    return 0.5 * (a + b)


def brute_force_minimize(objective, dim: int, box: float = 3.0, points: int = 25,
                         sweeps: int = 400, tol: float = 1e-11):
    """Minimize a convex function of ``dim`` coordinates without derivatives."""
    axis = np.linspace(-box, box, points)
    best, best_val = None, np.inf
    for cand in itertools.product(axis, repeat=dim):
        v = objective(np.array(cand))
        if v < best_val:
            best, best_val = np.array(cand), v
    x = best.copy()
    step = 2.0 * box / (points - 1)
    for _ in range(sweeps):
        prev = x.copy()
        for j in range(dim):
            def along(s, j=j):
                z = x.copy()
                z[j] = s
                return objective(z)
            # widen the bracket until the minimum is interior
            lo, hi = x[j] - step, x[j] + step
            while along(lo) < along(x[j]) and hi - lo < 1e3:
                lo -= step
            while along(hi) < along(x[j]) and hi - lo < 1e3:
                hi += step
            # a kink at exactly zero is the usual lasso solution
            cand = _golden(along, lo, hi)
            x[j] = 0.0 if along(0.0) <= along(cand) else cand
        if np.abs(x - prev).max() < tol:
            break
        step = max(np.abs(x - prev).max() * 4.0, 1e-6)
    return x


def penalized(variant, lam, f, t, **kw):
    def obj(theta):
        with np.errstate(over="ignore"):
            v = loss_value(variant, theta, f, t, **kw)
        if not np.isfinite(v):
            return np.inf
        return v + lam * np.abs(theta[1:]).sum()
    return obj
