"""Self-verification battery behind ``calibdr check``.

Each check returns a :class:`CheckResult`; :func:`run_checks` collects them.
The heavy Monte-Carlo checks (10^6 draws) are skipped with ``quick=True``.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
from numpy.typing import NDArray
from scipy.special import expit

from . import simulation as sim
from .dataset import ObservedData, RegressorBasis, build_basis
from .losses import Loss, LossKind, Variant
from .solver import SolverOptions, check_kkt, fit_penalized
from .tuning import lambda_max


@dataclass(frozen=True)
class CheckResult:
    name: str
    passed: bool
    detail: str


@dataclass(frozen=True)
class Problem:
    data: ObservedData
    basis: RegressorBasis
    y_bin: NDArray


def random_problem(seed: int, n: int = 200, p: int = 50) -> Problem:
    """Gaussian covariates, a moderate logistic propensity and a sparse linear outcome."""
    rng = np.random.default_rng(seed)
    x = rng.standard_normal((n, p))
    t = (rng.random(n) < expit(0.5 * x[:, 0] - 0.25 * x[:, 1])).astype(float)
    y = x[:, 0] + 0.5 * x[:, min(2, p - 1)] + rng.standard_normal(n)
    data = ObservedData(t, y, x)
    return Problem(data, build_basis(data), (y > 0).astype(float))


def loss_variants(prob: Problem, seed: int = 0) -> list[Loss]:
    """One loss of every kind and arm on ``prob``, with small fixed companions."""
    rng = np.random.default_rng(seed)
    dim = prob.basis.p + 1
    gamma = np.zeros(dim)
    gamma[0] = math.log(prob.data.t.mean() / (1.0 - prob.data.t.mean()))
    gamma[1:] = rng.normal(0.0, 0.2 / math.sqrt(dim), dim - 1)
    alpha = rng.normal(0.0, 0.3 / math.sqrt(dim), dim)
    f, t = prob.basis.f, prob.data.t
    y, yb = prob.data.y, prob.y_bin
    kinds = [
        (LossKind.ml_ps(), None),
        (LossKind.cal_ps(1), None),
        (LossKind.cal_ps(0), None),
        (LossKind.ml_or("identity", 1), y),
        (LossKind.ml_or("logistic", 1), yb),
        (LossKind.ml_or("identity", 0), y),
        (LossKind.wl_or(gamma, "identity", 1), y),
        (LossKind.wl_or(gamma, "identity", 0), y),
        (LossKind.wl_or(gamma, "logistic", 1), yb),
        (LossKind.wl_or(gamma, "logistic", 0), yb),
        (LossKind.wcal_ps(alpha, "identity"), None),
        (LossKind.wcal_ps(alpha, "logistic"), None),
    ]
    return [Loss(k, f, t, yy) for k, yy in kinds]


def fd_gradient(loss: Loss, theta: NDArray, h: float = 1e-5) -> NDArray:
    """Central finite-difference gradient of ``loss.value``."""
    g = np.empty_like(theta)
    for j in range(theta.size):
        e = np.zeros_like(theta)
        e[j] = h
        g[j] = (loss.value(theta + e) - loss.value(theta - e)) / (2.0 * h)
    return g


def gradient_error(loss: Loss, theta: NDArray) -> float:
    """max_j |analytic - FD| / max(1, max_j |analytic|)."""
    ga = loss.evaluate(theta).gradient
    gf = fd_gradient(loss, theta)
    return float(np.abs(ga - gf).max() / max(1.0, np.abs(ga).max()))


def check_gradients(points: int = 20, n: int = 200, p: int = 50, seed: int = 1,
                    tol: float = 1e-5) -> list[CheckResult]:
    prob = random_problem(seed, n, p)
    rng = np.random.default_rng(seed + 1)
    out = []
    for loss in loss_variants(prob, seed):
        worst = 0.0
        for _ in range(points):
            theta = loss.intercept_start() + rng.normal(0.0, 0.5 / math.sqrt(loss.dim),
                                                        loss.dim)
            worst = max(worst, gradient_error(loss, theta))
        out.append(CheckResult(f"gradient:{loss.kind.label}", worst <= tol,
                               f"max relative error {worst:.2e}"))
    return out


def kkt_instances(count: int = 50, n: int = 200, p: int = 50, seed: int = 2):
    """Yield (loss, lam) pairs with lam drawn in [0.05, 1] * lambda_max."""
    rng = np.random.default_rng(seed)
    for i in range(count):
        prob = random_problem(int(rng.integers(2 ** 31)), n, p)
        losses = loss_variants(prob, i)
        loss = losses[i % len(losses)]
        yield loss, float(rng.uniform(0.05, 1.0)) * lambda_max(loss)


def check_kkt_suite(count: int = 50, tol: float = 1e-6) -> list[CheckResult]:
    opts = SolverOptions(kkt_tol=tol)
    bad, conv, norm_bad = [], 0, []
    for loss, lam in kkt_instances(count):
        fit = fit_penalized(loss, lam, opts=opts)
        if not fit.converged:
            continue
        conv += 1
        if not check_kkt(fit, loss, tol).passed:
            bad.append(loss.kind.label)
        if loss.kind.variant is Variant.CAL_PS:
            eta = loss.f @ fit.coefficients
            if loss.kind.arm == 1:
                w = loss.t * np.exp(-eta)
                gap = abs(np.mean(loss.t + w) - 1.0)
            else:
                gap = abs(np.mean((1.0 - loss.t) * (1.0 + np.exp(eta))) - 1.0)
            if gap > tol:
                norm_bad.append(loss.kind.label)
    return [
        CheckResult("kkt:certificate", not bad and conv > 0,
                    f"{conv}/{count} converged; failures {bad}"),
        CheckResult("kkt:weight_normalization", not norm_bad, f"failures {norm_bad}"),
    ]


def check_constants(tol: float = 1e-8) -> list[CheckResult]:
    c = sim.CONSTANTS
    q = sim.quadrature_constants()
    analytic = {"c": c.c, "b2": c.b2, "m4": c.m4, "m6": c.m6}
    for j in range(4):
        analytic[f"mean{j + 1}"] = c.means[j]
        analytic[f"sd{j + 1}"] = c.sds[j]
    worst = max(abs(analytic[k] - q[k]) / max(1.0, abs(q[k])) for k in analytic)
    b2_gap = abs(c.b2 - q["b2"])
    tab_gap = abs(c.sds[1] - 0.54257865)
    return [
        CheckResult("constants:quadrature", worst <= tol, f"max relative gap {worst:.2e}"),
        CheckResult("constants:var_z", b2_gap <= 1e-12, f"gap {b2_gap:.2e}"),
        CheckResult("constants:tabulated_sd2", tab_gap <= 1e-6, f"gap {tab_gap:.2e}"),
    ]


def check_truncated_normal(draws: int = 1_000_000, seed: int = 3) -> CheckResult:
    rng = np.random.Generator(np.random.Philox(seed))
    z = sim.truncated_normal(rng, sim.TRUNCATION, draws)
    b2 = sim.CONSTANTS.b2
    mean_ok = abs(z.mean()) <= 3.0 * math.sqrt(b2) / math.sqrt(draws)
    var_ok = abs(z.var() - b2) <= 0.005
    range_ok = bool(np.all(np.abs(z) < sim.TRUNCATION))
    return CheckResult("truncated_normal:moments", mean_ok and var_ok and range_ok,
                       f"mean {z.mean():.2e}, var {z.var():.6f} vs {b2:.6f}")


def check_true_mu1(draws: int = 1_000_000, tol: float = 2e-3) -> list[CheckResult]:
    out = []
    for cfg, ref in sim.LOGISTIC_MU1.items():
        est, se = sim.monte_carlo_mu1(cfg, draws, seed=cfg)
        out.append(CheckResult(f"true_mu1:config{cfg}", bool(abs(est - ref) <= tol),
                               f"{est:.6f} (se {se:.1e}) vs {ref}"))
    return out


def run_checks(quick: bool = False) -> list[CheckResult]:
    results = check_gradients()
    results += check_kkt_suite()
    results += check_constants()
    if not quick:
        results.append(check_truncated_normal())
        results += check_true_mu1()
    return results
