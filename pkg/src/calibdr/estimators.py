"""Point estimates, influence-function variances and Wald intervals.

All variances are built from per-row influence values ``psi_i`` with
``V = mean((psi - mean(psi))**2)``; the standard error is ``sqrt(V / n)``.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from numpy.typing import NDArray
from scipy.special import expit, ndtri

from .dataset import DataError, ObservedData, RegressorBasis
from .losses import psi
from .solver import PenalizedFit


def z_quantile(level: float) -> float:
    """Two-sided normal critical value for a ``level`` confidence interval."""
    if not 0.0 < level < 1.0:
        raise ValueError("level must lie in (0, 1)")
    return float(ndtri(0.5 + 0.5 * level))


@dataclass(frozen=True)
class Estimate:
    target: str
    method: str
    point: float
    v_hat: float
    n: int
    level: float
    influence: NDArray | None = field(default=None, repr=False, compare=False)

    @property
    def variance(self) -> float:
        return self.v_hat / self.n

    @property
    def se(self) -> float:
        return float(np.sqrt(self.v_hat / self.n))

    @property
    def ci(self) -> tuple[float, float]:
        half = z_quantile(self.level) * self.se
        return self.point - half, self.point + half

    @property
    def ci_low(self) -> float:
        return self.ci[0]

    @property
    def ci_high(self) -> float:
        return self.ci[1]

    def covers(self, value: float, level: float | None = None) -> bool:
        half = z_quantile(self.level if level is None else level) * self.se
        return self.point - half <= value <= self.point + half

    def to_dict(self) -> dict:
        lo, hi = self.ci
        return {"target": self.target, "method": self.method, "point": self.point,
                "se": self.se, "v_hat": self.v_hat, "n": self.n, "level": self.level,
                "ci": [lo, hi]}


def _from_influence(target: str, method: str, point: float, infl: NDArray,
                    level: float, keep: bool = True) -> Estimate:
    centered = infl - infl.mean()
    v_hat = float(np.mean(centered ** 2))
    return Estimate(target, method, float(point), v_hat, infl.shape[0], level,
                    infl if keep else None)


@dataclass(frozen=True)
class FittedNuisances:
    """A propensity fit and an outcome fit on one basis, for one arm."""

    ps_fit: PenalizedFit
    or_fit: PenalizedFit
    basis: RegressorBasis
    arm: int = 1
    link: str = "identity"

    def propensity(self) -> NDArray:
        return propensity(self.ps_fit, self.basis)

    def untreated_propensity(self) -> NDArray:
        """1 - pi, computed as expit(-gamma'f) so the arm flip is exact."""
        return expit(-(self.basis.f @ self.ps_fit.coefficients))

    def outcome(self) -> NDArray:
        return outcome(self.or_fit, self.basis, self.link)


def propensity(ps_fit: PenalizedFit | NDArray, basis: RegressorBasis) -> NDArray:
    coef = getattr(ps_fit, "coefficients", ps_fit)
    return expit(basis.f @ coef)


def outcome(or_fit: PenalizedFit | NDArray, basis: RegressorBasis, link: str) -> NDArray:
    coef = getattr(or_fit, "coefficients", or_fit)
    return psi(basis.f @ coef, link)


def influence_phi(y, t, m_hat, pi_hat):
    """Augmented IPW integrand ``T Y / pi - (T / pi - 1) m``.

    ``y`` may be nan where ``t == 0``; those rows contribute ``m`` only.
    """
    y = np.asarray(y, dtype=float)
    t = np.asarray(t, dtype=float)
    pi_hat = np.asarray(pi_hat, dtype=float)
    if np.any(pi_hat <= 0):
        raise ValueError("pi_hat must be positive")
    ty = np.where(t == 1, y, 0.0) * t
    out = ty / pi_hat - (t / pi_hat - 1.0) * m_hat
    return out if out.ndim else float(out)


def phi_nu0(y, t, m_hat, pi_hat):
    """Integrand for E(T Y^0): ``(1-T) pi Y / (1-pi) - ((1-T) / (1-pi) - 1) m``."""
    y = np.asarray(y, dtype=float)
    t = np.asarray(t, dtype=float)
    pi_hat = np.asarray(pi_hat, dtype=float)
    if np.any(pi_hat >= 1):
        raise ValueError("pi_hat must be below 1")
    u = 1.0 - t
    uy = np.where(u == 1, y, 0.0) * u
    out = uy * pi_hat / (1.0 - pi_hat) - (u / (1.0 - pi_hat) - 1.0) * m_hat
    return out if out.ndim else float(out)


def _method_tag(nuis: FittedNuisances) -> str:
    ps = nuis.ps_fit.loss_kind.variant.value
    orv = nuis.or_fit.loss_kind.variant.value
    tag = {"cal_ps": "RCAL", "ml_ps": "RML", "wcal_ps": "RWCAL"}.get(ps, ps)
    return tag + "." + {"wl_or": "RWL", "ml_or": "RML"}.get(orv, orv)


def aipw_mu1(nuis: FittedNuisances, data: ObservedData, level: float = 0.95) -> Estimate:
    """Augmented IPW estimate of E(Y^1) with influence-function variance."""
    data.require_outcome(1)
    pi = nuis.propensity()
    if np.any(pi[data.t == 1] <= 0):
        raise ValueError("fitted propensity is 0 on a treated row")
    phi = influence_phi(data.y, data.t, nuis.outcome(), pi)
    return _from_influence("mu1", _method_tag(nuis), phi.mean(), phi, level)


def aipw_mu0(nuis: FittedNuisances, data: ObservedData, level: float = 0.95) -> Estimate:
    """Augmented IPW estimate of E(Y^0): the treated-arm form with T -> 1-T, pi -> 1-pi."""
    data.require_outcome(0)
    q = nuis.untreated_propensity()
    if np.any(q[data.t == 0] <= 0):
        raise ValueError("fitted propensity is 1 on an untreated row")
    phi = influence_phi(data.y, 1.0 - data.t, nuis.outcome(), q)
    return _from_influence("mu0", _method_tag(nuis), phi.mean(), phi, level)


def difference(a: Estimate, b: Estimate, target: str) -> Estimate:
    """``a - b`` with variance from the per-row influence difference."""
    if a.influence is None or b.influence is None:
        raise ValueError("both estimates must carry influence values")
    infl = (a.influence - a.point) - (b.influence - b.point)
    return _from_influence(target, a.method, a.point - b.point, infl + (a.point - b.point),
                           a.level)


def ate(nuis1: FittedNuisances, nuis0: FittedNuisances, data: ObservedData,
        level: float = 0.95) -> Estimate:
    """mu1 - mu0, each arm with its own propensity and outcome fits."""
    return difference(aipw_mu1(nuis1, data, level), aipw_mu0(nuis0, data, level), "ate")


@dataclass(frozen=True)
class AttResult:
    nu1: Estimate
    nu0: Estimate
    att: Estimate


def att(nuis0: FittedNuisances, data: ObservedData, level: float = 0.95) -> AttResult:
    """E(Y^1 | T=1), E(Y^0 | T=1) and their difference from untreated-arm fits."""
    data.require_outcome(0)
    data.require_outcome(1)
    t = data.t
    pt = t.mean()
    if pt == 0:
        raise DataError("no treated rows")
    pi = nuis0.propensity()
    if np.any(pi[t == 0] >= 1):
        raise ValueError("fitted propensity is 1 on an untreated row")
    tag = _method_tag(nuis0)
    ty = np.where(t == 1, data.y, 0.0)
    nu1 = ty.mean() / pt
    infl1 = t * (ty - nu1) / pt
    phi = phi_nu0(data.y, t, nuis0.outcome(), pi)
    nu0 = phi.mean() / pt
    infl0 = (phi - t * nu0) / pt
    # influence values are mean-zero here; shift so the estimate is their mean
    e1 = _from_influence("nu1", tag, nu1, infl1 + nu1, level)
    e0 = _from_influence("nu0", tag, nu0, infl0 + nu0, level)
    return AttResult(e1, e0, difference(e1, e0, "att"))


def ipw_ratio(ps_fit: PenalizedFit | NDArray, basis: RegressorBasis, data: ObservedData,
              level: float = 0.95, arm: int = 1) -> Estimate:
    """Ratio IPW estimate with a nominal variance treating weights as fixed.

    Arm 1 weights treated rows by ``1/pi``; arm 0 weights untreated rows by
    ``1/(1-pi)``.
    """
    data.require_outcome(arm)
    pi = propensity(ps_fit, basis)
    s = data.t if arm == 1 else 1.0 - data.t
    p_arm = pi if arm == 1 else 1.0 - pi
    if np.any(p_arm[s == 1] <= 0):
        raise ValueError("zero fitted probability on a contributing row")
    w = s / p_arm
    denom = w.mean()
    if denom == 0:
        raise ValueError("zero IPW denominator")
    ys = np.where(s == 1, data.y, 0.0)
    point = float((w * ys).mean() / denom)
    infl = w * (ys - point) / denom
    tag = "IPW." + ("RCAL" if getattr(ps_fit, "loss_kind", None) is not None
                    and ps_fit.loss_kind.variant.value == "cal_ps" else "RML")
    return _from_influence("mu1" if arm == 1 else "mu0", tag, point, infl + point, level)


def ipw_ratio_mu1(ps_fit, basis: RegressorBasis, data: ObservedData,
                  level: float = 0.95) -> Estimate:
    return ipw_ratio(ps_fit, basis, data, level, arm=1)


def or_only(or_fit: PenalizedFit | NDArray, basis: RegressorBasis, data: ObservedData,
            link: str = "identity", level: float = 0.95, arm: int = 1) -> Estimate:
    """Mean of fitted outcomes over all rows; nominal plug-in variance."""
    m = outcome(or_fit, basis, link)
    return _from_influence("mu1" if arm == 1 else "mu0", "OR.RML", m.mean(), m, level)


def or_only_mu1(or_fit, basis: RegressorBasis, data: ObservedData, link: str = "identity",
                level: float = 0.95) -> Estimate:
    return or_only(or_fit, basis, data, link, level, arm=1)


def balance_report(ps_fit: PenalizedFit | NDArray, basis: RegressorBasis,
                   data: ObservedData) -> NDArray:
    """``|mean(T f_j / pi) - mean(f_j)|`` for each j = 1..p."""
    pi = propensity(ps_fit, basis)
    w = data.t / pi
    f = basis.f[:, 1:]
    return np.abs(f.T @ w - f.sum(axis=0)) / data.n


def prediction_gap(nuis: FittedNuisances, data: ObservedData) -> float:
    """|AIPW point - mean(T Y + (1-T) m)|; zero when the outcome fit's intercept KKT holds."""
    est = aipw_mu1(nuis, data)
    t = data.t
    alt = np.mean(np.where(t == 1, data.y, 0.0) + (1.0 - t) * nuis.outcome())
    return abs(est.point - alt)


def prediction_range(nuis: FittedNuisances, data: ObservedData) -> tuple[float, float]:
    """Range of treated outcomes together with untreated fitted values."""
    t = data.t
    vals = np.concatenate([data.y[t == 1], nuis.outcome()[t == 0]])
    return float(vals.min()), float(vals.max())
