"""Convex losses for propensity-score and outcome-regression coefficients.

Every loss is a sample average over rows of a convex function of the linear
predictor ``eta_i = theta' f(X_i)``.  Evaluating one returns the value, the
exact gradient and the per-row curvature weights ``omega_i`` such that the
Hessian is ``F' diag(omega) F / n``.  Averages are always over all rows of the
(sub)sample, including rows that contribute zero.

Variants
--------
ML_PS     logistic log-likelihood for T
CAL_PS    calibration loss, treated arm ``T e^{-eta} + (1-T) eta`` or its
          untreated mirror obtained by T -> 1-T, eta -> -eta
ML_OR     GLM quasi-likelihood for Y on rows with T == arm
WL_OR     the same, with rows weighted by the fitted odds e^{-gamma'f}
          (treated) or e^{gamma'f} (untreated) from a propensity fit
WCAL_PS   calibration loss weighted by psi'(alpha'f) from an outcome fit
"""

from __future__ import annotations

import enum
from dataclasses import dataclass, field

import numpy as np
from numpy.typing import NDArray
from scipy.special import expit

from .dataset import DataError, ObservedData, RegressorBasis


class Variant(str, enum.Enum):
    ML_PS = "ml_ps"
    CAL_PS = "cal_ps"
    ML_OR = "ml_or"
    WL_OR = "wl_or"
    WCAL_PS = "wcal_ps"


LINKS = ("identity", "logistic")


class NonFiniteLoss(FloatingPointError):
    """A loss evaluation overflowed or produced nan."""


def _coef_array(c) -> NDArray:
    c = getattr(c, "coefficients", c)
    a = np.array(c, dtype=float)
    a.setflags(write=False)
    return a


@dataclass(frozen=True, eq=False)
class LossKind:
    """Which loss to build, plus the fixed companion fit for WL/WCAL.

    Use the constructors rather than the raw fields.
    """

    variant: Variant
    arm: int = 1
    link: str = "logistic"
    companion: NDArray | None = field(default=None, repr=False)

    def __post_init__(self) -> None:
        if self.arm not in (0, 1):
            raise ValueError("arm must be 0 or 1")
        if self.link not in LINKS:
            raise ValueError(f"link must be one of {LINKS}")
        if self.variant in (Variant.WL_OR, Variant.WCAL_PS) and self.companion is None:
            raise ValueError(f"{self.variant.value} needs a companion coefficient vector")

    @classmethod
    def ml_ps(cls) -> "LossKind":
        return cls(Variant.ML_PS)

    @classmethod
    def cal_ps(cls, arm: int = 1) -> "LossKind":
        return cls(Variant.CAL_PS, arm=arm)

    @classmethod
    def ml_or(cls, link: str = "identity", arm: int = 1) -> "LossKind":
        return cls(Variant.ML_OR, arm=arm, link=link)

    @classmethod
    def wl_or(cls, ps_fit, link: str = "identity", arm: int = 1) -> "LossKind":
        return cls(Variant.WL_OR, arm=arm, link=link, companion=_coef_array(ps_fit))

    @classmethod
    def wcal_ps(cls, or_fit, link: str = "identity") -> "LossKind":
        return cls(Variant.WCAL_PS, arm=1, link=link, companion=_coef_array(or_fit))

    @property
    def is_outcome(self) -> bool:
        return self.variant in (Variant.ML_OR, Variant.WL_OR)

    @property
    def label(self) -> str:
        if self.variant is Variant.ML_PS:
            return "ML_PS"
        if self.variant is Variant.CAL_PS:
            return f"CAL_PS_{self.arm}"
        if self.variant is Variant.ML_OR:
            return f"ML_OR_{self.arm}[{self.link}]"
        if self.variant is Variant.WL_OR:
            return f"WL_OR_{self.arm}[{self.link}]"
        return f"WCAL_PS[{self.link}]"


@dataclass(frozen=True)
class LossEval:
    value: float
    gradient: NDArray
    curvature_weights: NDArray


def psi(u: NDArray, link: str) -> NDArray:
    """Inverse link: the fitted mean for linear predictor u."""
    return u if link == "identity" else expit(u)


def psi_prime(u: NDArray, link: str) -> NDArray:
    if link == "identity":
        return np.ones_like(u)
    m = expit(u)
    return m * (1.0 - m)


def _cumulant(u: NDArray, link: str) -> NDArray:
    # antiderivative of psi with value 0 at u = 0 (up to a constant)
    return 0.5 * u * u if link == "identity" else np.logaddexp(0.0, u)


def _odds_weights(t: NDArray, eta: NDArray, arm: int) -> NDArray:
    """T e^{-eta} for arm 1, (1-T) e^{eta} for arm 0; zero off-arm."""
    on = t == arm
    w = np.zeros_like(eta)
    w[on] = np.exp(-eta[on] if arm == 1 else eta[on])
    return w


class Loss:
    """A loss bound to a basis and a treatment/outcome sample.

    Parameters
    ----------
    kind : LossKind
    f : ndarray (n, 1+p)
    t : ndarray (n,)
    y : ndarray (n,), optional
        Required for outcome losses; nan allowed on rows that do not
        contribute.
    """

    def __init__(self, kind: LossKind, f: NDArray, t: NDArray, y: NDArray | None = None):
        self.kind = kind
        self.f = f
        self.t = np.asarray(t, dtype=float)
        self.n = f.shape[0]
        v = kind.variant
        # row weights that multiply each row's term
        if v is Variant.WL_OR or v is Variant.WCAL_PS:
            if kind.companion.shape != (f.shape[1],):
                raise DataError("companion coefficients do not match the basis")
            eta_c = f @ kind.companion
        if v is Variant.ML_OR:
            self.weights = (self.t == kind.arm).astype(float)
        elif v is Variant.WL_OR:
            with np.errstate(over="ignore"):
                self.weights = _odds_weights(self.t, eta_c, kind.arm)
            if not np.all(np.isfinite(self.weights)):
                raise NonFiniteLoss(f"{kind.label}: non-finite propensity odds weight")
        elif v is Variant.WCAL_PS:
            self.weights = psi_prime(eta_c, kind.link)
        else:
            self.weights = None
        if kind.is_outcome:
            if y is None:
                raise DataError(f"{kind.label} needs outcomes")
            y = np.asarray(y, dtype=float)
            contrib = self.t == kind.arm
            miss = np.flatnonzero(contrib & np.isnan(y))
            if miss.size:
                raise DataError(f"{kind.label}: outcome missing on contributing row {miss[0]}")
            self.y = np.where(contrib, y, 0.0)
        else:
            self.y = None

    @classmethod
    def build(cls, kind: LossKind, basis: RegressorBasis, data: ObservedData) -> "Loss":
        return cls(kind, basis.f, data.t, data.y if kind.is_outcome else None)

    def subset(self, rows: NDArray) -> "Loss":
        """The same loss with the sample average taken over ``rows`` only."""
        sub = object.__new__(Loss)
        sub.kind = self.kind
        sub.f = self.f[rows]
        sub.t = self.t[rows]
        sub.n = sub.f.shape[0]
        sub.weights = None if self.weights is None else self.weights[rows]
        sub.y = None if self.y is None else self.y[rows]
        return sub

    @property
    def dim(self) -> int:
        return self.f.shape[1]

    def _terms(self, eta: NDArray) -> tuple[NDArray, NDArray, NDArray]:
        """Per-row (term, d term / d eta, d^2 term / d eta^2)."""
        k = self.kind
        t = self.t
        if k.variant is Variant.ML_PS:
            m = expit(eta)
            return np.logaddexp(0.0, eta) - t * eta, m - t, m * (1.0 - m)
        if k.variant in (Variant.CAL_PS, Variant.WCAL_PS):
            if k.arm == 0:
                # evaluate the treated-arm form at (1-T, -eta) so both arms
                # share one code path; d/d eta flips sign, curvature does not
                val, d1, d2 = _cal_terms(1.0 - t, -eta)
                d1 = -d1
            else:
                val, d1, d2 = _cal_terms(t, eta)
            if self.weights is not None:
                c = self.weights
                return c * val, c * d1, c * d2
            return val, d1, d2
        s = self.weights
        val = s * (_cumulant(eta, k.link) - self.y * eta)
        return val, s * (psi(eta, k.link) - self.y), s * psi_prime(eta, k.link)

    def evaluate(self, theta: NDArray) -> LossEval:
        """Value, gradient and curvature weights at ``theta``.

        Raises
        ------
        NonFiniteLoss
            When the linear predictor or any returned quantity is not finite.
        """
        theta = np.asarray(theta, dtype=float)
        eta = self.f @ theta
        if not np.all(np.isfinite(eta)):
            raise NonFiniteLoss(f"{self.kind.label}: non-finite linear predictor")
        with np.errstate(over="ignore", invalid="ignore"):
            val, d1, d2 = self._terms(eta)
            value = float(val.mean())
            grad = self.f.T @ d1 / self.n
        if not (np.isfinite(value) and np.all(np.isfinite(grad)) and np.all(np.isfinite(d2))):
            raise NonFiniteLoss(f"{self.kind.label}: non-finite loss evaluation")
        return LossEval(value, grad, d2)

    def value(self, theta: NDArray) -> float:
        eta = self.f @ np.asarray(theta, dtype=float)
        with np.errstate(over="ignore", invalid="ignore"):
            return float(self._terms(eta)[0].mean())

    def intercept_start(self) -> NDArray:
        """Coefficients with zero slopes and the intercept at its stationary value."""
        theta = np.zeros(self.dim)
        theta[0] = self._stationary_intercept()
        return theta

    def _stationary_intercept(self) -> float:
        k = self.kind
        t = self.t
        if k.variant is Variant.ML_PS:
            return _logit(t.mean())
        if k.variant in (Variant.CAL_PS, Variant.WCAL_PS):
            c = np.ones_like(t) if self.weights is None else self.weights
            on, off = (c * t).sum(), (c * (1.0 - t)).sum()
            if on <= 0 or off <= 0:
                raise DataError(f"{k.label}: both arms are needed for an intercept fit")
            # treated arm: e^{-g0} = off / on; untreated arm: e^{g0} = on / off
            return float(np.log(on / off))
        s = self.weights
        if s.sum() <= 0:
            raise DataError(f"{k.label}: no contributing rows")
        ybar = float((s * self.y).sum() / s.sum())
        return ybar if k.link == "identity" else _logit(ybar)


def _cal_terms(t: NDArray, eta: NDArray) -> tuple[NDArray, NDArray, NDArray]:
    e = _odds_weights(t, eta, 1)
    return e + (1.0 - t) * eta, (1.0 - t) - e, e


def _logit(p: float) -> float:
    p = min(max(p, 1e-10), 1.0 - 1e-10)
    return float(np.log(p / (1.0 - p)))


def eval_ml_ps(gamma: NDArray, basis: RegressorBasis, data: ObservedData) -> LossEval:
    return Loss.build(LossKind.ml_ps(), basis, data).evaluate(gamma)


def eval_cal_ps(gamma: NDArray, basis: RegressorBasis, data: ObservedData,
                arm: int = 1) -> LossEval:
    return Loss.build(LossKind.cal_ps(arm), basis, data).evaluate(gamma)


def eval_ml_or(alpha: NDArray, basis: RegressorBasis, data: ObservedData,
               link: str = "identity", arm: int = 1) -> LossEval:
    return Loss.build(LossKind.ml_or(link, arm), basis, data).evaluate(alpha)


def eval_wl_or(alpha: NDArray, basis: RegressorBasis, data: ObservedData,
               link: str, arm: int, ps_fit) -> LossEval:
    return Loss.build(LossKind.wl_or(ps_fit, link, arm), basis, data).evaluate(alpha)


def eval_wcal_ps(gamma: NDArray, basis: RegressorBasis, data: ObservedData,
                 or_fit, link: str = "identity") -> LossEval:
    return Loss.build(LossKind.wcal_ps(or_fit, link), basis, data).evaluate(gamma)
