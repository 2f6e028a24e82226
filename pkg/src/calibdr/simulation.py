"""Monte-Carlo harness for the Kang-Schafer-type high-dimensional design.

Covariates are independent standard normals truncated to (-a, a), a = 2.5,
rescaled to unit variance.  The first four are passed through nonlinear
transforms and standardized with closed-form moments to give X-dagger; the
working models always use f = (1, X-dagger).  Scenarios C1-C3 have linear
outcomes and C4-C6 binary outcomes:

    C1, C4   PS and OR both linear in X-dagger (both models correct)
    C2, C5   OR linear in raw X (OR model wrong)
    C3, C6   PS linear in raw X (PS model wrong)

Each replication draws from its own Philox stream spawned from the run
seed, so results do not depend on worker count or scheduling.
"""

from __future__ import annotations

import json
import math
import warnings
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field

import numpy as np
from numpy.typing import NDArray
from scipy import integrate
from scipy.special import expit, ndtr, ndtri

from .dataset import ObservedData, RegressorBasis
from .estimators import (Estimate, FittedNuisances, aipw_mu1, ipw_ratio_mu1, or_only_mu1,
                         prediction_range)
from .losses import Loss, LossKind
from .solver import PenalizedFit, SolverOptions
from .tuning import SIMULATION_GRID, GridSpec, cross_validate, fit_selected

TRUNCATION = 2.5
METHODS = ("RML.RML", "RCAL.RWL", "IPW.RML", "IPW.RCAL", "OR.RML")
CONFIGS = ("C1", "C2", "C3", "C4", "C5", "C6")
# Monte-Carlo values of E(Y^1) for the binary-outcome scenarios with a
# correct OR model, outcome configurations 1 and 2 (standard errors < 8e-6)
LOGISTIC_MU1 = {1: 0.4949676, 2: 0.4992349}


def _phi(z: float) -> float:
    return math.exp(-0.5 * z * z) / math.sqrt(2.0 * math.pi)


@dataclass(frozen=True)
class StandardizationConstants:
    """Closed-form moments of the truncated-normal design."""

    a: float
    c: float
    b2: float
    m4: float
    m6: float
    means: tuple[float, float, float, float]
    sds: tuple[float, float, float, float]

    @property
    def b(self) -> float:
        return math.sqrt(self.b2)


def _x2_ratio_variance(a: float, c: float, b: float) -> float:
    # var(X2 / (1 + e^{X1})) = E[(1 + e^{X1})^{-2}] since E X2^2 = 1
    val, _ = integrate.quad(lambda z: _phi(z) / (1.0 + math.exp(z / b)) ** 2, -a, a,
                            epsabs=1e-14, epsrel=1e-13)
    return val / c


def standardization_constants(a: float = TRUNCATION) -> StandardizationConstants:
    """Means and standard deviations of the four transformed covariates."""
    pa = _phi(a)
    c = 2.0 * float(ndtr(a)) - 1.0
    b2 = 1.0 - 2.0 * a * pa / c
    b = math.sqrt(b2)
    m4 = (3.0 * c - 2.0 * a * (a * a + 3.0) * pa) / (b2 * b2 * c)
    m6 = (15.0 * c - 2.0 * a * (a ** 4 + 5.0 * a * a + 15.0) * pa) / (b2 ** 3 * c)

    def trunc_mgf(s: float) -> float:
        # E exp(s Z / b) for Z truncated standard normal
        sb = s / b
        return math.exp(0.5 * sb * sb) * (ndtr(a - sb) - ndtr(-a - sb)) / c

    e1 = trunc_mgf(0.5)
    v1 = trunc_mgf(1.0) - e1 * e1
    v2 = _x2_ratio_variance(a, c, b)
    e3 = 3.0 * 0.6 / 25.0 ** 2 + 0.6 ** 3
    e3_6 = (m6 * m6 / 25.0 ** 6 + 15.0 * m4 * m4 / 25.0 ** 4 * 0.6 ** 2
            + 15.0 / 25.0 ** 2 * 0.6 ** 4 + 0.6 ** 6)
    v3 = e3_6 - e3 * e3
    e4 = 2.0 + 20.0 ** 2
    e4_4 = (2.0 * m4 + 6.0) + 6.0 * 2.0 * 20.0 ** 2 + 20.0 ** 4
    v4 = e4_4 - e4 * e4
    return StandardizationConstants(
        a, c, b2, m4, m6, (e1, 10.0, e3, e4),
        (math.sqrt(v1), math.sqrt(v2), math.sqrt(v3), math.sqrt(v4)))


CONSTANTS = standardization_constants()


def quadrature_constants(a: float = TRUNCATION) -> dict[str, float]:
    """The same constants by direct numerical integration of their definitions.

    Products of independent coordinates are integrated as products of
    one-dimensional moments; everything else is a single adaptive integral
    against the truncated density.
    """
    c, _ = integrate.quad(_phi, -a, a, epsabs=1e-14, epsrel=1e-12)

    def moment(g) -> float:
        # quad flags roundoff once it is at machine precision; that is the goal
        with warnings.catch_warnings():
            warnings.simplefilter("ignore", integrate.IntegrationWarning)
            v, _ = integrate.quad(lambda z: g(z) * _phi(z), -a, a, epsabs=1e-14,
                                  epsrel=1e-12, limit=200)
        return v / c

    b2 = moment(lambda z: z * z)
    b = math.sqrt(b2)
    m4 = moment(lambda z: (z / b) ** 4)
    m6 = moment(lambda z: (z / b) ** 6)
    e1 = moment(lambda z: math.exp(0.5 * z / b))
    e1_2 = moment(lambda z: math.exp(z / b))
    v2 = moment(lambda z: 1.0 / (1.0 + math.exp(z / b)) ** 2)
    # (u + .6)^k with u = X1 X3 / 25: expand and integrate moments of X1, X3
    mx = {k: moment(lambda z, k=k: (z / b) ** k) for k in range(7)}
    e3 = sum(math.comb(3, k) * (mx[k] ** 2) / 25.0 ** k * 0.6 ** (3 - k) for k in range(4))
    e3_6 = sum(math.comb(6, k) * (mx[k] ** 2) / 25.0 ** k * 0.6 ** (6 - k) for k in range(7))
    # S = X2 + X4
    ms = {k: sum(math.comb(k, i) * mx[i] * mx[k - i] for i in range(k + 1)) for k in range(5)}
    e4 = sum(math.comb(2, k) * ms[k] * 20.0 ** (2 - k) for k in range(3))
    e4_4 = sum(math.comb(4, k) * ms[k] * 20.0 ** (4 - k) for k in range(5))
    return {"c": c, "b2": b2, "m4": m4, "m6": m6,
            "mean1": e1, "sd1": math.sqrt(e1_2 - e1 * e1),
            "mean2": 10.0, "sd2": math.sqrt(v2),
            "mean3": e3, "sd3": math.sqrt(e3_6 - e3 * e3),
            "mean4": e4, "sd4": math.sqrt(e4_4 - e4 * e4)}


def truncated_normal(rng: np.random.Generator, a: float = TRUNCATION, size=None,
                     u: NDArray | None = None) -> NDArray:
    """N(0, 1) conditioned on (-a, a) by inverse CDF.

    ``u`` supplies the uniforms directly (for testing); otherwise they are
    drawn from ``rng``.
    """
    if a <= 0:
        raise ValueError("a must be positive")
    if u is None:
        u = rng.random(size)
    lo = ndtr(-a)
    z = ndtri(lo + np.asarray(u) * (1.0 - 2.0 * lo))
    # the clip only matters for u within rounding of 0 or 1
    return np.clip(z, np.nextafter(-a, 0.0), np.nextafter(a, 0.0))


def draw_covariates(rng: np.random.Generator, n: int, p: int,
                    consts: StandardizationConstants = CONSTANTS) -> NDArray:
    """n x p matrix of unit-variance truncated normals."""
    return truncated_normal(rng, consts.a, (n, p)) / consts.b


def make_xdagger(x: NDArray, consts: StandardizationConstants = CONSTANTS) -> NDArray:
    """Transform the first four columns and standardize them analytically."""
    x = np.asarray(x, dtype=float)
    if x.ndim != 2 or x.shape[1] < 4:
        raise ValueError("need at least four covariate columns")
    out = x.copy()
    x1, x2, x3, x4 = x[:, 0], x[:, 1], x[:, 2], x[:, 3]
    raw = (np.exp(0.5 * x1),
           10.0 + x2 / (1.0 + np.exp(x1)),
           (0.04 * x1 * x3 + 0.6) ** 3,
           (x2 + x4 + 20.0) ** 2)
    for j in range(4):
        out[:, j] = (raw[j] - consts.means[j]) / consts.sds[j]
    return out


@dataclass(frozen=True)
class ScenarioSpec:
    config: str = "C1"
    outcome_config: int = 1
    n: int = 400
    p: int = 100
    seed: int = 20180101
    methods: tuple[str, ...] = ("RML.RML", "RCAL.RWL")

    def __post_init__(self) -> None:
        if self.config not in CONFIGS:
            raise ValueError(f"config must be one of {CONFIGS}")
        if self.outcome_config not in (1, 2):
            raise ValueError("outcome_config must be 1 or 2")
        if self.p < 4:
            raise ValueError("p must be at least 4")
        if self.n < 50:
            raise ValueError("n must be at least 50")
        bad = [m for m in self.methods if m not in METHODS]
        if bad or not self.methods:
            raise ValueError(f"unknown methods {bad}; choose from {METHODS}")

    @property
    def logistic(self) -> bool:
        return self.config in ("C4", "C5", "C6")

    @property
    def link(self) -> str:
        return "logistic" if self.logistic else "identity"


def _ps_index(x: NDArray, xd: NDArray, config: str) -> NDArray:
    z = x if config in ("C3", "C6") else xd
    return z[:, 0] - 0.5 * z[:, 1] + 0.25 * z[:, 2] + 0.1 * z[:, 3]


def _or_index(x: NDArray, xd: NDArray, config: str, outcome_config: int) -> NDArray:
    z = x if config in ("C2", "C5") else xd
    lead = 1.0 if outcome_config == 1 else 0.25
    return lead * z[:, 0] + 0.5 * (z[:, 1] + z[:, 2] + z[:, 3])


@dataclass(frozen=True)
class ScenarioDraw:
    data: ObservedData
    x: NDArray = field(repr=False)
    y1: NDArray = field(repr=False)
    propensity: NDArray = field(repr=False)


def generate_scenario(spec: ScenarioSpec, rng: np.random.Generator,
                      keep_untreated_y: bool = False) -> ScenarioDraw:
    """One dataset of size ``spec.n``; ``data.x`` holds X-dagger.

    T is drawn before Y^1 (they are independent given X).  Y is stored as
    missing on untreated rows unless ``keep_untreated_y``.
    """
    x = draw_covariates(rng, spec.n, spec.p)
    xd = make_xdagger(x)
    pi = expit(-_ps_index(x, xd, spec.config))
    t = (rng.random(spec.n) < pi).astype(float)
    eta = _or_index(x, xd, spec.config, spec.outcome_config)
    if spec.logistic:
        y1 = (rng.random(spec.n) < expit(eta)).astype(float)
    else:
        y1 = eta + rng.standard_normal(spec.n)
    y = y1 if keep_untreated_y else np.where(t == 1, y1, np.nan)
    data = ObservedData(t, y, xd, tuple(f"xd{j + 1}" for j in range(spec.p)))
    return ScenarioDraw(data, x, y1, pi)


def true_mu1(config: str, outcome_config: int) -> float:
    """E(Y^1): 0 for linear outcomes, 1/2 for C5 by symmetry, tabulated otherwise."""
    if config in ("C1", "C2", "C3"):
        return 0.0
    if config == "C5":
        return 0.5
    return LOGISTIC_MU1[outcome_config]


def monte_carlo_mu1(outcome_config: int, draws: int = 1_000_000, seed: int = 0,
                    chunk: int = 250_000) -> tuple[float, float]:
    """Estimate E expit(OR index of X-dagger) and its Monte-Carlo standard error."""
    rng = np.random.Generator(np.random.Philox(seed))
    total = total2 = 0.0
    done = 0
    while done < draws:
        m = min(chunk, draws - done)
        x = draw_covariates(rng, m, 4)
        v = expit(_or_index(x, make_xdagger(x), "C4", outcome_config))
        total += v.sum()
        total2 += (v * v).sum()
        done += m
    mean = total / draws
    var = total2 / draws - mean * mean
    return mean, math.sqrt(var / draws)


def simulation_basis(data: ObservedData) -> RegressorBasis:
    """f = (1, X-dagger), already standardized analytically."""
    f = np.hstack([np.ones((data.n, 1)), data.x])
    return RegressorBasis(f, data.x_names, None, None)


# ---------------------------------------------------------------------------
# replications


@dataclass
class RepResult:
    estimates: dict[str, Estimate | None]
    status: dict[str, str]
    prediction_gap: float | None = None
    in_range: bool | None = None


def _cv_fit(loss: Loss, grid: GridSpec, seed: int, opts: SolverOptions) -> PenalizedFit | None:
    try:
        cv = cross_validate(loss, grid, 5, seed, opts)
    except RuntimeError:
        return None
    fit = fit_selected(loss, cv, opts)
    return fit if fit.converged else None


def run_replication(spec: ScenarioSpec, seed_seq: np.random.SeedSequence,
                    grid: GridSpec = SIMULATION_GRID,
                    opts: SolverOptions | None = None) -> RepResult:
    """Generate one dataset and compute every requested method."""
    opts = opts or SolverOptions()
    rng = np.random.Generator(np.random.Philox(seed_seq))
    draw = generate_scenario(spec, rng)
    data = draw.data
    basis = simulation_basis(data)
    fold_seeds = rng.integers(0, 2 ** 63 - 1, size=4)
    need = set(spec.methods)
    fits: dict[str, PenalizedFit | None] = {}
    if need & {"RML.RML", "IPW.RML"}:
        fits["ps_rml"] = _cv_fit(Loss.build(LossKind.ml_ps(), basis, data), grid,
                                 int(fold_seeds[0]), opts)
    if need & {"RML.RML", "OR.RML"}:
        fits["or_rml"] = _cv_fit(Loss.build(LossKind.ml_or(spec.link), basis, data), grid,
                                 int(fold_seeds[1]), opts)
    if need & {"RCAL.RWL", "IPW.RCAL"}:
        fits["ps_rcal"] = _cv_fit(Loss.build(LossKind.cal_ps(1), basis, data), grid,
                                  int(fold_seeds[2]), opts)
    if "RCAL.RWL" in need and fits["ps_rcal"] is not None:
        try:
            wl = Loss.build(LossKind.wl_or(fits["ps_rcal"], spec.link), basis, data)
        except FloatingPointError:
            fits["or_rwl"] = None
        else:
            fits["or_rwl"] = _cv_fit(wl, grid, int(fold_seeds[3]), opts)

    def pair(ps: str, orf: str) -> FittedNuisances | None:
        if fits.get(ps) is None or fits.get(orf) is None:
            return None
        return FittedNuisances(fits[ps], fits[orf], basis, 1, spec.link)

    est: dict[str, Estimate | None] = {}
    status: dict[str, str] = {}
    out = RepResult(est, status)
    for method in spec.methods:
        e = None
        if method == "RML.RML":
            nu = pair("ps_rml", "or_rml")
            e = None if nu is None else aipw_mu1(nu, data)
        elif method == "RCAL.RWL":
            nu = pair("ps_rcal", "or_rwl")
            if nu is not None:
                e = aipw_mu1(nu, data)
                t = data.t
                alt = np.mean(np.where(t == 1, data.y, 0.0) + (1.0 - t) * nu.outcome())
                out.prediction_gap = abs(e.point - alt)
                lo, hi = prediction_range(nu, data)
                out.in_range = lo <= e.point <= hi
        elif method in ("IPW.RML", "IPW.RCAL"):
            ps = fits["ps_rml" if method == "IPW.RML" else "ps_rcal"]
            e = None if ps is None else ipw_ratio_mu1(ps, basis, data)
        elif method == "OR.RML":
            orf = fits["or_rml"]
            e = None if orf is None else or_only_mu1(orf, basis, data, spec.link)
        # drop per-row influence values; replications only need summaries
        est[method] = None if e is None else Estimate(e.target, method, e.point, e.v_hat,
                                                      e.n, e.level)
        status[method] = "ok" if e is not None else "nonconverged"
    return out


@dataclass
class MethodSummary:
    bias: float
    sqrt_var: float
    sqrt_evar: float
    cov90: float
    cov95: float
    t_stats: list[float]
    points: list[float]
    successes: int
    nonconverged: int

    def to_dict(self) -> dict:
        return {"bias": self.bias, "sqrt_var": self.sqrt_var, "sqrt_evar": self.sqrt_evar,
                "cov90": self.cov90, "cov95": self.cov95, "successes": self.successes,
                "nonconverged": self.nonconverged, "t_stats": self.t_stats}


@dataclass
class MonteCarloReport:
    spec: ScenarioSpec
    reps: int
    grid: str
    true_mu1: float
    methods: dict[str, MethodSummary]
    prediction_gap_max: float | None
    boundedness_failures: int

    def to_dict(self) -> dict:
        s = self.spec
        return {
            "scenario": {"config": s.config, "outcome_config": s.outcome_config, "n": s.n,
                         "p": s.p, "seed": s.seed, "methods": list(s.methods)},
            "reps": self.reps, "grid": self.grid, "true_mu1": self.true_mu1,
            "methods": {k: v.to_dict() for k, v in self.methods.items()},
            "checks": {"prediction_gap_max": self.prediction_gap_max,
                       "boundedness_failures": self.boundedness_failures},
        }

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True)


def summarize(estimates: list[Estimate | None], truth: float) -> MethodSummary:
    ok = [e for e in estimates if e is not None]
    fails = len(estimates) - len(ok)
    if not ok:
        nan = float("nan")
        return MethodSummary(nan, nan, nan, nan, nan, [], [], 0, fails)
    pts = np.array([e.point for e in ok])
    se = np.array([e.se for e in ok])
    var_hat = np.array([e.variance for e in ok])
    z90, z95 = ndtri(0.95), ndtri(0.975)
    err = np.abs(pts - truth)
    with np.errstate(divide="ignore", invalid="ignore"):
        tst = (pts - truth) / se
    return MethodSummary(
        float(pts.mean() - truth),
        float(pts.std(ddof=1)) if pts.size > 1 else 0.0,
        float(np.sqrt(var_hat.mean())),
        float(np.mean(err <= z90 * se)),
        float(np.mean(err <= z95 * se)),
        [float(v) for v in tst], [float(v) for v in pts], len(ok), fails)


def _rep_worker(args) -> RepResult:
    spec, seq, grid, opts = args
    return run_replication(spec, seq, grid, opts)


def run_monte_carlo(spec: ScenarioSpec, reps: int, grid: GridSpec = SIMULATION_GRID,
                    opts: SolverOptions | None = None, workers: int = 1,
                    progress=None) -> MonteCarloReport:
    """Repeat :func:`run_replication` ``reps`` times and summarize.

    Replication ``r`` uses child ``r`` of ``SeedSequence(spec.seed)``, so the
    report is identical for any ``workers``.
    """
    if reps < 2:
        raise ValueError("reps must be at least 2")
    seqs = np.random.SeedSequence(spec.seed).spawn(reps)
    jobs = [(spec, s, grid, opts) for s in seqs]
    results: list[RepResult] = []
    if workers <= 1:
        for r, job in enumerate(jobs):
            results.append(_rep_worker(job))
            if progress:
                progress(r + 1, reps)
    else:
        with ProcessPoolExecutor(max_workers=workers) as pool:
            for r, res in enumerate(pool.map(_rep_worker, jobs)):
                results.append(res)
                if progress:
                    progress(r + 1, reps)
    truth = true_mu1(spec.config, spec.outcome_config)
    methods = {m: summarize([res.estimates[m] for res in results], truth)
               for m in spec.methods}
    gaps = [res.prediction_gap for res in results if res.prediction_gap is not None]
    bound_fail = sum(1 for res in results if res.in_range is False)
    return MonteCarloReport(spec, reps, str(grid), truth, methods,
                            max(gaps) if gaps else None, bound_fail)
