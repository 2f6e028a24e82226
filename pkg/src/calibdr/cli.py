"""Command-line interface: ``calibdr {fit,estimate,simulate,check}``.

Exit codes: 0 success, 1 failed self-checks, 2 input errors, 3 solver
non-convergence under ``--strict``.
"""

from __future__ import annotations

import argparse
import csv
import json
import logging
import os
import sys
from dataclasses import dataclass, field

import numpy as np

from . import checks
from .dataset import DataError, ObservedData, RegressorBasis, build_basis, load_csv
from .estimators import (Estimate, FittedNuisances, aipw_mu0, aipw_mu1, att, balance_report,
                         difference, ipw_ratio, or_only, prediction_range)
from .losses import Loss, LossKind
from .simulation import METHODS, ScenarioSpec, run_monte_carlo
from .solver import PenalizedFit, SolverOptions, fit_penalized
from .tuning import GridSpec, cross_validate, fit_selected, lambda_max

log = logging.getLogger("calibdr")

DEFAULT_SEED = 20180101
EXIT_CHECK_FAILED = 1
EXIT_INPUT = 2
EXIT_NONCONVERGED = 3

CLI_METHODS = ("rcal-rwl", "rml-rml", "ipw-rcal", "ipw-rml", "or-rml")
TARGETS = ("mu1", "mu0", "ate", "att")


class InputError(Exception):
    """Invalid command-line input; mapped to exit code 2."""


# ---------------------------------------------------------------------------
# nuisance fitting


@dataclass
class FitRecord:
    """One penalized fit plus how its lambda was chosen."""

    role: str
    fit: PenalizedFit
    lambda_max: float
    cv: dict | None = None

    def to_dict(self, basis: RegressorBasis) -> dict:
        raw = basis.raw_coefficients(self.fit.coefficients)
        active = [int(j) for j in self.fit.active_set]
        return {
            "role": self.role,
            "loss": self.fit.loss_kind.label,
            "lambda_selected": self.fit.lam,
            "lambda_max": self.lambda_max,
            "active_set_size": len(active),
            "active_set": [basis.names[j - 1] for j in active],
            "converged": self.fit.converged,
            "status": self.fit.status,
            "kkt_max_violation": self.fit.kkt_report.max_violation,
            "outer_iterations": self.fit.outer_iterations,
            "coefficients": {"(intercept)": float(raw[0]),
                             **{basis.names[j - 1]: float(raw[j]) for j in active}},
            "cv": self.cv,
        }


@dataclass
class ArmFits:
    arm: int
    ps: FitRecord | None = None
    outcome: FitRecord | None = None
    warnings: list[str] = field(default_factory=list)


def _fit_loss(loss: Loss, role: str, lam: str, grid: GridSpec, k: int, seed: int,
              opts: SolverOptions, warnings: list[str]) -> FitRecord:
    lmax = lambda_max(loss)
    if lam != "auto":
        fit = fit_penalized(loss, float(lam), opts=opts)
        rec = FitRecord(role, fit, lmax)
    else:
        try:
            cv = cross_validate(loss, grid, k, seed, opts, lam_max=lmax)
        except RuntimeError as exc:
            # no grid point converged on every fold: keep the intercept-only fit
            warnings.append(f"{role}: {exc}; using lambda_max")
            fit = fit_penalized(loss, lmax, opts=opts)
            return FitRecord(role, fit, lmax, None)
        fit = fit_selected(loss, cv, opts)
        rec = FitRecord(role, fit, lmax, {
            "grid": [float(v) for v in cv.grid],
            "cv_values": [float(v) if np.isfinite(v) else None for v in cv.cv_values],
            "valid": [bool(v) for v in cv.valid],
            "selected_index": cv.selected_index, "folds": cv.k, "seed": cv.seed})
    if not rec.fit.converged:
        warnings.append(f"{role}: solver did not converge ({rec.fit.status})")
    return rec


def fit_arm(method: str, arm: int, data: ObservedData, basis: RegressorBasis, link: str,
            lam: str, grid: GridSpec, k: int, seed_seq: np.random.SeedSequence,
            opts: SolverOptions) -> ArmFits:
    """Propensity and outcome fits for one arm as ``method`` prescribes."""
    out = ArmFits(arm)
    ps_seed, or_seed = (int(s.generate_state(1)[0]) for s in seed_seq.spawn(2))
    ps_kind = {"rcal-rwl": LossKind.cal_ps(arm), "ipw-rcal": LossKind.cal_ps(arm),
               "rml-rml": LossKind.ml_ps(), "ipw-rml": LossKind.ml_ps()}.get(method)
    if ps_kind is not None:
        out.ps = _fit_loss(Loss.build(ps_kind, basis, data), f"ps{arm}", lam, grid, k,
                           ps_seed, opts, out.warnings)
    if method == "rcal-rwl":
        or_kind = LossKind.wl_or(out.ps.fit, link, arm)
    elif method in ("rml-rml", "or-rml"):
        or_kind = LossKind.ml_or(link, arm)
    else:
        return out
    data.require_outcome(arm)
    out.outcome = _fit_loss(Loss.build(or_kind, basis, data), f"or{arm}", lam, grid, k,
                            or_seed, opts, out.warnings)
    return out


def _nuisances(af: ArmFits, basis: RegressorBasis, link: str) -> FittedNuisances:
    return FittedNuisances(af.ps.fit, af.outcome.fit, basis, af.arm, link)


def estimate_target(method: str, target: str, fits: dict[int, ArmFits], data: ObservedData,
                    basis: RegressorBasis, link: str, level: float) -> dict[str, Estimate]:
    """Point estimates for ``target``, keyed by estimand name."""

    def arm_estimate(arm: int) -> Estimate:
        af = fits[arm]
        if method in ("rcal-rwl", "rml-rml"):
            nu = _nuisances(af, basis, link)
            return aipw_mu1(nu, data, level) if arm == 1 else aipw_mu0(nu, data, level)
        if method in ("ipw-rcal", "ipw-rml"):
            return ipw_ratio(af.ps.fit, basis, data, level, arm)
        return or_only(af.outcome.fit, basis, data, link, level, arm)

    if target == "mu1":
        return {"mu1": arm_estimate(1)}
    if target == "mu0":
        return {"mu0": arm_estimate(0)}
    if target == "ate":
        e1, e0 = arm_estimate(1), arm_estimate(0)
        return {"mu1": e1, "mu0": e0, "ate": difference(e1, e0, "ate")}
    res = att(_nuisances(fits[0], basis, link), data, level)
    return {"nu1": res.nu1, "nu0": res.nu0, "att": res.att}


def _arms_for(target: str) -> tuple[int, ...]:
    return {"mu1": (1,), "mu0": (0,), "ate": (1, 0), "att": (0,)}[target]


# ---------------------------------------------------------------------------
# commands


def _load(args) -> tuple[ObservedData, RegressorBasis]:
    if not args.data:
        raise InputError("--data is required")
    if not os.path.exists(args.data):
        raise InputError(f"{args.data}: no such file")
    data = load_csv(args.data, args.y_col, args.t_col, args.x_cols)
    basis = build_basis(data, standardize=not args.no_standardize, expansion=args.expansion)
    return data, basis


def _validate(args) -> None:
    if not 0.0 < args.level < 1.0:
        raise InputError("--level must lie in (0, 1)")
    if args.cv_folds < 2:
        raise InputError("--cv-folds must be at least 2")
    if args.target == "att" and args.method not in ("rcal-rwl", "rml-rml"):
        raise InputError("--target att needs an augmented method (rcal-rwl or rml-rml)")
    if args.link == "logistic" and args.method.startswith("ipw"):
        log.info("--link is ignored by IPW methods")
    if args.lambda_ != "auto":
        try:
            if float(args.lambda_) < 0:
                raise ValueError
        except ValueError:
            raise InputError("--lambda must be 'auto' or a nonnegative number") from None


def _run_fits(args, data, basis) -> dict[int, ArmFits]:
    grid = GridSpec.parse(args.grid)
    opts = SolverOptions()
    arms = _arms_for(args.target)
    seqs = np.random.SeedSequence(args.seed).spawn(2)
    return {arm: fit_arm(args.method, arm, data, basis, args.link, args.lambda_, grid,
                         args.cv_folds, seqs[arm], opts) for arm in arms}


def _fits_document(args, data, basis, fits) -> dict:
    doc = {"method": args.method, "target": args.target, "link": args.link,
           "n": data.n, "p": basis.p, "seed": args.seed, "grid": args.grid,
           "arms": {}, "warnings": []}
    for arm, af in fits.items():
        entry = {}
        if af.ps is not None:
            entry["ps"] = af.ps.to_dict(basis)
            b = (balance_report(af.ps.fit, basis, data) if arm == 1
                 else _balance0(af.ps.fit, basis, data))
            entry["balance_max"] = float(b.max()) if b.size else 0.0
            entry["balance_mean"] = float(b.mean()) if b.size else 0.0
        if af.outcome is not None:
            entry["outcome"] = af.outcome.to_dict(basis)
        doc["arms"][str(arm)] = entry
        doc["warnings"].extend(af.warnings)
    return doc


def _balance0(ps_fit: PenalizedFit, basis: RegressorBasis, data: ObservedData) -> np.ndarray:
    # untreated arm: |mean((1-T) f_j / (1 - pi)) - mean(f_j)|
    return balance_report(-ps_fit.coefficients, basis, data.flipped())


def _converged(fits: dict[int, ArmFits]) -> bool:
    recs = [r for af in fits.values() for r in (af.ps, af.outcome) if r is not None]
    return all(r.fit.converged for r in recs)


def _write(doc: dict, out: str | None) -> None:
    text = json.dumps(doc, indent=2, sort_keys=True, allow_nan=True) + "\n"
    if out:
        with open(out, "w", encoding="utf-8") as fh:
            fh.write(text)
    else:
        sys.stdout.write(text)


def cmd_fit(args) -> int:
    _validate(args)
    data, basis = _load(args)
    fits = _run_fits(args, data, basis)
    _write(_fits_document(args, data, basis, fits), args.out)
    return EXIT_NONCONVERGED if args.strict and not _converged(fits) else 0


def cmd_estimate(args) -> int:
    _validate(args)
    data, basis = _load(args)
    for arm in _arms_for(args.target) + ((1,) if args.target == "att" else ()):
        data.require_outcome(arm)
    fits = _run_fits(args, data, basis)
    doc = _fits_document(args, data, basis, fits)
    ests = estimate_target(args.method, args.target, fits, data, basis, args.link, args.level)
    doc["level"] = args.level
    doc["estimates"] = {k: e.to_dict() for k, e in ests.items()}
    checks_doc = {}
    if args.method in ("rcal-rwl", "rml-rml") and args.target in ("mu1", "ate"):
        nu = _nuisances(fits[1], basis, args.link)
        lo, hi = prediction_range(nu, data)
        p1 = ests["mu1"].point
        checks_doc["boundedness"] = "pass" if lo <= p1 <= hi else "fail"
        checks_doc["prediction_range"] = [lo, hi]
    doc["checks"] = checks_doc
    if args.dump_influence:
        doc["influence"] = {k: [float(v) for v in e.influence]
                            for k, e in ests.items() if e.influence is not None}
    _write(doc, args.out)
    return EXIT_NONCONVERGED if args.strict and not _converged(fits) else 0


def _parse_methods(text: str) -> tuple[str, ...]:
    lookup = {m.lower(): m for m in METHODS}
    out = []
    for tok in text.split(","):
        tok = tok.strip().lower()
        if not tok:
            continue
        if tok not in lookup:
            raise InputError(f"unknown method {tok!r}; choose from {', '.join(METHODS)}")
        out.append(lookup[tok])
    if not out:
        raise InputError("--methods is empty")
    return tuple(out)


def _workers(args) -> int:
    if args.workers is not None:
        return args.workers
    env = os.environ.get("CALIBDR_THREADS")
    if env:
        try:
            return max(1, int(env))
        except ValueError:
            raise InputError("CALIBDR_THREADS must be an integer") from None
    return 1


def cmd_simulate(args) -> int:
    try:
        spec = ScenarioSpec(args.scenario.upper(), args.outcome_config, args.n, args.p,
                            args.seed, _parse_methods(args.methods))
    except ValueError as exc:
        raise InputError(str(exc)) from None
    if args.reps < 2:
        raise InputError("--reps must be at least 2")
    grid = GridSpec.parse(args.grid)

    def progress(done: int, total: int) -> None:
        log.info("replication %d/%d", done, total)

    report = run_monte_carlo(spec, args.reps, grid, SolverOptions(), _workers(args), progress)
    text = report.to_json() + "\n"
    if args.out:
        with open(args.out, "w", encoding="utf-8") as fh:
            fh.write(text)
    else:
        sys.stdout.write(text)
    if args.tstats_out:
        with open(args.tstats_out, "w", newline="", encoding="utf-8") as fh:
            w = csv.writer(fh)
            w.writerow(["method", "index", "t_stat"])
            for m, s in report.methods.items():
                for i, v in enumerate(s.t_stats):
                    w.writerow([m, i, repr(v)])
    return 0


def cmd_check(args) -> int:
    results = checks.run_checks(quick=args.quick)
    failed = [r for r in results if not r.passed]
    for r in results:
        print(f"{'PASS' if r.passed else 'FAIL'}  {r.name}: {r.detail}")
    if failed:
        print("failed checks: " + ", ".join(r.name for r in failed))
        return EXIT_CHECK_FAILED
    return 0


# ---------------------------------------------------------------------------
# argument parsing


def _data_flags(p: argparse.ArgumentParser) -> None:
    p.add_argument("--data", help="CSV file with a header row")
    p.add_argument("--y-col", default="y")
    p.add_argument("--t-col", default="t")
    p.add_argument("--x-cols", default="x*", help="comma list or glob of covariate columns")
    p.add_argument("--expansion", choices=("raw", "pairwise"), default="raw",
                   help="raw covariates, or main effects plus filtered pairwise products")
    p.add_argument("--no-standardize", action="store_true",
                   help="use covariates as given instead of sample-standardizing them")
    p.add_argument("--method", choices=CLI_METHODS, default="rcal-rwl")
    p.add_argument("--target", choices=TARGETS, default="mu1")
    p.add_argument("--link", choices=("identity", "logistic"), default="identity")
    p.add_argument("--lambda", dest="lambda_", default="auto",
                   help="'auto' for cross-validation or a fixed penalty")
    p.add_argument("--cv-folds", type=int, default=5)
    p.add_argument("--grid", default="pow2q:25", help="pow2:N or pow2q:N")
    p.add_argument("--level", type=float, default=0.95)
    p.add_argument("--seed", type=int, default=DEFAULT_SEED)
    p.add_argument("--out", help="write the JSON document here instead of stdout")
    p.add_argument("--strict", action="store_true",
                   help="exit 3 if any fit fails to converge")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="calibdr", description=__doc__.splitlines()[0])
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("fit", help="fit propensity and outcome models")
    _data_flags(p)
    p.set_defaults(func=cmd_fit)

    p = sub.add_parser("estimate", help="point estimates and confidence intervals")
    _data_flags(p)
    p.add_argument("--dump-influence", action="store_true",
                   help="include per-row influence values in the output")
    p.set_defaults(func=cmd_estimate)

    p = sub.add_parser("simulate", help="Monte-Carlo study on a simulated scenario")
    p.add_argument("--scenario", default="C1", help="C1..C6")
    p.add_argument("--outcome-config", type=int, default=1, choices=(1, 2))
    p.add_argument("--n", type=int, default=400)
    p.add_argument("--p", type=int, default=100)
    p.add_argument("--reps", type=int, default=200)
    p.add_argument("--methods", default="RML.RML,RCAL.RWL")
    p.add_argument("--grid", default="pow2:11", help="pow2:N or pow2q:N")
    p.add_argument("--seed", type=int, default=DEFAULT_SEED)
    p.add_argument("--workers", type=int, default=None,
                   help="worker processes (default: $CALIBDR_THREADS or 1)")
    p.add_argument("--out", help="write the JSON report here instead of stdout")
    p.add_argument("--tstats-out", help="also write t-statistics as CSV")
    p.set_defaults(func=cmd_simulate)

    p = sub.add_parser("check", help="run the self-verification battery")
    p.add_argument("--quick", action="store_true", help="skip the 10^6-draw checks")
    p.set_defaults(func=cmd_check)
    return parser


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(name)s: %(message)s")
    try:
        return args.func(args)
    except (InputError, DataError, OSError) as exc:
        print(f"calibdr: error: {exc}", file=sys.stderr)
        return EXIT_INPUT
    except ValueError as exc:
        # malformed grid specs and similar argument-level errors
        print(f"calibdr: error: {exc}", file=sys.stderr)
        return EXIT_INPUT


if __name__ == "__main__":
    sys.exit(main())
