"""Acceptance suite: one test per release criterion.

Each test carries an ``acceptance`` marker; the terminal summary prints one
PASS/FAIL line per criterion.
"""

import json
import os
import time

import numpy as np
import pytest

from calibdr import checks, cli
from calibdr.checks import random_problem
from calibdr.estimators import FittedNuisances, influence_phi, phi_nu0
from calibdr.losses import Loss, LossKind
from calibdr.simulation import (ScenarioSpec, generate_scenario, run_monte_carlo,
                                run_replication)
from calibdr.solver import fit_penalized
from calibdr.tuning import SIMULATION_GRID, lambda_max
from oracles import brute_force_minimize, penalized


@pytest.mark.acceptance(1, "analytic gradients match finite differences (rel err <= 1e-5)")
def test_gradient_suite():
    start = time.perf_counter()
    results = checks.check_gradients(points=20, n=200, p=50, tol=1e-5)
    elapsed = time.perf_counter() - start
    labels = {r.name for r in results}
    for need in ("ML_PS", "CAL_PS_1", "CAL_PS_0", "ML_OR_1[identity]", "ML_OR_1[logistic]",
                 "WL_OR_1[identity]", "WL_OR_0[identity]", "WL_OR_1[logistic]",
                 "WL_OR_0[logistic]", "WCAL_PS[identity]", "WCAL_PS[logistic]"):
        assert f"gradient:{need}" in labels
    failed = [(r.name, r.detail) for r in results if not r.passed]
    assert not failed
    assert elapsed < 10.0


@pytest.mark.acceptance(2, "KKT certificates and weight normalization on 50 instances")
def test_kkt_certification():
    start = time.perf_counter()
    results = checks.check_kkt_suite(count=50, tol=1e-6)
    elapsed = time.perf_counter() - start
    for r in results:
        assert r.passed, (r.name, r.detail)
    assert elapsed < 60.0


def _oracle_cases(prob):
    f, t, y, yb = prob.basis.f, prob.data.t, prob.data.y, prob.y_bin
    gam = np.array([0.1, 0.2, -0.1])
    alp = np.array([0.2, 0.5, 0.3])
    return [
        ("ml_ps", LossKind.ml_ps(), None, {}),
        ("cal_ps", LossKind.cal_ps(1), None, {}),
        ("cal_ps", LossKind.cal_ps(0), None, {"arm": 0}),
        ("ml_or", LossKind.ml_or("identity"), y, {"y": y}),
        ("ml_or", LossKind.ml_or("logistic"), yb, {"y": yb, "link": "logistic"}),
        ("wl_or", LossKind.wl_or(gam, "identity", 1), y, {"y": y, "companion": gam}),
        ("wl_or", LossKind.wl_or(gam, "identity", 0), y,
         {"y": y, "companion": gam, "arm": 0}),
        ("wl_or", LossKind.wl_or(gam, "logistic", 1), yb,
         {"y": yb, "companion": gam, "link": "logistic"}),
        ("wcal_ps", LossKind.wcal_ps(alp, "logistic"), None,
         {"companion": alp, "link": "logistic"}),
    ]


@pytest.mark.acceptance(3, "solver matches brute-force oracle at p=2 (max norm <= 1e-3)")
def test_oracle_equivalence():
    prob = random_problem(31, n=50, p=2)
    f, t = prob.basis.f, prob.data.t
    lam = 0.05
    worst = 0.0
    for variant, kind, y, kw in _oracle_cases(prob):
        fit = fit_penalized(Loss(kind, f, t, y), lam)
        assert fit.converged, kind.label
        ref = brute_force_minimize(penalized(variant, lam, f, t, **kw), 3)
        gap = float(np.abs(fit.coefficients - ref).max())
        worst = max(worst, gap)
        assert gap <= 1e-3, (kind.label, gap)


@pytest.mark.acceptance(4, "prediction form and boundedness on 100 C1 datasets")
def test_prediction_form_and_boundedness():
    spec = ScenarioSpec("C1", 1, n=400, p=100, seed=4040, methods=("RCAL.RWL",))
    converged = 0
    for seq in np.random.SeedSequence(spec.seed).spawn(100):
        res = run_replication(spec, seq, SIMULATION_GRID)
        if res.status["RCAL.RWL"] != "ok":
            continue
        converged += 1
        # the dataset is the first draw of the replication's stream
        draw = generate_scenario(spec, np.random.Generator(np.random.Philox(seq)))
        y_obs = draw.data.y[draw.data.t == 1]
        assert res.prediction_gap <= 1e-6 * (1 + np.abs(y_obs).max())
        assert res.in_range
    assert converged >= 90


@pytest.mark.acceptance(5, "ATT influence identity holds row-wise to 1e-12")
def test_att_identity():
    for seed in range(10):
        prob = random_problem(500 + seed, n=200, p=20)
        cal = Loss.build(LossKind.cal_ps(0), prob.basis, prob.data)
        ps = fit_penalized(cal, 0.2 * lambda_max(cal))
        wl = Loss.build(LossKind.wl_or(ps, "identity", 0), prob.basis, prob.data)
        orf = fit_penalized(wl, 0.2 * lambda_max(wl))
        nuis = FittedNuisances(ps, orf, prob.basis, 0)
        t, y = prob.data.t, prob.data.y
        pi, m = nuis.propensity(), nuis.outcome()
        lhs = phi_nu0(y, t, m, pi)
        rhs = influence_phi(y, 1 - t, m, nuis.untreated_propensity()) - (1 - t) * y
        assert np.abs(lhs - rhs).max() <= 1e-12


@pytest.mark.acceptance(6, "standardization constants match quadrature")
def test_standardization_constants():
    for r in checks.check_constants(tol=1e-8):
        assert r.passed, (r.name, r.detail)


@pytest.mark.acceptance(7, "Monte-Carlo recomputation of the logistic true means")
def test_true_mu1_recomputation():
    start = time.perf_counter()
    results = checks.check_true_mu1(draws=1_000_000, tol=2e-3)
    elapsed = time.perf_counter() - start
    for r in results:
        assert r.passed, (r.name, r.detail)
    assert elapsed < 60.0


@pytest.mark.slow
@pytest.mark.acceptance(8, "C1 n=400 p=100 200-rep study within tolerance of reference")
def test_desk_scale_replication():
    spec = ScenarioSpec("C1", 1, n=400, p=100, seed=20180101,
                        methods=("RML.RML", "RCAL.RWL"))
    report = run_monte_carlo(spec, 200, SIMULATION_GRID, workers=os.cpu_count() or 1)
    rcal = report.methods["RCAL.RWL"]
    rml = report.methods["RML.RML"]
    print(f"\nRCAL.RWL bias {rcal.bias:.4f} cov90 {rcal.cov90:.3f}; "
          f"RML.RML bias {rml.bias:.4f} cov90 {rml.cov90:.3f}")
    assert abs(rcal.bias - (-0.041)) <= 0.020
    assert abs(rcal.cov90 - 0.829) <= 0.07
    assert abs(rml.bias - (-0.061)) <= 0.020
    assert report.boundedness_failures == 0


@pytest.mark.acceptance(9, "simulate report is byte-identical serial vs 8 workers")
def test_determinism_serial_vs_parallel(tmp_path):
    base = ["simulate", "--scenario", "C1", "--n", "100", "--p", "10", "--reps", "8",
            "--seed", "7", "--methods", "rml.rml,rcal.rwl"]
    assert cli.main(base + ["--workers", "1", "--out", str(tmp_path / "serial.json")]) == 0
    assert cli.main(base + ["--workers", "8", "--out", str(tmp_path / "par.json")]) == 0
    serial = (tmp_path / "serial.json").read_bytes()
    assert serial == (tmp_path / "par.json").read_bytes()
    assert json.loads(serial)["reps"] == 8
