import numpy as np
import pytest

from calibdr.checks import loss_variants, random_problem
from calibdr.dataset import ObservedData, build_basis
from calibdr.losses import Loss, LossKind
from calibdr.solver import (KktReport, PenalizedFit, SolverOptions, check_kkt, fit_path,
                            fit_penalized, kkt_slack)
from calibdr.tuning import lambda_max
from oracles import brute_force_minimize, penalized


@pytest.fixture(scope="module")
def prob():
    return random_problem(21, n=200, p=20)


@pytest.fixture(scope="module")
def variants(prob):
    return loss_variants(prob, seed=7)


def test_above_lambda_max_gives_intercept_only(variants):
    for loss in variants:
        lam = lambda_max(loss)
        fit = fit_penalized(loss, lam * 1.0001)
        assert fit.converged
        assert np.all(fit.coefficients[1:] == 0.0), loss.kind.label
        assert fit.coefficients[0] == pytest.approx(loss.intercept_start()[0], abs=1e-12)
        assert fit.active_set.size == 0


def test_converged_fits_pass_kkt_and_descend(variants):
    for loss in variants:
        for frac in (0.5, 0.1):
            fit = fit_penalized(loss, frac * lambda_max(loss))
            assert fit.converged, loss.kind.label
            assert check_kkt(fit, loss).passed
            h = np.array(fit.objective_history)
            assert np.all(np.diff(h) <= 1e-15), loss.kind.label
            assert fit.objective == h[-1]


def test_calibration_fit_normalizes_weights(prob):
    loss = Loss.build(LossKind.cal_ps(1), prob.basis, prob.data)
    fit = fit_penalized(loss, 0.2 * lambda_max(loss))
    pi = 1 / (1 + np.exp(-(prob.basis.f @ fit.coefficients)))
    t = prob.data.t
    assert abs(np.mean(t / pi) - 1.0) <= fit.kkt_report.tol


def test_calibration_equations_at_zero_penalty():
    prob = random_problem(5, n=150, p=3)
    loss = Loss.build(LossKind.cal_ps(1), prob.basis, prob.data)
    fit = fit_penalized(loss, 0.0)
    assert fit.converged
    f, t = prob.basis.f, prob.data.t
    pi = 1 / (1 + np.exp(-(f @ fit.coefficients)))
    lhs = (t / pi) @ f / len(t)
    np.testing.assert_allclose(lhs, f.mean(axis=0), atol=1e-6)


def oracle_cases(prob):
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
        ("wl_or", LossKind.wl_or(gam, "identity", 0), y, {"y": y, "companion": gam, "arm": 0}),
        ("wl_or", LossKind.wl_or(gam, "logistic", 1), yb,
         {"y": yb, "companion": gam, "link": "logistic"}),
        ("wcal_ps", LossKind.wcal_ps(alp, "identity"), None, {"companion": alp}),
        ("wcal_ps", LossKind.wcal_ps(alp, "logistic"), None,
         {"companion": alp, "link": "logistic"}),
    ]


@pytest.mark.parametrize("case", range(10))
def test_matches_brute_force_oracle(case):
    prob = random_problem(31, n=60, p=2)
    variant, kind, y, kw = oracle_cases(prob)[case]
    f, t = prob.basis.f, prob.data.t
    lam = 0.03
    fit = fit_penalized(Loss(kind, f, t, y), lam)
    assert fit.converged
    ref = brute_force_minimize(penalized(variant, lam, f, t, **kw), 3)
    assert np.abs(fit.coefficients - ref).max() < 1e-3, kind.label


def test_kkt_at_lambda_max_passes_with_max_slack_at_argmax(prob):
    loss = Loss.build(LossKind.ml_ps(), prob.basis, prob.data)
    lam = lambda_max(loss)
    theta = loss.intercept_start()
    fit = PenalizedFit(theta, lam, loss.kind, 0.0, 0, True,
                       KktReport(True, 1e-6, np.zeros(loss.dim), ()))
    report = check_kkt(fit, loss, 1e-6)
    assert report.passed
    g = loss.evaluate(theta).gradient
    # the binding coordinate sits exactly at the bound: zero slack, zero margin
    j = int(np.argmax(np.abs(g[1:]))) + 1
    assert abs(g[j]) == pytest.approx(lam, rel=1e-15)


def test_kkt_names_violating_coordinate(prob):
    loss = Loss.build(LossKind.ml_ps(), prob.basis, prob.data)
    tol = 1e-6
    theta = loss.intercept_start()
    g = np.abs(loss.evaluate(theta).gradient[1:])
    order = np.argsort(g)[::-1]
    j = int(order[0]) + 1
    assert g[order[0]] - g[order[1]] > 20 * tol
    # zero slopes with lam 10 tol below the largest gradient: only j violates
    fit = PenalizedFit(theta, g[order[0]] - 10 * tol, loss.kind, 0.0, 0, True,
                       KktReport(True, tol, np.zeros(loss.dim), ()))
    report = check_kkt(fit, loss, tol)
    assert not report.passed
    assert report.failing == (j,)
    assert report.max_violation == pytest.approx(10 * tol, rel=1e-6)


def test_kkt_slack_cases():
    g = np.array([1e-3, 0.5, 0.7, -0.2])
    theta = np.array([1.0, 0.0, 0.0, 0.3])
    s = kkt_slack(g, theta, 0.6)
    np.testing.assert_allclose(s, [1e-3, 0.0, 0.1, 0.4])


def test_path_single_point_and_ordering(prob):
    loss = Loss.build(LossKind.cal_ps(1), prob.basis, prob.data)
    lam = lambda_max(loss)
    fits = fit_path(loss, [lam])
    assert len(fits) == 1 and fits[0].active_set.size == 0
    with pytest.raises(ValueError):
        fit_path(loss, [lam / 2, lam])
    with pytest.raises(ValueError):
        fit_path(loss, [])


def test_warm_start_matches_cold_start(variants):
    opts = SolverOptions(kkt_tol=1e-9)
    for loss in variants[:6]:
        lams = lambda_max(loss) / 2.0 ** np.arange(11)
        warm = fit_path(loss, lams, opts)
        for lam, w in zip(lams, warm):
            if not w.converged:
                continue
            cold = fit_penalized(loss, lam, opts=opts)
            if not cold.converged:
                continue
            assert abs(w.objective - cold.objective) <= 1e-8, loss.kind.label
            assert np.abs(w.coefficients - cold.coefficients).max() <= 1e-6, loss.kind.label


def test_threshold_sides():
    prob = random_problem(8, n=200, p=10)
    loss = Loss.build(LossKind.cal_ps(1), prob.basis, prob.data)
    lam = lambda_max(loss)
    assert fit_penalized(loss, 1.0001 * lam).active_set.size == 0
    assert fit_penalized(loss, 0.99 * lam).active_set.size >= 1


def test_nonconvergence_is_reported_not_raised(prob):
    loss = Loss.build(LossKind.cal_ps(1), prob.basis, prob.data)
    fit = fit_penalized(loss, 0.05 * lambda_max(loss), opts=SolverOptions(max_outer=1))
    assert not fit.converged and fit.status == "max_outer"
    assert fit.outer_iterations == 1
    # still no worse than the start
    assert fit.objective <= fit.objective_history[0]


def test_unbounded_calibration_loss_stops_as_diverged():
    # a covariate that separates the arms perfectly makes the calibration
    # loss unbounded below once the penalty is small enough
    n = 40
    x = np.linspace(-1, 1, n)
    t = (x > 0).astype(float)
    d = ObservedData(t, np.zeros(n), x)
    loss = Loss.build(LossKind.cal_ps(1), build_basis(d), d)
    fit = fit_penalized(loss, 1e-4)
    assert not fit.converged and fit.status == "diverged"


def test_input_validation(prob):
    loss = Loss.build(LossKind.ml_ps(), prob.basis, prob.data)
    with pytest.raises(ValueError):
        fit_penalized(loss, -1.0)
    with pytest.raises(ValueError):
        fit_penalized(loss, 0.1, init=np.zeros(3))
    with pytest.raises(ValueError):
        SolverOptions(line_search_shrink=1.0)
    with pytest.raises(ValueError):
        SolverOptions(kkt_tol=0)
