import math

import numpy as np
import pytest
from scipy.integrate import dblquad
from scipy.special import expit

from halmle.basis import BasisSpec
from halmle.data import make_folds
from halmle.estimands import (EstimationError, FunctionOutcome, ate, canonical_gradient_tsm, constant_outcome,
                              ctmle_select, exact_remainder_tsm, fit_outcome, fit_propensity,
                              function_propensity, ipw_tsm, orthogonalized_tmle_update, plugin_tsm,
                              tmle_update_tsm)
from halmle.sim import get_dgp

DGP = get_dgp("DGP-A")
SPEC = BasisSpec(knot_strategy="quantiles", n_knots=6)


@pytest.fixture(scope="module")
def sample():
    return DGP.sample(300, 11)


@pytest.fixture(scope="module")
def hal_q(sample):
    return fit_outcome(sample, SPEC, make_folds(sample, 5, 1), grid_size=15)


def _true_q():
    return FunctionOutcome(lambda a, W: DGP.q0(np.full(W.shape[0], float(a)), W), label="truth")


def _true_g():
    return function_propensity(DGP.g0, label="truth")


def test_plugin_with_true_regression_is_close_to_truth():
    ds = DGP.sample(4000, 1)
    rep = plugin_tsm(_true_q(), ds, _true_g())
    assert abs(rep.psi - DGP.truth) <= 4 * rep.se


def test_canonical_gradient_has_mean_zero_at_truth():
    ds = DGP.sample(4000, 2)
    q1 = DGP.q0(np.ones(ds.n), ds.W)
    D = canonical_gradient_tsm(ds.A, ds.Y, q1, DGP.g0(ds.W), DGP.truth)
    assert abs(D.mean()) <= 4 * D.std() / math.sqrt(ds.n)
    with pytest.raises(ValueError):
        canonical_gradient_tsm(ds.A, ds.Y, q1, np.ones(ds.n), DGP.truth)


def test_exact_remainder_matches_independent_quadrature():
    # misspecified Q and G; the von Mises identity
    # Psi(Q) - psi0 + E0 D*(Q, G) = E0[(Q - Q0)(G - G0) / G]
    # is evaluated on its left-hand side by adaptive quadrature
    Qfn = lambda a, W: expit(0.8 * a + 0.5 * W[:, 0] - 0.3)
    Gfn = lambda W: expit(0.1 + 0.3 * W[:, 1])
    Q = FunctionOutcome(Qfn)
    G = function_propensity(Gfn, bounds=(0.001, 0.999))

    def lhs_integrand(w2, w1):
        W = np.array([[w1, w2]])
        q, q0, g, g0 = Qfn(1.0, W)[0], DGP.q0(np.ones(1), W)[0], Gfn(W)[0], DGP.g0(W)[0]
        eD = g0 / g * (q0 - q) + q  # E0[D* + Psi(Q) | W]
        return q - q0 + eD - q

    lhs, _ = dblquad(lhs_integrand, 0, 1, 0, 1, epsabs=1e-12, epsrel=1e-12)
    r, err = exact_remainder_tsm(Q, G, lambda a, W: DGP.q0(np.full(W.shape[0], float(a)), W), DGP.g0, 2,
                                 points=400, return_error=True)
    assert r == pytest.approx(lhs, abs=1e-6)
    assert err < 1e-5


def test_tmle_solves_score_equation(sample, hal_q):
    G = _true_g()
    Qs, rep = tmle_update_tsm(hal_q, G, sample)
    assert abs(rep.score_mean) <= rep.diagnostics["tol"]
    # the targeted model reproduces the reported estimate
    assert rep.psi == pytest.approx(np.mean(Qs.predict(sample.W, 1)), abs=1e-12)


def test_infinite_tolerance_returns_plugin(sample, hal_q):
    Qs, rep = tmle_update_tsm(hal_q, _true_g(), sample, tol=math.inf)
    assert rep.diagnostics["steps"] == 0
    assert rep.psi == pytest.approx(plugin_tsm(hal_q, sample).psi, abs=1e-12)


def test_score_preserving_update(sample, hal_q):
    Qs, rep = orthogonalized_tmle_update(hal_q, _true_g(), sample)
    d = rep.diagnostics
    assert abs(rep.score_mean) <= d["tol"]
    assert d["battery_max"] <= 1e-5
    assert d["n_preserved_scores"] == hal_q.fit.active_set.size - 1
    assert rep.psi == pytest.approx(np.mean(Qs.predict(sample.W, 1)), abs=1e-10)


def test_score_preserving_update_with_empty_span(sample):
    q = fit_outcome(sample, SPEC, make_folds(sample, 5, 1), grid_size=2, ratio=0.999)
    assert q.fit.active_set.size < 2
    _, a = orthogonalized_tmle_update(q, _true_g(), sample)
    _, b = tmle_update_tsm(q, _true_g(), sample)
    assert a.psi == b.psi
    assert a.diagnostics["n_preserved_scores"] == 0


def test_ipw_with_constant_propensity():
    ds = get_dgp("DGP-A-RCT").sample(200, 3)
    rep = ipw_tsm(function_propensity(lambda W: np.full(W.shape[0], 0.5)), ds)
    assert rep.psi == pytest.approx(np.mean(ds.A * ds.Y) / 0.5)
    assert rep.score_mean == pytest.approx(0.0, abs=1e-12)


def test_ate_is_difference_of_arms(sample, hal_q):
    rep = ate(hal_q, _true_g(), sample, method="plugin")
    diff = np.mean(hal_q.predict(sample.W, 1) - hal_q.predict(sample.W, 0))
    assert rep.psi == pytest.approx(diff)
    tm = ate(hal_q, _true_g(), sample, method="tmle")
    assert abs(tm.score_mean) <= tm.diagnostics["tol"]
    with pytest.raises(ValueError):
        ate(hal_q, _true_g(), sample, method="bogus")


def test_ctmle_trace_is_ordered(sample):
    folds = make_folds(sample, 5, 2)
    ladder = [fit_propensity(sample, SPEC, folds, columns=[]),
              fit_propensity(sample, SPEC, folds, columns=[0]),
              fit_propensity(sample, SPEC, folds, columns=[0, 1])]
    trace, rep = ctmle_select(constant_outcome(sample), ladder, sample, folds)
    cands = [s["candidate"] for s in trace.steps]
    assert cands == sorted(set(cands))
    assert 1 <= trace.selected_k <= len(cands)
    assert len(trace.cv_loss) == len(cands)
    assert rep.diagnostics["selected_candidate"] == ladder[cands[trace.selected_k - 1]].label
    assert abs(rep.score_mean) <= rep.diagnostics["tol"] + 1e-8


def test_ctmle_with_one_candidate_is_ordinary_tmle(sample, hal_q):
    G = _true_g()
    trace, rep = ctmle_select(hal_q, [G], sample, make_folds(sample, 5, 2))
    assert trace.selected_k == 1 and len(trace.steps) == 1
    _, plain = tmle_update_tsm(hal_q, G, sample, tol=1e-12)
    assert rep.psi == pytest.approx(plain.psi, abs=1e-8)


def test_ctmle_starts_from_least_complex_candidate(sample):
    folds = make_folds(sample, 5, 2)
    ladder = [fit_propensity(sample, SPEC, folds, columns=[]), fit_propensity(sample, SPEC, folds, columns=[0, 1])]
    trace, _ = ctmle_select(constant_outcome(sample), ladder, sample, folds)
    assert trace.steps[0]["candidate"] == 0


def test_ctmle_rejects_empty_ladder(sample, hal_q):
    with pytest.raises(EstimationError):
        ctmle_select(hal_q, [], sample, make_folds(sample, 5, 2))


def test_ctmle_variance_penalty_adds_sigma_squared_over_n(sample, hal_q):
    folds = make_folds(sample, 5, 2)
    G = _true_g()
    plain, _ = ctmle_select(hal_q, [G], sample, folds)
    pen, _ = ctmle_select(hal_q, [G], sample, folds, variance_penalty=True)
    _, rep = tmle_update_tsm(hal_q, G, sample, tol=1e-12)
    # binary outcome: the unit scale is the outcome scale
    expected = np.var(rep.ic) / sample.n
    assert pen.cv_loss[0] - plain.cv_loss[0] == pytest.approx(expected, rel=1e-6)
