import math

import numpy as np
import pytest

import halmle.bootstrap as bs
from halmle.basis import BasisSpec, enumerate_basis
from halmle.bootstrap import (BootstrapError, MeanPrediction, TreatmentMean, bootstrap_plugin, plateau_index,
                              plateau_select, refit_on_columns)
from halmle.data import Dataset, make_folds
from halmle.estimands import fit_outcome
from halmle.sim import get_dgp
from halmle.solver import GAUSSIAN, fit_lasso, lambda_max

from oracles import l1_ball_refit

SPEC = BasisSpec(knot_strategy="quantiles", n_knots=6)


def _regression(n=80, seed=0):
    rng = np.random.default_rng(seed)
    W = rng.uniform(size=(n, 2))
    return Dataset(W=W, Y=np.sin(4 * W[:, 0]) + W[:, 1] + rng.normal(scale=0.3, size=n))


def _risk(X, y, binomial, b0, beta):
    eta = b0 + X @ beta
    if binomial:
        return float(np.mean(np.logaddexp(0.0, eta) - y * eta))
    return float(np.mean((y - eta) ** 2))


@pytest.mark.parametrize("seed", range(6))
@pytest.mark.parametrize("binomial", [False, True])
def test_refit_matches_l1_ball_oracle(seed, binomial):
    rng = np.random.default_rng(seed)
    n, k = 40, 6
    X = (rng.uniform(size=(n, k)) < 0.5).astype(float)
    if binomial:
        y = (rng.uniform(size=n) < expit_(X[:, 0] - X[:, 1])).astype(float)
    else:
        y = X @ rng.normal(size=k) + rng.normal(scale=0.5, size=n)
    bound = float(rng.uniform(0.2, 1.5))
    b0, beta, ok = refit_on_columns(X, y, binomial, bound)
    assert ok
    assert np.abs(beta).sum() <= bound * (1 + 1e-9)
    ob0, obeta, ofun = l1_ball_refit(X, y, binomial, bound)
    assert _risk(X, y, binomial, b0, beta) <= ofun + 1e-7


def expit_(x):
    return 1.0 / (1.0 + np.exp(-x))


def test_null_model_bootstrap_se_matches_sample_mean_se():
    ds = _regression(n=200, seed=1)
    cat = enumerate_basis(ds.W, SPEC)
    null = fit_lasso(cat, ds.Y, GAUSSIAN, 2 * lambda_max(cat, ds.Y, GAUSSIAN))
    assert null.active_set.size == 0
    rep = bootstrap_plugin(null, ds, MeanPrediction(), B=500, seed=2, catalog=cat)
    assert rep.estimate == pytest.approx(ds.Y.mean())
    target = ds.Y.std(ddof=1) / math.sqrt(ds.n)
    assert abs(rep.se / target - 1) <= 0.15


def test_bootstrap_is_deterministic_and_keeps_columns():
    ds = _regression()
    cat = enumerate_basis(ds.W, SPEC)
    fit = fit_lasso(cat, ds.Y, GAUSSIAN, 0.05 * lambda_max(cat, ds.Y, GAUSSIAN))
    a = bootstrap_plugin(fit, ds, MeanPrediction(), B=5, seed=3, catalog=cat)
    b = bootstrap_plugin(fit, ds, MeanPrediction(), B=5, seed=3, catalog=cat)
    np.testing.assert_array_equal(a.estimates, b.estimates)
    np.testing.assert_array_equal(a.columns, fit.active_set)
    assert a.l1_bound == fit.penalty_norm
    assert a.to_json() == b.to_json()
    c = bootstrap_plugin(fit, ds, MeanPrediction(), B=5, seed=4, catalog=cat)
    assert not np.array_equal(a.estimates, c.estimates)


def test_bootstrap_aborts_on_many_failures(monkeypatch):
    ds = _regression()
    cat = enumerate_basis(ds.W, SPEC)
    fit = fit_lasso(cat, ds.Y, GAUSSIAN, 0.05 * lambda_max(cat, ds.Y, GAUSSIAN))
    real = bs.refit_on_columns
    calls = {"n": 0, "fail": set()}

    def flaky(*args, **kw):
        calls["n"] += 1
        b0, beta, ok = real(*args, **kw)
        return b0, beta, ok and calls["n"] not in calls["fail"]

    monkeypatch.setattr(bs, "refit_on_columns", flaky)
    # 2 of 20 failures exceeds the 5% budget
    calls["fail"] = {3, 11}
    with pytest.raises(BootstrapError):
        bootstrap_plugin(fit, ds, MeanPrediction(), B=20, seed=0, catalog=cat)
    calls["n"], calls["fail"] = 0, {7}
    rep = bootstrap_plugin(fit, ds, MeanPrediction(), B=20, seed=0, catalog=cat)
    assert rep.failures == 1 and rep.estimates.size == 19


def test_plateau_index_examples():
    assert plateau_index([1.0, 1.2, 1.25, 1.26, 1.262]) == (3, True)
    assert plateau_index([1.0, 1.0, 1.0, 1.0]) == (2, True)
    assert plateau_index([1.0, 2.0, 3.0, 4.0]) == (3, False)
    with pytest.raises(ValueError):
        plateau_index([])


def test_plateau_select_scans_from_cv_norm():
    ds = get_dgp("DGP-A").sample(200, 5)
    Q = fit_outcome(ds, SPEC, make_folds(ds, 5, 5), grid_size=12)
    n_fits = len(Q.path.fits)
    rep = plateau_select(Q, ds, TreatmentMean(1), B=20, seed=1, scan_points=4)
    norms = [s["l1_norm"] for s in rep.scan]
    assert norms[0] == pytest.approx(Q.fit.penalty_norm)
    assert norms == sorted(norms)
    assert rep.selected_norm in norms
    assert len(Q.path.fits) == n_fits  # extensions happen on a copy
