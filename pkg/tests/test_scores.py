import numpy as np
import pytest

from halmle.basis import BasisSpec, enumerate_basis
from halmle.data import Dataset
from halmle.scores import (Direction, battery, constraint_r, constraint_r_slopes, empirical_score_mean,
                           path_risk, path_score, score_diagnostics)
from halmle.solver import BINOMIAL, GAUSSIAN, fit_lasso, lambda_max


def _fit(loss, seed=0, n=60):
    rng = np.random.default_rng(seed)
    X = rng.uniform(size=(n, 2))
    cat = enumerate_basis(X, BasisSpec(knot_strategy="quantiles", n_knots=6))
    if loss == BINOMIAL:
        y = (rng.uniform(size=n) < 0.2 + 0.6 * X[:, 0]).astype(float)
    else:
        y = np.sin(4 * X[:, 0]) + X[:, 1] + rng.normal(scale=0.3, size=n)
    lam = 0.1 * lambda_max(cat, y, loss)
    return cat, y, fit_lasso(cat, y, loss, lam)


@pytest.mark.parametrize("loss", [GAUSSIAN, BINOMIAL])
def test_path_score_equals_minus_lambda_r(loss):
    cat, y, fit = _fit(loss)
    rng = np.random.default_rng(1)
    scale = 1.0 + fit.lam * fit.penalty_norm
    for _ in range(20):
        h = Direction(rng.normal(size=cat.p + 1))
        assert abs(path_score(fit, h, cat, y) + fit.lam * constraint_r_slopes(h, fit)) <= 1e-6 * scale


@pytest.mark.parametrize("loss", [GAUSSIAN, BINOMIAL])
def test_battery_directions_have_zero_score(loss):
    cat, y, fit = _fit(loss, seed=2)
    dirs = battery(fit, 30, seed=3)
    assert len(dirs) == 30
    for d in dirs:
        assert abs(constraint_r(d, fit)) <= 1e-10 * (1 + fit.l1_norm)
        assert d.h[0] == 0.0
    diag = score_diagnostics(fit, cat, y, battery_size=30, seed=3)
    assert diag.max_abs_path_residual <= 1e-6
    assert diag.max_abs_active_residual == pytest.approx(fit.lam, rel=1e-6)
    assert abs(diag.intercept_residual) <= 1e-6


@pytest.mark.parametrize("loss", [GAUSSIAN, BINOMIAL])
def test_path_score_matches_finite_difference(loss):
    cat, y, fit = _fit(loss, seed=4)
    h = np.random.default_rng(5).normal(size=cat.p + 1)
    step = 1e-5
    fd = (path_risk(fit, h, step, cat, y) - path_risk(fit, h, -step, cat, y)) / (2 * step)
    assert path_score(fit, h, cat, y) == pytest.approx(fd, rel=1e-5, abs=1e-9)


def test_empty_fit_has_empty_battery():
    cat, y, _ = _fit(GAUSSIAN)
    null = fit_lasso(cat, y, GAUSSIAN, 2 * lambda_max(cat, y, GAUSSIAN))
    assert battery(null) == []
    assert "empty battery" in score_diagnostics(null, cat, y).flags


def test_constraint_r_rejects_length_mismatch():
    cat, y, fit = _fit(GAUSSIAN)
    with pytest.raises(ValueError):
        constraint_r(np.zeros(3), fit)


def test_empirical_score_mean():
    ds = Dataset(W=np.zeros((4, 1)), Y=np.array([1.0, 2.0, 3.0, 6.0]))
    assert empirical_score_mean(lambda d: d.Y, ds) == 3.0
    with pytest.raises(ValueError, match="3 values for 4 rows"):
        empirical_score_mean(lambda d: d.Y[:3], ds)
    with pytest.raises(ValueError, match="row 2"):
        empirical_score_mean(lambda d: np.array([0.0, np.nan, 0.0, 0.0]), ds)
