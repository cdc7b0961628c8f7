import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from halmle.basis import (BasisBudgetError, BasisFunction, BasisSpec, enumerate_basis, evaluate_basis, predict,
                          rank_by_sparsity, sectional_variation_norm)

X3 = np.array([[0.1, 0.5], [0.4, 0.2], [0.7, 0.9]])


def test_candidate_count_is_n_times_subsets():
    # N = n (2^d - 1) with n = 3 distinct rows and d = 2
    cat = enumerate_basis(X3, BasisSpec(knot_strategy="all"))
    assert cat.n_candidates == 9


def test_three_row_design_by_hand():
    # Columns worked out by hand: 1{x1 >= .4}, 1{x1 >= .7}, 1{x2 >= .5}; the
    # remaining six candidates are constant or duplicates of these three.
    cat = enumerate_basis(X3, BasisSpec(knot_strategy="all"))
    cols = {tuple(cat.design[:, k].toarray().ravel()) for k in range(cat.p)}
    assert cols == {(0, 1, 1), (0, 0, 1), (1, 0, 1)}
    merged = sorted(len(p) for p in cat.provenance)
    assert sum(merged) == 9 - 2  # two constant columns dropped


def test_indicator_is_inclusive():
    f = BasisFunction((0, 1), (0.3, 0.6), 0)
    assert evaluate_basis(f, [0.3, 0.6]) == 1.0
    assert evaluate_basis(f, [0.3, 0.59]) == 0.0


def test_hinge_value():
    f = BasisFunction((0, 1), (0.2, 0.3), 1)
    assert evaluate_basis(f, [0.5, 0.8]) == pytest.approx(0.3 * 0.5)
    assert evaluate_basis(f, [0.1, 0.8]) == 0.0


def test_max_degree_restricts_subsets():
    rng = np.random.default_rng(1)
    cat = enumerate_basis(rng.uniform(size=(20, 3)), BasisSpec(max_degree=1, knot_strategy="all"))
    assert {len(f.subset) for f in cat.functions} == {1}


def test_quantile_knots_are_observed_values():
    rng = np.random.default_rng(2)
    X = rng.uniform(size=(40, 2))
    cat = enumerate_basis(X, BasisSpec(knot_strategy="quantiles", n_knots=5))
    for f in cat.functions:
        for j, u in zip(f.subset, f.knot):
            assert np.any(X[:, j] == u)


def test_memory_budget():
    with pytest.raises(BasisBudgetError):
        enumerate_basis(np.random.default_rng(0).uniform(size=(50, 3)), BasisSpec(memory_budget=100))


def test_sign_constraint_bounds():
    spec = BasisSpec(knot_strategy="all", sign_constraints={(0,): "nonnegative"})
    cat = enumerate_basis(np.random.default_rng(3).uniform(size=(10, 2)), spec)
    lower, upper = cat.bounds()
    for k, f in enumerate(cat.functions):
        assert lower[k] == (0.0 if f.subset == (0,) else -np.inf)
        assert upper[k] == np.inf


def test_rank_by_sparsity_keeps_densest():
    cat = enumerate_basis(np.random.default_rng(4).uniform(size=(15, 2)), BasisSpec(knot_strategy="all"))
    small = rank_by_sparsity(cat, 5)
    assert small.p == 5
    assert small.support.min() >= np.sort(cat.support)[-5] - 1e-12


@settings(max_examples=25, deadline=None)
@given(n=st.integers(3, 25), d=st.integers(1, 3), order=st.sampled_from([0, 1]), seed=st.integers(0, 10**6))
def test_design_properties(n, d, order, seed):
    rng = np.random.default_rng(seed)
    X = rng.uniform(size=(n, d))
    cat = enumerate_basis(X, BasisSpec(knot_strategy="all", spline_order=order))
    assert cat.n_candidates == n * (2 ** d - 1)
    D = cat.design.toarray()
    # no constant and no duplicated columns
    assert np.all(D.max(axis=0) > D.min(axis=0))
    assert len({D[:, k].tobytes() for k in range(cat.p)}) == cat.p
    # re-evaluating the basis at the training rows reproduces the stored design
    np.testing.assert_allclose(cat.design_matrix(X).toarray(), D)
    # pointwise evaluation agrees with the vectorized design
    k = int(rng.integers(cat.p)) if cat.p else None
    if k is not None:
        i = int(rng.integers(n))
        assert evaluate_basis(cat.functions[k], X[i]) == pytest.approx(D[i, k])


def test_predict_new_points_matches_training_design():
    rng = np.random.default_rng(5)
    X = rng.uniform(size=(30, 2))
    cat = enumerate_basis(X, BasisSpec(knot_strategy="quantiles", n_knots=4))
    beta = np.zeros(cat.p + 1)
    beta[0] = 0.3
    beta[1 + rng.choice(cat.p, 4, replace=False)] = rng.normal(size=4)
    np.testing.assert_allclose(predict(cat, beta, X), predict(cat, beta))
    assert sectional_variation_norm(beta) == pytest.approx(np.abs(beta).sum())
