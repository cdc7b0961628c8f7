import numpy as np
import pytest
from scipy.integrate import dblquad
from scipy.special import expit

from halmle.sim import EstimatorConfig, builtin_dgps, get_dgp, l2_error, rate_experiment, run_mc


def test_dgp_a_truth_matches_adaptive_quadrature():
    ref, _ = dblquad(lambda w2, w1: expit(1.0 + w1 * w2 - 0.5), 0, 1, 0, 1, epsabs=1e-13, epsrel=1e-13)
    assert get_dgp("DGP-A").truth == pytest.approx(ref, abs=1e-8)


def test_step_truth_is_exact_on_midpoint_grid():
    # E[1{w1 >= .3}] + E[1{w2 >= .6}] - 1.5 P(w1 >= .55, w2 >= .25) + .5 P(w1 >= .8, w2 >= .8)
    expected = 0.7 + 0.4 - 1.5 * 0.45 * 0.75 + 0.5 * 0.2 * 0.2
    assert get_dgp("DGP-C").truth == pytest.approx(expected, abs=1e-12)


def test_truth_is_stable_under_refinement():
    dgp = get_dgp("DGP-A")
    assert dgp.psi0(1, points=200) == pytest.approx(dgp.psi0(1, points=400), abs=1e-12)


def test_dgp_b_has_positivity_strain():
    assert get_dgp("DGP-B").min_propensity() < 0.05
    assert get_dgp("DGP-A").min_propensity() > 0.2


def test_sampling_is_seeded():
    dgp = get_dgp("DGP-B")
    a, b = dgp.sample(50, 3), dgp.sample(50, 3)
    np.testing.assert_array_equal(a.W, b.W)
    np.testing.assert_array_equal(a.Y, b.Y)
    assert a.d == 3


def test_unknown_dgp():
    with pytest.raises(KeyError):
        get_dgp("nope")
    assert len({d.id for d in builtin_dgps()}) == len(builtin_dgps())


def test_oracle_estimator_has_zero_bias_and_full_coverage():
    res = run_mc(get_dgp("DGP-A"), EstimatorConfig(method="oracle"), 50, 5, 0)
    agg = res.aggregates()
    assert agg["bias"] == 0.0
    assert agg["coverage"] == 1.0


def test_treated_mean_is_unbiased_under_randomization():
    res = run_mc(get_dgp("DGP-A-RCT"), EstimatorConfig(method="treated_mean"), 200, 200, 1)
    agg = res.aggregates()
    assert abs(agg["bias"]) <= 3 * agg["mc_se"]


def test_run_mc_is_deterministic_and_records_failures():
    cfg = EstimatorConfig(method="plugin", n_knots=4, grid_size=8)
    a = run_mc(get_dgp("DGP-A"), cfg, 60, 2, 5)
    b = run_mc(get_dgp("DGP-A"), cfg, 60, 2, 5)
    assert a.to_csv() == b.to_csv()
    assert a.to_json() == b.to_json()
    assert "runtime" not in a.to_csv().splitlines()[0]

    def broken(ds, dgp, seed):
        raise ValueError("boom")

    with pytest.raises(RuntimeError):
        run_mc(get_dgp("DGP-A"), broken, 20, 3, 0)
    with pytest.raises(ValueError):
        run_mc(get_dgp("DGP-A"), cfg, 20, 0, 0)


def test_l2_error_of_truth_is_zero():
    dgp = get_dgp("DGP-C")
    assert l2_error(dgp, lambda W: dgp.q0(None, W)) == 0.0
    assert l2_error(dgp, lambda W: dgp.q0(None, W) + 0.5) == pytest.approx(0.5)


def test_rate_experiment_validates_grid():
    with pytest.raises(ValueError):
        rate_experiment(get_dgp("DGP-C"), [100, 50, 200], 1, 0)
    with pytest.raises(ValueError):
        rate_experiment(get_dgp("DGP-A"), [50, 100, 200], 1, 0)


@pytest.mark.slow
def test_single_step_rate():
    tab = rate_experiment(get_dgp("DGP-STEP"), [100, 400, 1600], 4, 0)
    assert tab.strictly_decreasing
    assert tab.slope <= -0.4
