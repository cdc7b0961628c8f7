import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from halmle.data import BINARY, DataError, Dataset, load_csv, make_folds, resample, resample_indices, write_csv


def _write(tmp_path, text):
    p = tmp_path / "d.csv"
    p.write_text(text)
    return p


def test_load_csv_roles(tmp_path):
    p = _write(tmp_path, "w1,w2,a,y\n0.1,0.2,1,0\n0.3,0.4,0,1\n")
    ds = load_csv(p, {"W": ["w1", "w2"], "A": "a", "Y": "y"}, BINARY)
    assert ds.n == 2 and ds.d == 2
    np.testing.assert_array_equal(ds.A, [1, 0])
    np.testing.assert_array_equal(ds.Y, [0, 1])
    assert ds.feature_names() == ("a", "w1", "w2")
    np.testing.assert_array_equal(ds.features()[:, 0], ds.A)


def test_load_csv_reports_row_and_column(tmp_path):
    p = _write(tmp_path, "w1,y\n0.1,1\nabc,2\n")
    with pytest.raises(DataError, match=r"row 2.*w1"):
        load_csv(p, {"W": ["w1"], "Y": "y"})


def test_load_csv_missing_value(tmp_path):
    p = _write(tmp_path, "w1,y\n0.1,1\n,2\n")
    with pytest.raises(DataError, match="row 2"):
        load_csv(p, {"W": ["w1"], "Y": "y"})


def test_load_csv_bad_treatment(tmp_path):
    p = _write(tmp_path, "w1,a,y\n0.1,1,1\n0.2,2,0\n")
    with pytest.raises(DataError, match="row 2"):
        load_csv(p, {"W": ["w1"], "A": "a", "Y": "y"})


def test_load_csv_requires_outcome(tmp_path):
    p = _write(tmp_path, "w1,y\n0.1,1\n")
    with pytest.raises(DataError, match="outcome"):
        load_csv(p, {"W": ["w1"]})


def test_write_then_load_roundtrip(tmp_path):
    rng = np.random.default_rng(0)
    ds = Dataset(W=rng.uniform(size=(7, 2)), Y=rng.normal(size=7), A=rng.integers(0, 2, 7))
    p = tmp_path / "rt.csv"
    write_csv(ds, p)
    back = load_csv(p, {"W": list(ds.covariate_names), "A": ds.treatment_name, "Y": ds.outcome_name})
    np.testing.assert_array_equal(back.W, ds.W)
    np.testing.assert_array_equal(back.Y, ds.Y)
    np.testing.assert_array_equal(back.A, ds.A)


def test_dataset_is_read_only():
    ds = Dataset(W=np.zeros((3, 1)), Y=np.zeros(3))
    with pytest.raises(ValueError):
        ds.W[0, 0] = 1.0


def test_dataset_rejects_nonfinite():
    with pytest.raises(DataError):
        Dataset(W=np.array([[np.nan]]), Y=np.zeros(1))


@settings(max_examples=40, deadline=None)
@given(n=st.integers(5, 200), V=st.integers(2, 5), seed=st.integers(0, 10**6))
def test_folds_partition_rows(n, V, seed):
    if V > n:
        return
    plan = make_folds(n, V, seed)
    sizes = [plan.validation(v).size for v in range(1, V + 1)]
    assert sum(sizes) == n
    assert max(sizes) - min(sizes) <= 1
    allv = np.sort(np.concatenate([plan.validation(v) for v in range(1, V + 1)]))
    np.testing.assert_array_equal(allv, np.arange(n))
    for v in range(1, V + 1):
        assert np.intersect1d(plan.training(v), plan.validation(v)).size == 0
    np.testing.assert_array_equal(plan.assignment, make_folds(n, V, seed).assignment)


def test_resample_is_deterministic():
    ds = Dataset(W=np.arange(10.0)[:, None], Y=np.arange(10.0))
    a, b = resample(ds, 3), resample(ds, 3)
    np.testing.assert_array_equal(a.W, b.W)
    idx = resample_indices(10, 3)
    assert idx.min() >= 0 and idx.max() < 10
