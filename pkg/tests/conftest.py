import numpy as np
import pytest

from halmle.basis import BasisSpec, enumerate_basis
from halmle.data import Dataset

_ACCEPTANCE_LINES: list[str] = []


@pytest.fixture
def report_criterion():
    """Record a one-line pass/fail verdict for an acceptance criterion."""

    def record(number: int, passed: bool, detail: str) -> None:
        line = f"CRITERION {number:>2} {'PASS' if passed else 'FAIL'}: {detail}"
        _ACCEPTANCE_LINES.append(line)
        print(line)

    return record


def pytest_terminal_summary(terminalreporter):
    if _ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in sorted(_ACCEPTANCE_LINES, key=lambda s: int(s.split()[1])):
            terminalreporter.write_line(line)


def random_design(rng, n, d=2, p_max=12, spec=None):
    """A HAL design on uniform covariates, trimmed to at most ``p_max`` columns."""
    X = rng.uniform(size=(n, d))
    spec = spec or BasisSpec(knot_strategy="all")
    cat = enumerate_basis(X, spec)
    cols = np.sort(rng.choice(cat.p, size=min(p_max, cat.p), replace=False))
    return X, cat.subset(cols)


@pytest.fixture
def small_regression():
    rng = np.random.default_rng(11)
    W = rng.uniform(size=(80, 2))
    Y = (W[:, 0] > 0.5).astype(float) + 0.5 * W[:, 1] + 0.2 * rng.standard_normal(80)
    return Dataset(W=W, Y=Y)
