"""Score objects of a HAL fit: L1-preserving path scores, the constraint
functional r(h, beta), active-coordinate score residuals and empirical
means of observation-level functions.

For the path beta_delta = (1 + delta h) * beta (coordinatewise), the
derivative of the empirical risk at delta = 0 is

    P_n sum_j h_j beta_j dL/dbeta_j.

At a penalized optimum every active slope satisfies
P_n dL/dbeta_j = -lam sign(beta_j) and the intercept score is zero, so the
path score equals -lam * sum_{j >= 1} h_j |beta_j|. That sum is the
constraint functional with the intercept term dropped, because the
intercept carries no penalty.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable

import numpy as np

from .solver import HalFit, as_loss, gradient


@dataclass(frozen=True)
class Direction:
    """Direction h over (intercept, basis coefficients); ``h[0]`` is the intercept entry."""

    h: np.ndarray

    def __post_init__(self):
        h = np.asarray(self.h, dtype=float).ravel()
        if not np.all(np.isfinite(h)):
            raise ValueError("direction entries must be finite")
        h.setflags(write=False)
        object.__setattr__(self, "h", h)

    @classmethod
    def zeros(cls, p: int) -> "Direction":
        return cls(np.zeros(p + 1))


def _as_h(h) -> np.ndarray:
    return h.h if isinstance(h, Direction) else np.asarray(h, dtype=float)


def _coef(beta) -> np.ndarray:
    return beta.coef if isinstance(beta, HalFit) else np.asarray(beta, dtype=float)


def constraint_r(h, beta) -> float:
    """r(h, beta) = h_0 |beta_0| + sum_j h_j |beta_j| with beta including the intercept."""
    h, b = _as_h(h), _coef(beta)
    if h.shape != b.shape:
        raise ValueError("direction and coefficient vector differ in length")
    return float(np.dot(h, np.abs(b)))


def constraint_r_slopes(h, beta) -> float:
    """The penalized part of r(h, beta): the intercept entry is ignored."""
    h, b = _as_h(h), _coef(beta)
    return float(np.dot(h[1:], np.abs(b[1:])))


def coordinate_scores(fit: HalFit, design, y, loss=None) -> np.ndarray:
    """(P_n dL/db0, P_n dL/dbeta_1, ...) at the fitted coefficients."""
    loss = fit.loss if loss is None else as_loss(loss)
    g0, g = gradient(design, np.asarray(y, dtype=float), loss, fit.intercept, fit.beta)
    return np.concatenate([[g0], g])


def path_score(fit: HalFit, h, design, y, loss=None) -> float:
    """d/d delta P_n L(Q_{beta_delta^h}) at delta = 0, by the chain rule."""
    h = _as_h(h)
    s = coordinate_scores(fit, design, y, loss)
    return float(np.dot(h * fit.coef, s))


def path_risk(fit: HalFit, h, delta: float, design, y, loss=None) -> float:
    """P_n L along the path beta_delta = (1 + delta h) beta, used for finite-difference checks."""
    loss = fit.loss if loss is None else as_loss(loss)
    c = (1.0 + delta * _as_h(h)) * fit.coef
    X = design.design if hasattr(design, "design") else design
    return loss.risk(np.asarray(y, dtype=float), c[0] + X @ c[1:])


def battery(fit: HalFit, size: int = 50, seed: int = 0) -> list[Direction]:
    """Random directions on the active slopes with r(h, beta) = 0.

    Entries are standard normal on the active coordinates; the r-component
    is removed on the pivot (largest |beta_j|) active coordinate. The
    intercept entry is zero.
    """
    act = fit.active_set
    if act.size == 0:
        return []
    rng = np.random.default_rng(seed)
    p = fit.beta.size
    absb = np.abs(fit.beta[act])
    piv = int(np.argmax(absb))
    out = []
    for _ in range(size):
        h = np.zeros(p + 1)
        vals = rng.standard_normal(act.size)
        r = float(np.dot(vals, absb))
        vals[piv] -= r / absb[piv]
        h[1 + act] = vals
        out.append(Direction(h))
    return out


@dataclass
class ScoreDiagnostics:
    lam: float
    active: np.ndarray
    active_score_residuals: np.ndarray
    intercept_residual: float
    constrained_path_residuals: np.ndarray
    battery_seed: int
    eif_residual: float | None = None
    flags: tuple[str, ...] = ()

    @property
    def max_abs_active_residual(self) -> float:
        return float(np.max(np.abs(self.active_score_residuals), initial=0.0))

    @property
    def max_abs_path_residual(self) -> float:
        return float(np.max(np.abs(self.constrained_path_residuals), initial=0.0))

    def to_dict(self) -> dict:
        return {
            "lambda": float(self.lam),
            "n_active": int(self.active.size),
            "intercept_residual": float(self.intercept_residual),
            "max_abs_active_residual": self.max_abs_active_residual,
            "max_abs_path_residual": self.max_abs_path_residual,
            "battery_size": int(self.constrained_path_residuals.size),
            "battery_seed": int(self.battery_seed),
            "eif_residual": None if self.eif_residual is None else float(self.eif_residual),
            "flags": list(self.flags),
        }


def score_diagnostics(fit: HalFit, design, y, loss=None, battery_size: int = 50, seed: int = 0,
                      eif: Callable | None = None) -> ScoreDiagnostics:
    """Active-coordinate residuals and path scores over an r-preserving battery."""
    s = coordinate_scores(fit, design, y, loss)
    act = fit.active_set
    dirs = battery(fit, battery_size, seed)
    coef = fit.coef
    path = np.array([float(np.dot(d.h * coef, s)) for d in dirs])
    flags = () if dirs else ("empty battery",)
    eif_res = None if eif is None else abs(float(eif(fit)))
    return ScoreDiagnostics(lam=fit.lam, active=act, active_score_residuals=s[1 + act],
                            intercept_residual=float(s[0]), constrained_path_residuals=path,
                            battery_seed=seed, eif_residual=eif_res, flags=flags)


def empirical_score_mean(fn: Callable, dataset) -> float:
    """(1/n) sum_i fn(O_i); ``fn`` maps the dataset to an n-vector of values."""
    vals = np.asarray(fn(dataset), dtype=float).ravel()
    if vals.shape[0] != dataset.n:
        raise ValueError(f"function returned {vals.shape[0]} values for {dataset.n} rows")
    bad = np.flatnonzero(~np.isfinite(vals))
    if bad.size:
        raise ValueError(f"non-finite value at row {bad[0] + 1}")
    return float(np.mean(vals))
