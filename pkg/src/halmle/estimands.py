"""Target features of the outcome regression and their estimators.

The central feature is the treatment-specific mean E[Q(a, W)] with
Q(a, W) = E(Y | A = a, W), together with linear contrasts of such means
(the ATE is the contrast with weights +1 on a = 1 and -1 on a = 0). For a
contrast with weights c_a the canonical gradient is

    D*(O) = H(A, W) (Y - Q(A, W)) + sum_a c_a Q(a, W) - psi,
    H(A, W) = sum_a c_a 1{A = a} / P(A = a | W).

Targeting uses a logistic fluctuation logit Q_eps = logit Q + eps H on the
[0, 1] scale; continuous outcomes are min-max rescaled first and mapped
back for reporting.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from typing import Callable, Mapping, Sequence

import numpy as np
from scipy.special import expit, logit
from scipy.stats import norm

from .basis import BasisCatalog, BasisSpec
from .basis import predict as basis_predict
from .data import BINARY, Dataset, FoldPlan
from .scores import battery as score_battery
from .selection import cv_path, undersmooth_select
from .solver import BINOMIAL, GAUSSIAN, HalFit, LassoPath, LossFamily

TREATED = {1: 1.0}
CONTROL = {0: 1.0}
ATE = {1: 1.0, 0: -1.0}
DEFAULT_BOUNDS = (0.01, 0.99)
Q_BOUND = 5e-4
STEP = 1e-3


class EstimationError(RuntimeError):
    """Raised when an estimator cannot produce a report."""


# --------------------------------------------------------------------------
# nuisance models


class OutcomeModel:
    """Q(a, W) = E(Y | A = a, W) on the outcome scale."""

    outcome_kind = BINARY
    label = "outcome"

    def predict(self, W: np.ndarray, a) -> np.ndarray:
        raise NotImplementedError

    def predict_observed(self, dataset: Dataset) -> np.ndarray:
        out = np.empty(dataset.n)
        for a in (0, 1):
            m = dataset.A == a
            if m.any():
                out[m] = self.predict(dataset.W[m], a)
        return out

    def to_dict(self) -> dict:
        return {"label": self.label, "outcome_kind": self.outcome_kind}


class FunctionOutcome(OutcomeModel):
    """Outcome model given by a vectorized function fn(a, W)."""

    def __init__(self, fn: Callable, outcome_kind: str = BINARY, label: str = "function"):
        self.fn = fn
        self.outcome_kind = outcome_kind
        self.label = label

    def predict(self, W, a):
        W = np.atleast_2d(np.asarray(W, dtype=float))
        return np.broadcast_to(np.asarray(self.fn(a, W), dtype=float), (W.shape[0],)).copy()


def constant_outcome(dataset: Dataset, value: float | None = None) -> FunctionOutcome:
    """Intercept-only regression: Q(a, W) = mean(Y) for every (a, W)."""
    c = float(np.mean(dataset.Y)) if value is None else float(value)
    return FunctionOutcome(lambda a, W: np.full(W.shape[0], c), dataset.outcome_kind, "intercept-only")


class HalOutcome(OutcomeModel):
    """HAL fit of Y on x = (A, W) (treatment at coordinate 0)."""

    def __init__(self, catalog: BasisCatalog, fit: HalFit, outcome_kind: str, label: str = "hal",
                 path: LassoPath | None = None, cv_report=None):
        self.catalog = catalog
        self.fit = fit
        self.outcome_kind = outcome_kind
        self.label = label
        self.path = path
        self.cv_report = cv_report

    def with_fit(self, fit: HalFit, label: str | None = None) -> "HalOutcome":
        return HalOutcome(self.catalog, fit, self.outcome_kind, label or self.label, self.path, self.cv_report)

    def features(self, W, a):
        W = np.atleast_2d(np.asarray(W, dtype=float))
        return np.column_stack([np.full(W.shape[0], float(a)), W])

    def predict(self, W, a):
        eta = basis_predict(self.catalog, self.fit.coef, self.features(W, a))
        return self.fit.loss.inverse_link(eta)

    def basis_columns(self, W, a, columns) -> np.ndarray:
        return self.catalog.design_matrix(self.features(W, a), columns).toarray()

    def to_dict(self) -> dict:
        out = super().to_dict()
        out.update({"lambda": float(self.fit.lam), "l1_norm": self.fit.l1_norm,
                    "n_active": int(self.fit.active_set.size), "p": int(self.catalog.p)})
        return out


@dataclass
class PropensityModel:
    """G(W) = P(A = 1 | W) with predictions truncated to ``bounds``."""

    raw: Callable[[np.ndarray], np.ndarray]
    bounds: tuple[float, float] = DEFAULT_BOUNDS
    label: str = "propensity"
    complexity: tuple = ()
    fit: HalFit | None = None
    columns: tuple[int, ...] | None = None

    def __post_init__(self):
        lo, hi = self.bounds
        if not 0.0 < lo <= hi < 1.0:
            raise ValueError(f"truncation bounds {self.bounds} must lie inside (0, 1)")

    def predict_raw(self, W) -> np.ndarray:
        W = np.atleast_2d(np.asarray(W, dtype=float))
        return np.broadcast_to(np.asarray(self.raw(W), dtype=float), (W.shape[0],)).copy()

    def predict(self, W) -> np.ndarray:
        return np.clip(self.predict_raw(W), *self.bounds)

    def truncation_hits(self, W) -> int:
        g = self.predict_raw(W)
        return int(np.sum((g < self.bounds[0]) | (g > self.bounds[1])))

    def with_bounds(self, bounds) -> "PropensityModel":
        return PropensityModel(self.raw, tuple(bounds), f"{self.label}@{bounds[0]:g}", self.complexity,
                               self.fit, self.columns)

    def to_dict(self) -> dict:
        out = {"label": self.label, "bounds": list(self.bounds)}
        if self.fit is not None:
            out.update({"lambda": float(self.fit.lam), "n_active": int(self.fit.active_set.size)})
        return out


def function_propensity(fn: Callable, bounds=DEFAULT_BOUNDS, label: str = "function") -> PropensityModel:
    return PropensityModel(raw=fn, bounds=tuple(bounds), label=label)


# --------------------------------------------------------------------------
# fitting helpers


def fit_outcome(dataset: Dataset, spec: BasisSpec, folds: FoldPlan, grid_size: int = 30, ratio: float = 1e-2,
                patience: int | None = 5) -> HalOutcome:
    """Cross-validated HAL fit of Y on (A, W)."""
    if not dataset.has_treatment:
        raise EstimationError("the dataset has no treatment column")
    loss = LossFamily(BINOMIAL if dataset.outcome_kind == BINARY else GAUSSIAN)
    res = cv_path(dataset, spec, loss, folds, grid_size, ratio=ratio, patience=patience)
    return HalOutcome(res.catalog, res.fit, dataset.outcome_kind, "hal-cv", res.path, res.report)


def fit_propensity(dataset: Dataset, spec: BasisSpec, folds: FoldPlan, columns: Sequence[int] | None = None,
                   bounds=DEFAULT_BOUNDS, grid_size: int = 30, ratio: float = 1e-2, patience: int | None = 5,
                   label: str | None = None) -> PropensityModel:
    """Cross-validated HAL logistic fit of A on W (or on the listed columns of W).

    An empty column list gives the intercept-only model P(A = 1).
    """
    if not dataset.has_treatment:
        raise EstimationError("the dataset has no treatment column")
    cols = tuple(range(dataset.d)) if columns is None else tuple(int(c) for c in columns)
    if not cols:
        m = float(np.mean(dataset.A))
        return PropensityModel(raw=lambda W: np.full(W.shape[0], m), bounds=tuple(bounds),
                               label=label or "intercept-only", complexity=(0,), columns=())
    gds = Dataset(W=dataset.W[:, cols], Y=dataset.A, outcome_kind=BINARY,
                  covariate_names=tuple(dataset.covariate_names[c] for c in cols), outcome_name="a")
    res = cv_path(gds, spec, LossFamily(BINOMIAL), folds, grid_size, ratio=ratio, patience=patience)
    catalog, fit = res.catalog, res.fit

    def raw(W):
        return expit(basis_predict(catalog, fit.coef, np.atleast_2d(W)[:, cols]))

    return PropensityModel(raw=raw, bounds=tuple(bounds), label=label or f"hal{list(cols)}",
                           complexity=(len(cols), fit.penalty_norm), fit=fit, columns=cols)


# --------------------------------------------------------------------------
# report


@dataclass
class TargetReport:
    """Point estimate with influence-curve based inference."""

    estimand: str
    psi: float
    ic: np.ndarray
    diagnostics: dict = field(default_factory=dict)
    trace: list = field(default_factory=list)
    level: float = 0.95

    @property
    def n(self) -> int:
        return int(self.ic.size)

    @property
    def se(self) -> float:
        return float(np.sqrt(np.var(self.ic) / self.n))

    @property
    def ci(self) -> tuple[float, float]:
        z = float(norm.ppf(0.5 + self.level / 2))
        return (self.psi - z * self.se, self.psi + z * self.se)

    @property
    def score_mean(self) -> float:
        """P_n D*, the empirical mean of the influence-curve values."""
        return float(np.mean(self.ic))

    def covers(self, value: float) -> bool:
        lo, hi = self.ci
        return lo <= value <= hi

    def to_dict(self) -> dict:
        lo, hi = self.ci
        return {
            "estimand": self.estimand,
            "psi": float(self.psi),
            "se": self.se,
            "ci": [float(lo), float(hi)],
            "level": self.level,
            "n": self.n,
            "abs_score_mean": abs(self.score_mean),
            "diagnostics": _jsonable(self.diagnostics),
            "trace": _jsonable(self.trace),
        }

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True)

    def table(self) -> str:
        lo, hi = self.ci
        rows = [("estimand", self.estimand), ("estimate", f"{self.psi:.6g}"), ("se", f"{self.se:.6g}"),
                ("95% CI", f"[{lo:.6g}, {hi:.6g}]"), ("|P_n D*|", f"{abs(self.score_mean):.3g}")]
        width = max(len(k) for k, _ in rows)
        return "\n".join(f"{k:<{width}}  {v}" for k, v in rows)


def _jsonable(obj):
    if isinstance(obj, dict):
        return {str(k): _jsonable(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_jsonable(v) for v in obj]
    if isinstance(obj, np.ndarray):
        return [_jsonable(v) for v in obj.tolist()]
    if isinstance(obj, (np.integer,)):
        return int(obj)
    if isinstance(obj, (np.floating, float)):
        v = float(obj)
        return v if math.isfinite(v) else str(v)
    return obj


def _contrast_name(contrast: Mapping) -> str:
    if dict(contrast) == TREATED:
        return "E[Y_1]"
    if dict(contrast) == CONTROL:
        return "E[Y_0]"
    if dict(contrast) == ATE:
        return "ATE"
    return " + ".join(f"{c:g}*E[Y_{a}]" for a, c in sorted(contrast.items()))


# --------------------------------------------------------------------------
# building blocks


def canonical_gradient_tsm(a, y, qbar1, gbar, psi) -> np.ndarray:
    """D*(O) = 1{A = 1} / G(W) (Y - Q(1, W)) + Q(1, W) - psi, elementwise."""
    gbar = np.asarray(gbar, dtype=float)
    if np.any((gbar <= 0) | (gbar >= 1)):
        raise ValueError("propensity values must lie strictly inside (0, 1)")
    a = np.asarray(a, dtype=float)
    return a / gbar * (np.asarray(y, dtype=float) - qbar1) + qbar1 - psi


def _arm_probs(G: PropensityModel, W) -> dict:
    g1 = G.predict(W)
    return {1: g1, 0: 1.0 - g1}


def clever_covariate(G: PropensityModel, W, A, contrast=TREATED) -> np.ndarray:
    """H(A, W) = sum_a c_a 1{A = a} / P(A = a | W)."""
    probs = _arm_probs(G, W)
    H = np.zeros(len(A))
    for a, c in contrast.items():
        H += c * (A == a) / probs[a]
    return H


def _arm_covariates(G: PropensityModel, W, contrast) -> dict:
    probs = _arm_probs(G, W)
    return {a: c / probs[a] for a, c in contrast.items()}


def _plugin_value(Qa: Mapping, contrast) -> float:
    return float(sum(c * np.mean(Qa[a]) for a, c in contrast.items()))


def _eif(H_obs, y, q_obs, Qa, contrast, psi) -> np.ndarray:
    out = H_obs * (y - q_obs) - psi
    for a, c in contrast.items():
        out = out + c * Qa[a]
    return out


def _check_treatment(dataset: Dataset):
    if not dataset.has_treatment:
        raise EstimationError("the dataset has no treatment column")


def plugin_tsm(Q: OutcomeModel, dataset: Dataset, G: PropensityModel | None = None, a: int = 1,
               contrast: Mapping | None = None) -> TargetReport:
    """psi = (1/n) sum_i Q(a, W_i); inference from D* at the supplied propensity."""
    _check_treatment(dataset)
    contrast = {a: 1.0} if contrast is None else dict(contrast)
    Qa = {b: Q.predict(dataset.W, b) for b in contrast}
    psi = _plugin_value(Qa, contrast)
    diag = {"method": "plugin", "outcome_model": Q.to_dict()}
    if G is None:
        ic = sum(c * Qa[b] for b, c in contrast.items()) - psi
        diag["flags"] = ["no propensity model: influence curve omits the residual term"]
    else:
        H = clever_covariate(G, dataset.W, dataset.A, contrast)
        ic = _eif(H, dataset.Y, Q.predict_observed(dataset), Qa, contrast, psi)
        diag["truncation_hits"] = G.truncation_hits(dataset.W)
    rep = TargetReport(_contrast_name(contrast), psi, np.asarray(ic, dtype=float), diag)
    rep.diagnostics["abs_score_mean"] = abs(rep.score_mean)
    return rep


def ipw_tsm(G: PropensityModel, dataset: Dataset, a: int = 1, contrast: Mapping | None = None) -> TargetReport:
    """psi = (1/n) sum_i H(A_i, W_i) Y_i with truncated propensities."""
    _check_treatment(dataset)
    contrast = {a: 1.0} if contrast is None else dict(contrast)
    H = clever_covariate(G, dataset.W, dataset.A, contrast)
    terms = H * dataset.Y
    psi = float(np.mean(terms))
    w = np.abs(H[H != 0])
    diag = {"method": "ipw", "truncation_hits": G.truncation_hits(dataset.W),
            "weight_min": float(w.min()) if w.size else 0.0, "weight_max": float(w.max()) if w.size else 0.0,
            "weight_mean": float(w.mean()) if w.size else 0.0, "propensity_model": G.to_dict()}
    rep = TargetReport(_contrast_name(contrast), psi, terms - psi, diag)
    rep.diagnostics["abs_score_mean"] = abs(rep.score_mean)
    return rep


def quadrature_grid(d: int, points: int) -> np.ndarray:
    """Midpoint tensor grid on the unit cube; every node carries weight points**-d."""
    if points < 1:
        raise ValueError("points must be positive")
    axis = (np.arange(points) + 0.5) / points
    mesh = np.meshgrid(*([axis] * d), indexing="ij")
    return np.column_stack([m.ravel() for m in mesh])


def exact_remainder_tsm(Q: OutcomeModel, G: PropensityModel, Q0_fn: Callable, G0_fn: Callable, d: int,
                        points: int = 200, a: int = 1, return_error: bool = False):
    """R0 = E0[(Q(a, W) - Q0(a, W)) (G_a(W) - G0_a(W)) / G_a(W)] for W uniform on [0, 1]^d.

    ``Q0_fn(a, W)`` and ``G0_fn(W)`` are the true regression and propensity.
    With ``return_error`` the difference from a half-resolution grid is
    returned as a quadrature error estimate.
    """

    def integral(m):
        W = quadrature_grid(d, m)
        g = G.predict(W)
        g0 = np.asarray(G0_fn(W), dtype=float)
        if a == 0:
            g, g0 = 1.0 - g, 1.0 - g0
        diff = Q.predict(W, a) - np.asarray(Q0_fn(a, W), dtype=float)
        return float(np.mean(diff * (g - g0) / g))

    value = integral(points)
    if return_error:
        return value, abs(value - integral(max(points // 2, 1)))
    return value


# --------------------------------------------------------------------------
# targeting


@dataclass
class _Scale:
    lo: float
    hi: float

    @property
    def width(self) -> float:
        return self.hi - self.lo

    def to_unit(self, v):
        return (np.asarray(v, dtype=float) - self.lo) / self.width

    def from_unit(self, u):
        return self.lo + self.width * np.asarray(u, dtype=float)


def _outcome_scale(dataset: Dataset) -> _Scale:
    if dataset.outcome_kind == BINARY:
        return _Scale(0.0, 1.0)
    lo, hi = float(np.min(dataset.Y)), float(np.max(dataset.Y))
    if hi <= lo:
        hi = lo + 1.0
    return _Scale(lo, hi)


def _bounded_logit(u, binary: bool):
    eps = 1e-12 if binary else Q_BOUND
    return logit(np.clip(u, eps, 1 - eps))


def _qloss(ys, q) -> float:
    """Mean logistic (quasi-binomial) loss on the unit scale."""
    q = np.clip(q, 1e-15, 1 - 1e-15)
    return float(-np.mean(ys * np.log(q) + (1 - ys) * np.log1p(-q)))


class TargetedOutcome(OutcomeModel):
    """logit Q*(a, W) = logit Q(a, W) + eps H(a, W) + phi(a, W) . b on the unit scale.

    ``phi`` are the basis functions of the base model listed in ``columns``.
    """

    def __init__(self, base: OutcomeModel, G: PropensityModel, contrast, scale: _Scale, eps: float,
                 columns=None, b=None, label: str = "targeted"):
        self.base = base
        self.G = G
        self.contrast = dict(contrast)
        self.scale = scale
        self.eps = float(eps)
        self.columns = columns
        self.b = None if b is None else np.asarray(b, dtype=float)
        self.outcome_kind = base.outcome_kind
        self.label = label

    def offset(self, W, a):
        return _bounded_logit(self.scale.to_unit(self.base.predict(W, a)), self.outcome_kind == BINARY)

    def predict(self, W, a):
        W = np.atleast_2d(np.asarray(W, dtype=float))
        eta = self.offset(W, a)
        if a in self.contrast and self.eps != 0.0:
            eta = eta + self.eps * _arm_covariates(self.G, W, {a: self.contrast[a]})[a]
        if self.b is not None:
            eta = eta + self.base.basis_columns(W, a, self.columns) @ self.b
        return self.scale.from_unit(expit(eta))


class ChainedOutcome(OutcomeModel):
    """Sequential logistic fluctuations of a base model (used by C-TMLE)."""

    def __init__(self, base: OutcomeModel, scale: _Scale, steps=(), label="chained"):
        self.base = base
        self.scale = scale
        self.steps = list(steps)  # (G, contrast, eps)
        self.outcome_kind = base.outcome_kind
        self.label = label

    def predict(self, W, a):
        W = np.atleast_2d(np.asarray(W, dtype=float))
        eta = _bounded_logit(self.scale.to_unit(self.base.predict(W, a)), self.outcome_kind == BINARY)
        for G, contrast, eps in self.steps:
            if a in contrast:
                eta = eta + eps * _arm_covariates(G, W, {a: contrast[a]})[a]
        return self.scale.from_unit(expit(eta))


@dataclass
class _Problem:
    """Arrays shared by the targeting routines, on the unit scale."""

    ys: np.ndarray
    off_obs: np.ndarray
    off_cf: dict
    H_obs: np.ndarray
    H_cf: dict
    contrast: dict
    scale: _Scale
    n: int

    def state(self, eps, extra_obs=0.0, extra_cf=None):
        q = expit(self.off_obs + eps * self.H_obs + extra_obs)
        qa = {}
        for a in self.contrast:
            e = self.off_cf[a] + eps * self.H_cf[a]
            if extra_cf is not None:
                e = e + extra_cf[a]
            qa[a] = expit(e)
        return q, qa

    def eif(self, q, qa):
        """D* on the original outcome scale and the plug-in value."""
        w = self.scale.width
        Qa = {a: self.scale.from_unit(v) for a, v in qa.items()}
        psi = _plugin_value(Qa, self.contrast)
        ic = self.H_obs * w * (self.ys - q) - psi
        for a, c in self.contrast.items():
            ic = ic + c * Qa[a]
        return psi, ic


def _problem(Q: OutcomeModel, G: PropensityModel, dataset: Dataset, contrast) -> _Problem:
    _check_treatment(dataset)
    scale = _outcome_scale(dataset)
    binary = dataset.outcome_kind == BINARY
    W, A = dataset.W, dataset.A
    off_obs = _bounded_logit(scale.to_unit(Q.predict_observed(dataset)), binary)
    off_cf = {a: _bounded_logit(scale.to_unit(Q.predict(W, a)), binary) for a in contrast}
    return _Problem(ys=scale.to_unit(dataset.Y), off_obs=off_obs, off_cf=off_cf,
                    H_obs=clever_covariate(G, W, A, contrast), H_cf=_arm_covariates(G, W, contrast),
                    contrast=dict(contrast), scale=scale, n=dataset.n)


def default_tol(ic: np.ndarray) -> float:
    """sigma_n / (sqrt(n) log n) with sigma_n the standard deviation of D*."""
    n = ic.size
    return float(np.std(ic)) / (math.sqrt(n) * math.log(n))


def _resolve_tol(tol, ic):
    if tol is None:
        return default_tol(ic)
    return float(tol)


def tmle_update_tsm(Q: OutcomeModel, G: PropensityModel, dataset: Dataset, tol: float | None = None, a: int = 1,
                    contrast: Mapping | None = None, step: float = STEP, max_steps: int = 20000,
                    battery=None) -> tuple[OutcomeModel, TargetReport]:
    """Iterated small logistic fluctuations along the clever covariate.

    Each step moves eps by at most ``step`` (the Newton step when it is
    smaller) in the direction that increases the log-likelihood, halving
    the step while the empirical loss would increase. Stops as soon as
    |P_n D*| <= tol, where tol defaults to sigma_n / (sqrt(n) log n) at the
    current fit.
    """
    contrast = {a: 1.0} if contrast is None else dict(contrast)
    pr = _problem(Q, G, dataset, contrast)
    eps = 0.0
    q, qa = pr.state(eps)
    loss0 = loss = _qloss(pr.ys, q)
    steps = 0
    flags = []
    while True:
        psi, ic = pr.eif(q, qa)
        t = _resolve_tol(tol, ic)
        if abs(np.mean(ic)) <= t:
            break
        if steps >= max_steps:
            flags.append("tol unreached")
            break
        score = float(np.mean(pr.H_obs * (pr.ys - q)))
        info = float(np.mean(pr.H_obs ** 2 * q * (1 - q)))
        d = score / info if info > 0 else math.copysign(step, score)
        d = max(-step, min(step, d))
        for _ in range(41):
            q_new, qa_new = pr.state(eps + d)
            new = _qloss(pr.ys, q_new)
            if new <= loss + 1e-15 * max(1.0, loss):
                break
            d *= 0.5
        else:
            flags.append("likelihood step failed")
            break
        eps += d
        q, qa, loss = q_new, qa_new, new
        steps += 1
    Qstar = TargetedOutcome(Q, G, contrast, pr.scale, eps, label="tmle")
    diag = {"method": "tmle", "steps": steps, "epsilon": eps, "tol": t, "abs_score_mean": abs(float(np.mean(ic))),
            "loglik_gain": loss0 - loss, "truncation_hits": G.truncation_hits(dataset.W), "flags": flags}
    if battery is not None:
        diag["battery_max"] = battery_residual(Q, pr.scale.from_unit(q), dataset, battery)
    return Qstar, TargetReport(_contrast_name(contrast), psi, ic, diag)


def battery_residual(Q: OutcomeModel, q_obs_original: np.ndarray, dataset: Dataset, dirs) -> float:
    """max |path score| of the initial fit's directions, re-evaluated at fitted values ``q_obs_original``.

    The coordinate scores P_n dL/dbeta_j of the initial HAL fit are
    recomputed with its own loss at the supplied fitted values.
    """
    if not isinstance(Q, HalOutcome) or not dirs:
        return 0.0
    fit = Q.fit
    X = Q.catalog.design
    resid = np.asarray(dataset.Y, dtype=float) - q_obs_original
    factor = -1.0 if fit.loss.kind == BINOMIAL else -2.0
    s = factor * np.concatenate([[resid.mean()], np.asarray(X.T @ resid).ravel() / dataset.n])
    coef = fit.coef
    return float(max(abs(np.dot(d.h * coef, s)) for d in dirs))


def initial_battery(Q: OutcomeModel, size: int = 50, seed: int = 0):
    return score_battery(Q.fit, size, seed) if isinstance(Q, HalOutcome) else []


def _path_score_transform(coef: np.ndarray) -> np.ndarray:
    """Columns spanning the sign-weighted differences of the active basis functions.

    For active slopes beta_j the L1-preserving directions h (zero intercept
    entry, sum_j h_j |beta_j| = 0) have path score sum_j v_j sign(beta_j) s_j
    with v_j = h_j |beta_j| summing to zero. Their span is generated by
    sign(beta_j) phi_j - sign(beta_p) phi_p for j other than the pivot p.
    """
    k = coef.size
    if k < 2:
        return np.zeros((k, 0))
    sgn = np.sign(coef)
    p = int(np.argmax(np.abs(coef)))
    others = [j for j in range(k) if j != p]
    T = np.zeros((k, k - 1))
    for col, j in enumerate(others):
        T[j, col] = sgn[j]
        T[p, col] = -sgn[p]
    return T


def orthogonalized_tmle_update(Q: OutcomeModel, G: PropensityModel, dataset: Dataset, tol: float | None = None,
                               a: int = 1, contrast: Mapping | None = None, step: float = STEP,
                               max_steps: int = 20000, battery_size: int = 50, battery_seed: int = 0,
                               restore_tol: float = 1e-13) -> tuple[OutcomeModel, TargetReport]:
    """Targeting that leaves the scores solved by the initial HAL fit unchanged.

    H_n is the span of the path scores along which the initial fit keeps
    its L1 norm: directions with zero intercept entry and
    sum_j h_j |beta_j| = 0 over the active slopes. Their scores are the
    sign-weighted differences of the active coordinate scores, so H_n is
    spanned by (sign(beta_j) phi_j - sign(beta_p) phi_p)(Y - Q). The
    fluctuation direction is the clever covariate with its empirical
    least-squares projection on H_n removed, and after every step the
    coefficients b of those functions in the submodel are re-solved by
    Newton's method so that every score in H_n returns to its initial
    value. With fewer than two active basis functions H_n is empty and the
    update coincides with :func:`tmle_update_tsm`.
    """
    contrast = {a: 1.0} if contrast is None else dict(contrast)
    if not isinstance(Q, HalOutcome):
        raise EstimationError("score-preserving targeting needs a HAL outcome model")
    dirs = initial_battery(Q, battery_size, battery_seed)
    act = Q.fit.active_set
    T = _path_score_transform(Q.fit.beta[act])
    k = T.shape[1]
    if k == 0:
        Qstar, rep = tmle_update_tsm(Q, G, dataset, tol, a, contrast, step, max_steps, battery=dirs)
        rep.diagnostics.update(method="tmle_preserving", n_preserved_scores=0,
                               battery_max_initial=battery_residual(Q, Q.predict_observed(dataset), dataset, dirs))
        return Qstar, rep
    pr = _problem(Q, G, dataset, contrast)
    Phi = np.asarray(Q.catalog.design[:, act] @ T)
    Phi_cf = {b: Q.basis_columns(dataset.W, b, act) @ T for b in contrast}
    n = dataset.n
    flags = []
    eps = 0.0
    bvec = np.zeros(k)

    def state(eps_, b_):
        return pr.state(eps_, Phi @ b_, {c: Phi_cf[c] @ b_ for c in contrast})

    q, qa = state(eps, bvec)
    s0 = Phi.T @ (pr.ys - q) / n
    loss0 = _qloss(pr.ys, q)

    if np.linalg.matrix_rank(Phi) < k:
        flags.append("rank-deficient score span")

    def restore(eps_, b_):
        for _ in range(100):
            q_, qa_ = state(eps_, b_)
            F = Phi.T @ (pr.ys - q_) / n - s0
            if np.max(np.abs(F)) <= restore_tol:
                return b_, q_, qa_, True
            v = q_ * (1 - q_)
            J = (Phi * v[:, None]).T @ Phi / n
            b_ = b_ + np.linalg.lstsq(J, F, rcond=1e-12)[0]
        q_, qa_ = state(eps_, b_)
        return b_, q_, qa_, False

    steps = 0
    while True:
        psi, ic = pr.eif(q, qa)
        t = _resolve_tol(tol, ic)
        if abs(np.mean(ic)) <= t:
            break
        if steps >= max_steps:
            flags.append("tol unreached")
            break
        r = pr.ys - q
        r2 = r * r
        gram = (Phi * r2[:, None]).T @ Phi / n
        rhs = Phi.T @ (pr.H_obs * r2) / n
        c = np.linalg.solve(gram + 1e-10 * np.eye(k), rhs)
        Ht = pr.H_obs - Phi @ c
        v = q * (1 - q)
        score = float(np.mean(pr.H_obs * r))
        slope = float(np.mean(pr.H_obs * Ht * v))
        # same bound on the change of the linear predictor as the plain update
        cap = step * float(np.max(np.abs(pr.H_obs))) / max(float(np.max(np.abs(Ht))), 1e-300)
        d = score / slope if slope > 0 else math.copysign(cap, score)
        d = max(-cap, min(cap, d))
        eps += d
        bvec, q, qa, ok = restore(eps, bvec - d * c)
        if not ok and "restoration incomplete" not in flags:
            flags.append("restoration incomplete")
        steps += 1
    Qstar = TargetedOutcome(Q, G, contrast, pr.scale, eps, columns=act, b=T @ bvec, label="tmle_preserving")
    diag = {"method": "tmle_preserving", "steps": steps, "epsilon": eps, "tol": t,
            "abs_score_mean": abs(float(np.mean(ic))), "loglik_gain": loss0 - _qloss(pr.ys, q),
            "truncation_hits": G.truncation_hits(dataset.W), "n_preserved_scores": int(k),
            "battery_max": battery_residual(Q, pr.scale.from_unit(q), dataset, dirs),
            "battery_max_initial": battery_residual(Q, Q.predict_observed(dataset), dataset, dirs),
            "flags": flags}
    return Qstar, TargetReport(_contrast_name(contrast), psi, ic, diag)


def ate(Q: OutcomeModel, G: PropensityModel, dataset: Dataset, method: str = "tmle",
        tol: float | None = None) -> TargetReport:
    """E[Y_1] - E[Y_0] with the differenced canonical gradient."""
    if method == "plugin":
        return plugin_tsm(Q, dataset, G, contrast=ATE)
    if method == "ipw":
        return ipw_tsm(G, dataset, contrast=ATE)
    if method == "tmle":
        return tmle_update_tsm(Q, G, dataset, tol, contrast=ATE)[1]
    if method == "tmle_preserving":
        return orthogonalized_tmle_update(Q, G, dataset, tol, contrast=ATE)[1]
    raise ValueError(f"unknown method {method!r}")


# --------------------------------------------------------------------------
# collaborative TMLE


def _fit_eps(off, H, ys, max_iter: int = 100) -> float:
    """Maximum likelihood eps of the logistic submodel logit q = off + eps H."""
    eps = 0.0
    loss = _qloss(ys, expit(off))
    for _ in range(max_iter):
        q = expit(off + eps * H)
        score = float(np.mean(H * (ys - q)))
        info = float(np.mean(H * H * q * (1 - q)))
        if info <= 0 or abs(score) <= 1e-14:
            break
        d = score / info
        for _ in range(40):
            new = _qloss(ys, expit(off + (eps + d) * H))
            if new <= loss:
                break
            d *= 0.5
        else:
            break
        eps += d
        loss = new
        if abs(d) < 1e-12 * max(1.0, abs(eps)):
            break
    return eps


@dataclass
class CtmleTrace:
    steps: list
    cv_loss: list
    selected_k: int
    candidates: list

    @property
    def selected(self) -> list:
        return [s["candidate"] for s in self.steps[: self.selected_k]]

    def to_list(self) -> list:
        return [dict(s, cv_loss=self.cv_loss[i]) for i, s in enumerate(self.steps)]


def ctmle_select(Q0: OutcomeModel, g_ladder: Sequence[PropensityModel], dataset: Dataset, folds: FoldPlan,
                 a: int = 1, contrast: Mapping | None = None, tol: float | None = None,
                 variance_penalty: bool = False) -> tuple[CtmleTrace, TargetReport]:
    """Greedy collaborative selection of the propensity estimator.

    The first step is the TMLE update of Q0 with the least complex
    candidate. At every later step each candidate ranked after the last
    accepted one is used for a logistic TMLE update of the current
    Q*_{k-1}; the candidate with the largest gain in empirical
    log-likelihood is accepted and its update becomes Q*_k.

    The number of steps k is chosen by V-fold cross-validation of the
    targeting steps (eps fitted on training rows, loss on held-out rows)
    with the candidate sequence held fixed. With ``variance_penalty`` the
    cross-validated risk of step k is penalized by sigma_k^2 / n, the
    estimated variance of the step-k estimator, which guards against
    propensity candidates that strain positivity. The returned report is
    the TMLE of Q*_{k-1} with the k-th accepted candidate.
    """
    ladder = list(g_ladder)
    if not ladder:
        raise EstimationError("the propensity ladder is empty")
    contrast = {a: 1.0} if contrast is None else dict(contrast)
    scale = _outcome_scale(dataset)
    binary = dataset.outcome_kind == BINARY
    W, A = dataset.W, dataset.A
    ys = scale.to_unit(dataset.Y)
    off_obs = _bounded_logit(scale.to_unit(Q0.predict_observed(dataset)), binary)
    off_cf = {b: _bounded_logit(scale.to_unit(Q0.predict(W, b)), binary) for b in contrast}
    H_obs = [clever_covariate(G, W, A, contrast) for G in ladder]
    H_cf = [_arm_covariates(G, W, contrast) for G in ladder]

    steps = []
    chosen = []
    cur = off_obs.copy()
    cur_loss = _qloss(ys, expit(cur))
    # the sequence starts from the least complex candidate, so cross-validation
    # can always stop before any richer propensity model is used
    e = _fit_eps(cur, H_obs[0], ys)
    new = _qloss(ys, expit(cur + e * H_obs[0]))
    steps.append({"step": 1, "candidate": 0, "label": ladder[0].label, "loglik_gain": cur_loss - new,
                  "epsilon": e})
    chosen.append((0, e))
    cur = cur + e * H_obs[0]
    cur_loss = new
    last = 0
    while last + 1 < len(ladder):
        best = None
        for j in range(last + 1, len(ladder)):
            e = _fit_eps(cur, H_obs[j], ys)
            new = _qloss(ys, expit(cur + e * H_obs[j]))
            gain = cur_loss - new
            if best is None or gain > best[1]:
                best = (j, gain, e, new)
        j, gain, e, new = best
        steps.append({"step": len(steps) + 1, "candidate": j, "label": ladder[j].label, "loglik_gain": gain,
                      "epsilon": e})
        chosen.append((j, e))
        cur = cur + e * H_obs[j]
        cur_loss = new
        last = j

    K = len(chosen)
    cv = np.zeros(K)
    for v, tr, va in folds.splits():
        c_tr, c_va = off_obs[tr].copy(), off_obs[va].copy()
        for k, (j, _) in enumerate(chosen):
            e = _fit_eps(c_tr, H_obs[j][tr], ys[tr])
            c_tr = c_tr + e * H_obs[j][tr]
            c_va = c_va + e * H_obs[j][va]
            cv[k] += _qloss(ys[va], expit(c_va)) * va.size / dataset.n
    penalty = np.zeros(K)
    if variance_penalty:
        # sigma_k^2 / n of the step-k estimator on the unit outcome scale
        off = off_obs.copy()
        offc = {b: off_cf[b].copy() for b in contrast}
        for k, (j, e) in enumerate(chosen):
            off = off + e * H_obs[j]
            for b in contrast:
                offc[b] = offc[b] + e * H_cf[j][b]
            pr_k = _Problem(ys=ys, off_obs=off, off_cf=offc, H_obs=H_obs[j], H_cf=H_cf[j], contrast=contrast,
                            scale=_Scale(0.0, 1.0), n=dataset.n)
            _, ic_k = pr_k.eif(*pr_k.state(0.0))
            penalty[k] = float(np.var(ic_k)) / dataset.n
    k_sel = int(np.argmin(cv + penalty)) + 1

    base_steps = []
    off = off_obs.copy()
    offc = {b: off_cf[b].copy() for b in contrast}
    for j, e in chosen[: k_sel - 1]:
        off = off + e * H_obs[j]
        for b in contrast:
            offc[b] = offc[b] + e * H_cf[j][b]
        base_steps.append((ladder[j], contrast, e))
    jk = chosen[k_sel - 1][0]
    pr = _Problem(ys=ys, off_obs=off, off_cf=offc, H_obs=H_obs[jk], H_cf=H_cf[jk], contrast=contrast,
                  scale=scale, n=dataset.n)
    e = _fit_eps(off, H_obs[jk], ys)
    q, qa = pr.state(e)
    psi, ic = pr.eif(q, qa)
    t = _resolve_tol(tol, ic)
    trace = CtmleTrace(steps=steps, cv_loss=[float(x) for x in cv + penalty], selected_k=k_sel,
                       candidates=[G.label for G in ladder])
    flags = [] if abs(np.mean(ic)) <= t else ["tol unreached"]
    diag = {"method": "ctmle", "selected_k": k_sel, "selected_candidate": ladder[jk].label, "epsilon": e,
            "tol": t, "abs_score_mean": abs(float(np.mean(ic))), "truncation_hits": ladder[jk].truncation_hits(W),
            "flags": flags}
    report = TargetReport(_contrast_name(contrast), psi, ic, diag, trace=trace.to_list())
    return trace, report


# --------------------------------------------------------------------------
# undersmoothing criteria


def tsm_criterion(Q: HalOutcome, G: PropensityModel, dataset: Dataset, a: int = 1, contrast=None):
    """(criterion, sigma) callables of a HAL fit for |P_n D*| of the contrast."""
    contrast = {a: 1.0} if contrast is None else dict(contrast)
    H = clever_covariate(G, dataset.W, dataset.A, contrast)
    y = np.asarray(dataset.Y, dtype=float)
    cf = {b: Q.features(dataset.W, b) for b in contrast}
    cf_design = {b: Q.catalog.design_matrix(cf[b]) for b in contrast}
    X = Q.catalog.design

    def parts(fit):
        q_obs = fit.loss.inverse_link(fit.intercept + X @ fit.beta)
        Qa = {b: fit.loss.inverse_link(fit.intercept + cf_design[b] @ fit.beta) for b in contrast}
        psi = _plugin_value(Qa, contrast)
        return _eif(H, y, q_obs, Qa, contrast, psi)

    return (lambda fit: abs(float(np.mean(parts(fit))))), (lambda fit: float(np.std(parts(fit))))


def undersmooth_outcome(Q: HalOutcome, G: PropensityModel, dataset: Dataset, a: int = 1, contrast=None,
                        const: float = 1.0, max_norm_factor: float = 10.0) -> HalOutcome:
    """Undersmoothed version of a cross-validated HAL outcome model for a treatment-specific mean."""
    crit, sigma = tsm_criterion(Q, G, dataset, a, contrast)
    fit = undersmooth_select(dataset, Q.path, crit, sigma, const, max_norm_factor)
    return Q.with_fit(fit, "hal-undersmoothed")


def kernel_point_criterion(X: np.ndarray, y: np.ndarray, design, loss, t: float, bandwidth: float,
                           coordinate: int = 0, density: Callable | None = None):
    """Score criterion for the kernel-smoothed point feature psi_t(Q) = int Q(x) K_h(x_c - t) dx.

    Its canonical gradient is K_h(X_c - t) / p(X) (Y - Q(X)); ``density``
    defaults to the uniform density on the unit cube. Returns
    (criterion, sigma) callables of a fit.
    """
    u = (X[:, coordinate] - t) / bandwidth
    kern = np.where(np.abs(u) <= 1, 0.75 * (1 - u * u), 0.0) / bandwidth
    if density is not None:
        kern = kern / np.asarray(density(X), dtype=float)
    y = np.asarray(y, dtype=float)
    M = design.design if hasattr(design, "design") else design

    def values(fit):
        return kern * (y - fit.loss.inverse_link(fit.intercept + M @ fit.beta))

    return (lambda fit: abs(float(np.mean(values(fit))))), (lambda fit: float(np.std(values(fit))))
