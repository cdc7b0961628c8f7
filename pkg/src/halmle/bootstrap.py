"""Model-fixed nonparametric bootstrap for plug-in features of a HAL fit.

Each replicate resamples the rows, refits the LASSO restricted to the basis
functions selected on the original data with the slope norm held at its
original value, and re-evaluates the plug-in feature. Basis selection is
never repeated inside the bootstrap. :func:`plateau_select` repeats this
along a path of increasing L1 norms and picks the norm at which the
confidence interval width stops changing.
"""
from __future__ import annotations

import dataclasses
import json
import math
from dataclasses import dataclass, field
from typing import Callable

import numpy as np
from numba import njit
from scipy.special import expit
from scipy.stats import norm

from .basis import BasisCatalog
from .data import Dataset
from .solver import BINOMIAL, HalFit, LassoPath

__all__ = [
    "BootstrapError",
    "BootstrapReport",
    "Feature",
    "MeanPrediction",
    "TreatmentMean",
    "FunctionFeature",
    "refit_on_columns",
    "bootstrap_plugin",
    "plateau_index",
    "plateau_select",
]

MAX_FAILURE_RATE = 0.05
PRESOLVE_ITER = 200


class BootstrapError(RuntimeError):
    """Too many bootstrap replicates failed to refit."""


# --------------------------------------------------------------------------
# constrained refit on a fixed set of columns


@njit(cache=True)
def _project_l1(v, mode, t):
    """Euclidean projection of v onto {sum |x_j| <= t} intersected with the sign constraints.

    ``mode`` is 0 for a free coordinate, 1 for x_j >= 0 and -1 for x_j <= 0.
    """
    k = v.size
    u = np.empty(k)
    s = np.empty(k)
    for j in range(k):
        if mode[j] == 0:
            u[j] = abs(v[j])
            s[j] = 1.0 if v[j] >= 0 else -1.0
        elif mode[j] > 0:
            u[j] = max(v[j], 0.0)
            s[j] = 1.0
        else:
            u[j] = max(-v[j], 0.0)
            s[j] = -1.0
    if u.sum() <= t:
        return s * u
    srt = np.sort(u)[::-1]
    cum = 0.0
    theta = 0.0
    for i in range(k):
        cum += srt[i]
        th = (cum - t) / (i + 1)
        if srt[i] - th > 0:
            theta = th
    out = np.empty(k)
    for j in range(k):
        out[j] = s[j] * max(u[j] - theta, 0.0)
    return out


@njit(cache=True)
def _grad(X, y, b0, beta, binomial):
    n, k = X.shape
    eta = X @ beta + b0
    r = np.empty(n)
    if binomial:
        for i in range(n):
            r[i] = 1.0 / (1.0 + math.exp(-eta[i])) - y[i]
    else:
        for i in range(n):
            r[i] = 2.0 * (eta[i] - y[i])
    return r.sum() / n, (X.T @ r) / n


@njit(cache=True)
def _fista(X, y, b0, beta, t, mode, L, binomial, tol, max_iter):
    """Accelerated projected gradient with gradient-based restart."""
    xb0, xbeta = b0, beta.copy()
    yb0, ybeta = b0, beta.copy()
    tk = 1.0
    for it in range(max_iter):
        g0, g = _grad(X, y, yb0, ybeta, binomial)
        nb0 = yb0 - g0 / L
        nbeta = _project_l1(ybeta - g / L, mode, t)
        d0 = nb0 - xb0
        dbeta = nbeta - xbeta
        step = max(abs(d0), np.max(np.abs(dbeta)) if dbeta.size else 0.0)
        scale = 1.0 + max(abs(nb0), np.max(np.abs(nbeta)) if nbeta.size else 0.0)
        # restart when the momentum points against the gradient step
        if (yb0 - nb0) * d0 + np.dot(ybeta - nbeta, dbeta) > 0:
            tk = 1.0
        tn = 0.5 * (1.0 + math.sqrt(1.0 + 4.0 * tk * tk))
        mom = (tk - 1.0) / tn
        yb0 = nb0 + mom * d0
        ybeta = nbeta + mom * dbeta
        xb0, xbeta = nb0, nbeta
        tk = tn
        if step <= tol * scale:
            return xb0, xbeta, it + 1, True
    return xb0, xbeta, max_iter, False


def _risk_parts(X, y, b0, beta, binomial):
    """Empirical risk, its gradient (intercept first) and the Hessian weights."""
    eta = b0 + X @ beta
    if binomial:
        q = expit(eta)
        risk = float(np.mean(np.logaddexp(0.0, eta) - y * eta))
        r = q - y
        v = q * (1 - q)
    else:
        risk = float(np.mean((y - eta) ** 2))
        r = 2.0 * (eta - y)
        v = np.full(y.size, 2.0)
    n = y.size
    g = np.concatenate([[r.sum() / n], X.T @ r / n])
    return risk, g, v


def _allowed_violation(g, mu, mode):
    """Largest KKT violation -sigma g_j - mu over the signs sigma a coordinate may take."""
    viol = np.abs(g) - mu
    viol = np.where(mode > 0, -g - mu, viol)
    return np.where(mode < 0, g - mu, viol)


def _active_set_newton(X, y, binomial, t, b0, beta, mode, kkt_tol=1e-10, max_iter=200):
    """Sign-fixed Newton steps on the L1 ball with support updates.

    While the bound binds, each step solves the equality-constrained Newton
    system for (b0, beta_S) and the multiplier mu with sum_S s_j beta_j = t.
    A step that would flip a sign stops at zero and drops the coordinate;
    at a stationary point, every coordinate violating |grad_j| <= mu
    enters. When mu would be negative the bound is slack and
    plain Newton steps are taken until the ball is reached again.
    Returns (b0, beta, converged).
    """
    n, k = X.shape
    beta = beta.copy()
    S = list(np.flatnonzero(beta))
    binding = bool(S) and np.sum(np.abs(beta)) >= t * (1 - 1e-12)
    risk, g, v = _risk_parts(X, y, b0, beta, binomial)
    for _ in range(max_iter):
        if not S:
            binding = False
        s = np.sign(beta[S])
        Z = np.column_stack([np.ones(n), X[:, S]]) if S else np.ones((n, 1))
        H = (Z * v[:, None]).T @ Z / n
        H += 1e-12 * max(np.trace(H), 1.0) / H.shape[0] * np.eye(H.shape[0])
        gz = np.concatenate([[g[0]], g[1:][S]]) if S else g[:1]
        mu = 0.0
        if binding:
            m = H.shape[0]
            a = np.concatenate([[0.0], s])
            K = np.zeros((m + 1, m + 1))
            K[:m, :m] = H
            K[:m, m] = a
            K[m, :m] = a
            rhs = np.concatenate([-gz, [t - float(np.dot(s, beta[S]))]])
            sol = np.linalg.solve(K, rhs)
            d, mu = sol[:m], float(sol[m])
            if mu < 0:
                binding = False
                continue
        else:
            d = np.linalg.solve(H, -gz)
        res = np.max(np.abs(gz + mu * np.concatenate([[0.0], s]))) if S else abs(gz[0])
        if res <= kkt_tol:
            viol = _allowed_violation(g[1:], mu, mode)
            if S:
                viol[S] = -np.inf
            enter = np.flatnonzero(viol > kkt_tol)
            if enter.size == 0:
                return b0, beta, True
            for j in enter:
                # an infinitesimal value of the improving sign defines the sign pattern
                beta[j] = -np.sign(g[1 + j]) * 1e-300 if mode[j] == 0 else float(mode[j]) * 1e-300
            S = sorted(S + [int(j) for j in enter])
            continue
        dS = d[1:]
        alpha, drop = 1.0, -1
        for i, j in enumerate(S):
            if s[i] * dS[i] < 0:
                ai = -beta[j] / dS[i]
                if ai < alpha:
                    alpha, drop = ai, i
        if not binding and S:
            slope = float(np.dot(s, dS))
            room = t - float(np.dot(s, beta[S]))
            if slope > 0 and slope * alpha > room:
                alpha, drop = max(room / slope, 0.0), -2
        gd = float(np.dot(gz, d))
        step = alpha
        for _ in range(60):
            nb0 = b0 + step * d[0]
            nbeta = beta.copy()
            nbeta[S] = beta[S] + step * dS
            if drop >= 0 and step == alpha:
                nbeta[S[drop]] = 0.0
            nrisk, ng, nv = _risk_parts(X, y, nb0, nbeta, binomial)
            if nrisk <= risk + 1e-4 * step * gd + 1e-15 * abs(risk):
                break
            step *= 0.5
        else:
            return b0, beta, False
        b0, beta, risk, g, v = nb0, nbeta, nrisk, ng, nv
        if step == alpha and drop >= 0:
            S.pop(drop)
        elif step == alpha and drop == -2:
            binding = True
    return b0, beta, False


def _sign_modes(catalog: BasisCatalog | None, columns: np.ndarray) -> np.ndarray:
    mode = np.zeros(columns.size, dtype=np.int64)
    if catalog is not None and catalog.spec.sign_constraints:
        lower, upper = catalog.bounds()
        mode[lower[columns] >= 0] = 1
        mode[upper[columns] <= 0] = -1
    return mode


def refit_on_columns(X: np.ndarray, y: np.ndarray, binomial: bool, bound: float, start=None, mode=None,
                     tol: float = 1e-10, max_iter: int = 100000) -> tuple[float, np.ndarray, bool]:
    """Minimize the empirical risk over (b0, beta) subject to sum |beta_j| <= bound.

    ``X`` is the dense n x k design of the fixed columns. The intercept is
    unconstrained. A short accelerated projected-gradient run warm-starts
    an active-set Newton method; a full projected-gradient run is the
    fallback. Returns
    (b0, beta, converged).
    """
    X = np.asfortranarray(X, dtype=float)
    y = np.asarray(y, dtype=float)
    n, k = X.shape
    if k == 0:
        m = float(np.mean(y))
        if binomial:
            m = min(max(m, 1e-10), 1 - 1e-10)
            m = math.log(m / (1 - m))
        return m, np.zeros(0), True
    mode = np.zeros(k, dtype=np.int64) if mode is None else np.asarray(mode, dtype=np.int64)
    if start is None:
        b0, beta = 0.0, np.zeros(k)
    else:
        b0, beta = float(start[0]), _project_l1(np.asarray(start[1], dtype=float), mode, float(bound))
    Xa = np.column_stack([np.ones(n), X])
    L = (0.25 if binomial else 2.0) * float(np.linalg.norm(Xa, 2)) ** 2 / n
    L = max(L, 1e-12)
    # a short projected-gradient run finds most of the support; Newton finishes
    pb0, pbeta, _, _ = _fista(X, y, b0, beta, float(bound), mode, L, binomial, tol, PRESOLVE_ITER)
    nb0, nbeta, ok = _active_set_newton(X, y, binomial, float(bound), pb0, pbeta, mode)
    if ok:
        return float(nb0), nbeta, True
    b0, beta, _, ok = _fista(X, y, b0, beta, float(bound), mode, L, binomial, tol, max_iter)
    return float(b0), np.asarray(beta), bool(ok)


# --------------------------------------------------------------------------
# features


class Feature:
    """A plug-in feature of a HAL fit, evaluated on (possibly resampled) rows.

    :meth:`bind` returns a function of (intercept, active slopes, row
    indices) so that the design of the fixed columns is built only once.
    """

    name = "feature"

    def bind(self, catalog: BasisCatalog, fit: HalFit, columns: np.ndarray,
             dataset: Dataset) -> Callable[[float, np.ndarray, np.ndarray], float]:
        raise NotImplementedError


class MeanPrediction(Feature):
    """Mean fitted value over the observed rows."""

    name = "mean_prediction"

    def bind(self, catalog, fit, columns, dataset):
        X = catalog.design[:, columns].toarray()
        inv = fit.loss.inverse_link

        def value(b0, beta, idx):
            return float(np.mean(inv(b0 + X[idx] @ beta)))
        return value


class TreatmentMean(Feature):
    """sum_a c_a (1/n) sum_i Q(a, W_i) for a catalog built on (A, W)."""

    def __init__(self, a: int = 1, contrast=None):
        self.contrast = {a: 1.0} if contrast is None else dict(contrast)
        self.name = "treatment_mean" if contrast is None else "contrast"

    def bind(self, catalog, fit, columns, dataset):
        W = dataset.W
        arms = {}
        for a in self.contrast:
            F = np.column_stack([np.full(W.shape[0], float(a)), W])
            arms[a] = catalog.design_matrix(F, columns).toarray()
        inv = fit.loss.inverse_link
        contrast = self.contrast

        def value(b0, beta, idx):
            return float(sum(c * np.mean(inv(b0 + arms[a][idx] @ beta)) for a, c in contrast.items()))
        return value


class FunctionFeature(Feature):
    """Wraps fn(fit, resampled dataset) -> float; general but slower."""

    def __init__(self, fn: Callable[[HalFit, Dataset], float], name: str = "function"):
        self.fn = fn
        self.name = name

    def bind(self, catalog, fit, columns, dataset):
        p = fit.beta.size

        def value(b0, beta, idx):
            full = np.zeros(p)
            full[columns] = beta
            return float(self.fn(dataclasses.replace(fit, beta=full, intercept=b0), dataset.take(idx)))
        return value


# --------------------------------------------------------------------------
# reports


@dataclass
class BootstrapReport:
    """Bootstrap distribution of a plug-in feature at a fixed slope norm."""

    B: int
    estimate: float
    estimates: np.ndarray
    alpha: float
    l1_bound: float
    columns: np.ndarray
    feature: str = "feature"
    failures: int = 0
    scan: list = field(default_factory=list)
    selected_norm: float | None = None
    flags: list = field(default_factory=list)

    def __post_init__(self):
        if not np.all(np.isfinite(self.estimates)):
            raise BootstrapError("non-finite bootstrap estimate")

    @property
    def se(self) -> float:
        return float(np.std(self.estimates, ddof=1))

    @property
    def ci_percentile(self) -> tuple[float, float]:
        lo, hi = np.quantile(self.estimates, [self.alpha / 2, 1 - self.alpha / 2])
        return float(lo), float(hi)

    @property
    def ci_wald(self) -> tuple[float, float]:
        z = float(norm.ppf(1 - self.alpha / 2))
        return self.estimate - z * self.se, self.estimate + z * self.se

    @property
    def width(self) -> float:
        lo, hi = self.ci_percentile
        return hi - lo

    def covers(self, value: float) -> bool:
        lo, hi = self.ci_percentile
        return lo <= value <= hi

    def to_dict(self) -> dict:
        return {
            "feature": self.feature,
            "B": int(self.B),
            "estimate": float(self.estimate),
            "se": self.se,
            "ci_percentile": list(self.ci_percentile),
            "ci_wald": list(self.ci_wald),
            "alpha": float(self.alpha),
            "l1_bound": float(self.l1_bound),
            "columns": [int(c) for c in self.columns],
            "failures": int(self.failures),
            "estimates": [float(v) for v in self.estimates],
            "scan": list(self.scan),
            "selected_norm": None if self.selected_norm is None else float(self.selected_norm),
            "flags": list(self.flags),
        }

    def to_json(self, **kw) -> str:
        return json.dumps(self.to_dict(), sort_keys=True, **kw)


def _replicate_indices(n: int, seed: int, b: int) -> np.ndarray:
    rng = np.random.default_rng(np.random.SeedSequence([int(seed), int(b)]))
    return rng.integers(0, n, size=n)


def bootstrap_plugin(fit: HalFit, dataset: Dataset, feature: Feature, B: int = 500, seed: int = 0,
                     catalog: BasisCatalog | None = None, alpha: float = 0.05) -> BootstrapReport:
    """Model-fixed bootstrap of a plug-in feature.

    Parameters
    ----------
    fit : HalFit or HalOutcome
        The selected fit. A :class:`~halmle.estimands.HalOutcome` supplies
        its own catalog.
    dataset : Dataset
        The data the fit was computed on.
    feature : Feature
        Plug-in feature to evaluate.
    B : int
        Number of replicates, at least 2.
    seed : int
        Replicate b draws its rows from ``SeedSequence([seed, b])``.
    catalog : BasisCatalog, optional
        The basis of ``fit`` when a bare HalFit is passed.
    alpha : float
        Level of the 1 - alpha intervals.

    Returns
    -------
    BootstrapReport
        Replicates whose refit does not converge are skipped and counted;
        more than 5% failures raise :class:`BootstrapError`.
    """
    if hasattr(fit, "catalog") and hasattr(fit, "fit"):
        catalog, fit = fit.catalog, fit.fit
    if catalog is None:
        raise ValueError("a basis catalog is required")
    if B < 2:
        raise ValueError("B must be at least 2")
    columns = fit.active_set.copy()
    binomial = fit.loss.kind == BINOMIAL
    X = np.asfortranarray(catalog.design[:, columns].toarray())
    y = np.asarray(dataset.Y, dtype=float)
    bound = fit.penalty_norm
    mode = _sign_modes(catalog, columns)
    value = feature.bind(catalog, fit, columns, dataset)
    n = dataset.n
    estimate = value(fit.intercept, fit.beta[columns], np.arange(n))
    start = (fit.intercept, fit.beta[columns])
    estimates = []
    failures = 0
    used = []
    for b in range(B):
        idx = _replicate_indices(n, seed, b)
        b0, beta, ok = refit_on_columns(X[idx], y[idx], binomial, bound, start=start, mode=mode)
        if not ok or not np.all(np.isfinite(beta)) or not math.isfinite(b0):
            failures += 1
            continue
        used.append(columns)
        estimates.append(value(b0, beta, idx))
    if failures > MAX_FAILURE_RATE * B:
        raise BootstrapError(f"{failures} of {B} bootstrap refits failed")
    # basis selection is never re-run: every replicate used the same columns
    assert all(np.array_equal(c, columns) for c in used)
    rep = BootstrapReport(B=B, estimate=estimate, estimates=np.asarray(estimates), alpha=alpha, l1_bound=bound,
                          columns=columns, feature=feature.name, failures=failures)
    if len(estimates) >= 500 and abs(np.mean(estimates) - estimate) > 3 * rep.se:
        rep.flags.append("bootstrap mean far from estimate")
    return rep


# --------------------------------------------------------------------------
# plateau selection of the L1 norm


def plateau_index(widths, window: int = 3, rel_tol: float = 0.05) -> tuple[int, bool]:
    """Index at which the interval widths stabilize.

    Returns the last point of the first run of ``window`` consecutive
    points whose successive relative width changes are all below
    ``rel_tol``, together with True. When no run qualifies, the last index
    and False are returned.
    """
    w = np.asarray(widths, dtype=float)
    m = w.size
    if m == 0:
        raise ValueError("empty width sequence")
    change = np.abs(np.diff(w)) / np.maximum(np.abs(w[:-1]), 1e-300)
    for end in range(window - 1, m):
        if np.all(change[end - window + 1:end] < rel_tol):
            return end, True
    return m - 1, False


def plateau_select(model, dataset: Dataset, feature: Feature, B: int = 200, seed: int = 0,
                   path: LassoPath | None = None, catalog: BasisCatalog | None = None, scan_points: int = 8,
                   factor: float = 0.7, window: int = 3, rel_tol: float = 0.05,
                   alpha: float = 0.05) -> BootstrapReport:
    """Bootstrap along increasing L1 norms and select where the CI width plateaus.

    Parameters
    ----------
    model : HalOutcome or None
        Supplies the catalog and the path whose ``selected`` index is the
        cross-validated fit. Pass ``path`` and ``catalog`` instead for a bare
        path.
    scan_points : int
        Number of norms scanned from the cross-validated one upward; the
        path is extended (on a copy) by multiplying lambda by ``factor``
        when it is too short.

    Returns
    -------
    BootstrapReport
        The report at the selected norm, with the full scan table and
        ``selected_norm`` set. Flagged ``"no plateau"`` when the widths
        never stabilize, in which case the largest scanned norm is used.
    """
    if model is not None:
        path = model.path if path is None else path
        catalog = model.catalog if catalog is None else catalog
    if path is None or catalog is None:
        raise ValueError("a path and its catalog are required")
    path = dataclasses.replace(path, fits=list(path.fits), lambda_grid=np.array(path.lambda_grid, dtype=float))
    start = len(path.fits) - 1 if path.selected is None else int(path.selected)
    cv_norm = path.fits[start].penalty_norm
    need = start + scan_points - len(path.fits)
    if need > 0:
        path.extend(factor, need)
    reports = []
    scan = []
    for i in range(start, len(path.fits)):
        f = path.fits[i]
        if f.penalty_norm < cv_norm:
            continue
        rep = bootstrap_plugin(f, dataset, feature, B, seed, catalog=catalog, alpha=alpha)
        lo, hi = rep.ci_percentile
        scan.append({"index": i, "lambda": float(path.lambda_grid[i]), "l1_norm": f.penalty_norm,
                     "n_active": int(f.active_set.size), "estimate": rep.estimate, "ci_low": lo, "ci_high": hi,
                     "width": hi - lo, "failures": rep.failures})
        reports.append(rep)
        if len(reports) >= scan_points:
            break
    k, found = plateau_index([s["width"] for s in scan], window, rel_tol)
    chosen = reports[k]
    chosen.scan = scan
    chosen.selected_norm = scan[k]["l1_norm"]
    if not found:
        chosen.flags.append("no plateau")
    return chosen
