"""L1-penalized minimum loss estimation by pathwise coordinate descent.

The penalized problem solved for a given lambda is

    min_{b0, beta}  P_n L(b0 + X beta) + lam * ||beta||_1

with an unpenalized intercept. Squared error uses L = (y - q)^2, so the
kernel runs with unit weights doubled; the binomial deviance is handled by
iteratively reweighted least squares with a backtracking step on the true
objective.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np
import scipy.sparse as sp
from scipy.special import expit, logit

from . import _cd
from .basis import BasisCatalog

GAUSSIAN = "gaussian"
BINOMIAL = "binomial"

WEIGHT_FLOOR = 1e-8
KKT_TOL = 1e-6


class ConvergenceError(RuntimeError):
    def __init__(self, message, kkt_residual=float("nan")):
        super().__init__(f"{message} (KKT residual {kkt_residual:.3g})")
        self.kkt_residual = kkt_residual


@dataclass(frozen=True)
class LossFamily:
    kind: str = GAUSSIAN

    def __post_init__(self):
        if self.kind not in (GAUSSIAN, BINOMIAL):
            raise ValueError(f"unknown loss family {self.kind!r}")

    def inverse_link(self, eta):
        return expit(eta) if self.kind == BINOMIAL else np.asarray(eta, dtype=float)

    def pointwise(self, y, eta) -> np.ndarray:
        """Observation-level loss L(Q, O_i) evaluated at linear predictor ``eta``."""
        if self.kind == BINOMIAL:
            return np.logaddexp(0.0, eta) - y * eta
        return (y - eta) ** 2

    def risk(self, y, eta) -> float:
        return float(np.mean(self.pointwise(y, eta)))

    def deriv(self, y, eta) -> np.ndarray:
        """dL/d eta for each observation."""
        if self.kind == BINOMIAL:
            return expit(eta) - y
        return -2.0 * (y - eta)

    def check(self, y) -> None:
        if self.kind == BINOMIAL and not np.all((y == 0) | (y == 1)):
            raise ValueError("binomial loss requires outcomes in {0,1}")

    def null_intercept(self, y) -> float:
        m = float(np.mean(y))
        if self.kind == BINOMIAL:
            m = min(max(m, 1e-10), 1 - 1e-10)
            return float(logit(m))
        return m


def as_loss(loss) -> LossFamily:
    return loss if isinstance(loss, LossFamily) else LossFamily(loss)


@dataclass
class HalFit:
    """Coefficients of one penalized fit plus convergence diagnostics."""

    beta: np.ndarray
    intercept: float
    lam: float
    loss: LossFamily
    train_risk: float
    catalog_ref: str = ""
    kkt_residual: float = 0.0
    sweeps: int = 0
    flags: tuple[str, ...] = ()

    @property
    def coef(self) -> np.ndarray:
        return np.concatenate([[self.intercept], self.beta])

    @property
    def active_set(self) -> np.ndarray:
        return np.flatnonzero(self.beta)

    @property
    def penalty_norm(self) -> float:
        """sum_j |beta_j| over the penalized slopes."""
        return float(np.sum(np.abs(self.beta)))

    @property
    def l1_norm(self) -> float:
        """Sectional variation norm |intercept| + sum_j |beta_j|."""
        return abs(self.intercept) + self.penalty_norm

    def linear_predictor(self, design) -> np.ndarray:
        X = design.design if isinstance(design, BasisCatalog) else design
        return self.intercept + X @ self.beta

    def predict(self, catalog: BasisCatalog, X=None) -> np.ndarray:
        """Predictions on the response scale at new points (training rows if X is None)."""
        from .basis import predict
        return self.loss.inverse_link(predict(catalog, self.coef, X))

    def to_dict(self) -> dict:
        nz = self.active_set
        return {
            "catalog_ref": self.catalog_ref,
            "loss": self.loss.kind,
            "lambda": float(self.lam),
            "intercept": float(self.intercept),
            "coefficients": [[int(j), float(self.beta[j])] for j in nz],
            "p": int(self.beta.size),
            "l1_norm": self.l1_norm,
            "penalty_norm": self.penalty_norm,
            "train_risk": float(self.train_risk),
            "kkt_residual": float(self.kkt_residual),
            "sweeps": int(self.sweeps),
            "flags": list(self.flags),
        }


@dataclass
class LassoPath:
    """Fits along a decreasing lambda grid, warm-started in order."""

    lambda_grid: np.ndarray
    fits: list[HalFit]
    design: object = None
    y: np.ndarray | None = None
    loss: LossFamily = field(default_factory=LossFamily)
    constraints: tuple | None = None
    selected: int | None = None

    def __len__(self):
        return len(self.fits)

    @property
    def norms(self) -> np.ndarray:
        return np.array([f.penalty_norm for f in self.fits])

    def extend(self, factor: float = 0.5, steps: int = 1) -> None:
        """Append ``steps`` fits, each at ``factor`` times the last lambda."""
        for _ in range(steps):
            lam = self.lambda_grid[-1] * factor
            fit = fit_lasso(self.design, self.y, self.loss, lam, warm_start=self.fits[-1],
                            constraints=self.constraints)
            self.lambda_grid = np.append(self.lambda_grid, lam)
            self.fits.append(fit)


def _unpack(design, constraints):
    if isinstance(design, BasisCatalog):
        X = design.design
        ref = design.fingerprint
        if constraints is None and design.spec.sign_constraints:
            constraints = design.bounds()
    else:
        X = design
        ref = ""
    X = sp.csc_matrix(X, dtype=float)
    X.sort_indices()
    p = X.shape[1]
    if constraints is None:
        lower = np.full(p, -np.inf)
        upper = np.full(p, np.inf)
    else:
        lower, upper = (np.asarray(c, dtype=float) for c in constraints)
        if lower.shape != (p,) or upper.shape != (p,):
            raise ValueError("constraint bounds must have one entry per column")
    return X, ref, lower, upper


def gradient(design, y, loss, intercept, beta) -> tuple[float, np.ndarray]:
    """(P_n dL/db0, P_n dL/dbeta_j) at the given coefficients."""
    loss = as_loss(loss)
    X = design.design if isinstance(design, BasisCatalog) else sp.csc_matrix(design)
    eta = intercept + X @ beta
    r = loss.deriv(y, eta)
    n = len(y)
    return float(np.mean(r)), np.asarray(X.T @ r).ravel() / n


def objective(design, y, loss, intercept, beta, lam) -> float:
    loss = as_loss(loss)
    X = design.design if isinstance(design, BasisCatalog) else design
    return loss.risk(y, intercept + X @ beta) + lam * float(np.sum(np.abs(beta)))


def kkt_violation(g0, g, beta, lam, lower=None, upper=None) -> float:
    """Largest violation of the stationarity conditions of the penalized problem."""
    viol = abs(g0)
    if g.size == 0:
        return viol
    lower = np.full(g.size, -np.inf) if lower is None else lower
    upper = np.full(g.size, np.inf) if upper is None else upper
    nz = beta != 0
    v = np.zeros(g.size)
    v[nz] = np.abs(g[nz] + lam * np.sign(beta[nz]))
    z = ~nz
    free = z & (lower < 0) & (upper > 0)
    v[free] = np.maximum(0.0, np.abs(g[free]) - lam)
    nonneg = z & (lower >= 0)
    v[nonneg] = np.maximum(0.0, -lam - g[nonneg])
    nonpos = z & (upper <= 0) & ~nonneg
    v[nonpos] = np.maximum(0.0, g[nonpos] - lam)
    return float(max(viol, v.max()))


def lambda_max(design, y, loss) -> float:
    """Smallest lambda at which the intercept-only model is optimal."""
    loss = as_loss(loss)
    X, _, _, _ = _unpack(design, None)
    if X.shape[1] == 0:
        return 0.0
    b0 = loss.null_intercept(y)
    _, g = gradient(X, y, loss, b0, np.zeros(X.shape[1]))
    return float(np.max(np.abs(g)))


def _cd_warmup(X, w, resid, beta, b0, lam, lower, upper, xw2, tol, max_sweeps):
    """Active-set cycling: full sweep, then iterate the active set, repeat."""
    all_coords = np.arange(X.shape[1], dtype=np.int64)
    used = 0
    while used < max_sweeps:
        b0, s, change = _cd.cd_sweeps(X.indptr, X.indices, X.data, w, resid, beta, b0, lam, lower, upper,
                                      xw2, all_coords, 1, tol, True)
        used += s
        if change < tol:
            return b0, used, True
        active = np.flatnonzero(beta).astype(np.int64)
        if active.size:
            b0, s, change = _cd.cd_sweeps(X.indptr, X.indices, X.data, w, resid, beta, b0, lam, lower, upper,
                                          xw2, active, max_sweeps - used, tol, True)
            used += s
    return b0, used, False


def _quad_objective(w, r, beta, lam, n):
    return 0.5 * float(np.dot(w, r * r)) / n + lam * float(np.abs(beta).sum())


def _newton_phase(X, w, z, beta, b0, lam, lower, upper, resid):
    """Sign-fixed Newton steps on the active set until a full step is taken.

    Each step minimizes the smooth objective obtained by freezing the signs
    of the active coefficients. When the best point along the step is a zero
    crossing, that coefficient is dropped and the step is recomputed, so the
    phase ends after at most (active size + 1) solves.
    """
    n = X.shape[0]
    current = _quad_objective(w, resid, beta, lam, n)
    for _ in range(np.count_nonzero(beta) + 2):
        act = np.flatnonzero(beta)
        sgn = np.sign(beta[act])
        k = act.size
        XA = X[:, act].toarray() if k else np.zeros((n, 0))
        WXA = XA * w[:, None]
        H = np.empty((k + 1, k + 1))
        H[0, 0] = w.sum()
        H[0, 1:] = WXA.sum(axis=0)
        H[1:, 0] = H[0, 1:]
        H[1:, 1:] = XA.T @ WXA
        H /= n
        wr = w * resid
        grad = np.concatenate([[-wr.sum() / n], -(wr @ XA) / n + lam * sgn])
        H[np.diag_indices_from(H)] += 1e-12 * max(float(np.trace(H)) / (k + 1), 1e-300)
        try:
            step = -np.linalg.solve(H, grad)
        except np.linalg.LinAlgError:
            step = -np.linalg.lstsq(H, grad, rcond=None)[0]
        if not np.all(np.isfinite(step)):
            break
        deta = step[0] + XA @ step[1:]
        cb, db = beta[act], step[1:]
        with np.errstate(divide="ignore", invalid="ignore"):
            cross = np.where(db != 0, -cb / db, np.inf)
        cross[cross <= 0] = np.inf
        cands = np.concatenate([[1.0], np.unique(cross[cross < 1.0])])
        best_t, best = 0.0, current
        for t in cands:
            o = _quad_objective(w, resid - t * deta, cb + t * db, lam, n)
            if o < best:
                best_t, best = float(t), o
        if best_t == 0.0:
            break
        new = np.clip(cb + best_t * db, lower[act], upper[act])
        if best_t < 1.0:
            new[np.abs(cross - best_t) <= 1e-12 * best_t] = 0.0
        beta[act] = new
        b0 += best_t * step[0]
        resid[:] = z - (b0 + X @ beta)
        current = _quad_objective(w, resid, beta, lam, n)
        if best_t == 1.0:
            break
    return b0


def _newton_polish(X, w, z, beta, b0, lam, lower, upper, xw2, kkt_target, max_rounds=100):
    """Alternate one coordinate sweep (which admits KKT violators) with a Newton phase.

    Modifies ``beta`` in place; returns (b0, kkt, finished).
    """
    n, p = X.shape
    all_coords = np.arange(p, dtype=np.int64)
    resid = z - (b0 + X @ beta)
    kkt = np.inf
    for _ in range(max_rounds):
        b0, _, _ = _cd.cd_sweeps(X.indptr, X.indices, X.data, w, resid, beta, b0, lam, lower, upper,
                                 xw2, all_coords, 1, 0.0, True)
        wr = w * resid
        g0 = -float(wr.sum()) / n
        g = -_cd.xt_vec(X.indptr, X.indices, X.data, wr, p) / n
        kkt = kkt_violation(g0, g, beta, lam, lower, upper)
        if kkt <= kkt_target:
            return b0, kkt, True
        b0 = _newton_phase(X, w, z, beta, b0, lam, lower, upper, resid)
    return b0, kkt, False


def _solve_quadratic(X, w, resid, beta, b0, lam, lower, upper, xw2, tol, max_sweeps, warmup=True,
                     kkt_target=1e-9):
    """Coordinate-descent warm-up followed by Newton polishing on the active set."""
    used = 0
    if warmup:
        b0, used, _ = _cd_warmup(X, w, resid, beta, b0, lam, lower, upper, xw2, max(tol, 1e-4),
                                 min(max_sweeps, 100))
    z = resid + (b0 + X @ beta)
    b0, kkt, done = _newton_polish(X, w, z, beta, b0, lam, lower, upper, xw2, kkt_target)
    resid[:] = z - (b0 + X @ beta)
    if not done:
        b0, s, _ = _cd_warmup(X, w, resid, beta, b0, lam, lower, upper, xw2, tol * 1e-3, max_sweeps - used)
        used += s
    return b0, used, True


def fit_lasso(design, y, loss=GAUSSIAN, lam: float = 0.0, warm_start=None, constraints=None,
              tol: float = 1e-7, max_sweeps: int = 10_000, kkt_tol: float = KKT_TOL) -> HalFit:
    """Minimize P_n L(Q_beta) + lam * ||beta||_1 with an unpenalized intercept.

    ``warm_start`` may be a HalFit or a coefficient vector with intercept first.
    ``constraints`` is a (lower, upper) pair of per-column bounds; a
    BasisCatalog with sign constraints supplies them automatically.
    Raises ConvergenceError when the KKT residual stays above ``kkt_tol``.
    """
    loss = as_loss(loss)
    if lam < 0:
        raise ValueError("lambda must be nonnegative")
    y = np.asarray(y, dtype=float)
    loss.check(y)
    X, ref, lower, upper = _unpack(design, constraints)
    n, p = X.shape
    if y.shape != (n,):
        raise ValueError(f"y has shape {y.shape}, design has {n} rows")
    if warm_start is None:
        b0, beta = loss.null_intercept(y), np.zeros(p)
    else:
        coef = warm_start.coef if isinstance(warm_start, HalFit) else np.asarray(warm_start, dtype=float)
        if coef.shape != (p + 1,):
            raise ValueError("warm start has the wrong length")
        b0, beta = float(coef[0]), np.clip(coef[1:].astype(float), lower, upper)

    total = 0
    cur_tol = tol
    for attempt in range(6):
        if loss.kind == GAUSSIAN:
            w = np.full(n, 2.0)
            resid = y - (b0 + X @ beta)
            xw2 = _cd.column_weights(X.indptr, X.indices, X.data, w, p)
            b0, used, ok = _solve_quadratic(X, w, resid, beta, b0, lam, lower, upper, xw2, cur_tol,
                                            max_sweeps - total)
            total += used
        else:
            b0, used, ok = _irls(X, y, beta, b0, lam, lower, upper, cur_tol, max_sweeps - total)
            total += used
        g0, g = gradient(X, y, loss, b0, beta)
        kkt = kkt_violation(g0, g, beta, lam, lower, upper)
        if kkt <= kkt_tol:
            break
        if total >= max_sweeps:
            raise ConvergenceError(f"no convergence within {max_sweeps} sweeps", kkt)
        cur_tol *= 0.01
    else:
        raise ConvergenceError("KKT conditions not met after tightening the tolerance", kkt)
    eta = b0 + X @ beta
    return HalFit(beta=beta, intercept=float(b0), lam=float(lam), loss=loss, train_risk=loss.risk(y, eta),
                  catalog_ref=ref, kkt_residual=kkt, sweeps=total)


def _irls(X, y, beta, b0, lam, lower, upper, tol, max_sweeps):
    n, p = X.shape
    loss = LossFamily(BINOMIAL)

    def obj(b0_, beta_):
        return loss.risk(y, b0_ + X @ beta_) + lam * np.abs(beta_).sum()

    used = 0
    current = obj(b0, beta)
    for it in range(200):
        eta = b0 + X @ beta
        mu = expit(eta)
        w = np.maximum(mu * (1.0 - mu), WEIGHT_FLOOR)
        resid = (y - mu) / w
        xw2 = _cd.column_weights(X.indptr, X.indices, X.data, w, p)
        beta_old, b0_old = beta.copy(), b0
        b0_new, s, _ = _solve_quadratic(X, w, resid, beta, b0, lam, lower, upper, xw2, tol,
                                        max(max_sweeps - used, 1), warmup=it == 0)
        used += s
        step_beta = beta - beta_old
        step_b0 = b0_new - b0_old
        t = 1.0
        new = obj(b0_old + step_b0, beta)
        halvings = 0
        while new > current + 1e-15 * max(1.0, abs(current)) and halvings < 40:
            t *= 0.5
            halvings += 1
            beta[:] = beta_old + t * step_beta
            new = obj(b0_old + t * step_b0, beta)
        b0 = b0_old + t * step_b0
        change = max(np.max(np.abs(t * step_beta) / np.maximum(1.0, np.abs(beta)), initial=0.0),
                     abs(t * step_b0) / max(1.0, abs(b0)))
        current = new
        if change < tol or used >= max_sweeps:
            break
    return b0, used, True


def lambda_grid(lmax: float, grid_size: int = 50, ratio: float = 1e-3) -> np.ndarray:
    if grid_size < 2:
        raise ValueError("grid_size must be >= 2")
    if lmax <= 0:
        lmax = 1e-8
    return np.geomspace(lmax, lmax * ratio, grid_size)


def fit_path(design, y, loss=GAUSSIAN, grid_size: int = 50, ratio: float = 1e-3, lambdas=None,
             constraints=None, **kw) -> LassoPath:
    """Warm-started fits over a log-spaced grid from lambda_max down to lambda_max * ratio."""
    loss = as_loss(loss)
    y = np.asarray(y, dtype=float)
    if lambdas is None:
        lambdas = lambda_grid(lambda_max(design, y, loss), grid_size, ratio)
    lambdas = np.asarray(lambdas, dtype=float)
    fits = []
    prev = None
    for lam in lambdas:
        prev = fit_lasso(design, y, loss, lam, warm_start=prev, constraints=constraints, **kw)
        fits.append(prev)
    return LassoPath(lambda_grid=lambdas, fits=fits, design=design, y=y, loss=loss, constraints=constraints)


def null_fit(design, y, loss=GAUSSIAN) -> HalFit:
    """Intercept-only fit (the solution for every lambda >= lambda_max)."""
    loss = as_loss(loss)
    y = np.asarray(y, dtype=float)
    X, ref, _, _ = _unpack(design, None)
    b0 = loss.null_intercept(y)
    beta = np.zeros(X.shape[1])
    g0, g = gradient(X, y, loss, b0, beta)
    lmax = float(np.max(np.abs(g))) if g.size else 0.0
    return HalFit(beta=beta, intercept=b0, lam=lmax, loss=loss, train_risk=loss.risk(y, np.full(len(y), b0)),
                  catalog_ref=ref, kkt_residual=abs(g0))


def constrained_fit(design, y, loss=GAUSSIAN, l1_bound: float = math.inf, rel_tol: float = 0.005,
                    lam_hint: float | None = None, max_bisect: int = 80, min_ratio: float = 1e-6,
                    constraints=None) -> HalFit:
    """Fit with ||beta||_1 <= l1_bound by bisection on the penalty level.

    The bound applies to the penalized slopes. Returns the fit whose slope
    norm lies within ``rel_tol`` of the bound from below, or the least
    penalized fit flagged ``"bound slack"`` when the bound never binds.
    """
    loss = as_loss(loss)
    y = np.asarray(y, dtype=float)
    if l1_bound < 0:
        raise ValueError("l1_bound must be nonnegative")
    lmax = lambda_max(design, y, loss)
    if l1_bound == 0 or lmax == 0:
        fit = null_fit(design, y, loss)
        if lmax == 0 and l1_bound > 0:
            fit.flags = ("bound slack",)
        return fit
    lam_floor = lmax * min_ratio
    if math.isinf(l1_bound):
        fit = fit_lasso(design, y, loss, lam_floor, constraints=constraints)
        fit.flags = ("bound slack",)
        return fit

    def solve(lam, warm):
        return fit_lasso(design, y, loss, lam, warm_start=warm, constraints=constraints)

    # bracket: hi_lam has norm <= bound, lo_lam has norm > bound
    hi_lam, hi_fit = lmax, None
    lam = lmax * 0.5 if lam_hint is None else min(lam_hint, lmax)
    fit = solve(lam, None)
    while fit.penalty_norm <= l1_bound:
        hi_lam, hi_fit = lam, fit
        if abs(fit.penalty_norm - l1_bound) <= rel_tol * l1_bound:
            return fit
        if lam <= lam_floor:
            fit.flags = ("bound slack",)
            return fit
        lam = max(lam * 0.25, lam_floor)
        fit = solve(lam, fit)
    lo_lam, lo_fit = lam, fit
    if hi_fit is None:
        hi_fit = null_fit(design, y, loss)
    for _ in range(max_bisect):
        mid = math.sqrt(hi_lam * lo_lam)
        fit = solve(mid, lo_fit)
        if fit.penalty_norm <= l1_bound:
            hi_lam, hi_fit = mid, fit
            if abs(fit.penalty_norm - l1_bound) <= rel_tol * l1_bound:
                return fit
        else:
            lo_lam, lo_fit = mid, fit
        if hi_lam / lo_lam < 1 + 1e-12:
            break
    return hi_fit
