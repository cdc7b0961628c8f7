"""Data-generating processes with known truths and Monte Carlo drivers.

Every replicate draws its data and fold split from a seed derived from the
run seed and the replicate index, so serial and parallel runs agree and
aggregates are computed with compensated summation.
"""

from __future__ import annotations

import csv
import io
import json
import math
import time
from dataclasses import asdict, dataclass, field
from functools import cached_property
from typing import Callable

import numpy as np
from scipy.special import expit

from .basis import BasisSpec, predict as basis_predict
from .data import BINARY, CONTINUOUS, Dataset, make_folds
from .estimands import (ATE, CONTROL, TREATED, EstimationError, FunctionOutcome, PropensityModel,
                        constant_outcome, ctmle_select, fit_outcome, fit_propensity, function_propensity,
                        ipw_tsm, orthogonalized_tmle_update, plugin_tsm, quadrature_grid, tmle_update_tsm,
                        undersmooth_outcome)
from .selection import cv_path
from .solver import GAUSSIAN, LossFamily

SCHEMA_VERSION = 1


@dataclass(frozen=True)
class Dgp:
    """Observed-data law with W uniform on [0, 1]^d.

    ``g0(W)`` is P(A = 1 | W) (None for a pure regression law), ``q0(a, W)``
    the outcome regression (``a`` is ignored when there is no treatment).
    """

    id: str
    d: int
    q0: Callable
    g0: Callable | None = None
    outcome_kind: str = BINARY
    noise_sd: float = 0.0
    smooth: bool = True
    description: str = ""
    instrument: tuple[int, ...] = ()
    confounders: tuple[int, ...] = ()

    @property
    def has_treatment(self) -> bool:
        return self.g0 is not None

    def sample(self, n: int, seed) -> Dataset:
        rng = np.random.default_rng(seed)
        W = rng.uniform(size=(n, self.d))
        A = None
        if self.has_treatment:
            A = rng.binomial(1, self.g0(W)).astype(float)
            mean = self.q0(A, W)
        else:
            mean = self.q0(None, W)
        if self.outcome_kind == BINARY:
            Y = rng.binomial(1, mean).astype(float)
        else:
            Y = mean + self.noise_sd * rng.standard_normal(n)
        return Dataset(W=W, Y=Y, A=A, outcome_kind=self.outcome_kind)

    def integrate(self, fn: Callable[[np.ndarray], np.ndarray], points: int = 400) -> float:
        """Integral of fn over the unit cube by tensor quadrature.

        Smooth laws use Gauss-Legendre nodes; step-function laws use the
        midpoint rule, which is exact when every jump sits on a cell edge.
        Evaluation proceeds in slabs along the first axis to bound memory.
        """
        if self.smooth:
            x, w = np.polynomial.legendre.leggauss(points)
            x, w = (x + 1) / 2, w / 2
        else:
            x = (np.arange(points) + 0.5) / points
            w = np.full(points, 1.0 / points)
        rest = [x] * (self.d - 1)
        rest_w = np.ones(1)
        for _ in range(self.d - 1):
            rest_w = np.outer(rest_w, w).ravel()
        if self.d > 1:
            mesh = np.meshgrid(*rest, indexing="ij")
            tail = np.column_stack([m.ravel() for m in mesh])
        else:
            tail = np.zeros((1, 0))
        total = []
        for xi, wi in zip(x, w):
            W = np.column_stack([np.full(tail.shape[0], xi), tail])
            total.append(wi * float(np.dot(rest_w, fn(W))))
        return math.fsum(total)

    def psi0(self, a: int = 1, points: int = 400) -> float:
        return self.integrate(lambda W: self.q0(np.full(W.shape[0], float(a)), W), points)

    @cached_property
    def truth(self) -> float:
        """E[Q0(1, W)] (or E[Q0(W)] without treatment), cached."""
        return self.psi0(1)

    def min_propensity(self, points: int = 101) -> float:
        axis = np.linspace(0, 1, points)
        mesh = np.meshgrid(*([axis] * self.d), indexing="ij")
        W = np.column_stack([m.ravel() for m in mesh])
        g = self.g0(W)
        return float(min(g.min(), (1 - g).min()))


def _step_c(a, W):
    w1, w2 = W[:, 0], W[:, 1]
    return (1.0 * (w1 >= 0.3) + 1.0 * (w2 >= 0.6) - 1.5 * ((w1 >= 0.55) & (w2 >= 0.25))
            + 0.5 * ((w1 >= 0.8) & (w2 >= 0.8)))


def _step_one(a, W):
    return 1.0 * (W[:, 0] >= 0.5)


def _q_a(a, W):
    return expit(a + W[:, 0] * W[:, 1] - 0.5)


def builtin_dgps() -> list[Dgp]:
    """The registry of simulation laws."""
    return [
        Dgp(id="DGP-A", d=2, q0=_q_a, g0=lambda W: expit(0.4 * W[:, 0] - 0.5 * W[:, 1] + 0.2),
            description="binary Y; mild confounding by (w1, w2)", confounders=(0, 1)),
        Dgp(id="DGP-B", d=3, q0=_q_a, g0=lambda W: expit(0.4 * W[:, 0] - 0.5 * W[:, 1] + 3.0 * W[:, 2] - 2.5),
            description="DGP-A plus instrument w3 in the treatment mechanism only",
            instrument=(2,), confounders=(0, 1)),
        Dgp(id="DGP-C", d=2, q0=_step_c, outcome_kind=CONTINUOUS, noise_sd=1.0, smooth=False,
            description="continuous Y; two-dimensional step-function regression"),
        Dgp(id="DGP-STEP", d=1, q0=_step_one, outcome_kind=CONTINUOUS, noise_sd=1.0, smooth=False,
            description="continuous Y; single-knot step function"),
        Dgp(id="DGP-A-RCT", d=2, q0=_q_a, g0=lambda W: np.full(W.shape[0], 0.5),
            description="DGP-A outcome with randomized treatment"),
    ]


def get_dgp(dgp_id: str) -> Dgp:
    for dgp in builtin_dgps():
        if dgp.id == dgp_id:
            return dgp
    raise KeyError(f"unknown dgp id {dgp_id!r}")


# --------------------------------------------------------------------------
# estimator configurations


@dataclass
class EstimatorConfig:
    """How one replicate is analysed.

    ``outcome`` is ``"hal"``, ``"constant"`` or ``"treatment_only"``;
    ``propensity`` is ``"hal"`` or ``"true"``. ``method`` is one of
    plugin, ipw, tmle, tmle_preserving, ctmle, oracle, treated_mean.
    """

    method: str = "tmle"
    n_knots: int = 10
    knot_strategy: str = "quantiles"
    max_degree: int | None = None
    V: int = 5
    grid_size: int = 30
    ratio: float = 1e-2
    patience: int | None = 5
    bounds: tuple[float, float] = (0.01, 0.99)
    undersmooth: bool = False
    tol_const: float = 1.0
    outcome: str = "hal"
    propensity: str = "hal"
    estimand: str = "tsm1"

    def spec(self) -> BasisSpec:
        return BasisSpec(max_degree=self.max_degree, knot_strategy=self.knot_strategy, n_knots=self.n_knots)

    @property
    def contrast(self) -> dict:
        return {"tsm1": TREATED, "tsm0": CONTROL, "ate": ATE}[self.estimand]


def truth_for(dgp: Dgp, contrast) -> float:
    return float(sum(c * dgp.psi0(a) for a, c in contrast.items()))


def _outcome_model(ds: Dataset, cfg: EstimatorConfig, folds):
    if cfg.outcome == "constant":
        return constant_outcome(ds)
    if cfg.outcome == "treatment_only":
        m1 = float(ds.Y[ds.A == 1].mean()) if np.any(ds.A == 1) else float(ds.Y.mean())
        m0 = float(ds.Y[ds.A == 0].mean()) if np.any(ds.A == 0) else float(ds.Y.mean())
        return FunctionOutcome(lambda a, W: np.full(W.shape[0], m1 if a == 1 else m0), ds.outcome_kind,
                               "treatment-only")
    return fit_outcome(ds, cfg.spec(), folds, cfg.grid_size, cfg.ratio, cfg.patience)


def _propensity_model(ds: Dataset, cfg: EstimatorConfig, folds, dgp: Dgp):
    if cfg.propensity == "true":
        return function_propensity(dgp.g0, cfg.bounds, "true")
    return fit_propensity(ds, cfg.spec(), folds, bounds=cfg.bounds, grid_size=cfg.grid_size, ratio=cfg.ratio,
                          patience=cfg.patience)


def ctmle_ladder(ds: Dataset, dgp: Dgp, cfg: EstimatorConfig, folds) -> list[PropensityModel]:
    """Intercept-only, confounders-only and all-covariate propensity candidates."""
    conf = dgp.confounders or tuple(range(ds.d))
    ladder = [fit_propensity(ds, cfg.spec(), folds, columns=(), bounds=cfg.bounds, label="intercept"),
              fit_propensity(ds, cfg.spec(), folds, columns=conf, bounds=cfg.bounds, grid_size=cfg.grid_size,
                             ratio=cfg.ratio, patience=cfg.patience, label="confounders")]
    if tuple(range(ds.d)) != tuple(conf):
        ladder.append(fit_propensity(ds, cfg.spec(), folds, bounds=cfg.bounds, grid_size=cfg.grid_size,
                                     ratio=cfg.ratio, patience=cfg.patience, label="all covariates"))
    return ladder


def analyse(ds: Dataset, dgp: Dgp, cfg: EstimatorConfig, seed: int) -> dict:
    """Run one estimator on one dataset; returns the per-replicate record."""
    contrast = cfg.contrast
    psi0 = truth_for(dgp, contrast)
    if cfg.method == "oracle":
        return {"psi": psi0, "se": 0.0, "ci_lo": psi0, "ci_hi": psi0, "abs_score_mean": 0.0, "tol": 0.0}
    if cfg.method == "treated_mean":
        y1 = ds.Y[ds.A == 1]
        se = float(np.std(y1) / math.sqrt(y1.size))
        m = float(y1.mean())
        return {"psi": m, "se": se, "ci_lo": m - 1.959963984540054 * se, "ci_hi": m + 1.959963984540054 * se,
                "abs_score_mean": 0.0, "tol": 0.0}
    folds = make_folds(ds, cfg.V, seed)
    Q = _outcome_model(ds, cfg, folds)
    extra = {}
    if cfg.method == "ctmle":
        ladder = ctmle_ladder(ds, dgp, cfg, folds)
        trace, rep = ctmle_select(Q, ladder, ds, folds, contrast=contrast)
        extra["ctmle_selected"] = "|".join(trace.candidates[j] for j in trace.selected)
        extra["instrument_excluded"] = all(trace.candidates[j] != "all covariates" for j in trace.selected) \
            if dgp.instrument else True
        G_full = ladder[-1]
        plain = tmle_update_tsm(Q, G_full, ds, contrast=contrast)[1]
        extra["plain_psi"] = plain.psi
        extra["plain_se"] = plain.se
    else:
        G = _propensity_model(ds, cfg, folds, dgp)
        if cfg.undersmooth and hasattr(Q, "path"):
            Q = undersmooth_outcome(Q, G, ds, contrast=contrast, const=cfg.tol_const)
            extra["undersmooth_unmet"] = "criterion unmet" in Q.fit.flags
        if cfg.method == "plugin":
            rep = plugin_tsm(Q, ds, G, contrast=contrast)
        elif cfg.method == "ipw":
            rep = ipw_tsm(G, ds, contrast=contrast)
        elif cfg.method == "tmle":
            rep = tmle_update_tsm(Q, G, ds, contrast=contrast)[1]
        elif cfg.method == "tmle_preserving":
            rep = orthogonalized_tmle_update(Q, G, ds, contrast=contrast)[1]
            extra["battery_max"] = rep.diagnostics["battery_max"]
        else:
            raise ValueError(f"unknown method {cfg.method!r}")
    lo, hi = rep.ci
    out = {"psi": rep.psi, "se": rep.se, "ci_lo": lo, "ci_hi": hi, "abs_score_mean": abs(rep.score_mean),
           "tol": float(rep.diagnostics.get("tol", float("nan")))}
    out.update(extra)
    return out


def replicate_seed(seed: int, r: int) -> int:
    return int(np.random.SeedSequence([seed, r]).generate_state(1)[0])


# --------------------------------------------------------------------------
# results


@dataclass
class SimResult:
    dgp: str
    n: int
    psi0: float
    seed: int
    config: dict
    rows: list = field(default_factory=list)

    @property
    def ok(self) -> list:
        return [r for r in self.rows if r.get("status") == "ok"]

    @property
    def failure_rate(self) -> float:
        return 1.0 - len(self.ok) / max(len(self.rows), 1)

    def column(self, key) -> np.ndarray:
        return np.array([r[key] for r in self.ok], dtype=float)

    def aggregates(self) -> dict:
        psi = self.column("psi")
        m = len(psi)
        if m == 0:
            return {"replicates": len(self.rows), "failures": len(self.rows)}
        mean = math.fsum(psi) / m
        var = math.fsum((psi - mean) ** 2) / (m - 1) if m > 1 else 0.0
        covered = self.column("covered")
        se = self.column("se")
        width = self.column("ci_hi") - self.column("ci_lo")
        return {
            "replicates": len(self.rows),
            "failures": len(self.rows) - m,
            "mean_estimate": mean,
            "bias": mean - self.psi0,
            "mc_se": math.sqrt(var / m),
            "variance": var,
            "mse": math.fsum((psi - self.psi0) ** 2) / m,
            "coverage": math.fsum(covered) / m,
            "mean_ci_width": math.fsum(width) / m,
            "mean_se_sq": math.fsum(se ** 2) / m,
        }

    def to_dict(self) -> dict:
        return {"schema_version": SCHEMA_VERSION, "dgp": self.dgp, "n": self.n, "psi0": self.psi0,
                "seed": self.seed, "config": self.config, "aggregates": self.aggregates()}

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True)

    def to_csv(self, include_runtime: bool = False) -> str:
        keys = []
        for r in self.rows:
            for k in r:
                if k not in keys and (include_runtime or k != "runtime"):
                    keys.append(k)
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(keys)
        for r in self.rows:
            w.writerow([_fmt(r.get(k, "")) for k in keys])
        return buf.getvalue()


def _fmt(v):
    if isinstance(v, (bool, np.bool_)):
        return int(v)
    if isinstance(v, (float, np.floating)):
        return repr(float(v))
    return v


def run_mc(dgp: Dgp, config: EstimatorConfig | Callable, n: int, replicates: int, seed: int,
           max_failure_rate: float = 0.05) -> SimResult:
    """Seeded Monte Carlo over ``replicates`` datasets of size ``n``.

    ``config`` is an EstimatorConfig or a callable (dataset, dgp, seed) ->
    dict with at least psi, se, ci_lo and ci_hi. Replicate failures are
    recorded; more than ``max_failure_rate`` of them raises.
    """
    if replicates < 1:
        raise ValueError("replicates must be at least 1")
    if isinstance(config, EstimatorConfig):
        contrast = config.contrast
        cfg_dict = asdict(config)
        estimator = lambda ds, s: analyse(ds, dgp, config, s)
    else:
        contrast = TREATED
        cfg_dict = {"estimator": getattr(config, "__name__", "callable")}
        estimator = lambda ds, s: config(ds, dgp, s)
    psi0 = truth_for(dgp, contrast) if dgp.has_treatment else dgp.truth
    result = SimResult(dgp=dgp.id, n=n, psi0=psi0, seed=seed, config=cfg_dict)
    for r in range(replicates):
        s = replicate_seed(seed, r)
        row = {"replicate": r, "seed": s}
        t0 = time.perf_counter()
        try:
            ds = dgp.sample(n, s)
            out = estimator(ds, s)
            row.update(out)
            row["covered"] = bool(out["ci_lo"] <= psi0 <= out["ci_hi"])
            row["status"] = "ok"
        except (EstimationError, ArithmeticError, ValueError, RuntimeError, np.linalg.LinAlgError) as exc:
            row.update({"status": "failed", "error": f"{type(exc).__name__}: {exc}"})
        row["runtime"] = time.perf_counter() - t0
        result.rows.append(row)
    if result.failure_rate > max_failure_rate:
        raise RuntimeError(f"{result.failure_rate:.1%} of replicates failed")
    return result


# --------------------------------------------------------------------------
# rate of convergence


def default_rate_spec(n: int) -> BasisSpec:
    """Quantile knots whose count per coordinate grows like sqrt(n)."""
    return BasisSpec(knot_strategy="quantiles", n_knots=int(math.ceil(math.sqrt(n))))


@dataclass
class RateTable:
    dgp: str
    n_grid: list
    errors: np.ndarray  # len(n_grid) x replicates
    seed: int

    @property
    def mean_error(self) -> np.ndarray:
        return self.errors.mean(axis=1)

    @property
    def se_error(self) -> np.ndarray:
        return self.errors.std(axis=1, ddof=1) / math.sqrt(self.errors.shape[1]) if self.errors.shape[1] > 1 \
            else np.zeros(len(self.n_grid))

    @property
    def slope(self) -> float:
        return float(np.polyfit(np.log(self.n_grid), np.log(self.mean_error), 1)[0])

    @property
    def strictly_decreasing(self) -> bool:
        m = self.mean_error
        return bool(np.all(np.diff(m) < 0))

    def to_dict(self) -> dict:
        return {"schema_version": SCHEMA_VERSION, "dgp": self.dgp, "seed": self.seed,
                "n": [int(v) for v in self.n_grid], "mean_error": [float(v) for v in self.mean_error],
                "se_error": [float(v) for v in self.se_error], "slope": self.slope,
                "strictly_decreasing": self.strictly_decreasing}

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["n", "mean_error", "se_error"])
        for n, m, s in zip(self.n_grid, self.mean_error, self.se_error):
            w.writerow([n, repr(float(m)), repr(float(s))])
        return buf.getvalue()


def l2_error(dgp: Dgp, predict: Callable[[np.ndarray], np.ndarray], points: int = 200) -> float:
    """sqrt(int (Q_n - Q0)^2 dP0) over W uniform on the cube (midpoint grid)."""
    W = quadrature_grid(dgp.d, points)
    diff = predict(W) - dgp.q0(None, W)
    return math.sqrt(float(np.mean(diff * diff)))


def rate_experiment(dgp: Dgp, n_grid, replicates: int, seed: int, spec_for_n: Callable = default_rate_spec,
                    V: int = 5, grid_size: int = 30, ratio: float = 1e-3, points: int = 200) -> RateTable:
    """Mean L2(P0) error of the cross-validated HAL regression across sample sizes."""
    n_grid = [int(v) for v in n_grid]
    if len(n_grid) < 3 or any(b <= a for a, b in zip(n_grid, n_grid[1:])):
        raise ValueError("n_grid must be increasing with at least 3 points")
    if dgp.has_treatment:
        raise ValueError("the rate experiment uses a regression-only law")
    errors = np.zeros((len(n_grid), replicates))
    loss = LossFamily(GAUSSIAN if dgp.outcome_kind == CONTINUOUS else "binomial")
    for i, n in enumerate(n_grid):
        for r in range(replicates):
            s = replicate_seed(seed, i * 100003 + r)
            ds = dgp.sample(n, s)
            folds = make_folds(ds, V, s)
            res = cv_path(ds, spec_for_n(n), loss, folds, grid_size, ratio=ratio)
            fit, cat = res.fit, res.catalog
            errors[i, r] = l2_error(dgp, lambda W: loss.inverse_link(basis_predict(cat, fit.coef, W)), points)
    return RateTable(dgp=dgp.id, n_grid=n_grid, errors=errors, seed=seed)
