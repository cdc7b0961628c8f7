"""Cross-validated selection of the penalty, the discrete super learner over
HAL specifications, and score-driven undersmoothing.

All candidates for one specification share a single lambda grid computed
from the full data, so a grid index names the same sieve element in every
fold. Basis functions are enumerated once on the full data; fold fits use
the training rows of that catalog.
"""

from __future__ import annotations

import csv
import io
import json
import math
from dataclasses import dataclass
from typing import Callable, Sequence

import numpy as np

from .basis import BasisCatalog, BasisSpec, enumerate_basis
from .data import Dataset, FoldPlan
from .solver import (BINOMIAL, GAUSSIAN, HalFit, LassoPath, LossFamily, as_loss, fit_lasso, lambda_grid,
                     lambda_max)


@dataclass
class CvReport:
    """Held-out risks for every candidate in every fold.

    ``fold_risks`` is V x m: entry (v, k) is the mean loss of candidate k,
    fitted on the training rows of fold v, over the validation rows of fold v.
    Candidates never evaluated (early stopping) carry NaN in every fold.
    """

    candidate_ids: list
    fold_risks: np.ndarray
    selected: int
    seed: int
    lambdas: np.ndarray | None = None
    norms: np.ndarray | None = None
    flags: tuple[str, ...] = ()

    @property
    def mean_risk(self) -> np.ndarray:
        return self.fold_risks.mean(axis=0)

    @property
    def selected_id(self):
        return self.candidate_ids[self.selected]

    @property
    def selected_risk(self) -> float:
        return float(self.mean_risk[self.selected])

    def to_dict(self) -> dict:
        out = {
            "candidates": [str(c) for c in self.candidate_ids],
            "fold_risks": [[None if not np.isfinite(r) else float(r) for r in row] for row in self.fold_risks],
            "mean_risk": [None if not np.isfinite(r) else float(r) for r in self.mean_risk],
            "selected": int(self.selected),
            "selected_id": str(self.selected_id),
            "seed": int(self.seed),
            "flags": list(self.flags),
        }
        if self.lambdas is not None:
            out["lambdas"] = [float(x) for x in self.lambdas]
        return out

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True)

    def to_csv(self) -> str:
        """Flat table with one row per (candidate, fold)."""
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["candidate", "fold", "risk"])
        V, m = self.fold_risks.shape
        for k in range(m):
            for v in range(V):
                r = self.fold_risks[v, k]
                if np.isfinite(r):
                    w.writerow([self.candidate_ids[k], v + 1, repr(float(r))])
        return buf.getvalue()


def select_min(mean_risk: np.ndarray, norms=None) -> int:
    """Index of the minimum mean risk; ties go to the smaller norm, then the lower index."""
    risk = np.where(np.isfinite(mean_risk), mean_risk, np.inf)
    best = float(risk.min())
    ties = np.flatnonzero(risk == best)
    if norms is not None and ties.size > 1:
        nrm = np.asarray(norms, dtype=float)[ties]
        ties = ties[nrm == nrm.min()]
    return int(ties[0])


@dataclass
class CvPath:
    """Everything produced by one cross-validated path fit."""

    report: CvReport
    path: LassoPath
    catalog: BasisCatalog

    @property
    def fit(self) -> HalFit:
        return self.path.fits[self.path.selected]


def regression_inputs(dataset: Dataset, include_treatment: bool = True):
    return dataset.features(include_treatment=include_treatment), np.asarray(dataset.Y, dtype=float)


def default_loss(dataset: Dataset) -> LossFamily:
    return LossFamily(BINOMIAL if dataset.outcome_kind == "binary" else GAUSSIAN)


def cv_path(dataset: Dataset, spec: BasisSpec, loss=None, folds: FoldPlan | None = None, grid_size: int = 30,
            ratio: float = 1e-2, patience: int | None = 5, include_treatment: bool = True,
            catalog: BasisCatalog | None = None) -> CvPath:
    """V-fold cross-validation over a shared lambda grid.

    Fold paths are advanced one grid point at a time. With ``patience`` set,
    the scan stops once the mean held-out risk has failed to improve on its
    running minimum for that many consecutive grid points; ``None`` scans the
    whole grid. The full-data path is then fitted down to the winner.
    """
    loss = default_loss(dataset) if loss is None else as_loss(loss)
    if folds is None:
        raise ValueError("a FoldPlan is required")
    X, y = regression_inputs(dataset, include_treatment)
    if catalog is None:
        catalog = enumerate_basis(X, spec, dataset.feature_names(include_treatment))
    design = catalog.design
    constraints = catalog.bounds() if catalog.spec.sign_constraints else None
    lams = lambda_grid(lambda_max(design, y, loss), grid_size, ratio)
    V = folds.V
    fold_data = []
    for v, tr, va in folds.splits():
        fold_data.append((design[tr], y[tr], design[va], y[va]))
    risks = np.full((V, lams.size), np.nan)
    warm = [None] * V
    best, since = np.inf, 0
    last = lams.size - 1
    for k, lam in enumerate(lams):
        for v, (Xt, yt, Xv, yv) in enumerate(fold_data):
            cons = constraints
            f = fit_lasso(Xt, yt, loss, lam, warm_start=warm[v], constraints=cons)
            warm[v] = f
            risks[v, k] = loss.risk(yv, f.intercept + Xv @ f.beta)
        m = float(risks[:, k].mean())
        if not math.isfinite(best) or m < best - 1e-12 * max(1.0, abs(best)):
            best, since = m, 0
        else:
            since += 1
        if patience is not None and since >= patience:
            last = k
            break
    mean = risks[:, : last + 1].mean(axis=0)
    sel = select_min(mean)
    fits = []
    prev = None
    for lam in lams[: sel + 1]:
        prev = fit_lasso(catalog, y, loss, lam, warm_start=prev, constraints=constraints)
        fits.append(prev)
    path = LassoPath(lambda_grid=lams[: sel + 1].copy(), fits=fits, design=catalog, y=y, loss=loss,
                     constraints=constraints, selected=sel)
    flags = ("early stop",) if last < lams.size - 1 else ()
    report = CvReport(candidate_ids=[f"lambda[{k}]" for k in range(lams.size)], fold_risks=risks,
                      selected=sel, seed=folds.seed, lambdas=lams, flags=flags)
    return CvPath(report=report, path=path, catalog=catalog)


def cv_select_lambda(dataset: Dataset, spec: BasisSpec, loss=None, folds: FoldPlan | None = None,
                     grid_size: int = 30, **kw) -> tuple[CvReport, HalFit]:
    """Cross-validation selector of lambda; the winner is refitted on all rows."""
    res = cv_path(dataset, spec, loss, folds, grid_size, **kw)
    return res.report, res.fit


@dataclass
class HalSpecLadder:
    """Specifications ordered from least to most complex.

    ``stop_rule`` is ``"best"`` (stop when the next candidate is worse than
    the best so far) or ``"previous"`` (worse than the immediately preceding
    candidate).
    """

    specs: list[BasisSpec]
    stop_rule: str = "best"

    def __post_init__(self):
        if not self.specs:
            raise ValueError("ladder must contain at least one specification")
        if self.stop_rule not in ("best", "previous"):
            raise ValueError(f"unknown stop rule {self.stop_rule!r}")

    def check_order(self, d: int) -> None:
        ranks = [s.complexity(d) for s in self.specs]
        for a, b in zip(ranks, ranks[1:]):
            if not a < b:
                raise ValueError("ladder specifications must be strictly increasing in complexity")


@dataclass
class SuperLearnerResult:
    report: CvReport
    fit: HalFit
    catalog: BasisCatalog
    path: LassoPath
    evaluated: int


def discrete_super_learner(dataset: Dataset, ladder: HalSpecLadder, loss=None, folds: FoldPlan | None = None,
                           include_treatment: bool = True, **kw) -> SuperLearnerResult:
    """Walk the ladder in complexity order, each rung tuned by cross-validation.

    Stops as soon as a rung's cross-validated risk exceeds the best so far
    (or the previous rung, per ``ladder.stop_rule``) and returns the best
    rung refitted on all rows.
    """
    d = dataset.features(include_treatment=include_treatment).shape[1]
    ladder.check_order(d)
    results = []
    for spec in ladder.specs:
        res = cv_path(dataset, spec, loss, folds, include_treatment=include_treatment, **kw)
        risk = res.report.selected_risk
        if results:
            ref = min(r.report.selected_risk for r in results) if ladder.stop_rule == "best" \
                else results[-1].report.selected_risk
            if risk > ref:
                results.append(res)
                break
        results.append(res)
    V = folds.V
    table = np.column_stack([r.report.fold_risks[:, r.report.selected] for r in results]).reshape(V, -1)
    mean = table.mean(axis=0)
    sel = select_min(mean)
    report = CvReport(candidate_ids=[f"spec[{k}]" for k in range(len(results))], fold_risks=table,
                      selected=sel, seed=folds.seed)
    win = results[sel]
    return SuperLearnerResult(report=report, fit=win.fit, catalog=win.catalog, path=win.path,
                              evaluated=len(results))


def undersmooth_threshold(sigma_n: float, n: int, const: float = 1.0) -> float:
    """const * sigma_n / (sqrt(n) log n)."""
    if math.isinf(const) or math.isinf(sigma_n):
        return math.inf
    return const * sigma_n / (math.sqrt(n) * math.log(n))


def undersmooth_select(dataset: Dataset, path: LassoPath, criterion: Callable[[HalFit], float],
                       sigma_n: float | Callable[[HalFit], float], const: float = 1.0,
                       max_norm_factor: float = 10.0, max_steps: int = 40) -> HalFit:
    """Smallest L1 norm at or above the cross-validated one whose criterion meets the threshold.

    The path beyond the cross-validated fit is scanned first and then
    extended by halving lambda. ``sigma_n`` may be a callable evaluated at
    each fit. When no fit qualifies before the norm reaches
    ``max_norm_factor`` times the cross-validated norm, the last fit is
    returned flagged ``"criterion unmet"``.
    """
    start = path.selected if path.selected is not None else len(path.fits) - 1
    cv_fit = path.fits[start]
    cv_norm = cv_fit.penalty_norm
    n = dataset.n

    def threshold(fit):
        s = sigma_n(fit) if callable(sigma_n) else sigma_n
        return undersmooth_threshold(s, n, const)

    def meets(fit):
        t = threshold(fit)
        if math.isinf(t):
            return True
        value = float(criterion(fit))
        if not np.isfinite(value):
            raise ValueError("undersmoothing criterion returned a non-finite value")
        return value <= t

    k = start
    while True:
        fit = path.fits[k]
        if fit.penalty_norm >= cv_norm * (1 - 1e-12) and meets(fit):
            return fit
        if k + 1 < len(path.fits):
            k += 1
            continue
        if fit.penalty_norm > max_norm_factor * max(cv_norm, 1e-12) or max_steps <= 0:
            break
        path.extend(0.5, 1)
        max_steps -= 1
        k += 1
    fit = path.fits[k]
    fit.flags = tuple(fit.flags) + ("criterion unmet",)
    return fit


def global_undersmooth_select(dataset: Dataset, path: LassoPath, feature_family: Sequence[Callable],
                              sigma_n, const: float = 1.0, **kw) -> HalFit:
    """Undersmoothing with the criterion sup_t |P_n D*_t| over a family of features.

    ``sigma_n`` may be a single value or callable, or one per feature; each
    feature is then compared with its own threshold by rescaling.
    """
    family = list(feature_family)
    start = path.selected if path.selected is not None else len(path.fits) - 1
    if not family:
        fit = path.fits[start]
        fit.flags = tuple(fit.flags) + ("vacuous",)
        return fit
    if isinstance(sigma_n, (list, tuple)):
        sigmas = list(sigma_n)

        def crit(fit):
            vals = []
            for c, s in zip(family, sigmas):
                s = s(fit) if callable(s) else s
                vals.append(abs(c(fit)) / s if s > 0 else math.inf)
            return max(vals)

        return undersmooth_select(dataset, path, crit, 1.0, const, **kw)
    return undersmooth_select(dataset, path, lambda f: max(abs(c(f)) for c in family), sigma_n, const, **kw)
