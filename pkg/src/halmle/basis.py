"""Tensor-product spline bases for the highly adaptive lasso.

A basis function is indexed by a nonempty coordinate subset ``s``, a knot
``u_s`` and a spline order. Order 0 gives the indicator ``prod_j 1{u_j <= x_j}``
and order 1 the hinge product ``prod_j max(x_j - u_j, 0)``.
"""

from __future__ import annotations

import hashlib
import itertools
import json
from dataclasses import dataclass, field
from typing import Mapping, Sequence

import numpy as np
import scipy.sparse as sp

NONNEGATIVE = "nonnegative"
NONPOSITIVE = "nonpositive"

#: cap on n x (candidate column count) evaluated before deduplication
DEFAULT_MEMORY_BUDGET = 400_000_000


class BasisBudgetError(MemoryError):
    pass


@dataclass(frozen=True)
class BasisSpec:
    """Model restriction choices for a HAL basis.

    knot_strategy is ``"all"`` (every observed value) or ``"quantiles"`` with
    ``n_knots`` nearest-observation quantiles per coordinate.
    """

    max_degree: int | None = None
    knot_strategy: str = "all"
    n_knots: int = 5
    spline_order: int = 0
    max_basis: int | None = None
    sign_constraints: Mapping[tuple[int, ...], str] | None = None
    additive_groups: Sequence[Sequence[int]] | None = None
    memory_budget: int = DEFAULT_MEMORY_BUDGET

    def validate(self, d: int) -> int:
        """Check this specification against dimension ``d``; return the effective max degree."""
        k = d if self.max_degree is None else self.max_degree
        if not 1 <= k <= d:
            raise ValueError(f"max_degree={k} must lie in [1, {d}]")
        if self.knot_strategy not in ("all", "quantiles"):
            raise ValueError(f"unknown knot_strategy {self.knot_strategy!r}")
        if self.knot_strategy == "quantiles" and self.n_knots < 2:
            raise ValueError("quantile knot strategy needs n_knots >= 2")
        if self.spline_order not in (0, 1):
            raise ValueError("spline_order must be 0 or 1")
        if self.max_basis is not None and self.max_basis < 1:
            raise ValueError("max_basis must be positive")
        for s, sign in (self.sign_constraints or {}).items():
            if sign not in (NONNEGATIVE, NONPOSITIVE):
                raise ValueError(f"sign constraint for {s} must be {NONNEGATIVE!r} or {NONPOSITIVE!r}")
        for g in self.additive_groups or ():
            if not g or any(not 0 <= j < d for j in g):
                raise ValueError(f"additive group {tuple(g)} is not a subset of 0..{d - 1}")
        return k

    def complexity(self, d: int) -> tuple:
        k = d if self.max_degree is None else self.max_degree
        knots = self.n_knots if self.knot_strategy == "quantiles" else float("inf")
        return (k, knots, self.spline_order)

    def to_dict(self) -> dict:
        return {
            "max_degree": self.max_degree,
            "knot_strategy": self.knot_strategy,
            "n_knots": self.n_knots,
            "spline_order": self.spline_order,
            "max_basis": self.max_basis,
            "sign_constraints": {",".join(map(str, k)): v for k, v in (self.sign_constraints or {}).items()},
            "additive_groups": [list(g) for g in self.additive_groups] if self.additive_groups else None,
        }


@dataclass(frozen=True)
class BasisFunction:
    subset: tuple[int, ...]
    knot: tuple[float, ...]
    order: int = 0

    def __call__(self, x) -> float:
        return evaluate_basis(self, x)


def evaluate_basis(f: BasisFunction, x) -> float:
    """Evaluate one basis function at a single point ``x`` (length d)."""
    x = np.asarray(x, dtype=float)
    value = 1.0
    for j, u in zip(f.subset, f.knot):
        if f.order == 0:
            if not u <= x[j]:
                return 0.0
        else:
            value *= max(x[j] - u, 0.0)
    return value


def _block(X: np.ndarray, subset, knots: np.ndarray, order: int) -> np.ndarray:
    """Evaluate all knots of one subset on X; returns len(X) x len(knots)."""
    if order == 0:
        out = np.ones((X.shape[0], knots.shape[0]), dtype=bool)
        for c, j in enumerate(subset):
            out &= X[:, j][:, None] >= knots[:, c][None, :]
        return out
    out = np.ones((X.shape[0], knots.shape[0]))
    for c, j in enumerate(subset):
        out *= np.maximum(X[:, j][:, None] - knots[:, c][None, :], 0.0)
    return out


def quantile_knots(x: np.ndarray, q: int) -> np.ndarray:
    """q interior quantiles, each snapped to an observed value."""
    levels = np.arange(1, q + 1) / (q + 1)
    return np.quantile(x, levels, method="closest_observation")


def allowed_subsets(d: int, max_degree: int, additive_groups=None) -> list[tuple[int, ...]]:
    out = []
    groups = [set(g) for g in additive_groups] if additive_groups else None
    for k in range(1, max_degree + 1):
        for s in itertools.combinations(range(d), k):
            if groups is None or any(set(s) <= g for g in groups):
                out.append(s)
    return out


@dataclass
class BasisCatalog:
    """Deduplicated basis functions and their training design matrix.

    ``design`` is an n x p CSC matrix; ``provenance[k]`` lists the candidate
    ids (enumeration positions) merged into column k and ``knot_rows[k]`` the
    observation that supplied the knot (-1 for quantile knots).
    """

    functions: list[BasisFunction]
    design: sp.csc_matrix
    spec: BasisSpec = field(default_factory=BasisSpec)
    provenance: list[list[int]] = field(default_factory=list)
    knot_rows: list[int] = field(default_factory=list)
    n_candidates: int = 0
    feature_names: tuple[str, ...] = ()

    @property
    def p(self) -> int:
        return len(self.functions)

    @property
    def n(self) -> int:
        return self.design.shape[0]

    @property
    def support(self) -> np.ndarray:
        return np.diff(self.design.indptr) / max(self.n, 1)

    @property
    def fingerprint(self) -> str:
        h = hashlib.sha1()
        for f in self.functions:
            h.update(repr((f.subset, tuple(round(u, 15) for u in f.knot), f.order)).encode())
        return h.hexdigest()[:16]

    def bounds(self) -> tuple[np.ndarray, np.ndarray]:
        """Coefficient box implied by the sign constraints of the specification."""
        lower = np.full(self.p, -np.inf)
        upper = np.full(self.p, np.inf)
        for s, sign in (self.spec.sign_constraints or {}).items():
            s = tuple(sorted(s))
            for k, f in enumerate(self.functions):
                if f.subset == s:
                    if sign == NONNEGATIVE:
                        lower[k] = 0.0
                    else:
                        upper[k] = 0.0
        return lower, upper

    def design_matrix(self, X, columns=None) -> sp.csc_matrix:
        """Evaluate (a subset of) the basis at new points; rows follow X."""
        X = np.atleast_2d(np.asarray(X, dtype=float))
        cols = range(self.p) if columns is None else columns
        blocks = []
        by_subset: dict[tuple, list[int]] = {}
        for k in cols:
            by_subset.setdefault(self.functions[k].subset, []).append(k)
        order = []
        for s, ks in by_subset.items():
            knots = np.array([self.functions[k].knot for k in ks])
            blocks.append(sp.csc_matrix(_block(X, s, knots, self.spec.spline_order), dtype=float))
            order.extend(ks)
        if not blocks:
            return sp.csc_matrix((X.shape[0], 0))
        M = sp.hstack(blocks, format="csc")
        pos = {k: i for i, k in enumerate(order)}
        want = [pos[k] for k in cols]
        if want != list(range(len(want))):
            M = M[:, want]
        return sp.csc_matrix(M)

    def subset(self, columns) -> "BasisCatalog":
        """Catalog restricted to ``columns`` (kept in the given order)."""
        columns = list(columns)
        return BasisCatalog(
            functions=[self.functions[k] for k in columns],
            design=sp.csc_matrix(self.design[:, columns]),
            spec=self.spec,
            provenance=[self.provenance[k] for k in columns] if self.provenance else [],
            knot_rows=[self.knot_rows[k] for k in columns] if self.knot_rows else [],
            n_candidates=self.n_candidates,
            feature_names=self.feature_names,
        )

    def summary(self) -> list[dict]:
        sup = self.support
        return [
            {"subset": list(f.subset), "knot": list(f.knot), "order": f.order, "support": float(sup[k])}
            for k, f in enumerate(self.functions)
        ]

    def to_json(self) -> str:
        return json.dumps({"fingerprint": self.fingerprint, "n_candidates": self.n_candidates,
                           "feature_names": list(self.feature_names), "spec": self.spec.to_dict(),
                           "basis": self.summary()})


def _column_key(col: np.ndarray, order: int) -> bytes:
    if order == 0:
        return np.packbits(col).tobytes()
    return np.ascontiguousarray(col, dtype=float).tobytes()


def enumerate_basis(X, spec: BasisSpec = BasisSpec(), feature_names=()) -> BasisCatalog:
    """Enumerate and deduplicate basis functions over the rows of ``X``.

    Constant columns are dropped since the unpenalized intercept already spans
    them. Pass ``dataset.features()`` to treat the treatment as a coordinate.
    """
    X = np.atleast_2d(np.asarray(X, dtype=float))
    n, d = X.shape
    k = spec.validate(d)
    subsets = allowed_subsets(d, k, spec.additive_groups)
    if spec.knot_strategy == "quantiles":
        per_coord = [quantile_knots(X[:, j], spec.n_knots) for j in range(d)]
        knot_sets = {s: np.array(list(itertools.product(*(per_coord[j] for j in s)))) for s in subsets}
        source = {s: np.full(len(knot_sets[s]), -1) for s in subsets}
    else:
        knot_sets = {s: X[:, list(s)] for s in subsets}
        source = {s: np.arange(n) for s in subsets}
    n_candidates = sum(len(v) for v in knot_sets.values())
    if n_candidates * n > spec.memory_budget:
        raise BasisBudgetError(
            f"{n_candidates} candidate columns x {n} rows exceeds the memory budget {spec.memory_budget}")

    functions: list[BasisFunction] = []
    provenance: list[list[int]] = []
    knot_rows: list[int] = []
    blocks = []
    seen: dict[bytes, int] = {}
    offset = 0
    for s in subsets:
        knots = knot_sets[s]
        B = _block(X, s, knots, spec.spline_order)
        keep = []
        for c in range(B.shape[1]):
            col = B[:, c]
            cid = offset + c
            if col.min() == col.max():
                continue
            key = _column_key(col, spec.spline_order)
            hit = seen.get(key)
            if hit is not None:
                provenance[hit].append(cid)
                continue
            seen[key] = len(functions)
            functions.append(BasisFunction(tuple(s), tuple(float(u) for u in knots[c]), spec.spline_order))
            provenance.append([cid])
            knot_rows.append(int(source[s][c]))
            keep.append(c)
        if keep:
            blocks.append(sp.csc_matrix(B[:, keep], dtype=float))
        offset += B.shape[1]
    design = sp.hstack(blocks, format="csc") if blocks else sp.csc_matrix((n, 0))
    design.sort_indices()
    cat = BasisCatalog(functions=functions, design=sp.csc_matrix(design), spec=spec, provenance=provenance,
                       knot_rows=knot_rows, n_candidates=n_candidates, feature_names=tuple(feature_names))
    if spec.max_basis is not None and cat.p > spec.max_basis:
        cat = rank_by_sparsity(cat, spec.max_basis)
    return cat


def rank_by_sparsity(catalog: BasisCatalog, k: int) -> BasisCatalog:
    """Keep the ``k`` columns with the largest support fraction.

    Ties keep enumeration order; the surviving columns stay in their original
    relative order.
    """
    if k < 1:
        raise ValueError("k must be >= 1")
    if k >= catalog.p:
        return catalog
    ranked = np.argsort(-catalog.support, kind="stable")[:k]
    return catalog.subset(np.sort(ranked))


def predict(catalog: BasisCatalog, beta, X=None) -> np.ndarray:
    """Linear predictor beta[0] + sum_j beta[j+1] phi_j(x).

    ``X=None`` uses the stored training design. Only columns with nonzero
    coefficients are evaluated.
    """
    beta = np.asarray(beta, dtype=float)
    if beta.shape != (catalog.p + 1,):
        raise ValueError(f"beta has length {beta.size}, expected {catalog.p + 1}")
    slopes = beta[1:]
    if X is None:
        return beta[0] + catalog.design @ slopes
    X = np.atleast_2d(np.asarray(X, dtype=float))
    active = np.flatnonzero(slopes)
    out = np.full(X.shape[0], beta[0])
    if active.size == 0:
        return out
    chunk = max(1, 4_000_000 // max(active.size, 1))
    for start in range(0, X.shape[0], chunk):
        M = catalog.design_matrix(X[start:start + chunk], columns=active)
        out[start:start + chunk] += M @ slopes[active]
    return out


def sectional_variation_norm(beta) -> float:
    """|beta_0| + sum |beta_j|: the sectional variation norm of a HAL fit."""
    return float(np.sum(np.abs(np.asarray(beta, dtype=float))))
