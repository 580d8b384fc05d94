"""Numeric design structures compiled from a checked specification.

Every column is described by a *recipe* (a product of numeric values and
factor-level indicators) so that new data can be encoded with exactly the
coding learned on the training data.
"""

from __future__ import annotations

import logging
import re
import warnings
from dataclasses import dataclass, field
from typing import Mapping, Sequence

import numpy as np
from scipy.interpolate import BSpline

from . import formula as F
from .modelspec import CheckedSpec, GroupBlockSpec, SmoothSpec, ValidationError, prefix
from .tabular import FACTOR, NUMERIC, Dataset

log = logging.getLogger(__name__)

# A column recipe is a tuple of components; (var, None) is the numeric value of
# var, (var, level) is the indicator of that factor level. () is the intercept.
Recipe = tuple


class DesignError(ValueError):
    pass


def natural_key(label: str):
    """Sort key ordering numeric labels by value and the rest lexicographically."""
    parts = re.split(r"(\d+(?:\.\d+)?)", label)
    return tuple((0, float(p), "") if i % 2 else (1, 0.0, p) for i, p in enumerate(parts) if p != "")


def sort_levels(labels) -> list[str]:
    return sorted(set(labels), key=natural_key)


def _component_values(comp, d: Dataset) -> np.ndarray:
    var, level = comp
    col = d[var]
    if level is None:
        return col.as_float()
    if col.kind != FACTOR:
        raise DesignError(f"{var!r} must be a factor")
    if level not in col.levels:
        return np.zeros(d.n_rows)
    return (col.values == col.levels.index(level)).astype(float)


def eval_recipe(recipe: Recipe, d: Dataset) -> np.ndarray:
    out = np.ones(d.n_rows)
    for comp in recipe:
        out = out * _component_values(comp, d)
    return out


def recipe_name(recipe: Recipe) -> str:
    if not recipe:
        return "Intercept"
    return ":".join(v if lev is None else f"{v}{lev}" for v, lev in recipe)


def _term_recipes(intercept: bool, terms: Sequence[F.FixedTerm], d: Dataset) -> list[Recipe]:
    """Treatment-contrast recipes for an additive term list."""
    recipes: list[Recipe] = [()] if intercept else []
    present = [frozenset(t.variables) for t in terms]
    spanned = intercept
    for ti, t in enumerate(terms):
        parts: list[list[tuple]] = []
        for v in t.variables:
            col = d[v]
            if col.kind != FACTOR:
                parts.append([(v, None)])
                continue
            rest = frozenset(t.variables) - {v}
            full = (not spanned) if not rest else rest not in present
            levels = list(col.levels)
            chosen = levels if full else levels[1:]
            if not chosen:
                raise DesignError(f"factor {v!r} has a single level: no estimable contrast")
            parts.append([(v, lev) for lev in chosen])
        if len(t.variables) == 1 and d[t.variables[0]].kind == FACTOR:
            spanned = True
        combos: list[tuple] = [()]
        for p in parts:
            combos = [c + (x,) for c in combos for x in p]
        recipes.extend(combos)
    return recipes


@dataclass(frozen=True, eq=False)
class FixedBlock:
    owner: str
    X: np.ndarray
    column_names: tuple[str, ...]
    has_intercept: bool
    recipes: tuple[Recipe, ...]

    @property
    def p(self) -> int:
        return self.X.shape[1]


def build_fixed(owner: str, rhs: F.RhsSpec, d: Dataset, recipes=None) -> FixedBlock:
    if recipes is None:
        recipes = _term_recipes(rhs.intercept, rhs.fixed_terms, d)
    X = np.column_stack([eval_recipe(r, d) for r in recipes]) if recipes else np.zeros((d.n_rows, 0))
    names = tuple(recipe_name(r) for r in recipes)
    if len(set(names)) != len(names):
        raise DesignError(f"duplicate design columns for {owner}: {names}")
    X.setflags(write=False)
    return FixedBlock(owner, X, names, () in recipes, tuple(recipes))


# --------------------------------------------------------------------------
# group-level blocks


@dataclass(frozen=True, eq=False)
class RandomBlock:
    """Group-level effects for one block.

    Row ``i`` contributes ``w[i, j] * Xr[i, c] * u[idx[i, j], c]`` to the
    predictor of the owner of coefficient ``c``, summed over members ``j``.
    Unused member slots have weight 0. When encoding new data, levels unseen
    at training time are listed in ``new_levels`` and indexed after the
    training levels.
    """

    spec: GroupBlockSpec
    label: str
    levels: tuple[str, ...]
    coefs: tuple[tuple[str, str], ...]
    Xr: np.ndarray
    idx: np.ndarray
    w: np.ndarray
    recipes: tuple[Recipe, ...]
    new_levels: tuple[str, ...] = ()

    @property
    def q(self) -> int:
        return len(self.coefs)

    @property
    def n_levels(self) -> int:
        return len(self.levels)

    @property
    def correlated(self) -> bool:
        return self.spec.correlated and self.q > 1

    @property
    def is_mm(self) -> bool:
        return self.spec.grouping.kind == "mm"

    def coef_names(self) -> list[str]:
        return [f"{prefix(o)}{c}" for o, c in self.coefs]

    def owners(self) -> list[str]:
        return list(dict.fromkeys(o for o, _ in self.coefs))

    def row_contributions(self, i: int) -> list[tuple[int, int, float]]:
        """Coordinate list of (level index, coefficient index, weight) for row i."""
        out = []
        for j in range(self.idx.shape[1]):
            if self.w[i, j] == 0 or self.idx[i, j] >= self.n_levels:
                continue
            for c in range(self.q):
                out.append((int(self.idx[i, j]), c, float(self.w[i, j] * self.Xr[i, c])))
        return out

    def dense_Z(self) -> np.ndarray:
        """n x (G*q) matrix, column ``g*q + c`` for level g and coefficient c."""
        n = self.Xr.shape[0]
        Z = np.zeros((n, self.n_levels * self.q))
        for i in range(n):
            for g, c, v in self.row_contributions(i):
                Z[i, g * self.q + c] += v
        return Z

    def effect_sum(self, u: np.ndarray) -> np.ndarray:
        """Per-row contributions: (n, q) array of sum_j w_ij * u[idx_ij, c] * Xr_ic."""
        if self.new_levels:
            u = np.vstack([u, np.zeros((len(self.new_levels), self.q))])
        return block_effects(self.idx, self.w, self.Xr, u)


def block_effects(idx, w, Xr, u) -> np.ndarray:
    return (w[:, :, None] * u[idx]).sum(axis=1) * Xr


def _index_levels(labels, levels):
    """Map labels to level indices; unseen labels are appended after the known ones."""
    pos = {lev: i for i, lev in enumerate(levels)}
    new = []
    for lab in labels:
        if lab not in pos:
            pos[lab] = len(pos)
            new.append(lab)
    return pos, tuple(new)


def _level_labels(col) -> list[str]:
    # integer-valued numeric grouping columns are labelled without a decimal point
    if col.kind == NUMERIC:
        return [str(int(v)) for v in col.values]
    return col.labels


def _group_labels(d: Dataset, factors: Sequence[str]) -> list[str]:
    cols = [_level_labels(d[f]) for f in factors]
    return ["_".join(parts) for parts in zip(*cols)] if cols else []


def build_random(block: GroupBlockSpec, d: Dataset, label: str | None = None, reference: "RandomBlock | None" = None) -> RandomBlock:
    """Compile a plain (single or colon-combined factor) grouping."""
    if block.grouping.kind == "mm":
        return build_mm(block, d, label, reference)
    recipes, coefs = _inner(block, d, reference)
    labels = _group_labels(d, block.grouping.factors)
    levels = reference.levels if reference is not None else tuple(sort_levels(labels))
    pos, new = _index_levels(labels, levels)
    idx = np.array([pos[lab] for lab in labels], dtype=np.int64).reshape(-1, 1)
    w = np.ones((d.n_rows, 1))
    Xr = np.column_stack([eval_recipe(r, d) for r in recipes])
    return _freeze(RandomBlock(block, label or block.grouping.label, tuple(levels), coefs, Xr, idx, w, recipes, new))


def _inner(block: GroupBlockSpec, d: Dataset, reference):
    if reference is not None:
        return reference.recipes, reference.coefs
    recipes, coefs = [], []
    for t in block.terms:
        rs = _term_recipes(t.intercept, t.fixed_terms, d)
        recipes.extend(rs)
        coefs.extend((t.owner, recipe_name(r)) for r in rs)
    if len(set(coefs)) != len(coefs):
        raise DesignError(f"duplicate coefficients in group-level block ~{block.grouping.label}")
    return tuple(recipes), tuple(coefs)


def _freeze(b: RandomBlock) -> RandomBlock:
    for a in (b.Xr, b.idx, b.w):
        a.setflags(write=False)
    return b


def build_mm(block: GroupBlockSpec, d: Dataset, label: str | None = None, reference: "RandomBlock | None" = None) -> RandomBlock:
    """Compile a multi-membership grouping ``mm(s1, ..., sk, weights = cbind(w1, ..., wk))``."""
    g = block.grouping
    k = len(g.factors)
    if g.weights is not None and len(g.weights) != k:
        raise DesignError("mm() weights arity must match the number of members")
    member_labels = [_level_labels(d[f]) for f in g.factors]
    if reference is not None:
        levels = reference.levels
    else:
        levels = tuple(sort_levels(lab for m in member_labels for lab in m))
    pos, new = _index_levels([lab for m in member_labels for lab in m], levels)
    n = d.n_rows
    if g.weights is None:
        w = np.full((n, k), 1.0 / k)
    else:
        w = np.column_stack([d[c].as_float() for c in g.weights]) if n else np.zeros((0, k))
        if np.any(w < 0):
            raise DesignError("mm() weights must be non-negative")
        dev = np.abs(w.sum(axis=1) - 1.0)
        if np.any(dev > 1e-8):
            msg = f"{int(np.sum(dev > 1e-8))} rows have mm() weights not summing to 1; used as given"
            warnings.warn(msg, stacklevel=2)
    idx = np.array([[pos[m[i]] for m in member_labels] for i in range(n)], dtype=np.int64).reshape(n, k)
    w = w.copy()
    # a row naming one level several times contributes once with summed weight
    for i in range(n):
        for j in range(1, k):
            for jj in range(j):
                if w[i, jj] != 0 and idx[i, j] == idx[i, jj]:
                    w[i, jj] += w[i, j]
                    w[i, j] = 0.0
                    break
    recipes, coefs = _inner(block, d, reference)
    Xr = np.column_stack([eval_recipe(r, d) for r in recipes])
    return _freeze(RandomBlock(block, label or g.label, tuple(levels), coefs, Xr, idx, w, recipes, new))


# --------------------------------------------------------------------------
# smooths


@dataclass(frozen=True, eq=False)
class SmoothBlock:
    spec: SmoothSpec
    Xs: np.ndarray
    Zs: np.ndarray
    knots: np.ndarray
    null_vec: np.ndarray
    pen_map: np.ndarray  # U+ Lambda+^{-1/2}, K x (K-2)
    eigenvalues: np.ndarray

    @property
    def owner(self) -> str:
        return self.spec.owner

    @property
    def covariate(self) -> str:
        return self.spec.covariate

    @property
    def name(self) -> str:
        return self.spec.name

    @property
    def sds_name(self) -> str:
        return f"sds_{self.name}"

    def basis(self, x) -> np.ndarray:
        return bspline_basis(np.asarray(x, dtype=float), self.knots)

    def transform(self, x):
        B = self.basis(x)
        return B @ self.null_vec[:, None], B @ self.pen_map


def smooth_knots(x: np.ndarray, k: int) -> np.ndarray:
    """Clamped cubic knot vector with interior knots at quantiles of the distinct values."""
    ux = np.unique(x)
    if len(ux) < k:
        raise DesignError(f"smooth needs at least k={k} distinct covariate values, found {len(ux)}")
    if k < 4:
        raise DesignError("smooth basis dimension k must be at least 4")
    inner = np.quantile(ux, np.arange(1, k - 3) / (k - 3))
    lo, hi = ux[0], ux[-1]
    return np.concatenate([[lo] * 4, inner, [hi] * 4])


def bspline_basis(x: np.ndarray, knots: np.ndarray) -> np.ndarray:
    lo, hi = knots[0], knots[-1]
    inside = (x >= lo) & (x <= hi)
    B = np.zeros((len(x), len(knots) - 4))
    if inside.any():
        B[inside] = BSpline.design_matrix(x[inside], knots, 3).toarray()
    if (~inside).any():
        # outside the training range the boundary polynomials are continued
        B[~inside] = BSpline.design_matrix(x[~inside], knots, 3, extrapolate=True).toarray()
    return B


def difference_penalty(k: int, order: int = 2) -> np.ndarray:
    D = np.diff(np.eye(k), n=order, axis=0)
    return D.T @ D


def build_smooth(spec: SmoothSpec, d: Dataset, reference: SmoothBlock | None = None) -> SmoothBlock:
    x = d[spec.covariate].as_float()
    if reference is not None:
        Xs, Zs = reference.transform(x)
        return SmoothBlock(spec, Xs, Zs, reference.knots, reference.null_vec, reference.pen_map, reference.eigenvalues)
    k = spec.k
    knots = smooth_knots(x, k)
    S = difference_penalty(k)
    lam, U = np.linalg.eigh(S)
    pos = lam > 1e-8 * lam.max()
    pen_map = U[:, pos] / np.sqrt(lam[pos])
    idx = np.arange(k, dtype=float)
    v = idx - idx.mean()
    v /= np.linalg.norm(v)
    B = bspline_basis(x, knots)
    Xs, Zs = B @ v[:, None], B @ pen_map
    for a in (Xs, Zs, knots, v, pen_map):
        a.setflags(write=False)
    return SmoothBlock(spec, Xs, Zs, knots, v, pen_map, lam[pos])


# --------------------------------------------------------------------------
# assembly


@dataclass(frozen=True, eq=False)
class DesignSet:
    checked: CheckedSpec
    n: int
    y: np.ndarray | None
    weights: np.ndarray | None
    fixed: Mapping[str, FixedBlock]
    smooths: Mapping[str, tuple[SmoothBlock, ...]]
    random: tuple[RandomBlock, ...]
    covariates: Mapping[str, np.ndarray] = field(default_factory=dict)

    @property
    def spec(self):
        return self.checked.spec

    @property
    def family(self):
        return self.checked.spec.family

    @property
    def owners(self) -> list[str]:
        return list(self.fixed)

    def coefficient_count(self) -> int:
        p = sum(f.p for f in self.fixed.values())
        p += sum(b.q * b.n_levels for b in self.random)
        p += sum(s.Xs.shape[1] + s.Zs.shape[1] for ss in self.smooths.values() for s in ss)
        return p


def _unique_labels(blocks: Sequence[GroupBlockSpec]) -> list[str]:
    used: dict[str, set] = {}
    out = []
    for b in blocks:
        base = b.grouping.label
        coefs = set(b.coefficients)
        label, k = base, 1
        while label in used and used[label] & coefs:
            k += 1
            label = f"{base}.{k}"
        used.setdefault(label, set()).update(coefs)
        out.append(label)
    return out


def assemble(checked: CheckedSpec, d: Dataset, reference: DesignSet | None = None, require_response: bool = True) -> DesignSet:
    """Build every block of the model. With ``reference`` the training encoding is reused."""
    spec = checked.spec
    for name in _needed_columns(checked, with_response=False):
        if name not in d:
            raise ValidationError(f"data lacks column {name!r} needed by the model")
    y = None
    if spec.response in d:
        y = d[spec.response].as_float()
    elif require_response:
        raise ValidationError(f"data lacks the response column {spec.response!r}")
    weights = d[checked.weights_var].as_float() if checked.weights_var and checked.weights_var in d else None
    fixed, smooths = {}, {}
    for owner in spec.linear_owners():
        rec = reference.fixed[owner].recipes if reference is not None else None
        fixed[owner] = build_fixed(owner, spec.owner_rhs(owner), d, rec)
        mine = [s for s in checked.smooths if s.owner == owner]
        refs = reference.smooths[owner] if reference is not None else [None] * len(mine)
        smooths[owner] = tuple(build_smooth(s, d, r) for s, r in zip(mine, refs))
    labels = [b.label for b in reference.random] if reference is not None else _unique_labels(checked.blocks)
    random = tuple(
        build_random(b, d, lab, reference.random[i] if reference is not None else None)
        for i, (b, lab) in enumerate(zip(checked.blocks, labels))
    )
    covs = {name: d[name].as_float() for name in spec.nl_covariates()}
    return DesignSet(checked, d.n_rows, y, weights, fixed, smooths, random, covs)


def _needed_columns(checked: CheckedSpec, with_response=True) -> list[str]:
    spec = checked.spec
    out = [spec.response] if with_response else []
    for owner in spec.linear_owners():
        rhs = spec.owner_rhs(owner)
        out += [v for t in rhs.fixed_terms for v in t.variables]
    out += [s.covariate for s in checked.smooths]
    for b in checked.blocks:
        out += b.grouping.variables()
        for t in b.terms:
            out += [v for ft in t.fixed_terms for v in ft.variables]
    out += spec.nl_covariates()
    return list(dict.fromkeys(out))


def design_tables(ds: DesignSet) -> dict[str, tuple[list[str], np.ndarray]]:
    """Dense matrices of every block keyed by a file-friendly name (for inspection)."""
    out = {}
    for owner, fb in ds.fixed.items():
        out[f"X_{owner}"] = (list(fb.column_names), fb.X)
    for owner, ss in ds.smooths.items():
        for s in ss:
            out[f"Xs_{s.name}"] = ([f"{s.name}"], s.Xs)
            out[f"Zs_{s.name}"] = ([f"{s.name}[{j + 1}]" for j in range(s.Zs.shape[1])], s.Zs)
    for b in ds.random:
        cols = [f"{lev}[{c}]" for lev in b.levels for c in b.coef_names()]
        out[f"Z_{b.label.replace(':', '_')}"] = (cols, b.dense_Z())
    return out
