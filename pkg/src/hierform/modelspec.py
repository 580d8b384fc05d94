"""Multi-formula model specifications.

A :class:`ModelSpec` bundles the main formula with one formula per
distributional parameter (``zi ~ child``) or non-linear parameter
(``ult ~ 1 + (1|AY)``), the response family and the priors.
:func:`resolve_blocks` expands grouping syntax and merges group-level
terms sharing an ``|ID|`` into correlated blocks; :func:`validate` checks the
whole thing against a dataset and returns an immutable :class:`CheckedSpec`.
"""

from __future__ import annotations

import difflib
import logging
from dataclasses import dataclass, field
from typing import Iterable, Mapping, Sequence

from . import formula as F
from .families import Family, get_family
from .tabular import FACTOR, INTEGER, NUMERIC, Dataset

log = logging.getLogger(__name__)

MU = "mu"


class SpecError(ValueError):
    """An inconsistent model specification."""


class ValidationError(SpecError):
    """The specification does not fit the dataset."""


class UnsupportedFeatureError(ValidationError):
    """A construct of the formula language that parses but is not implemented."""


def prefix(owner: str) -> str:
    """Name prefix for coefficients owned by ``owner`` (empty for ``mu``)."""
    return "" if owner == MU else f"{owner}_"


# --------------------------------------------------------------------------
# priors

PRIOR_CLASSES = ("b", "Intercept", "sd", "cor", "sigma", "sds", "zi")
_DIST_ARITY = {"normal": 2, "student_t": 3, "half_student_t": 3, "lkj": 1, "beta": 2}


@dataclass(frozen=True)
class PriorDist:
    family: str
    params: tuple[float, ...]

    def __post_init__(self):
        if self.family not in _DIST_ARITY:
            raise SpecError(f"unknown prior distribution {self.family!r}")
        if len(self.params) != _DIST_ARITY[self.family]:
            raise SpecError(f"{self.family} takes {_DIST_ARITY[self.family]} arguments")
        p = self.params
        bad = (
            (self.family == "normal" and p[1] <= 0)
            or (self.family in ("student_t", "half_student_t") and (p[0] <= 0 or p[2] <= 0))
            or (self.family == "lkj" and p[0] <= 0)
            or (self.family == "beta" and (p[0] <= 0 or p[1] <= 0))
        )
        if bad:
            raise SpecError(f"invalid parameters for {self}")

    def __str__(self):
        return f"{self.family}({', '.join(F._fmt_num(v) for v in self.params)})"


@dataclass(frozen=True)
class PriorSpec:
    """A prior on one class of parameters.

    ``cls`` is one of b, Intercept, sd, cor, sigma, sds, zi. ``owner`` names
    the distributional or non-linear parameter (``mu`` for the main
    predictor). ``coef`` narrows to one coefficient; ``group`` to one
    grouping factor (for sd and cor).
    """

    dist: PriorDist
    cls: str = "b"
    owner: str = MU
    coef: str | None = None
    group: str | None = None

    def __post_init__(self):
        if self.cls not in PRIOR_CLASSES:
            raise SpecError(f"unknown prior class {self.cls!r}")
        if self.dist.family == "lkj" and self.cls != "cor":
            raise SpecError("lkj priors apply to class cor only")
        if self.cls == "cor" and self.dist.family != "lkj":
            raise SpecError("class cor needs an lkj prior")
        if self.dist.family == "beta" and self.cls != "zi":
            raise SpecError("beta priors apply to class zi only")

    def __str__(self):
        parts = [str(self.dist)]
        if self.cls != "b":
            parts.append(f"class = {self.cls}")
        if self.coef:
            parts.append(f"coef = {self.coef}")
        if self.group:
            parts.append(f"group = {self.group}")
        if self.owner != MU:
            parts.append(f"owner = {self.owner}")
        return ", ".join(parts)

    def to_dict(self) -> dict:
        return {
            "dist": self.dist.family,
            "params": list(self.dist.params),
            "class": self.cls,
            "owner": self.owner,
            "coef": self.coef,
            "group": self.group,
        }


def prior(dist: str | PriorDist, cls: str = "b", coef=None, group=None, dpar=None, nlpar=None) -> PriorSpec:
    """``prior("normal(5000, 1000)", nlpar="ult")``."""
    if isinstance(dist, str):
        dist = parse_prior_dist(dist)
    if dpar and nlpar:
        raise SpecError("give either dpar or nlpar, not both")
    owner = dpar or nlpar or MU
    return PriorSpec(dist, cls, owner, coef, group)


def parse_prior_dist(text: str) -> PriorDist:
    toks = F.tokenize(text)
    if len(toks) < 3 or toks[0].kind != F.IDENT or toks[1].kind != F.LPAREN:
        raise SpecError(f"cannot read prior distribution {text!r}")
    name = toks[0].text
    vals, i, sign = [], 2, 1.0
    while toks[i].kind != F.RPAREN:
        t = toks[i]
        if t.kind == F.MINUS:
            sign = -1.0
        elif t.kind in (F.INT, F.FLOAT):
            vals.append(sign * float(t.text))
            sign = 1.0
        elif t.kind != F.COMMA:
            raise SpecError(f"cannot read prior distribution {text!r}")
        i += 1
    if toks[i + 1].kind != F.EOF:
        raise SpecError(f"trailing text after prior distribution in {text!r}")
    return PriorDist(name, tuple(vals))


def parse_prior(text: str) -> PriorSpec:
    """Read ``"normal(5000, 1000), nlpar = ult"`` style prior text."""
    depth, cut = 0, None
    for i, ch in enumerate(text):
        depth += ch == "("
        depth -= ch == ")"
        if ch == "," and depth == 0:
            cut = i
            break
    head, rest = (text, "") if cut is None else (text[:cut], text[cut + 1 :])
    opts = {}
    for part in filter(None, (p.strip() for p in rest.split(","))):
        key, eq, val = part.partition("=")
        if not eq:
            raise SpecError(f"prior option {part!r} must look like key = value")
        key = key.strip()
        if key not in ("class", "coef", "group", "dpar", "nlpar"):
            raise SpecError(f"unknown prior option {key!r}")
        opts[key] = val.strip().strip("\"'")
    return prior(
        parse_prior_dist(head.strip()),
        cls=opts.get("class", "b"),
        coef=opts.get("coef"),
        group=opts.get("group"),
        dpar=opts.get("dpar"),
        nlpar=opts.get("nlpar"),
    )


DEFAULT_INTERCEPT = PriorDist("student_t", (3.0, 0.0, 10.0))
DEFAULT_SCALE = PriorDist("half_student_t", (3.0, 0.0, 10.0))
DEFAULT_COR = PriorDist("lkj", (1.0,))


# --------------------------------------------------------------------------
# grouping structures


@dataclass(frozen=True)
class Grouping:
    """Canonical grouping: a (colon-combined) factor or a multi-membership set."""

    kind: str  # "gr" or "mm"
    factors: tuple[str, ...]
    weights: tuple[str, ...] | None = None

    @property
    def label(self) -> str:
        if self.kind == "mm":
            return "mm" + "".join(self.factors)
        return ":".join(self.factors)

    def variables(self) -> list[str]:
        return list(self.factors) + list(self.weights or ())

    def to_dict(self) -> dict:
        return {"kind": self.kind, "factors": list(self.factors), "weights": list(self.weights) if self.weights else None}


def _contains_mm(e) -> bool:
    if isinstance(e, F.GMm):
        return True
    if isinstance(e, F.GGr):
        return _contains_mm(e.arg)
    if isinstance(e, (F.GColon, F.GSlash, F.GPlus)):
        return _contains_mm(e.left) or _contains_mm(e.right)
    return False


def _expand(e) -> list[tuple[str, ...]]:
    if isinstance(e, F.GVar):
        return [(e.name,)]
    if isinstance(e, F.GGr):
        return _expand(e.arg)
    if isinstance(e, F.GMm):
        raise SpecError("mm() cannot be combined with ':', '/' or '+' in a grouping expression")
    if isinstance(e, F.GPlus):
        return list(dict.fromkeys(_expand(e.left) + _expand(e.right)))
    if isinstance(e, F.GColon):
        return list(
            dict.fromkeys(tuple(dict.fromkeys(a + b)) for a in _expand(e.left) for b in _expand(e.right))
        )
    if isinstance(e, F.GSlash):
        left = _expand(e.left)
        outer = tuple(dict.fromkeys(v for t in left for v in t))
        nested = [tuple(dict.fromkeys(outer + b)) for b in _expand(e.right)]
        return list(dict.fromkeys(left + nested))
    raise TypeError(f"not a grouping expression: {e!r}")


def expand_group_expr(e) -> list[Grouping]:
    """Rewrite a grouping expression into its canonical groupings.

    ``g1/g2`` becomes ``g1`` and ``g1:g2``; ``g1 + g2`` becomes both;
    ``gr(g)`` is ``g``; ``mm(...)`` passes through unchanged.
    """
    if isinstance(e, F.GMm):
        return [Grouping("mm", e.members, e.weights)]
    if isinstance(e, F.GGr) and isinstance(e.arg, F.GMm):
        raise SpecError("mm() cannot be wrapped in gr()")
    if _contains_mm(e):
        raise SpecError("mm() cannot be combined with ':', '/' or '+' in a grouping expression")
    return [Grouping("gr", t) for t in _expand(e)]


def grouping_to_expr(groupings: Sequence[Grouping]):
    """Inverse of :func:`expand_group_expr` for plain groupings (a ``+`` of ``:`` chains)."""
    out = None
    for g in groupings:
        if g.kind == "mm":
            node = F.GMm(g.factors, g.weights)
        else:
            node = F.GVar(g.factors[0])
            for f in g.factors[1:]:
                node = F.GColon(node, F.GVar(f))
        out = node if out is None else F.GPlus(out, node)
    return out


@dataclass(frozen=True)
class BlockTerm:
    """The group-level terms one formula contributes to a block."""

    owner: str
    intercept: bool
    fixed_terms: tuple[F.FixedTerm, ...]

    def labels(self) -> list[str]:
        out = ["Intercept"] if self.intercept else []
        return out + [t.label for t in self.fixed_terms]


@dataclass(frozen=True)
class GroupBlockSpec:
    grouping: Grouping
    terms: tuple[BlockTerm, ...]
    correlated: bool
    id: str | None = None

    @property
    def coefficients(self) -> list[tuple[str, str]]:
        return [(t.owner, lab) for t in self.terms for lab in t.labels()]

    def to_dict(self) -> dict:
        return {
            "group": self.grouping.label,
            "grouping": self.grouping.to_dict(),
            "id": self.id,
            "correlated": self.correlated,
            "coefficients": [[o, c] for o, c in self.coefficients],
        }


# --------------------------------------------------------------------------
# model specification


@dataclass(frozen=True)
class ModelSpec:
    family: Family
    main_formula: F.FormulaAst
    dpar_formulas: Mapping[str, F.FormulaAst]
    nlpar_formulas: Mapping[str, F.FormulaAst]
    is_nonlinear: bool
    priors: tuple[PriorSpec, ...] = ()

    @property
    def response(self) -> str:
        return self.main_formula.response.variable

    def linear_owners(self) -> list[str]:
        """Owners with an additive predictor, in declaration order."""
        owners = [] if self.is_nonlinear else [MU]
        return owners + list(self.nlpar_formulas) + list(self.dpar_formulas)

    def owner_rhs(self, owner: str) -> F.RhsSpec:
        if owner == MU:
            return self.main_formula.rhs
        if owner in self.nlpar_formulas:
            return self.nlpar_formulas[owner].rhs
        return self.dpar_formulas[owner].rhs

    def nl_covariates(self) -> list[str]:
        if not self.is_nonlinear:
            return []
        return [n for n in F.nl_identifiers(self.main_formula.rhs) if n not in self.nlpar_formulas]

    def formula_lines(self) -> list[str]:
        lines = [F.format_formula(self.main_formula)]
        for name, f in list(self.nlpar_formulas.items()) + list(self.dpar_formulas.items()):
            lines.append(f"{name} ~ {F.format_rhs(f.rhs)}")
        return lines

    def to_dict(self) -> dict:
        return {
            "family": self.family.to_dict(),
            "nonlinear": self.is_nonlinear,
            "response": self.response,
            "formulas": self.formula_lines(),
            "main": F.ast_to_dict(self.main_formula),
            "dpars": {k: F.ast_to_dict(v) for k, v in self.dpar_formulas.items()},
            "nlpars": {k: F.ast_to_dict(v) for k, v in self.nlpar_formulas.items()},
            "priors": [p.to_dict() for p in self.priors],
        }


def build_spec(
    main: F.FormulaAst,
    extra: Iterable = (),
    family: str | Family = "gaussian",
    nonlinear: bool = False,
    priors: Iterable[PriorSpec] = (),
) -> ModelSpec:
    """Classify the extra formulas and assemble a ModelSpec.

    ``extra`` holds FormulaAst objects whose left-hand side names the
    parameter(s), or ``(name, FormulaAst)`` pairs. A left-hand side such as
    ``ult + omega + theta`` gives each name a copy of the right-hand side.
    """
    fam = get_family(family)
    if main.response is None:
        raise SpecError("the main formula needs a response variable")
    if len(main.response.variables) != 1:
        raise SpecError("the main formula must have exactly one response variable")
    if nonlinear != main.is_nonlinear:
        raise SpecError(
            "non-linear models need the main formula parsed literally (nonlinear mode)"
            if nonlinear
            else "the main formula is a literal expression but nonlinear=False"
        )
    named: list[tuple[str, F.FormulaAst]] = []
    for item in extra:
        if isinstance(item, tuple):
            name, f = item
            named.append((name, f))
        else:
            if item.response is None:
                raise SpecError("extra formulas need a parameter name on the left-hand side")
            if item.response.aterms:
                raise SpecError("addition terms are only allowed in the main formula")
            for name in item.response.variables:
                named.append((name, F.FormulaAst(F.ResponseSpec((name,)), item.rhs, item.raw_text)))
    dpars: dict[str, F.FormulaAst] = {}
    nlpars: dict[str, F.FormulaAst] = {}
    idents = F.nl_identifiers(main.rhs) if nonlinear else []
    for name, f in named:
        if f.is_nonlinear:
            raise SpecError(f"the formula for {name!r} must be a standard formula")
        if name in dpars or name in nlpars:
            raise SpecError(f"duplicate formula for {name!r}")
        if name == MU:
            raise SpecError("mu is predicted by the main formula")
        if name in fam.dpars:
            dpars[name] = f
        elif nonlinear:
            if name not in idents:
                raise SpecError(f"formula for {name!r}, which does not appear in the non-linear expression")
            nlpars[name] = f
        else:
            raise SpecError(f"family {fam.name} has no parameter {name!r}")
    if nonlinear and not nlpars:
        raise SpecError("a non-linear model needs at least one non-linear parameter formula")
    return ModelSpec(fam, main, dpars, nlpars, nonlinear, tuple(priors))


def bf(main: str, *extra: str, family="gaussian", nl: bool = False, priors: Iterable = ()) -> ModelSpec:
    """Build a spec from formula strings, e.g. ``bf("count ~ x", "zi ~ child", family=...)``."""
    m = F.parse_formula(main, "nonlinear" if nl else "standard")
    ex = [F.parse_formula(t) for t in extra]
    ps = [parse_prior(p) if isinstance(p, str) else p for p in priors]
    return build_spec(m, ex, family, nl, ps)


def resolve_blocks(spec: ModelSpec) -> list[GroupBlockSpec]:
    """Merge group-level terms into blocks.

    Terms merge iff they carry the same ID and the same canonical grouping.
    Terms without ID each form their own block. ``||`` blocks are diagonal.
    """
    entries = []  # (key, grouping, BlockTerm, correlated, id)
    id_groupings: dict[str, Grouping] = {}
    id_bars: dict[str, bool] = {}
    counter = 0
    for owner in spec.linear_owners():
        rhs = spec.owner_rhs(owner)
        for g in rhs.group_terms:
            for grouping in expand_group_expr(g.group):
                term = BlockTerm(owner, g.inner.intercept, g.inner.fixed_terms)
                if not term.labels():
                    raise SpecError("a group-level term needs at least one coefficient")
                if g.id is not None:
                    prev = id_groupings.setdefault(g.id, grouping)
                    if prev != grouping:
                        raise SpecError(
                            f"ID {g.id!r} is used with different groupings "
                            f"({prev.label} and {grouping.label})"
                        )
                    if id_bars.setdefault(g.id, g.correlated) != g.correlated:
                        raise SpecError(f"ID {g.id!r} is used with both '|' and '||'")
                    key = ("id", g.id)
                else:
                    key = ("anon", counter)
                    counter += 1
                entries.append((key, grouping, term, g.correlated, g.id))
    blocks: dict = {}
    for key, grouping, term, corr, gid in entries:
        if key in blocks:
            b = blocks[key]
            for lab in term.labels():
                if (term.owner, lab) in b["coefs"]:
                    raise SpecError(f"coefficient {prefix(term.owner)}{lab} appears twice for ID {gid!r}")
            b["terms"].append(term)
            b["coefs"].update((term.owner, l) for l in term.labels())
        else:
            blocks[key] = {
                "grouping": grouping,
                "terms": [term],
                "corr": corr,
                "id": gid,
                "coefs": {(term.owner, l) for l in term.labels()},
            }
    return [GroupBlockSpec(b["grouping"], tuple(b["terms"]), b["corr"], b["id"]) for b in blocks.values()]


# --------------------------------------------------------------------------
# validation against data


@dataclass(frozen=True)
class SmoothSpec:
    owner: str
    covariate: str
    k: int

    @property
    def label(self) -> str:
        return f"s{self.covariate}"

    @property
    def name(self) -> str:
        return f"{prefix(self.owner)}s{self.covariate}_1"

    def to_dict(self) -> dict:
        return {"owner": self.owner, "covariate": self.covariate, "k": self.k, "name": self.name}


@dataclass(frozen=True)
class CheckedSpec:
    """A validated, immutable specification ready for design compilation."""

    spec: ModelSpec
    blocks: tuple[GroupBlockSpec, ...]
    smooths: tuple[SmoothSpec, ...]
    coerced_factors: tuple[str, ...] = ()
    weights_var: str | None = None
    notes: tuple[str, ...] = field(default=(), compare=False)

    @property
    def family(self) -> Family:
        return self.spec.family

    def to_dict(self) -> dict:
        d = self.spec.to_dict()
        d["blocks"] = [b.to_dict() for b in self.blocks]
        d["smooths"] = [s.to_dict() for s in self.smooths]
        d["coerced_factors"] = list(self.coerced_factors)
        d["weights"] = self.weights_var
        return d


def _unknown(name: str, d: Dataset, what: str) -> ValidationError:
    close = difflib.get_close_matches(name, d.names, n=1)
    hint = f"; did you mean {close[0]!r}?" if close else ""
    return ValidationError(f"unknown variable {name!r} in {what}{hint}")


_UNSUPPORTED_SPECIALS = {
    "t2": "tensor-product smooths t2()",
    "cs": "category-specific effects cs()",
    "mo": "monotonic effects mo()",
    "me": "noise-free (measurement-error) terms me()",
    "gp": "Gaussian-process terms gp()",
}
_UNSUPPORTED_ATERMS = {
    "se": "known standard errors se()",
    "cens": "censoring cens()",
    "trunc": "truncation trunc()",
    "dec": "decision data dec()",
}


def validate(spec: ModelSpec, d: Dataset) -> CheckedSpec:
    """Check ``spec`` against ``d``; raises ValidationError on any mismatch."""
    fam = spec.family
    notes = []
    y = spec.response
    if y not in d:
        raise _unknown(y, d, "the response")
    ycol = d[y]
    if ycol.kind == FACTOR:
        raise ValidationError(f"family {fam.name} needs a numeric response, but {y!r} is a factor")
    if fam.count_response:
        vals = ycol.as_float()
        if ycol.kind != INTEGER and not all(float(v).is_integer() for v in vals):
            raise ValidationError(f"family {fam.name} needs integer counts in {y!r}")
        if len(vals) and vals.min() < 0:
            raise ValidationError(f"family {fam.name} needs non-negative counts in {y!r}")

    weights_var = None
    for a in spec.main_formula.response.aterms:
        if a.fun in _UNSUPPORTED_ATERMS:
            raise UnsupportedFeatureError(f"unsupported aterm: {_UNSUPPORTED_ATERMS[a.fun]} is not implemented")
        if a.fun == "weights":
            if weights_var is not None:
                raise ValidationError("weights() given twice")
            if len(a.args) != 1:
                raise ValidationError("weights() takes one variable")
            weights_var = a.args[0]
            if weights_var not in d:
                raise _unknown(weights_var, d, "weights()")
            wc = d[weights_var]
            if wc.kind == FACTOR or (len(wc.values) and wc.as_float().min() < 0):
                raise ValidationError(f"weights variable {weights_var!r} must be numeric and non-negative")

    def check_numeric(name, what):
        if name not in d:
            raise _unknown(name, d, what)
        if d[name].kind == FACTOR:
            raise ValidationError(f"{what} needs numeric {name!r}, found a factor")

    coerced = []

    def check_group_factor(name, what):
        if name not in d:
            raise _unknown(name, d, what)
        kind = d[name].kind
        if kind == NUMERIC:
            vals = d[name].values
            if not all(float(v).is_integer() for v in vals):
                raise ValidationError(f"grouping variable {name!r} must be a factor or integer column")
        if kind != FACTOR and name not in coerced:
            coerced.append(name)
            msg = f"grouping variable {name!r} coerced to a factor"
            notes.append(msg)
            log.warning(msg)

    smooths = []
    for owner in spec.linear_owners():
        rhs = spec.owner_rhs(owner)
        where = f"the formula for {owner}"
        for t in rhs.fixed_terms:
            for v in t.variables:
                if v not in d:
                    raise _unknown(v, d, where)
        for s in rhs.special_terms:
            if s.fun in _UNSUPPORTED_SPECIALS:
                raise UnsupportedFeatureError(
                    f"unsupported term {s.label}: {_UNSUPPORTED_SPECIALS[s.fun]} are not implemented"
                )
            if len(s.args) != 1:
                raise UnsupportedFeatureError(f"unsupported term {s.label}: only univariate s(x) smooths are implemented")
            kw = dict(s.kwargs)
            unknown_kw = set(kw) - {"k"}
            if unknown_kw:
                raise UnsupportedFeatureError(f"unsupported smooth option(s) {sorted(unknown_kw)} in {s.label}")
            k = 10
            if "k" in kw:
                try:
                    k = int(kw["k"])
                except ValueError:
                    raise ValidationError(f"k must be an integer in {s.label}") from None
            if k < 4:
                raise ValidationError(f"{s.label}: k must be at least 4")
            check_numeric(s.args[0], s.label)
            sm = SmoothSpec(owner, s.args[0], k)
            if any(o.name == sm.name for o in smooths):
                raise ValidationError(f"smooth {s.label} appears twice for {owner}")
            smooths.append(sm)
        for g in rhs.group_terms:
            for t in g.inner.fixed_terms:
                for v in t.variables:
                    if v not in d:
                        raise _unknown(v, d, f"a group-level term of {owner}")

    blocks = resolve_blocks(spec)
    for b in blocks:
        for f in b.grouping.factors:
            check_group_factor(f, f"grouping ~{b.grouping.label}")
        for w in b.grouping.weights or ():
            check_numeric(w, "mm() weights")
            if len(d[w].values) and d[w].as_float().min() < 0:
                raise ValidationError(f"mm() weights {w!r} must be non-negative")

    if spec.is_nonlinear:
        for name in spec.nl_covariates():
            if name not in d:
                close = difflib.get_close_matches(name, d.names, n=1)
                hint = f"; did you mean {close[0]!r}?" if close else ""
                raise ValidationError(
                    f"{name!r} in the non-linear expression is neither a data column nor a parameter with a formula{hint}"
                )
            if d[name].kind == FACTOR:
                raise ValidationError(f"non-linear covariate {name!r} must be numeric")

    _check_priors(spec, blocks, smooths)
    return CheckedSpec(spec, tuple(blocks), tuple(smooths), tuple(coerced), weights_var, tuple(notes))


def _check_priors(spec: ModelSpec, blocks, smooths):
    owners = set(spec.linear_owners())
    groups = {b.grouping.label for b in blocks}
    for p in spec.priors:
        if p.cls in ("b", "Intercept", "sds") and p.owner not in owners:
            raise ValidationError(f"prior {p}: model has no predictor for {p.owner!r}")
        if p.cls == "Intercept" and p.owner in spec.nlpar_formulas:
            raise ValidationError(f"prior {p}: intercepts of non-linear parameters use class b")
        if p.cls in ("sd", "cor") and p.group is not None and p.group not in groups:
            raise ValidationError(f"prior {p}: no grouping factor {p.group!r}")
        if p.cls == "sigma" and ("sigma" not in spec.family.dpars or "sigma" in spec.dpar_formulas):
            raise ValidationError(f"prior {p}: sigma is not a free family parameter here")
        if p.cls == "zi" and ("zi" not in spec.family.dpars or "zi" in spec.dpar_formulas):
            raise ValidationError(f"prior {p}: zi is not a free family parameter here")
        if p.cls in ("sigma", "sd", "sds") and p.dist.family == "student_t" and p.dist.params[1] != 0:
            raise ValidationError(f"prior {p}: scale priors must be centered at 0")


def find_prior(spec: ModelSpec, cls: str, owner: str = MU, coef: str | None = None, group: str | None = None):
    """The most specific user prior for a parameter, or None."""
    best, best_score = None, -1
    for p in spec.priors:
        if p.cls != cls:
            continue
        if cls in ("b", "Intercept", "sds") and p.owner != owner:
            continue
        if cls in ("sd", "cor") and p.owner != MU and p.owner != owner:
            continue
        if p.coef is not None and p.coef != coef:
            continue
        if p.group is not None and p.group != group:
            continue
        score = (p.coef is not None) * 2 + (p.group is not None)
        if score > best_score:
            best, best_score = p, score
    return best.dist if best is not None else None
