"""Tokenizer and recursive-descent parser for the extended multilevel formula language.

Two parse modes exist. ``standard`` reads an additive term list with
population-level terms, special terms (``s(x)``, ...), group-level terms
``(terms | group)`` and response-side addition terms (``y | weights(w) ~``).
``nonlinear`` reads the right-hand side as a literal arithmetic expression.

Precedence of the literal expressions, highest first: ``^`` (right
associative), unary minus, ``*`` ``/``, then ``+`` ``-``. So ``-x^2`` is
``-(x^2)`` as in R.
"""

from __future__ import annotations

import json
import re
from dataclasses import dataclass, field
from typing import Union

# --------------------------------------------------------------------------
# tokens

IDENT = "IDENT"
INT = "INT"
FLOAT = "FLOAT"
STRING = "STRING"
TILDE = "TILDE"
PLUS = "PLUS"
MINUS = "MINUS"
STAR = "STAR"
SLASH = "SLASH"
COLON = "COLON"
CARET = "CARET"
BAR = "BAR"
DBLBAR = "DBLBAR"
LPAREN = "LPAREN"
RPAREN = "RPAREN"
COMMA = "COMMA"
EQUALS = "EQUALS"
EOF = "EOF"

_PUNCT = {
    "~": TILDE,
    "+": PLUS,
    "-": MINUS,
    "*": STAR,
    "/": SLASH,
    ":": COLON,
    "^": CARET,
    "(": LPAREN,
    ")": RPAREN,
    ",": COMMA,
    "=": EQUALS,
}

_NUMBER_RE = re.compile(r"(?:\d+\.?\d*|\.\d+)(?:[eE][+-]?\d+)?")
_IDENT_RE = re.compile(r"[A-Za-z.][A-Za-z0-9._]*")
_STRING_RE = re.compile(r"\"[^\"]*\"|'[^']*'")

ATERM_FUNCS = ("weights", "se", "cens", "trunc", "dec")
SPECIAL_FUNCS = ("s", "t2", "cs", "mo", "me", "gp")
NL_FUNCS = ("exp", "log")


class FormulaSyntaxError(ValueError):
    """A tokenizing or parsing failure, with the offending character span."""

    def __init__(self, message: str, text: str, start: int, end: int | None = None):
        self.message = message
        self.text = text
        self.start = max(0, min(start, len(text)))
        self.end = max(self.start, min(end if end is not None else self.start + 1, len(text)))
        super().__init__(f"{message} at position {self.start}: {text!r}")

    @property
    def span(self) -> tuple[int, int]:
        return (self.start, self.end)

    def caret(self) -> str:
        width = max(1, self.end - self.start)
        return f"{self.text}\n{' ' * self.start}{'^' * width}"


@dataclass(frozen=True)
class Token:
    kind: str
    text: str
    start: int
    end: int


def tokenize(text: str) -> list[Token]:
    """Split ``text`` into tokens; the returned list ends with an EOF token."""
    toks = []
    i, n = 0, len(text)
    while i < n:
        ch = text[i]
        if ch.isspace():
            i += 1
            continue
        if ch == "|":
            if i + 1 < n and text[i + 1] == "|":
                toks.append(Token(DBLBAR, "||", i, i + 2))
                i += 2
            else:
                toks.append(Token(BAR, "|", i, i + 1))
                i += 1
            continue
        if ch in _PUNCT:
            toks.append(Token(_PUNCT[ch], ch, i, i + 1))
            i += 1
            continue
        if ch.isdigit() or (ch == "." and i + 1 < n and text[i + 1].isdigit()):
            m = _NUMBER_RE.match(text, i)
            s = m.group(0)
            kind = INT if s.isdigit() else FLOAT
            toks.append(Token(kind, s, i, m.end()))
            i = m.end()
            continue
        m = _IDENT_RE.match(text, i)
        if m:
            toks.append(Token(IDENT, m.group(0), i, m.end()))
            i = m.end()
            continue
        m = _STRING_RE.match(text, i)
        if m:
            toks.append(Token(STRING, m.group(0), i, m.end()))
            i = m.end()
            continue
        raise FormulaSyntaxError(f"illegal character {ch!r}", text, i, i + 1)
    toks.append(Token(EOF, "", n, n))
    return toks


# --------------------------------------------------------------------------
# AST


@dataclass(frozen=True)
class ATerm:
    fun: str
    args: tuple[str, ...] = ()
    kwargs: tuple[tuple[str, str], ...] = ()


@dataclass(frozen=True)
class ResponseSpec:
    variables: tuple[str, ...]
    aterms: tuple[ATerm, ...] = ()

    @property
    def variable(self) -> str:
        return self.variables[0]


@dataclass(frozen=True)
class FixedTerm:
    variables: tuple[str, ...]

    @property
    def label(self) -> str:
        return ":".join(self.variables)


@dataclass(frozen=True)
class SpecialTerm:
    fun: str
    args: tuple[str, ...] = ()
    kwargs: tuple[tuple[str, str], ...] = ()

    @property
    def label(self) -> str:
        return _fmt_call(self.fun, self.args, self.kwargs)


# grouping expressions


@dataclass(frozen=True)
class GVar:
    name: str


@dataclass(frozen=True)
class GColon:
    left: "GroupExpr"
    right: "GroupExpr"


@dataclass(frozen=True)
class GSlash:
    left: "GroupExpr"
    right: "GroupExpr"


@dataclass(frozen=True)
class GPlus:
    left: "GroupExpr"
    right: "GroupExpr"


@dataclass(frozen=True)
class GGr:
    arg: "GroupExpr"


@dataclass(frozen=True)
class GMm:
    members: tuple[str, ...]
    weights: tuple[str, ...] | None = None


GroupExpr = Union[GVar, GColon, GSlash, GPlus, GGr, GMm]


@dataclass(frozen=True)
class GroupTermRaw:
    inner: "RhsSpec"
    bar: str
    group: GroupExpr
    id: str | None = None

    @property
    def correlated(self) -> bool:
        return self.bar == "|"


@dataclass(frozen=True)
class RhsSpec:
    intercept: bool = True
    fixed_terms: tuple[FixedTerm, ...] = ()
    group_terms: tuple[GroupTermRaw, ...] = ()
    special_terms: tuple[SpecialTerm, ...] = ()


# literal non-linear expressions


@dataclass(frozen=True)
class NlNum:
    value: float


@dataclass(frozen=True)
class NlIdent:
    name: str


@dataclass(frozen=True)
class NlNeg:
    operand: "NlExpr"


@dataclass(frozen=True)
class NlBinary:
    op: str  # one of + - * / ^
    left: "NlExpr"
    right: "NlExpr"


@dataclass(frozen=True)
class NlCall:
    fun: str
    arg: "NlExpr"


NlExpr = Union[NlNum, NlIdent, NlNeg, NlBinary, NlCall]
_NL_TYPES = (NlNum, NlIdent, NlNeg, NlBinary, NlCall)


@dataclass(frozen=True)
class FormulaAst:
    response: ResponseSpec | None
    rhs: Union[RhsSpec, NlExpr]
    raw_text: str = field(default="", compare=False)

    @property
    def is_nonlinear(self) -> bool:
        return isinstance(self.rhs, _NL_TYPES)


def nl_identifiers(expr: NlExpr) -> list[str]:
    """Identifiers of ``expr`` in first-appearance order."""
    out: list[str] = []

    def walk(e):
        if isinstance(e, NlIdent):
            if e.name not in out:
                out.append(e.name)
        elif isinstance(e, NlNeg):
            walk(e.operand)
        elif isinstance(e, NlBinary):
            walk(e.left)
            walk(e.right)
        elif isinstance(e, NlCall):
            walk(e.arg)

    walk(expr)
    return out


# --------------------------------------------------------------------------
# parser


@dataclass
class _Terms:
    """Intermediate value while evaluating the additive term algebra."""

    terms: list = field(default_factory=list)  # tuples of variable names
    intercept: bool | None = None
    specials: list = field(default_factory=list)
    groups: list = field(default_factory=list)

    def only_fixed(self) -> bool:
        return self.intercept is None and not self.specials and not self.groups


def _dedupe(seq):
    return list(dict.fromkeys(seq))


class _Parser:
    def __init__(self, text: str):
        self.text = text
        self.toks = tokenize(text)
        self.pos = 0

    # helpers
    @property
    def tok(self) -> Token:
        return self.toks[self.pos]

    def peek(self, k: int = 1) -> Token:
        return self.toks[min(self.pos + k, len(self.toks) - 1)]

    def advance(self) -> Token:
        t = self.toks[self.pos]
        if t.kind != EOF:
            self.pos += 1
        return t

    def error(self, msg: str, tok: Token | None = None):
        tok = tok or self.tok
        if tok.kind == EOF:
            msg = f"{msg} (unexpected end of input)"
        raise FormulaSyntaxError(msg, self.text, tok.start, tok.end if tok.end > tok.start else tok.start + 1)

    def expect(self, kind: str, what: str) -> Token:
        if self.tok.kind != kind:
            self.error(f"expected {what}")
        return self.advance()

    # formula level
    def formula(self, mode: str) -> FormulaAst:
        response = None
        if self.tok.kind != TILDE:
            response = self.lhs()
        self.expect(TILDE, "'~'")
        if self.tok.kind == EOF:
            self.error("empty right-hand side")
        if mode == "nonlinear":
            rhs = self.nl_expr()
        else:
            rhs = self.rhs()
        if self.tok.kind == TILDE:
            self.error("only one '~' is allowed")
        if self.tok.kind != EOF:
            self.error(f"unexpected {self.tok.text!r}")
        return FormulaAst(response, rhs, self.text)

    def lhs(self) -> ResponseSpec:
        names = [self.expect(IDENT, "response variable").text]
        while self.tok.kind == PLUS:
            self.advance()
            names.append(self.expect(IDENT, "variable name").text)
        aterms = []
        if self.tok.kind == BAR:
            self.advance()
            aterms.append(self.aterm())
            while self.tok.kind == PLUS:
                self.advance()
                aterms.append(self.aterm())
        elif self.tok.kind == DBLBAR:
            self.error("'||' is not allowed on the response side")
        if len(set(names)) != len(names):
            self.error("duplicate name on the left-hand side")
        return ResponseSpec(tuple(names), tuple(aterms))

    def aterm(self) -> ATerm:
        t = self.expect(IDENT, "addition term such as weights(w)")
        if t.text not in ATERM_FUNCS:
            self.error(f"unknown addition term {t.text!r} (known: {', '.join(ATERM_FUNCS)})", t)
        args, kwargs = self.call_args()
        if not args:
            self.error(f"addition term {t.text}() needs a variable", t)
        return ATerm(t.text, args, kwargs)

    def call_args(self) -> tuple[tuple[str, ...], tuple[tuple[str, str], ...]]:
        self.expect(LPAREN, "'('")
        args, kwargs = [], []
        if self.tok.kind != RPAREN:
            while True:
                if self.tok.kind == IDENT and self.peek().kind == EQUALS:
                    key = self.advance().text
                    self.advance()
                    kwargs.append((key, self.scalar_arg()))
                else:
                    if kwargs:
                        self.error("positional argument after keyword argument")
                    args.append(self.scalar_arg())
                if self.tok.kind == COMMA:
                    self.advance()
                    continue
                break
        self.expect(RPAREN, "')'")
        return tuple(args), tuple(kwargs)

    def scalar_arg(self) -> str:
        neg = ""
        if self.tok.kind == MINUS and self.peek().kind in (INT, FLOAT):
            self.advance()
            neg = "-"
        if self.tok.kind in (IDENT, INT, FLOAT, STRING):
            t = self.advance()
            if t.kind == STRING:
                return t.text[1:-1]
            return neg + t.text
        self.error("expected a name or number")

    # additive term algebra
    def rhs(self) -> RhsSpec:
        val = self.term_sum()
        return self._finish(val)

    def _finish(self, val: _Terms, allow_extras: bool = True) -> RhsSpec:
        intercept = True if val.intercept is None else val.intercept
        return RhsSpec(
            intercept,
            tuple(FixedTerm(t) for t in val.terms),
            tuple(val.groups),
            tuple(val.specials),
        )

    def term_sum(self) -> _Terms:
        acc = _Terms()
        sign = PLUS
        if self.tok.kind in (PLUS, MINUS):
            sign = self.advance().kind
        while True:
            start = self.tok
            part = self.term_product()
            if sign == PLUS:
                self._add(acc, part)
            else:
                self._remove(acc, part, start)
            if self.tok.kind in (PLUS, MINUS):
                sign = self.advance().kind
                continue
            return acc

    def _add(self, acc: _Terms, part: _Terms):
        acc.terms = _dedupe(acc.terms + part.terms)
        if part.intercept is not None:
            acc.intercept = part.intercept
        acc.specials = _dedupe(acc.specials + part.specials)
        acc.groups.extend(part.groups)

    def _remove(self, acc: _Terms, part: _Terms, tok: Token):
        if part.specials or part.groups:
            self.error("special or group-level terms cannot be removed with '-'", tok)
        if part.intercept is True:
            acc.intercept = False
        elif part.intercept is False:
            self.error("'- 0' is not meaningful", tok)
        acc.terms = [t for t in acc.terms if t not in part.terms]

    def term_product(self) -> _Terms:
        start = self.tok
        left = self.term_interaction()
        while self.tok.kind == STAR:
            self.advance()
            right = self.term_interaction()
            if not (left.only_fixed() and right.only_fixed()):
                self.error("'*' only combines population-level variables", start)
            inter = [_dedupe(a + b) for a in left.terms for b in right.terms]
            left = _Terms(_dedupe(left.terms + right.terms + [tuple(t) for t in inter]))
        return left

    def term_interaction(self) -> _Terms:
        start = self.tok
        left = self.term_unit()
        while self.tok.kind == COLON:
            self.advance()
            right = self.term_unit()
            if not (left.only_fixed() and right.only_fixed()):
                self.error("':' only combines population-level variables", start)
            left = _Terms(_dedupe([tuple(_dedupe(a + b)) for a in left.terms for b in right.terms]))
        return left

    def term_unit(self) -> _Terms:
        t = self.tok
        if t.kind in (INT, FLOAT):
            self.advance()
            v = float(t.text)
            if v == 1.0:
                return _Terms(intercept=True)
            if v == 0.0:
                return _Terms(intercept=False)
            self.error("numeric literals are only allowed as intercept markers 0 or 1", t)
        if t.kind == IDENT:
            if self.peek().kind == LPAREN:
                if t.text in SPECIAL_FUNCS:
                    self.advance()
                    args, kwargs = self.call_args()
                    if not args:
                        self.error(f"{t.text}() needs at least one variable", t)
                    return _Terms(specials=[SpecialTerm(t.text, args, kwargs)])
                self.error(
                    f"function {t.text!r} is not supported in population-level terms; "
                    "transform the data column instead",
                    t,
                )
            self.advance()
            return _Terms(terms=[(t.text,)])
        if t.kind == LPAREN:
            self.advance()
            inner_start = self.tok
            inner = self.term_sum()
            if self.tok.kind in (BAR, DBLBAR):
                return _Terms(groups=[self.group_term(inner, inner_start)])
            self.expect(RPAREN, "')'")
            return inner
        self.error("expected a term")

    def group_term(self, inner: _Terms, inner_start: Token) -> GroupTermRaw:
        if inner.specials or inner.groups:
            self.error("group-level terms may only contain an intercept and population-level variables", inner_start)
        bar_tok = self.advance()
        gid = None
        if self.tok.kind in (IDENT, INT) and self.peek().kind == BAR:
            if bar_tok.kind == DBLBAR:
                self.error("the |ID| syntax cannot be combined with '||'", self.tok)
            gid = self.advance().text
            self.advance()
        elif bar_tok.kind == DBLBAR and self.tok.kind in (IDENT, INT) and self.peek().kind == DBLBAR:
            self.error("the |ID| syntax cannot be combined with '||'", self.tok)
        bar = "||" if bar_tok.kind == DBLBAR else "|"
        group = self.group_sum()
        self.expect(RPAREN, "')' closing the group-level term")
        return GroupTermRaw(self._finish(inner), bar, group, gid)

    # grouping expressions
    def group_sum(self) -> GroupExpr:
        left = self.group_slash()
        while self.tok.kind == PLUS:
            self.advance()
            left = GPlus(left, self.group_slash())
        return left

    def group_slash(self) -> GroupExpr:
        left = self.group_colon()
        while self.tok.kind == SLASH:
            self.advance()
            left = GSlash(left, self.group_colon())
        return left

    def group_colon(self) -> GroupExpr:
        left = self.group_atom()
        while self.tok.kind == COLON:
            self.advance()
            left = GColon(left, self.group_atom())
        return left

    def group_atom(self) -> GroupExpr:
        t = self.tok
        if t.kind == IDENT and self.peek().kind == LPAREN:
            if t.text == "gr":
                self.advance()
                self.advance()
                arg = self.group_sum()
                if self.tok.kind == COMMA:
                    self.error("gr() takes a single grouping expression")
                self.expect(RPAREN, "')'")
                return GGr(arg)
            if t.text == "mm":
                return self.mm_call()
            self.error(f"unknown grouping function {t.text!r} (use gr or mm)", t)
        if t.kind == IDENT:
            self.advance()
            return GVar(t.text)
        if t.kind == LPAREN:
            self.advance()
            e = self.group_sum()
            self.expect(RPAREN, "')'")
            return e
        self.error("expected a grouping variable")

    def mm_call(self) -> GMm:
        name_tok = self.advance()
        self.advance()
        members, weights = [], None
        while True:
            if self.tok.kind == IDENT and self.peek().kind == EQUALS:
                key = self.advance()
                self.advance()
                if key.text != "weights":
                    self.error(f"unknown mm() argument {key.text!r}", key)
                if weights is not None:
                    self.error("weights given twice", key)
                cb = self.expect(IDENT, "cbind(...)")
                if cb.text != "cbind":
                    self.error("weights must be given as cbind(w1, ..., wk)", cb)
                self.expect(LPAREN, "'('")
                weights = [self.expect(IDENT, "weight variable").text]
                while self.tok.kind == COMMA:
                    self.advance()
                    weights.append(self.expect(IDENT, "weight variable").text)
                self.expect(RPAREN, "')'")
            else:
                if weights is not None:
                    self.error("mm() members must precede weights")
                members.append(self.expect(IDENT, "grouping variable").text)
            if self.tok.kind == COMMA:
                self.advance()
                continue
            break
        self.expect(RPAREN, "')'")
        if len(members) < 2:
            self.error("mm() needs at least two grouping variables", name_tok)
        if weights is not None and len(weights) != len(members):
            self.error(
                f"mm() has {len(members)} members but {len(weights)} weight columns", name_tok
            )
        return GMm(tuple(members), tuple(weights) if weights is not None else None)

    # literal expressions
    def nl_expr(self) -> NlExpr:
        left = self.nl_term()
        while self.tok.kind in (PLUS, MINUS):
            op = self.advance().text
            left = NlBinary(op, left, self.nl_term())
        return left

    def nl_term(self) -> NlExpr:
        left = self.nl_unary()
        while self.tok.kind in (STAR, SLASH):
            op = self.advance().text
            left = NlBinary(op, left, self.nl_unary())
        return left

    def nl_unary(self) -> NlExpr:
        if self.tok.kind == MINUS:
            self.advance()
            return NlNeg(self.nl_unary())
        if self.tok.kind == PLUS:
            self.advance()
            return self.nl_unary()
        return self.nl_power()

    def nl_power(self) -> NlExpr:
        base = self.nl_primary()
        if self.tok.kind == CARET:
            self.advance()
            return NlBinary("^", base, self.nl_unary())
        return base

    def nl_primary(self) -> NlExpr:
        t = self.tok
        if t.kind in (INT, FLOAT):
            self.advance()
            return NlNum(float(t.text))
        if t.kind == IDENT:
            self.advance()
            if self.tok.kind == LPAREN:
                if t.text not in NL_FUNCS:
                    self.error(f"unknown function {t.text!r} (allowed: {', '.join(NL_FUNCS)})", t)
                self.advance()
                arg = self.nl_expr()
                if self.tok.kind == COMMA:
                    self.error(f"{t.text}() takes exactly one argument")
                self.expect(RPAREN, "')'")
                return NlCall(t.text, arg)
            return NlIdent(t.text)
        if t.kind == LPAREN:
            self.advance()
            e = self.nl_expr()
            self.expect(RPAREN, "')'")
            return e
        if t.kind in (BAR, DBLBAR, TILDE):
            self.error(f"{t.text!r} is not allowed in a non-linear expression")
        self.error("expected a number, name or '('")


def parse_formula(text: str, mode: str = "standard") -> FormulaAst:
    """Parse one formula. ``mode`` is ``"standard"`` or ``"nonlinear"``."""
    if mode not in ("standard", "nonlinear"):
        raise ValueError(f"unknown parse mode {mode!r}")
    return _Parser(text).formula(mode)


def parse_nl_expression(text: str) -> NlExpr:
    """Parse a bare literal expression (no ``~``)."""
    p = _Parser(text)
    if p.tok.kind == EOF:
        p.error("empty expression")
    e = p.nl_expr()
    if p.tok.kind != EOF:
        p.error(f"unexpected {p.tok.text!r}")
    return e


def parse_rhs(text: str) -> RhsSpec:
    """Parse a standard right-hand side without response or ``~``."""
    p = _Parser(text)
    if p.tok.kind == EOF:
        p.error("empty formula")
    r = p.rhs()
    if p.tok.kind != EOF:
        p.error(f"unexpected {p.tok.text!r}")
    return r


# --------------------------------------------------------------------------
# printing


def _fmt_num(v: float) -> str:
    if float(v).is_integer() and abs(v) < 1e15:
        return str(int(v))
    return repr(float(v))


def _fmt_call(fun, args, kwargs) -> str:
    parts = list(args) + [f"{k} = {v}" for k, v in kwargs]
    return f"{fun}({', '.join(parts)})"


def format_group_expr(e: GroupExpr, parent: int = 0) -> str:
    # precedence: plus 1 < slash 2 < colon 3
    if isinstance(e, GVar):
        return e.name
    if isinstance(e, GGr):
        return f"gr({format_group_expr(e.arg)})"
    if isinstance(e, GMm):
        s = ", ".join(e.members)
        if e.weights is not None:
            s += f", weights = cbind({', '.join(e.weights)})"
        return f"mm({s})"
    prec, op = {GPlus: (1, " + "), GSlash: (2, "/"), GColon: (3, ":")}[type(e)]
    # left-associative: the right child needs parentheses at equal precedence
    s = format_group_expr(e.left, prec) + op + format_group_expr(e.right, prec + 1)
    return f"({s})" if prec < parent else s


def format_rhs(r: RhsSpec) -> str:
    parts = [] if r.intercept else ["0"]
    parts += [t.label for t in r.fixed_terms]
    parts += [s.label for s in r.special_terms]
    for g in r.group_terms:
        inner = format_rhs(RhsSpec(g.inner.intercept, g.inner.fixed_terms))
        bar = f"| {g.id} |" if g.id is not None else g.bar
        parts.append(f"({inner} {bar} {format_group_expr(g.group)})")
    if not parts:
        return "1"
    if r.intercept and not r.fixed_terms and (r.special_terms or r.group_terms):
        parts.insert(0, "1")
    return " + ".join(parts)


_NL_PREC = {"+": 1, "-": 1, "*": 2, "/": 2, "^": 4}


def _nl_prec(e: NlExpr) -> int:
    if isinstance(e, NlBinary):
        return _NL_PREC[e.op]
    return 3 if isinstance(e, NlNeg) else 5


def format_nl(e: NlExpr) -> str:
    """Render with the fewest parentheses that parse back to the same tree."""
    if isinstance(e, NlNum):
        return _fmt_num(e.value)
    if isinstance(e, NlIdent):
        return e.name
    if isinstance(e, NlCall):
        return f"{e.fun}({format_nl(e.arg)})"
    if isinstance(e, NlNeg):
        inner = format_nl(e.operand)
        if _nl_prec(e.operand) < 4:
            inner = f"({inner})"
        return f"-{inner}"
    left, right = format_nl(e.left), format_nl(e.right)
    p = _nl_prec(e)
    if e.op == "^":
        if _nl_prec(e.left) < 5:
            left = f"({left})"
        if _nl_prec(e.right) < 3:
            right = f"({right})"
        return f"{left}^{right}"
    if _nl_prec(e.left) < p:
        left = f"({left})"
    if _nl_prec(e.right) <= p:
        right = f"({right})"
    return f"{left} {e.op} {right}"


def format_response(r: ResponseSpec) -> str:
    s = " + ".join(r.variables)
    if r.aterms:
        s += " | " + " + ".join(_fmt_call(a.fun, a.args, a.kwargs) for a in r.aterms)
    return s


def format_formula(ast: FormulaAst) -> str:
    lhs = format_response(ast.response) + " " if ast.response is not None else ""
    rhs = format_nl(ast.rhs) if ast.is_nonlinear else format_rhs(ast.rhs)
    return f"{lhs}~ {rhs}"


# --------------------------------------------------------------------------
# JSON dump


def group_expr_to_dict(e: GroupExpr) -> dict:
    if isinstance(e, GVar):
        return {"node": "var", "name": e.name}
    if isinstance(e, GGr):
        return {"node": "gr", "arg": group_expr_to_dict(e.arg)}
    if isinstance(e, GMm):
        return {"node": "mm", "members": list(e.members), "weights": list(e.weights) if e.weights else None}
    kind = {GColon: "colon", GSlash: "slash", GPlus: "plus"}[type(e)]
    return {"node": kind, "left": group_expr_to_dict(e.left), "right": group_expr_to_dict(e.right)}


def rhs_to_dict(r: RhsSpec) -> dict:
    return {
        "intercept": r.intercept,
        "fixed_terms": [list(t.variables) for t in r.fixed_terms],
        "special_terms": [
            {"fun": s.fun, "args": list(s.args), "kwargs": {k: v for k, v in s.kwargs}}
            for s in r.special_terms
        ],
        "group_terms": [
            {
                "inner": rhs_to_dict(g.inner),
                "bar": g.bar,
                "id": g.id,
                "group": group_expr_to_dict(g.group),
            }
            for g in r.group_terms
        ],
    }


def nl_to_dict(e: NlExpr) -> dict:
    if isinstance(e, NlNum):
        return {"node": "literal", "value": e.value}
    if isinstance(e, NlIdent):
        return {"node": "identifier", "name": e.name}
    if isinstance(e, NlNeg):
        return {"node": "neg", "operand": nl_to_dict(e.operand)}
    if isinstance(e, NlCall):
        return {"node": "call", "fun": e.fun, "arg": nl_to_dict(e.arg)}
    kind = {"+": "add", "-": "sub", "*": "mul", "/": "div", "^": "pow"}[e.op]
    return {"node": kind, "left": nl_to_dict(e.left), "right": nl_to_dict(e.right)}


def ast_to_dict(ast: FormulaAst) -> dict:
    resp = None
    if ast.response is not None:
        resp = {
            "variables": list(ast.response.variables),
            "aterms": [
                {"fun": a.fun, "args": list(a.args), "kwargs": {k: v for k, v in a.kwargs}}
                for a in ast.response.aterms
            ],
        }
    if ast.is_nonlinear:
        rhs = {"kind": "nonlinear", "expr": nl_to_dict(ast.rhs)}
    else:
        rhs = {"kind": "terms", **rhs_to_dict(ast.rhs)}
    return {"text": ast.raw_text, "response": resp, "rhs": rhs}


def dump_json(obj) -> str:
    """Deterministic JSON text (fixed key order, two-space indent)."""
    return json.dumps(obj, indent=2, sort_keys=False, ensure_ascii=False) + "\n"
