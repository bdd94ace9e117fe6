"""The formulaic-alpha language: grammar, typed AST, unit checking, validation.

Grammar (EBNF):
    expr   := term (("+"|"-") term)*
    term   := factor (("*"|"/") factor)*
    factor := "-" factor | atom
    atom   := NUMBER | FEATURE | IDENT "(" args ")" | "(" expr ")"

Time-series functions take a trailing integer window literal (2..MAX_WINDOW);
ts_corr takes two expressions plus the window. Error positions are 0-based
byte offsets into the input.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import NamedTuple, Optional, Union

FEATURES = ("open", "high", "low", "close", "volume", "vwap")
PRICE_FEATURES = frozenset(("open", "high", "low", "close", "vwap"))

UNARY_OPS = ("neg", "abs", "log", "sqrt")
BINARY_OPS = ("add", "sub", "mul", "div")
TS_OPS = ("ts_delay", "ts_delta", "ts_mean", "ts_std", "ts_min", "ts_max",
          "ts_rank", "ts_corr")
CS_OPS = ("cs_rank", "cs_scale")
GROUP_OPS = ("group_neutralize",)

MAX_WINDOW = 250
MAX_TEXT = 4096
CONST_LIMIT = 1e6

_BINARY_SYMBOL = {"add": "+", "sub": "-", "mul": "*", "div": "/"}
_UNARY_FN = {"abs", "log", "sqrt"}


class ExprError(Exception):
    pass


class ExprSyntaxError(ExprError):
    def __init__(self, position: int, expected: str):
        super().__init__(f"syntax error at {position}: expected {expected}")
        self.position = position
        self.expected = expected


class UnknownIdentifier(ExprError):
    def __init__(self, name: str, position: int = -1):
        super().__init__(f"unknown identifier {name!r}")
        self.name = name
        self.position = position


class ArityError(ExprError):
    def __init__(self, op: str, got: int, want: int):
        super().__init__(f"{op} takes {want} argument(s), got {got}")


class WindowError(ExprError):
    pass


class UnitMismatch(ExprError):
    def __init__(self, node: "Expr", left: "Unit", right: "Unit"):
        super().__init__(f"incompatible units {left} vs {right} at {canonical(node)}")
        self.node = node
        self.left = left
        self.right = right


class ExponentOverflow(ExprError):
    pass


class Unit(NamedTuple):
    price_exp: int
    volume_exp: int


DIMENSIONLESS = Unit(0, 0)
PRICE = Unit(1, 0)
VOLUME = Unit(0, 1)


@dataclass(frozen=True)
class Const:
    value: float


@dataclass(frozen=True)
class Feature:
    name: str


@dataclass(frozen=True)
class Unary:
    op: str
    child: "Expr"


@dataclass(frozen=True)
class Binary:
    op: str
    left: "Expr"
    right: "Expr"


@dataclass(frozen=True)
class TsOp:
    op: str
    child: "Expr"
    window: int
    child2: Optional["Expr"] = None


@dataclass(frozen=True)
class CsOp:
    op: str
    child: "Expr"


@dataclass(frozen=True)
class GroupOp:
    op: str
    child: "Expr"


Expr = Union[Const, Feature, Unary, Binary, TsOp, CsOp, GroupOp]


def children(e: Expr) -> tuple[Expr, ...]:
    if isinstance(e, (Const, Feature)):
        return ()
    if isinstance(e, Unary):
        return (e.child,)
    if isinstance(e, Binary):
        return (e.left, e.right)
    if isinstance(e, TsOp):
        return (e.child,) if e.child2 is None else (e.child, e.child2)
    return (e.child,)


def depth(e: Expr) -> int:
    kids = children(e)
    return 1 if not kids else 1 + max(depth(k) for k in kids)


def complexity(e: Expr) -> int:
    """Node count; window literals do not count."""
    return 1 + sum(complexity(k) for k in children(e))


def features_used(e: Expr) -> frozenset[str]:
    if isinstance(e, Feature):
        return frozenset((e.name,))
    out: frozenset[str] = frozenset()
    for k in children(e):
        out |= features_used(k)
    return out


def warmup_days(e: Expr) -> int:
    """Max over root-to-leaf paths of the sum of ts windows; floor 1."""

    def path_sum(node: Expr) -> int:
        w = node.window if isinstance(node, TsOp) else 0
        return w + max((path_sum(k) for k in children(node)), default=0)

    return max(1, path_sum(e))


def max_window(e: Expr) -> int:
    w = e.window if isinstance(e, TsOp) else 0
    return max([w] + [max_window(k) for k in children(e)])


# -- tokenizer / parser ----------------------------------------------------


class _Token(NamedTuple):
    kind: str  # NUMBER | IDENT | SYM | EOF
    text: str
    pos: int


def _tokenize(text: str) -> list[_Token]:
    toks, i, n = [], 0, len(text)
    while i < n:
        c = text[i]
        if c.isspace():
            i += 1
        elif c in "+-*/(),":
            toks.append(_Token("SYM", c, i))
            i += 1
        elif c.isdigit() or c == ".":
            j = i
            while j < n and (text[j].isdigit() or text[j] == "."):
                j += 1
            if j < n and text[j] in "eE":
                k = j + 1
                if k < n and text[k] in "+-":
                    k += 1
                if k < n and text[k].isdigit():
                    j = k
                    while j < n and text[j].isdigit():
                        j += 1
            toks.append(_Token("NUMBER", text[i:j], i))
            i = j
        elif c.isalpha() or c == "_":
            j = i
            while j < n and (text[j].isalnum() or text[j] == "_"):
                j += 1
            toks.append(_Token("IDENT", text[i:j], i))
            i = j
        else:
            raise ExprSyntaxError(i, f"valid token, got {c!r}")
    toks.append(_Token("EOF", "", n))
    return toks


class _Parser:
    def __init__(self, toks: list[_Token]):
        self.toks = toks
        self.i = 0

    def peek(self) -> _Token:
        return self.toks[self.i]

    def next(self) -> _Token:
        t = self.toks[self.i]
        self.i += 1
        return t

    def expect_sym(self, sym: str) -> None:
        t = self.next()
        if t.kind != "SYM" or t.text != sym:
            raise ExprSyntaxError(t.pos, repr(sym))

    def expr(self) -> Expr:
        node = self.term()
        while self.peek().kind == "SYM" and self.peek().text in "+-":
            op = "add" if self.next().text == "+" else "sub"
            node = Binary(op, node, self.term())
        return node

    def term(self) -> Expr:
        node = self.factor()
        while self.peek().kind == "SYM" and self.peek().text in "*/":
            op = "mul" if self.next().text == "*" else "div"
            node = Binary(op, node, self.factor())
        return node

    def factor(self) -> Expr:
        t = self.peek()
        if t.kind == "SYM" and t.text == "-":
            self.next()
            inner = self.factor()
            if isinstance(inner, Const):
                return Const(-inner.value)
            return Unary("neg", inner)
        return self.atom()

    def atom(self) -> Expr:
        t = self.next()
        if t.kind == "NUMBER":
            try:
                v = float(t.text)
            except ValueError:
                raise ExprSyntaxError(t.pos, "number")
            if not abs(v) <= CONST_LIMIT:
                raise ExprSyntaxError(t.pos, f"constant within +/-{CONST_LIMIT:g}")
            return Const(v)
        if t.kind == "SYM" and t.text == "(":
            node = self.expr()
            self.expect_sym(")")
            return node
        if t.kind == "IDENT":
            name = t.text
            if self.peek().kind == "SYM" and self.peek().text == "(":
                return self.call(name, t.pos)
            base = name[:-3] if name.endswith("_1D") else name
            if base not in FEATURES:
                raise UnknownIdentifier(name, t.pos)
            return Feature(base)
        raise ExprSyntaxError(t.pos, "number, feature, function call or '('")

    def call(self, name: str, pos: int) -> Expr:
        self.expect_sym("(")
        args: list[tuple[Expr, _Token]] = []
        arg_toks: list[_Token] = []
        if not (self.peek().kind == "SYM" and self.peek().text == ")"):
            while True:
                arg_toks.append(self.peek())
                args.append((self.expr(), arg_toks[-1]))
                t = self.next()
                if t.kind == "SYM" and t.text == ")":
                    break
                if not (t.kind == "SYM" and t.text == ","):
                    raise ExprSyntaxError(t.pos, "',' or ')'")
        else:
            self.next()
        exprs = [a for a, _ in args]
        if name in _UNARY_FN:
            if len(exprs) != 1:
                raise ArityError(name, len(exprs), 1)
            return Unary(name, exprs[0])
        if name in CS_OPS:
            if len(exprs) != 1:
                raise ArityError(name, len(exprs), 1)
            return CsOp(name, exprs[0])
        if name in GROUP_OPS:
            if len(exprs) != 1:
                raise ArityError(name, len(exprs), 1)
            return GroupOp(name, exprs[0])
        if name in TS_OPS:
            n_kids = 2 if name == "ts_corr" else 1
            if len(exprs) != n_kids + 1:
                raise ArityError(name, len(exprs), n_kids + 1)
            wexpr, wtok = args[-1]
            if not isinstance(wexpr, Const) or wexpr.value != int(wexpr.value):
                raise WindowError(f"{name} window must be an integer literal")
            w = int(wexpr.value)
            # the MAX_WINDOW cap is enforced at validation time, against the
            # available history; the grammar only requires an integer >= 2
            if w < 2:
                raise WindowError(f"{name} window {w} must be >= 2")
            if name == "ts_corr":
                return TsOp(name, exprs[0], w, exprs[1])
            return TsOp(name, exprs[0], w)
        raise UnknownIdentifier(name, pos)


def parse(text: str) -> Expr:
    if not text or not text.strip():
        raise ExprSyntaxError(0, "non-empty expression")
    if len(text) > MAX_TEXT:
        raise ExprSyntaxError(MAX_TEXT, f"expression within {MAX_TEXT} characters")
    p = _Parser(_tokenize(text))
    node = p.expr()
    t = p.peek()
    if t.kind != "EOF":
        raise ExprSyntaxError(t.pos, "end of expression")
    return node


# -- unit checking ---------------------------------------------------------

_FEATURE_UNIT = {name: (PRICE if name in PRICE_FEATURES else VOLUME)
                 for name in FEATURES}


def _bounded(u: Unit) -> Unit:
    if not (-4 <= u.price_exp <= 4 and -4 <= u.volume_exp <= 4):
        raise ExponentOverflow(str(u))
    return u


def check_units(e: Expr) -> Unit:
    """Bottom-up unit inference. add/sub require equal units (bare constants
    are unit-polymorphic there); mul/div add/subtract exponents; rank-like and
    log/sqrt operators yield dimensionless output."""
    if isinstance(e, Const):
        return DIMENSIONLESS
    if isinstance(e, Feature):
        return _FEATURE_UNIT[e.name]
    if isinstance(e, Unary):
        u = check_units(e.child)
        if e.op in ("neg", "abs"):
            return u
        return DIMENSIONLESS  # log, sqrt
    if isinstance(e, Binary):
        lu, ru = check_units(e.left), check_units(e.right)
        if e.op in ("add", "sub"):
            if isinstance(e.left, Const):
                return ru
            if isinstance(e.right, Const):
                return lu
            if lu != ru:
                raise UnitMismatch(e, lu, ru)
            return lu
        if e.op == "mul":
            return _bounded(Unit(lu.price_exp + ru.price_exp, lu.volume_exp + ru.volume_exp))
        return _bounded(Unit(lu.price_exp - ru.price_exp, lu.volume_exp - ru.volume_exp))
    if isinstance(e, TsOp):
        u = check_units(e.child)
        if e.child2 is not None:
            check_units(e.child2)
        if e.op in ("ts_rank", "ts_corr"):
            return DIMENSIONLESS
        return u
    if isinstance(e, CsOp):
        check_units(e.child)
        return DIMENSIONLESS
    if isinstance(e, GroupOp):
        check_units(e.child)
        return DIMENSIONLESS
    raise TypeError(f"not an Expr node: {e!r}")


# -- canonical printing ----------------------------------------------------


def canonical(e: Expr) -> str:
    """Fully parenthesized space-free form; parse(canonical(e)) == e."""
    if isinstance(e, Const):
        return repr(e.value)
    if isinstance(e, Feature):
        return e.name
    if isinstance(e, Unary):
        if e.op == "neg":
            # the parser folds a negated literal into the constant, so print
            # neg-of-const the same way to keep canonical a fixed point
            if isinstance(e.child, Const):
                return repr(-e.child.value)
            return f"(-{canonical(e.child)})"
        return f"{e.op}({canonical(e.child)})"
    if isinstance(e, Binary):
        return f"({canonical(e.left)}{_BINARY_SYMBOL[e.op]}{canonical(e.right)})"
    if isinstance(e, TsOp):
        if e.child2 is not None:
            return f"{e.op}({canonical(e.child)},{canonical(e.child2)},{e.window})"
        return f"{e.op}({canonical(e.child)},{e.window})"
    if isinstance(e, (CsOp, GroupOp)):
        return f"{e.op}({canonical(e.child)})"
    raise TypeError(f"not an Expr node: {e!r}")


# -- full validation -------------------------------------------------------


@dataclass
class ValidationReport:
    syntax_ok: bool
    unit_ok: bool
    semantic_ok: bool
    failures: list[tuple[str, str, str]]  # (stage, where, message)

    @property
    def ok(self) -> bool:
        return self.syntax_ok and self.unit_ok and self.semantic_ok


def validate(expr_text: str, mock) -> ValidationReport:
    """parse -> check_units -> evaluate on a mock panel.

    Semantic failure = evaluation hits a domain trap (log/sqrt), a window
    longer than the mock history, or leaves >90% of cells masked.
    """
    from . import ops

    failures: list[tuple[str, str, str]] = []
    try:
        e = parse(expr_text)
    except ExprError as exc:
        pos = getattr(exc, "position", -1)
        return ValidationReport(False, False, False, [("syntax", str(pos), str(exc))])
    try:
        check_units(e)
    except ExprError as exc:
        return ValidationReport(True, False, False, [("unit", canonical(e), str(exc))])
    w = max_window(e)
    if w > mock.n_days or w > MAX_WINDOW:
        failures.append(("semantic", canonical(e),
                         f"window {w} exceeds history/{MAX_WINDOW} cap"))
        return ValidationReport(True, True, False, failures)
    try:
        am = ops.evaluate(e, mock)
    except Exception as exc:  # evaluation must never crash validation
        failures.append(("semantic", canonical(e), f"evaluation error: {exc}"))
        return ValidationReport(True, True, False, failures)
    if am.n_domain_errors > 0:
        failures.append(("semantic", canonical(e),
                         f"{am.n_domain_errors} domain error(s) (log/sqrt out of domain)"))
    masked_frac = 1.0 - am.valid.mean()
    if masked_frac > 0.9:
        failures.append(("semantic", canonical(e),
                         f"{masked_frac:.0%} of output cells masked"))
    return ValidationReport(True, True, not failures, failures)
