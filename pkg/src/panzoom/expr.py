"""A small arithmetic/predicate expression language over named row fields.

Used by layer transforms (filter predicates, derived columns), placements,
jump selectors and jump viewport-center functions. The language is closed on
purpose: expressions can be inspected, which is what makes the separable
fast path possible (see :func:`as_affine`).

Grammar, loosest to tightest binding::

    or_expr   := and_expr ("or" and_expr)*
    and_expr  := cmp_expr ("and" cmp_expr)*
    cmp_expr  := add_expr ((< | <= | > | >= | == | !=) add_expr)?
    add_expr  := mul_expr ((+ | -) mul_expr)*
    mul_expr  := unary ((* | /) unary)*
    unary     := ("-" | "not") unary | atom
    atom      := NUMBER | IDENT | "(" or_expr ")"

Numbers are 64-bit floats throughout; there are no boolean literals.
Typing is structural and enforced after parsing: arithmetic operators and
comparisons take numeric operands, and/or/not take boolean operands.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Mapping, Union

import numpy as np

ARITH_OPS = ("+", "-", "*", "/")
CMP_OPS = ("<", "<=", ">", ">=", "==", "!=")
BOOL_OPS = ("and", "or")


class ExprError(Exception):
    """Base class for everything this module raises."""


class ExprSyntaxError(ExprError):
    def __init__(self, message: str, offset: int):
        super().__init__(f"{message} (at offset {offset})")
        self.offset = offset


class ExprTypeError(ExprError):
    pass


class ExprEvalError(ExprError):
    pass


@dataclass(frozen=True)
class Lit:
    value: float


@dataclass(frozen=True)
class Field:
    name: str


@dataclass(frozen=True)
class Unary:
    op: str  # "-" or "not"
    operand: "Expr"


@dataclass(frozen=True)
class Binary:
    op: str  # one of ARITH_OPS, CMP_OPS or BOOL_OPS
    left: "Expr"
    right: "Expr"


Expr = Union[Lit, Field, Unary, Binary]


@dataclass(frozen=True)
class AffineForm:
    """value = scale * row[column] + offset, over a single raw column."""

    column: str
    scale: float
    offset: float

    def apply(self, v):
        return self.scale * v + self.offset

    def invert(self, v: float) -> float:
        return (v - self.offset) / self.scale


# --------------------------------------------------------------------------
# tokenizer / parser

_TWO_CHAR = {"<=", ">=", "==", "!="}
_ONE_CHAR = {"+", "-", "*", "/", "<", ">", "(", ")"}
_KEYWORDS = {"and", "or", "not"}


class _Token:
    __slots__ = ("kind", "text", "offset")

    def __init__(self, kind: str, text: str, offset: int):
        self.kind = kind  # "num", "ident", "op", "kw", "eof"
        self.text = text
        self.offset = offset


def _tokenize(source: str) -> list[_Token]:
    toks: list[_Token] = []
    i, n = 0, len(source)
    while i < n:
        c = source[i]
        if c.isspace():
            i += 1
            continue
        if source[i:i + 2] in _TWO_CHAR:
            toks.append(_Token("op", source[i:i + 2], i))
            i += 2
            continue
        if c in _ONE_CHAR:
            toks.append(_Token("op", c, i))
            i += 1
            continue
        if c.isdigit() or (c == "." and i + 1 < n and source[i + 1].isdigit()):
            j = i
            while j < n and (source[j].isdigit() or source[j] == "."):
                j += 1
            if j < n and source[j] in "eE":
                k = j + 1
                if k < n and source[k] in "+-":
                    k += 1
                if k < n and source[k].isdigit():
                    j = k
                    while j < n and source[j].isdigit():
                        j += 1
            text = source[i:j]
            try:
                float(text)
            except ValueError:
                raise ExprSyntaxError(f"bad numeric literal {text!r}", i)
            toks.append(_Token("num", text, i))
            i = j
            continue
        if c.isalpha() or c == "_":
            j = i
            while j < n and (source[j].isalnum() or source[j] == "_"):
                j += 1
            text = source[i:j]
            toks.append(_Token("kw" if text in _KEYWORDS else "ident", text, i))
            i = j
            continue
        if c in "=!&|%^~":
            raise ExprSyntaxError(f"unknown operator {c!r}", i)
        raise ExprSyntaxError(f"unexpected character {c!r}", i)
    toks.append(_Token("eof", "", n))
    return toks


class _Parser:
    def __init__(self, tokens: list[_Token]):
        self.toks = tokens
        self.pos = 0

    def peek(self) -> _Token:
        return self.toks[self.pos]

    def next(self) -> _Token:
        t = self.toks[self.pos]
        self.pos += 1
        return t

    def expect_op(self, text: str) -> None:
        t = self.next()
        if t.kind != "op" or t.text != text:
            raise ExprSyntaxError(f"expected {text!r}, found {t.text or 'end of input'!r}", t.offset)

    def parse_or(self) -> Expr:
        e = self.parse_and()
        while self.peek().kind == "kw" and self.peek().text == "or":
            self.next()
            e = Binary("or", e, self.parse_and())
        return e

    def parse_and(self) -> Expr:
        e = self.parse_cmp()
        while self.peek().kind == "kw" and self.peek().text == "and":
            self.next()
            e = Binary("and", e, self.parse_cmp())
        return e

    def parse_cmp(self) -> Expr:
        e = self.parse_add()
        t = self.peek()
        if t.kind == "op" and t.text in CMP_OPS:
            self.next()
            return Binary(t.text, e, self.parse_add())
        return e

    def parse_add(self) -> Expr:
        e = self.parse_mul()
        while True:
            t = self.peek()
            if t.kind == "op" and t.text in ("+", "-"):
                self.next()
                e = Binary(t.text, e, self.parse_mul())
            else:
                return e

    def parse_mul(self) -> Expr:
        e = self.parse_unary()
        while True:
            t = self.peek()
            if t.kind == "op" and t.text in ("*", "/"):
                self.next()
                e = Binary(t.text, e, self.parse_unary())
            else:
                return e

    def parse_unary(self) -> Expr:
        t = self.peek()
        if t.kind == "op" and t.text == "-":
            self.next()
            return Unary("-", self.parse_unary())
        if t.kind == "kw" and t.text == "not":
            self.next()
            return Unary("not", self.parse_unary())
        return self.parse_atom()

    def parse_atom(self) -> Expr:
        t = self.next()
        if t.kind == "num":
            return Lit(float(t.text))
        if t.kind == "ident":
            return Field(t.text)
        if t.kind == "op" and t.text == "(":
            e = self.parse_or()
            self.expect_op(")")
            return e
        raise ExprSyntaxError(f"expected a value, found {t.text or 'end of input'!r}", t.offset)


def type_of(e: Expr) -> str:
    """Structural type, "num" or "bool"; raises on ill-typed trees."""
    if isinstance(e, (Lit, Field)):
        return "num"
    if isinstance(e, Unary):
        inner = type_of(e.operand)
        want = "num" if e.op == "-" else "bool"
        if inner != want:
            raise ExprTypeError(f"operator {e.op!r} needs a {want} operand, got {inner}")
        return want
    if isinstance(e, Binary):
        lt, rt = type_of(e.left), type_of(e.right)
        if e.op in ARITH_OPS:
            if lt != "num" or rt != "num":
                raise ExprTypeError(f"arithmetic {e.op!r} needs numeric operands")
            return "num"
        if e.op in CMP_OPS:
            if lt != "num" or rt != "num":
                raise ExprTypeError(f"comparison {e.op!r} needs numeric operands")
            return "bool"
        if lt != "bool" or rt != "bool":
            raise ExprTypeError(f"{e.op!r} needs boolean operands")
        return "bool"
    raise ExprTypeError(f"not an expression: {e!r}")


def parse_expr(source: str) -> Expr:
    """Parse and type-check; raises ExprSyntaxError / ExprTypeError."""
    if not source or not source.strip():
        raise ExprSyntaxError("empty expression", 0)
    p = _Parser(_tokenize(source))
    e = p.parse_or()
    t = p.peek()
    if t.kind != "eof":
        raise ExprSyntaxError(f"trailing input {t.text!r}", t.offset)
    type_of(e)
    return e


def fields_of(e: Expr) -> set[str]:
    if isinstance(e, Field):
        return {e.name}
    if isinstance(e, Unary):
        return fields_of(e.operand)
    if isinstance(e, Binary):
        return fields_of(e.left) | fields_of(e.right)
    return set()


# --------------------------------------------------------------------------
# pretty printing (round-trips through parse_expr)

_PREC = {"or": 1, "and": 2, "<": 3, "<=": 3, ">": 3, ">=": 3, "==": 3, "!=": 3,
         "+": 4, "-": 4, "*": 5, "/": 5}
_UNARY_PREC = 6


def _fmt_num(v: float) -> str:
    return repr(v)


def pretty_print(e: Expr, parent_prec: int = 0) -> str:
    if isinstance(e, Lit):
        return _fmt_num(e.value)
    if isinstance(e, Field):
        return e.name
    if isinstance(e, Unary):
        inner = pretty_print(e.operand, _UNARY_PREC)
        text = f"-{inner}" if e.op == "-" else f"not {inner}"
        return f"({text})" if parent_prec > _UNARY_PREC else text
    prec = _PREC[e.op]
    # parenthesize right operand at equal precedence: -, / and comparisons
    # are not associative, and chained comparisons are not in the grammar
    left = pretty_print(e.left, prec)
    right = pretty_print(e.right, prec + 1)
    text = f"{left} {e.op} {right}"
    return f"({text})" if parent_prec > prec else text


# --------------------------------------------------------------------------
# evaluation

def evaluate(e: Expr, row: Mapping[str, object]):
    """Evaluate over one row; returns float or bool.

    and/or short-circuit, so a guarded division like ``d != 0 and 1/d > 2``
    never divides by zero.
    """
    if isinstance(e, Lit):
        return e.value
    if isinstance(e, Field):
        if e.name not in row:
            raise ExprEvalError(f"field {e.name!r} missing from row")
        v = row[e.name]
        if isinstance(v, bool) or not isinstance(v, (int, float, np.floating, np.integer)):
            raise ExprEvalError(f"field {e.name!r} is not numeric (got {type(v).__name__})")
        return float(v)
    if isinstance(e, Unary):
        v = evaluate(e.operand, row)
        return (not v) if e.op == "not" else -v
    assert isinstance(e, Binary)
    if e.op == "and":
        return bool(evaluate(e.left, row)) and bool(evaluate(e.right, row))
    if e.op == "or":
        return bool(evaluate(e.left, row)) or bool(evaluate(e.right, row))
    lv = evaluate(e.left, row)
    rv = evaluate(e.right, row)
    if e.op == "+":
        return lv + rv
    if e.op == "-":
        return lv - rv
    if e.op == "*":
        return lv * rv
    if e.op == "/":
        if rv == 0.0:
            raise ExprEvalError("division by zero")
        return lv / rv
    if e.op == "<":
        return lv < rv
    if e.op == "<=":
        return lv <= rv
    if e.op == ">":
        return lv > rv
    if e.op == ">=":
        return lv >= rv
    if e.op == "==":
        return lv == rv
    if e.op == "!=":
        return lv != rv
    raise ExprEvalError(f"unknown operator {e.op!r}")


def evaluate_vector(e: Expr, columns: Mapping[str, np.ndarray]) -> np.ndarray:
    """Evaluate over whole columns at once.

    Same operation tree and IEEE semantics as :func:`evaluate`, so scalar
    and vector paths produce bit-identical values. Unlike the scalar path,
    and/or do not short-circuit (both sides are computed).
    """
    if isinstance(e, Lit):
        return np.float64(e.value)
    if isinstance(e, Field):
        if e.name not in columns:
            raise ExprEvalError(f"field {e.name!r} missing")
        col = columns[e.name]
        if not np.issubdtype(np.asarray(col).dtype, np.number):
            raise ExprEvalError(f"field {e.name!r} is not numeric")
        return col
    if isinstance(e, Unary):
        v = evaluate_vector(e.operand, columns)
        return np.logical_not(v) if e.op == "not" else -v
    assert isinstance(e, Binary)
    lv = evaluate_vector(e.left, columns)
    rv = evaluate_vector(e.right, columns)
    if e.op == "and":
        return np.logical_and(lv, rv)
    if e.op == "or":
        return np.logical_or(lv, rv)
    if e.op == "+":
        return lv + rv
    if e.op == "-":
        return lv - rv
    if e.op == "*":
        return lv * rv
    if e.op == "/":
        if np.any(rv == 0.0):
            idx = int(np.argmax(np.asarray(rv == 0.0)))
            err = ExprEvalError(f"division by zero (first at row {idx})")
            err.row = idx
            raise err
        return lv / rv
    if e.op == "<":
        return lv < rv
    if e.op == "<=":
        return lv <= rv
    if e.op == ">":
        return lv > rv
    if e.op == ">=":
        return lv >= rv
    if e.op == "==":
        return lv == rv
    if e.op == "!=":
        return lv != rv
    raise ExprEvalError(f"unknown operator {e.op!r}")


# --------------------------------------------------------------------------
# affine analysis

def _linear_poly(e: Expr):
    """Normalize to (coeffs: {field: float}, const: float), or None.

    Folds literals, handles commuted operands, nested negation and division
    by a literal. Any multiplication of two field-bearing subtrees (or
    division by one) is not linear and yields None.
    """
    if isinstance(e, Lit):
        return {}, e.value
    if isinstance(e, Field):
        return {e.name: 1.0}, 0.0
    if isinstance(e, Unary):
        if e.op != "-":
            return None
        sub = _linear_poly(e.operand)
        if sub is None:
            return None
        coeffs, const = sub
        return {k: -v for k, v in coeffs.items()}, -const
    if isinstance(e, Binary):
        if e.op in ("+", "-"):
            l = _linear_poly(e.left)
            r = _linear_poly(e.right)
            if l is None or r is None:
                return None
            sign = 1.0 if e.op == "+" else -1.0
            coeffs = dict(l[0])
            for k, v in r[0].items():
                coeffs[k] = coeffs.get(k, 0.0) + sign * v
            return coeffs, l[1] + sign * r[1]
        if e.op == "*":
            l = _linear_poly(e.left)
            r = _linear_poly(e.right)
            if l is None or r is None:
                return None
            if not l[0]:  # literal * linear
                c = l[1]
                return {k: c * v for k, v in r[0].items()}, c * r[1]
            if not r[0]:  # linear * literal
                c = r[1]
                return {k: c * v for k, v in l[0].items()}, c * l[1]
            return None
        if e.op == "/":
            l = _linear_poly(e.left)
            r = _linear_poly(e.right)
            if l is None or r is None:
                return None
            if r[0] or r[1] == 0.0:  # field-bearing or zero denominator
                return None
            c = r[1]
            return {k: v / c for k, v in l[0].items()}, l[1] / c
    return None  # comparisons / boolean ops


def as_affine(e: Expr) -> AffineForm | None:
    """AffineForm iff e normalizes to a*col + b over exactly one column.

    The scale must be nonzero (and the form finite), otherwise the mapping
    is not invertible and the form is useless for index pushdown.
    """
    poly = _linear_poly(e)
    if poly is None:
        return None
    coeffs, const = poly
    live = [(k, v) for k, v in coeffs.items() if v != 0.0]
    if len(live) != 1:
        return None
    col, a = live[0]
    if not (np.isfinite(a) and np.isfinite(const)):
        return None
    return AffineForm(column=col, scale=a, offset=const)
