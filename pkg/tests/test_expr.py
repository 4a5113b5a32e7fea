"""Expression language: parsing, evaluation, affine analysis."""

import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from panzoom import expr as E


def test_parse_scaled_offset_form():
    e = E.parse_expr("pop * 5 - 1000")
    assert e == E.Binary("-", E.Binary("*", E.Field("pop"), E.Lit(5.0)), E.Lit(1000.0))


def test_parse_identity():
    assert E.parse_expr("x") == E.Field("x")


def test_parse_predicate_precedence():
    e = E.parse_expr("rate >= 0.5 and state == 25")
    assert e == E.Binary(
        "and",
        E.Binary(">=", E.Field("rate"), E.Lit(0.5)),
        E.Binary("==", E.Field("state"), E.Lit(25.0)),
    )


def test_precedence_mul_over_add_and_parens():
    assert E.parse_expr("1 + 2 * 3") == E.Binary(
        "+", E.Lit(1.0), E.Binary("*", E.Lit(2.0), E.Lit(3.0)))
    assert E.parse_expr("(1 + 2) * 3") == E.Binary(
        "*", E.Binary("+", E.Lit(1.0), E.Lit(2.0)), E.Lit(3.0))


def test_or_binds_loosest():
    e = E.parse_expr("a < 1 or b < 2 and c < 3")
    assert isinstance(e, E.Binary) and e.op == "or"
    assert isinstance(e.right, E.Binary) and e.right.op == "and"


def test_syntax_error_carries_offset():
    with pytest.raises(E.ExprSyntaxError) as exc:
        E.parse_expr("a + * b")
    assert exc.value.offset == 4


def test_unknown_operator():
    with pytest.raises(E.ExprSyntaxError, match="unknown operator"):
        E.parse_expr("a % b")
    with pytest.raises(E.ExprSyntaxError, match="unknown operator"):
        E.parse_expr("a = b")


def test_empty_source_rejected():
    with pytest.raises(E.ExprSyntaxError):
        E.parse_expr("   ")


def test_type_errors_at_parse_time():
    with pytest.raises(E.ExprTypeError):
        E.parse_expr("1 and 2")
    with pytest.raises(E.ExprTypeError):
        E.parse_expr("(a < b) + 1")
    with pytest.raises(E.ExprTypeError):
        E.parse_expr("not x + 1")  # not binds tightest: (not x) + 1


def test_eval_scaled_offset():
    assert E.evaluate(E.parse_expr("pop * 5 - 1000"), {"pop": 300}) == 500.0


def test_eval_identity():
    assert E.evaluate(E.parse_expr("x"), {"x": 7.5}) == 7.5


def test_eval_division_by_zero():
    with pytest.raises(E.ExprEvalError, match="division by zero"):
        E.evaluate(E.parse_expr("a / b"), {"a": 1, "b": 0})


def test_eval_missing_field():
    with pytest.raises(E.ExprEvalError, match="missing"):
        E.evaluate(E.parse_expr("a + b"), {"a": 1})


def test_eval_type_mismatch_on_text_value():
    with pytest.raises(E.ExprEvalError, match="not numeric"):
        E.evaluate(E.parse_expr("name * 2"), {"name": "Massachusetts"})


def test_eval_short_circuit_guards_division():
    e = E.parse_expr("d != 0 and 1 / d > 2")
    assert E.evaluate(e, {"d": 0}) is False


def test_eval_is_pure():
    e = E.parse_expr("x * 3 - 1")
    row = {"x": 2.0}
    assert E.evaluate(e, row) == E.evaluate(e, row) == 5.0


def test_vector_matches_scalar():
    e = E.parse_expr("cx * 10 - 3 + cy / 2")
    cols = {"cx": np.array([1.0, 2.0, 3.5]), "cy": np.array([4.0, 0.5, -2.0])}
    vec = E.evaluate_vector(e, cols)
    for i in range(3):
        assert vec[i] == E.evaluate(e, {"cx": cols["cx"][i], "cy": cols["cy"][i]})


def test_vector_division_by_zero_names_row():
    e = E.parse_expr("1 / v")
    with pytest.raises(E.ExprEvalError, match="row 2"):
        E.evaluate_vector(e, {"v": np.array([1.0, 2.0, 0.0])})


# --------------------------------------------------------------------------
# affine analysis

def _assert_affine_matches_eval(source: str, form: E.AffineForm, n: int = 100):
    """The stated oracle: both forms agree on random inputs."""
    e = E.parse_expr(source)
    rng = np.random.default_rng(2024)
    for _ in range(n):
        row = {f: float(rng.uniform(-1e4, 1e4)) for f in E.fields_of(e)}
        direct = E.evaluate(e, row)
        assert math.isclose(direct, form.scale * row[form.column] + form.offset,
                            rel_tol=1e-9, abs_tol=1e-9)


def test_affine_identity():
    assert E.as_affine(E.parse_expr("x")) == E.AffineForm("x", 1.0, 0.0)


def test_affine_scaled_offset():
    form = E.as_affine(E.parse_expr("pop * 5 - 1000"))
    assert form == E.AffineForm("pop", 5.0, -1000.0)
    _assert_affine_matches_eval("pop * 5 - 1000", form)


def test_affine_two_fields_is_none():
    assert E.as_affine(E.parse_expr("x * y")) is None


def test_affine_normalization_cases():
    cases = {
        "2 * x + 3": ("x", 2.0, 3.0),
        "3 + x * 2": ("x", 2.0, 3.0),          # commuted operands
        "-(-x)": ("x", 1.0, 0.0),               # nested negation
        "x / 4": ("x", 0.25, 0.0),              # division by a literal
        "(x * 2 + 1) * 3": ("x", 6.0, 3.0),     # literal folding
        "x + y - y": ("x", 1.0, 0.0),           # cancelled second field
        "10 - x": ("x", -1.0, 10.0),            # negative scale
    }
    for source, (col, a, b) in cases.items():
        form = E.as_affine(E.parse_expr(source))
        assert form == E.AffineForm(col, a, b), source
        _assert_affine_matches_eval(source, form, n=25)


def test_affine_rejections():
    for source in ("x - x",        # scale collapses to zero: not invertible
                   "5",            # no field at all
                   "x * x",        # quadratic
                   "1 / x",        # division by a field
                   "x + y"):       # two live fields
        assert E.as_affine(E.parse_expr(source)) is None, source


def test_affine_requires_arithmetic_type():
    assert E.as_affine(E.parse_expr("x < 5")) is None


# --------------------------------------------------------------------------
# property tests

_FIELDS = ("x", "y", "pop", "rate")


def _affine_fragment():
    """Expressions built only from affine-preserving constructions."""
    lits = st.floats(min_value=0.0, max_value=100.0, allow_nan=False)
    base = st.one_of(lits.map(E.Lit), st.sampled_from(_FIELDS).map(E.Field))

    def extend(children):
        nonzero = st.floats(min_value=0.25, max_value=50.0, allow_nan=False)
        return st.one_of(
            st.tuples(children, children).map(lambda p: E.Binary("+", *p)),
            st.tuples(children, children).map(lambda p: E.Binary("-", *p)),
            children.map(lambda c: E.Unary("-", c)),
            st.tuples(lits, children).map(lambda p: E.Binary("*", E.Lit(p[0]), p[1])),
            st.tuples(children, lits).map(lambda p: E.Binary("*", p[0], E.Lit(p[1]))),
            st.tuples(children, nonzero).map(lambda p: E.Binary("/", p[0], E.Lit(p[1]))),
        )

    return st.recursive(base, extend, max_leaves=12)


@given(_affine_fragment(), st.integers(0, 2**32 - 1))
@settings(max_examples=200, deadline=None)
def test_affine_form_agrees_with_eval(expr, seed):
    form = E.as_affine(expr)
    if form is None:
        return
    rng = np.random.default_rng(seed)
    row = {f: float(v) for f, v in zip(_FIELDS, rng.uniform(-1e3, 1e3, len(_FIELDS)))}
    direct = E.evaluate(expr, row)
    via_form = form.scale * row[form.column] + form.offset
    assert math.isclose(direct, via_form, rel_tol=1e-9, abs_tol=1e-6)


def _printable_exprs():
    """Arbitrary well-typed ASTs in the parser-reachable space (literals are
    non-negative; negative values appear as unary negation, as parsing
    produces them)."""
    lits = st.floats(min_value=0.0, max_value=1e6, allow_nan=False)
    arith_base = st.one_of(lits.map(E.Lit), st.sampled_from(_FIELDS).map(E.Field))

    def arith_extend(children):
        op = st.sampled_from(("+", "-", "*", "/"))
        return st.one_of(
            st.tuples(op, children, children).map(lambda t: E.Binary(t[0], t[1], t[2])),
            children.map(lambda c: E.Unary("-", c)),
        )

    arith = st.recursive(arith_base, arith_extend, max_leaves=10)
    cmp_op = st.sampled_from(E.CMP_OPS)
    bool_base = st.tuples(cmp_op, arith, arith).map(lambda t: E.Binary(t[0], t[1], t[2]))

    def bool_extend(children):
        op = st.sampled_from(("and", "or"))
        return st.one_of(
            st.tuples(op, children, children).map(lambda t: E.Binary(t[0], t[1], t[2])),
            children.map(lambda c: E.Unary("not", c)),
        )

    return st.one_of(arith, st.recursive(bool_base, bool_extend, max_leaves=6))


@given(_printable_exprs())
@settings(max_examples=300, deadline=None)
def test_pretty_print_round_trips(expr):
    assert E.parse_expr(E.pretty_print(expr)) == expr
