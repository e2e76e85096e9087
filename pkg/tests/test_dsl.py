from __future__ import annotations

import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from znl.dsl import (
    BinOp,
    Call,
    Neg,
    Num,
    TimeVar,
    Var,
    compile_vector,
    eval_expr,
    parse_expr,
    parse_scenario,
    pretty,
)
from znl.errors import (
    DimensionMismatch,
    DomainError,
    ExprSyntaxError,
    InvalidValue,
    MissingKey,
    UnknownIdentifier,
)

MINIMAL = """\
d = 1
x0 = 0
bplus = "1"
bminus = "-1"
eps = 0.1, 0.05
"""


def test_single_variable():
    assert parse_expr("x1") == Var(1)


def test_grammar_derivation():
    e = parse_expr("sgn(x2)*2 + t")
    assert e == BinOp("+", BinOp("*", Call("sgn", (Var(2),)), Num(2.0)), TimeVar())


def test_incomplete_input_reports_offset():
    with pytest.raises(ExprSyntaxError) as info:
        parse_expr("x1 +")
    assert info.value.offset == 4


@pytest.mark.parametrize("text, value", [
    ("2^3^2", 512.0),
    ("-2^2", -4.0),
    ("2^-1", 0.5),
    ("1 - 2 - 3", -4.0),
    ("8 / 4 / 2", 1.0),
    ("2 * 3 + 4 * 5", 26.0),
    ("min(3, -1) + max(2, 5)", 4.0),
    ("abs(-2.5) + tanh(0) + exp(0) + cos(0) + sin(0) + sqrt(9)", 7.5),
    ("1e-3 * 1000", 1.0),
])
def test_precedence_and_associativity(text, value):
    assert eval_expr(parse_expr(text), 0.0, []) == value


def test_sgn_convention():
    e = parse_expr("sgn(x1)")
    assert eval_expr(e, 0.0, [-3.0]) == -1
    assert eval_expr(e, 0.0, [0.0]) == 0
    assert eval_expr(e, 0.0, [2.0]) == 1


@pytest.mark.parametrize("text", ["1/0", "sqrt(-1)", "exp(1000)", "(-8)^0.5", "x1/x1"])
def test_domain_errors(text):
    with pytest.raises(DomainError):
        eval_expr(parse_expr(text), 0.0, [0.0])


@pytest.mark.parametrize("text", ["", "x1 +", "(x1", "x1)", "sin(x1, x2)", "min(x1)", "3 $ 4",
                                  "x1 x2", "*2", "2..3", "sin x1", "max(1,)"])
def test_non_grammatical_inputs_raise_syntax_error(text):
    with pytest.raises(ExprSyntaxError):
        parse_expr(text)


@pytest.mark.parametrize("text, name", [("y + 1", "y"), ("x0", "x0"), ("foo(1)", "foo")])
def test_unknown_identifiers(text, name):
    with pytest.raises(UnknownIdentifier) as info:
        parse_expr(text)
    assert info.value.name == name


def test_variable_index_checked_against_dimension():
    assert parse_expr("x2", d=2) == Var(2)
    with pytest.raises(UnknownIdentifier):
        parse_expr("x3", d=2)


def test_byte_offsets_count_utf8():
    with pytest.raises(ExprSyntaxError) as info:
        parse_expr("1 + é")
    assert info.value.offset == 4


def test_pathological_depth_is_rejected_not_crashing():
    for text in ("(" * 5000 + "1" + ")" * 5000, "-" * 10000 + "1", "+".join(["1"] * 5000)):
        with pytest.raises(ExprSyntaxError):
            parse_expr(text)


@settings(max_examples=300, deadline=None)
@given(st.text(max_size=60))
def test_parser_is_total(text):
    try:
        parse_expr(text, d=3)
    except (ExprSyntaxError, UnknownIdentifier):
        pass


# Random well-typed ASTs for the round-trip and reference-evaluator properties.
_leaf = st.one_of(
    st.floats(min_value=-5, max_value=5, allow_nan=False).map(Num),
    st.integers(1, 3).map(Var),
    st.just(TimeVar()),
)


def _extend(children):
    return st.one_of(
        children.map(Neg),
        st.tuples(st.sampled_from("+-*"), children, children).map(lambda a: BinOp(*a)),
        st.tuples(st.sampled_from(["sin", "cos", "tanh", "abs", "sgn"]), children)
          .map(lambda a: Call(a[0], (a[1],))),
        st.tuples(st.sampled_from(["min", "max"]), children, children)
          .map(lambda a: Call(a[0], (a[1], a[2]))),
    )


asts = st.recursive(_leaf, _extend, max_leaves=12)

_REF = {"sin": math.sin, "cos": math.cos, "tanh": math.tanh, "abs": abs,
        "sgn": lambda v: (v > 0) - (v < 0), "min": min, "max": max}


def reference_eval(e, t, x):
    """Straightforward recursive evaluator used as an oracle."""
    if isinstance(e, Num):
        return e.value
    if isinstance(e, Var):
        return x[e.index - 1]
    if isinstance(e, TimeVar):
        return t
    if isinstance(e, Neg):
        return -reference_eval(e.arg, t, x)
    if isinstance(e, BinOp):
        a, b = reference_eval(e.left, t, x), reference_eval(e.right, t, x)
        return {"+": a + b, "-": a - b, "*": a * b}[e.op]
    return _REF[e.name](*(reference_eval(a, t, x) for a in e.args))


def _close(a, b):
    return abs(a - b) <= 1e-12 * max(1.0, abs(a), abs(b))


@settings(max_examples=200, deadline=None)
@given(asts)
def test_pretty_round_trip_preserves_evaluation(e):
    again = parse_expr(pretty(e), d=3)
    rng = np.random.default_rng(0)
    for _ in range(100):
        t, x = rng.uniform(0, 2), rng.uniform(-2, 2, size=3)
        assert _close(eval_expr(e, t, x), eval_expr(again, t, x))


@settings(max_examples=200, deadline=None)
@given(asts, st.floats(0, 2), st.lists(st.floats(-2, 2), min_size=3, max_size=3))
def test_eval_matches_reference(e, t, x):
    assert _close(eval_expr(e, t, x), reference_eval(e, t, x))


@settings(max_examples=100, deadline=None)
@given(asts)
def test_compiled_vector_matches_scalar(e):
    f = compile_vector((e,), 3)
    rng = np.random.default_rng(1)
    X = rng.uniform(-2, 2, size=(16, 3))
    with np.errstate(all="ignore"):
        out = f(0.7, X)
    for row, v in zip(X, out[:, 0]):
        assert _close(eval_expr(e, 0.7, row), v)


def test_minimal_scenario_and_defaults():
    sc = parse_scenario(MINIMAL)
    assert sc.d == 1 and sc.x0 == (0.0,)
    assert sc.eps_grid == (0.1, 0.05)
    assert (sc.delta, sc.T, sc.dt_max, sc.n_paths, sc.master_seed) == (0.1, 1.0, 1e-3, 10000, 0)
    assert sc.on_plane


def test_scenario_full_keys_and_comments():
    sc = parse_scenario("""\
# a comment line
d = 2          # trailing comment
x0 = 0.5, 0
bplus = "1", "-x2 + sin(t)"
bminus = 0, "min(x1, 1)"
eps = 0.2
T = 2
delta = 0.25
dt_max = 1e-4
n_paths = 64
seed = 18446744073709551615
""")
    assert sc.bplus_text == ("1", "-x2 + sin(t)")
    assert (sc.T, sc.delta, sc.dt_max, sc.n_paths) == (2.0, 0.25, 1e-4, 64)
    assert sc.master_seed == 2**64 - 1


def test_reals_parse_bit_exact():
    sc = parse_scenario(MINIMAL.replace("x0 = 0", "x0 = 0.1"))
    assert sc.x0[0] == float("0.1")


def test_dimension_mismatch():
    text = MINIMAL.replace("d = 1", "d = 2").replace("x0 = 0", "x0 = 0, 0")
    text = text.replace('bplus = "1"', 'bplus = "1", "2", "3"').replace('bminus = "-1"', "bminus = 1, 2")
    with pytest.raises(DimensionMismatch):
        parse_scenario(text)


@pytest.mark.parametrize("key", ["d", "x0", "bplus", "bminus", "eps"])
def test_missing_keys(key):
    text = "\n".join(line for line in MINIMAL.splitlines() if not line.startswith(key + " "))
    with pytest.raises(MissingKey):
        parse_scenario(text)


@pytest.mark.parametrize("line", ["eps = 0.05, 0.1", "eps = 0.1, 0.1", "eps = -0.1", "delta = 0",
                                  "T = -1", "n_paths = 0", "seed = -1", "colour = red",
                                  "d = two", "checks = nonsense", "expect_case = Z9"])
def test_invalid_values(line):
    key = line.split("=")[0].strip()
    base = "\n".join(l for l in MINIMAL.splitlines() if not l.startswith(key + " "))
    with pytest.raises((InvalidValue, MissingKey)):
        parse_scenario(base + "\n" + line + "\n")


def test_duplicate_key_rejected():
    with pytest.raises(InvalidValue):
        parse_scenario(MINIMAL + "d = 1\n")


def test_overrides_replace_values_and_are_validated():
    sc = parse_scenario(MINIMAL, {"eps": "0.3,0.2,0.1", "delta": "0.5"})
    assert sc.eps_grid == (0.3, 0.2, 0.1) and sc.delta == 0.5
    with pytest.raises(InvalidValue):
        parse_scenario(MINIMAL, {"bogus": "1"})


def test_scenario_unknown_variable_in_drift():
    with pytest.raises(UnknownIdentifier):
        parse_scenario(MINIMAL.replace('bplus = "1"', 'bplus = "x2"'))
