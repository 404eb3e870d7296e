import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from _worked import WORKED_EXAMPLES
from treecalc.expr import (EvalFailure, Expr, Label, ParseError, branch_values, depth,
                           get_at, iter_paths, label_identity, leaf, numeric_eval, parse,
                           replace_at, to_infix, to_sexpr)
from treecalc.generate import sample_expression


@pytest.mark.parametrize("text,expected,_", WORKED_EXAMPLES)
def test_worked_example_depths(text, expected, _):
    assert depth(parse(text)) == expected


@pytest.mark.parametrize("text,_,expected", WORKED_EXAMPLES)
def test_worked_example_labels(text, _, expected):
    assert label_identity(parse(text), trials=16, tol=1e-6) is expected


def test_parse_folds_nary_right():
    e = parse("(+ 1 2 3)")
    assert e == Expr("+", (leaf("1"), Expr("+", (leaf("2"), leaf("3")))))


def test_aliases():
    assert parse("(eq (add x 1) (mul 2 (^ y 2)))") == parse("(= (+ x 1) (* 2 (pow y 2)))")


def test_depth_counts_leaves_and_skips_equality():
    assert depth(parse("(= x 1)")) == 1
    assert depth(parse("(= (sin x) 0)")) == 2
    assert depth(parse("(= (+ x (* y z)) w)")) == 3


@pytest.mark.parametrize("text,pos", [
    ("(+ 1", 0),
    ("(foo 1 2)", 1),
    ("(sin 1 2)", 1),
    ("(+ 1 2))", 7),
    ("", 0),
])
def test_parse_errors_carry_position(text, pos):
    with pytest.raises(ParseError) as info:
        parse(text)
    assert info.value.pos == pos


def test_arity_checked_on_construction():
    with pytest.raises(ValueError):
        Expr("sin", (leaf("x"), leaf("y")))
    with pytest.raises(ValueError):
        Expr("=", (leaf("x"),))


def test_infix_rendering():
    assert to_infix(parse("(= (+ x 0) x)")) == "(x + 0) = x"
    assert to_infix(parse("(pow (sin x) 2)")) == "sin(x)^2"


def test_paths_and_replacement():
    e = parse("(= (sin x) (cos y))")
    paths = dict(iter_paths(e))
    assert paths[(1, 0)] == leaf("y")
    assert get_at(e, (0,)) == parse("(sin x)")
    assert replace_at(e, (1, 0), leaf("x")) == parse("(= (sin x) (cos x))")


def test_round_trip_on_sampled_expressions():
    rng = np.random.default_rng(0)
    for _ in range(1000):
        e = sample_expression(rng, int(rng.integers(1, 6)))
        assert parse(to_sexpr(e)) == e


@settings(max_examples=100, deadline=None)
@given(st.integers(0, 2**31 - 1), st.integers(1, 5))
def test_round_trip_property(seed, height):
    e = sample_expression(np.random.default_rng(seed), height)
    assert parse(to_sexpr(e)) == e
    assert e.height() <= height


def test_numeric_eval_basics():
    e = parse("(+ (pow x 2) (* -1 (sqrt 4)))")
    assert numeric_eval(e, {"x": 3.0}) == pytest.approx(7.0)
    assert numeric_eval(parse("(sec 0)"), {}) == pytest.approx(1.0)
    assert numeric_eval(parse("pi"), {}) == math.pi


def test_domain_violations():
    with pytest.raises(EvalFailure):
        numeric_eval(parse("(sqrt -1)"), {})
    with pytest.raises(EvalFailure):
        numeric_eval(parse("(pow 0 -1)"), {})
    with pytest.raises(EvalFailure):
        numeric_eval(parse("(csc 0)"), {})


def test_radicals_take_both_signs():
    assert sorted(branch_values(parse("(sqrt 4)"), {})) == [-2.0, 2.0]
    assert branch_values(parse("(sqrt 0)"), {}) == [0.0]


def test_simple_labels():
    assert label_identity(parse("(= (* x y) (* y x))")) is Label.CORRECT
    assert label_identity(parse("(= (+ x 1) x)")) is Label.INCORRECT
    assert label_identity(parse("(= (pow (sin x) 2) (+ 1 (* -1 (pow (cos x) 2))))")) is Label.CORRECT


def test_label_is_symmetric():
    a = parse("(= (tan x) (* (sin x) (sec x)))")
    b = parse("(= (* (sin x) (sec x)) (tan x))")
    assert label_identity(a, seed=3) is label_identity(b, seed=3)


def test_everywhere_undefined_is_undecided():
    assert label_identity(parse("(= (sqrt (+ (* -1 4) (* -1 (pow x 2)))) 0)")) is Label.UNDECIDED


def test_label_needs_equation():
    with pytest.raises(ValueError):
        label_identity(parse("(+ x 1)"))
