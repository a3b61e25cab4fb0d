from __future__ import annotations

from fractions import Fraction

import pytest

from fperr import symbolic as S


def test_expansion_cancels():
    x, y = S.var("x"), S.var("y")
    e = (x + y) * (x - y)
    assert str(e) == "x^2 - y^2"
    assert ((x + y) - y - x).is_zero


def test_pow_of_repeated_product():
    assert S.canonicalize(("*", "x", "x", "x")) == S.pow_int(S.var("x"), 3)


def test_quotient_stays_a_monomial():
    e = S.canonicalize(("*", ("/", "a", "w"), ("/", "a", "w")))
    assert e.is_monomial
    assert str(e) == "a^2*w^-2"


def test_canonicalize_is_idempotent_on_sym_expr():
    e = S.canonicalize(("+", ("*", "x", "y"), ("sin", "x")))
    assert S.canonicalize(e) is e


def test_key_is_order_independent():
    a = S.canonicalize(("+", ("*", 2, "x"), "y"))
    b = S.canonicalize(("+", "y", ("*", "x", 2)))
    assert a == b and a.key == b.key and hash(a) == hash(b)


def test_exact_rational_coefficients():
    e = S.canonicalize(("*", 0.1, "x"))
    (c,) = e.terms.values()
    assert c == Fraction(0.1)


def test_diff_chain_rule():
    e = S.canonicalize(("sin", ("*", "x", "y")))
    assert str(S.diff(e, "x")) == "cos(x*y)*y"
    assert S.diff(S.pow_int(S.var("x"), 3), "x") == S.canonicalize(("*", 3, ("pow", "x", 2)))


def test_diff_of_inverse():
    e = S.inv(S.var("x") + S.var("y"))
    d = S.diff(e, "x")
    v = S.eval_point(d, {"x": 1.0, "y": 1.0})
    assert float(v) == -0.25


def test_abs_derivative_is_the_sign():
    d = S.diff(S.sym_abs(S.var("x")), "x")
    assert float(S.eval_point(d, {"x": -3.0})) == -1.0
    assert float(S.eval_point(d, {"x": 2.0})) == 1.0


def test_unknown_primitive_is_non_differentiable():
    with pytest.raises(S.NonDifferentiable):
        S.diff_primitive("floor", 0, [S.var("x")])


def test_eval_point_high_precision():
    e = S.canonicalize(("+", "x", ("*", -1, "x"), 1e-30))
    assert S.eval_point(e, {"x": 1e30}) == pytest.approx(1e-30)


def test_eval_domain_error():
    with pytest.raises(S.EvalDomain):
        S.eval_point(S.inv(S.var("x")), {"x": 0.0})


def test_op_count_grows_with_terms():
    x, y = S.var("x"), S.var("y")
    assert (x + y).op_count() < ((x + y) * (x + y)).op_count()


def test_exact_sqrt_of_square_constant():
    assert S.sqrt(S.const(Fraction(9, 4))) == S.const(Fraction(3, 2))
    assert not S.sqrt(S.const(2)).is_const


def test_substitute():
    e = S.canonicalize(("*", "x", "x"))
    r = S.substitute(e, {"x": S.var("y") + S.const(1)})
    assert r == S.canonicalize(("+", ("*", "y", "y"), ("*", 2, "y"), 1))


def test_throttled_multiplication_keeps_factored_form():
    a = S.add_all(S.var(f"x{i}") for i in range(40))
    b = S.add_all(S.var(f"y{i}") for i in range(40))
    full = a * b
    small = S.mul_throttled(a, b, 100)
    assert small.op_count() < full.op_count()
    pt = {**{f"x{i}": i + 1.0 for i in range(40)}, **{f"y{i}": 0.5 for i in range(40)}}
    assert S.eval_point(small, pt) == S.eval_point(full, pt)
