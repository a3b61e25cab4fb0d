from __future__ import annotations

import math
from fractions import Fraction

import gmpy2
import numpy as np
import pytest

from fperr.interval import (
    DomainViolation,
    Interval,
    add_rd,
    apply_batched,
    interval_apply,
    iv_hull,
    iv_split,
    mul_rd,
)


def test_exact_results_stay_exact():
    assert Interval(1.0, 2.0) + Interval(3.0, 4.0) == Interval(4.0, 6.0)
    assert Interval(-1.0, 2.0) * Interval(3.0, 4.0) == Interval(-4.0, 8.0)
    assert Interval(1.0, 2.0) / Interval(4.0, 8.0) == Interval(0.125, 0.5)


def test_inexact_sum_is_widened_outward():
    r = Interval.point(0.1) + Interval.point(0.2)
    exact = Fraction(0.1) + Fraction(0.2)
    assert Fraction(r.lo) <= exact <= Fraction(r.hi)
    assert r.lo < r.hi
    assert np.nextafter(r.lo, np.inf) == r.hi


def test_directed_helpers():
    lo, hi = add_rd(np.array([1.0]), np.array([2.0**-60]))
    assert lo[0] == 1.0 and hi[0] == np.nextafter(1.0, 2.0)
    lo, hi = mul_rd(np.array([3.0]), np.array([1 / 3]))
    assert Fraction(lo[0]) <= Fraction(3) * Fraction(1 / 3) <= Fraction(hi[0])


def test_division_by_interval_containing_zero():
    with pytest.raises(DomainViolation):
        Interval(1.0, 2.0) / Interval(-1.0, 1.0)


def test_sqrt_and_log_domain():
    assert interval_apply("sqrt", [Interval(4.0, 9.0)]) == Interval(2.0, 3.0)
    with pytest.raises(DomainViolation):
        interval_apply("log", [Interval(-1.0, 1.0)])


def test_even_power_is_tight_around_zero():
    assert interval_apply("pow", [Interval(-1.0, 5.0)], 3) == Interval(-1.0, 125.0)
    assert interval_apply("pow", [Interval(-2.0, 1.0)], 2) == Interval(0.0, 4.0)


def test_trig_ranges_contain_extrema():
    s = interval_apply("sin", [Interval(0.0, 4.0)])
    assert s.hi >= 1.0 and s.lo <= math.sin(4.0)
    c = interval_apply("cos", [Interval(3.0, 3.5)])
    assert c.lo <= -1.0


def test_hull_and_split():
    a, b = iv_split(Interval(0.0, 1.0))
    assert a.hi == b.lo == 0.5
    assert iv_hull(a, b) == Interval(0.0, 1.0)


def test_invalid_interval():
    with pytest.raises(ValueError):
        Interval(2.0, 1.0)


_OPS = {
    "add": lambda a, b: a + b,
    "sub": lambda a, b: a - b,
    "mul": lambda a, b: a * b,
    "div": lambda a, b: a / b,
}


def _random_box(rng, n):
    scale = 10.0 ** rng.integers(-8, 9, size=n)
    a = rng.uniform(-1, 1, n) * scale
    b = rng.uniform(-1, 1, n) * scale
    return np.minimum(a, b), np.maximum(a, b)


def test_containment_fuzzing():
    # 10^4 random (op, box, point) cases checked with exact rational arithmetic
    rng = np.random.default_rng(7)
    n = 2500
    for op, f in _OPS.items():
        al, ah = _random_box(rng, n)
        bl, bh = _random_box(rng, n)
        if op == "div":
            # keep the divisor away from zero
            bl, bh = np.abs(bl) + 0.5, np.abs(bh) + 1.0
        lo, hi, bad = apply_batched(op, [(al, ah), (bl, bh)])
        assert not bad.any()
        x = al + (ah - al) * rng.random(n)
        y = bl + (bh - bl) * rng.random(n)
        for i in range(n):
            exact = f(Fraction(float(x[i])), Fraction(float(y[i])))
            assert Fraction(float(lo[i])) <= exact <= Fraction(float(hi[i])), (op, i)


def test_unary_containment_against_mpfr():
    rng = np.random.default_rng(3)
    n = 500
    a = rng.uniform(0.01, 20.0, n)
    b = a + rng.uniform(0.0, 2.0, n)
    x = a + (b - a) * rng.random(n)
    with gmpy2.context(precision=200):
        for op in ("sqrt", "exp", "log", "sin", "cos"):
            lo, hi, bad = apply_batched(op, [(a, b)])
            assert not bad.any()
            fn = getattr(gmpy2, op)
            for i in range(n):
                v = fn(gmpy2.mpfr(float(x[i])))
                assert lo[i] <= v <= hi[i], (op, i)
