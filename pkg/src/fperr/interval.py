"""Outward-rounded interval arithmetic.

The batched functions work on numpy float64 arrays of endpoints and are what
the optimizer uses. Directed rounding is emulated with error-free
transformations (TwoSum / Dekker's TwoProduct): when the rounding error of a
nearest-rounded result has the wrong sign, the result is moved by one ulp.
Exact results therefore stay exact.  Where the transformation is not valid
(overflow, underflow), both endpoints are inflated by one ulp instead.

The scalar :class:`Interval` is a thin wrapper over the batched code.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

INF = np.inf
MAXF = np.finfo(np.float64).max
_SPLIT = 134217729.0  # 2**27 + 1
_BIG = 2.0**995
_TINY = 2.0**-960
# relative widening for numpy's transcendental kernels (a few ulps is enough;
# we take 2**-48 ~ 32 ulps to stay safe across SIMD implementations)
_TRANS_REL = 2.0**-48
_TRANS_ABS = 1e-300
_TWO_PI = 2.0 * math.pi
_TRIG_LIMIT = 1e6


class DomainViolation(ArithmeticError):
    """An interval operation's precondition failed (e.g. 0 in a denominator)."""

    def __init__(self, op: str, detail: str = ""):
        self.op = op
        super().__init__(f"domain violation in {op}" + (f": {detail}" if detail else ""))


def _arr(x) -> np.ndarray:
    return np.asarray(x, dtype=np.float64)


def _down(x):
    return np.nextafter(x, -INF)


def _up(x):
    return np.nextafter(x, INF)


def _clean(lo, hi):
    """Replace NaN/overflowed endpoints by sound values."""
    lo = np.where(np.isnan(lo), -INF, lo)
    hi = np.where(np.isnan(hi), INF, hi)
    lo = np.where(lo == INF, MAXF, lo)
    hi = np.where(hi == -INF, -MAXF, hi)
    return lo, hi


def two_sum(a, b):
    s = a + b
    bb = s - a
    e = (a - (s - bb)) + (b - bb)
    return s, e


def _split(a):
    c = _SPLIT * a
    hi = c - (c - a)
    return hi, a - hi


def two_prod(a, b):
    p = a * b
    ah, al = _split(a)
    bh, bl = _split(b)
    e = ((ah * bh - p) + ah * bl + al * bh) + al * bl
    return p, e


def _round_pair(x, err, valid):
    """Directed (down, up) results from a nearest result and its error sign."""
    with np.errstate(invalid="ignore"):
        dn = np.where(valid, np.where(err < 0, _down(x), x), _down(x))
        up = np.where(valid, np.where(err > 0, _up(x), x), _up(x))
    return dn, up


def add_rd(a, b):
    s, e = two_sum(a, b)
    ok = np.isfinite(s) & np.isfinite(e)
    return _round_pair(s, e, ok)


def mul_rd(a, b):
    p, e = two_prod(a, b)
    ap = np.abs(p)
    ok = (np.abs(a) < _BIG) & (np.abs(b) < _BIG) & ((ap > _TINY) | (a == 0) | (b == 0))
    return _round_pair(p, e, ok)


def div_rd(a, b):
    q = a / b
    ph, pl = two_prod(q, b)
    r = (a - ph) - pl
    aq = np.abs(q)
    ok = (np.abs(a) < _BIG) & (np.abs(b) < _BIG) & (np.abs(b) > _TINY) & ((aq > _TINY) | (a == 0)) & np.isfinite(q)
    sgn = np.sign(r) * np.sign(b)
    return _round_pair(q, sgn, ok)


def sqrt_rd(a):
    s = np.sqrt(np.maximum(a, 0.0))
    ph, pl = two_prod(s, s)
    d = (a - ph) - pl
    ok = (a > _TINY) & (a < _BIG)
    dn, up = _round_pair(s, d, ok)
    return np.maximum(dn, 0.0), up


# ---------------------------------------------------------------------------
# batched interval operations: each returns (lo, hi) or (lo, hi, bad)


def iadd(al, ah, bl, bh):
    lo, _ = add_rd(al, bl)
    _, hi = add_rd(ah, bh)
    return _clean(lo, hi)


def isub(al, ah, bl, bh):
    lo, _ = add_rd(al, -bh)
    _, hi = add_rd(ah, -bl)
    return _clean(lo, hi)


def ineg(al, ah):
    return -ah, -al


def imul(al, ah, bl, bh):
    with np.errstate(invalid="ignore", over="ignore"):
        d1, u1 = mul_rd(al, bl)
        d2, u2 = mul_rd(al, bh)
        d3, u3 = mul_rd(ah, bl)
        d4, u4 = mul_rd(ah, bh)
    lo = np.minimum(np.minimum(d1, d2), np.minimum(d3, d4))
    hi = np.maximum(np.maximum(u1, u2), np.maximum(u3, u4))
    return _clean(lo, hi)


def _zero_crossing(bl, bh):
    return (bl <= 0) & (bh >= 0)


def idiv(al, ah, bl, bh):
    bad = _zero_crossing(bl, bh)
    sbl = np.where(bad, 1.0, bl)
    sbh = np.where(bad, 1.0, bh)
    with np.errstate(invalid="ignore", over="ignore", divide="ignore"):
        d1, u1 = div_rd(al, sbl)
        d2, u2 = div_rd(al, sbh)
        d3, u3 = div_rd(ah, sbl)
        d4, u4 = div_rd(ah, sbh)
    lo = np.minimum(np.minimum(d1, d2), np.minimum(d3, d4))
    hi = np.maximum(np.maximum(u1, u2), np.maximum(u3, u4))
    lo, hi = _clean(lo, hi)
    return np.where(bad, -INF, lo), np.where(bad, INF, hi), bad


def iinv(al, ah):
    one = np.ones_like(al)
    return idiv(one, one, al, ah)


def _pow_pos(x, k, direction):
    """x**k for x >= 0 with rounding in one direction (binary powering)."""
    result = np.ones_like(x)
    base = x.copy()
    pick = 0 if direction < 0 else 1
    with np.errstate(over="ignore", invalid="ignore"):
        while k:
            if k & 1:
                result = mul_rd(result, base)[pick]
            k >>= 1
            if k:
                base = mul_rd(base, base)[pick]
    return result


def ipow(al, ah, k: int):
    """Integer power, tight (accounts for the single variable occurrence)."""
    if k == 0:
        one = np.ones_like(al)
        return one, one.copy(), np.zeros(al.shape, dtype=bool)
    if k < 0:
        pl, ph, _ = ipow(al, ah, -k)
        return iinv(pl, ph)
    if k == 1:
        return al.copy(), ah.copy(), np.zeros(al.shape, dtype=bool)
    if k % 2 == 0:
        mig = np.where((al <= 0) & (ah >= 0), 0.0, np.minimum(np.abs(al), np.abs(ah)))
        mag = np.maximum(np.abs(al), np.abs(ah))
        lo = _pow_pos(mig, k, -1)
        hi = _pow_pos(mag, k, 1)
    else:
        # odd power is monotone; x**k = -(-x)**k for negative x
        lo = np.where(al >= 0, _pow_pos(np.abs(al), k, -1), -_pow_pos(np.abs(al), k, 1))
        hi = np.where(ah >= 0, _pow_pos(np.abs(ah), k, 1), -_pow_pos(np.abs(ah), k, -1))
    lo, hi = _clean(lo, hi)
    return lo, hi, np.zeros(al.shape, dtype=bool)


def iabs(al, ah):
    lo = np.where(al >= 0, al, np.where(ah <= 0, -ah, 0.0))
    hi = np.maximum(np.abs(al), np.abs(ah))
    return lo, hi


def isqrt(al, ah):
    bad = al < 0
    lo, _ = sqrt_rd(np.where(bad, 0.0, al))
    _, hi = sqrt_rd(np.where(bad, 0.0, ah))
    return lo, np.where(bad, INF, hi), bad


def _widen(lo, hi):
    lo = lo - np.abs(lo) * _TRANS_REL - _TRANS_ABS
    hi = hi + np.abs(hi) * _TRANS_REL + _TRANS_ABS
    return lo, hi


def iexp(al, ah):
    with np.errstate(over="ignore"):
        lo, hi = _widen(np.exp(al), np.exp(ah))
    return np.maximum(lo, 0.0), hi


def ilog(al, ah):
    bad = al <= 0
    with np.errstate(divide="ignore", invalid="ignore"):
        lo, hi = _widen(np.log(np.where(bad, 1.0, al)), np.log(np.where(bad, 1.0, ah)))
    return np.where(bad, -INF, lo), np.where(bad, INF, hi), bad


def _contains_phase(al, ah, phase):
    """Does [al, ah] contain a point phase + 2*k*pi (with a safety margin)?"""
    k = np.ceil((al - phase) / _TWO_PI - 1e-9)
    pt = phase + _TWO_PI * k
    margin = 1e-9 * np.maximum(1.0, np.abs(pt))
    return pt <= ah + margin


def isin(al, ah):
    full = (ah - al >= _TWO_PI) | (np.abs(al) > _TRIG_LIMIT) | (np.abs(ah) > _TRIG_LIMIT)
    sl, sh = np.sin(al), np.sin(ah)
    lo, hi = _widen(np.minimum(sl, sh), np.maximum(sl, sh))
    hi = np.where(_contains_phase(al, ah, math.pi / 2), 1.0, hi)
    lo = np.where(_contains_phase(al, ah, -math.pi / 2), -1.0, lo)
    lo = np.where(full, -1.0, np.maximum(lo, -1.0))
    hi = np.where(full, 1.0, np.minimum(hi, 1.0))
    return lo, hi


def icos(al, ah):
    full = (ah - al >= _TWO_PI) | (np.abs(al) > _TRIG_LIMIT) | (np.abs(ah) > _TRIG_LIMIT)
    cl, ch = np.cos(al), np.cos(ah)
    lo, hi = _widen(np.minimum(cl, ch), np.maximum(cl, ch))
    hi = np.where(_contains_phase(al, ah, 0.0), 1.0, hi)
    lo = np.where(_contains_phase(al, ah, math.pi), -1.0, lo)
    lo = np.where(full, -1.0, np.maximum(lo, -1.0))
    hi = np.where(full, 1.0, np.minimum(hi, 1.0))
    return lo, hi


def apply_batched(op: str, args, k: int | None = None):
    """Dispatch by op name on batched endpoints; returns (lo, hi, bad)."""
    if op in ("add", "+"):
        lo, hi = iadd(*args[0], *args[1])
    elif op in ("sub", "-"):
        lo, hi = isub(*args[0], *args[1])
    elif op in ("mul", "*"):
        lo, hi = imul(*args[0], *args[1])
    elif op in ("div", "/"):
        return idiv(*args[0], *args[1])
    elif op == "neg":
        lo, hi = ineg(*args[0])
    elif op == "inv":
        return iinv(*args[0])
    elif op == "pow":
        return ipow(*args[0], k)
    elif op == "sqrt":
        return isqrt(*args[0])
    elif op == "log":
        return ilog(*args[0])
    elif op == "exp":
        lo, hi = iexp(*args[0])
    elif op == "sin":
        lo, hi = isin(*args[0])
    elif op == "cos":
        lo, hi = icos(*args[0])
    elif op == "abs":
        lo, hi = iabs(*args[0])
    else:
        raise ValueError(f"unknown interval op {op!r}")
    return lo, hi, np.zeros(np.shape(lo), dtype=bool)


# ---------------------------------------------------------------------------
# scalar interval


@dataclass(frozen=True)
class Interval:
    lo: float
    hi: float

    def __post_init__(self):
        object.__setattr__(self, "lo", float(self.lo))
        object.__setattr__(self, "hi", float(self.hi))
        if not (self.lo <= self.hi):
            raise ValueError(f"invalid interval [{self.lo}, {self.hi}]")

    @classmethod
    def point(cls, x: float) -> Interval:
        return cls(float(x), float(x))

    def _b(self):
        return (np.array([self.lo]), np.array([self.hi]))

    @staticmethod
    def _wrap(lo, hi) -> Interval:
        return Interval(float(lo[0]), float(hi[0]))

    def __add__(self, other):
        return interval_apply("add", [self, _as_iv(other)])

    __radd__ = __add__

    def __sub__(self, other):
        return interval_apply("sub", [self, _as_iv(other)])

    def __rsub__(self, other):
        return interval_apply("sub", [_as_iv(other), self])

    def __mul__(self, other):
        return interval_apply("mul", [self, _as_iv(other)])

    __rmul__ = __mul__

    def __truediv__(self, other):
        return interval_apply("div", [self, _as_iv(other)])

    def __neg__(self):
        return Interval(-self.hi, -self.lo)

    def __contains__(self, p) -> bool:
        return iv_contains(self, p)

    def __repr__(self):
        return f"[{self.lo!r}, {self.hi!r}]"

    @property
    def mid(self) -> float:
        return iv_split(self)[0].hi


def _as_iv(x) -> Interval:
    return x if isinstance(x, Interval) else Interval.point(x)


def interval_apply(op: str, args: list[Interval], k: int | None = None) -> Interval:
    """Outward-rounded enclosure of op over the argument intervals."""
    lo, hi, bad = apply_batched(op, [a._b() for a in args], k)
    if bad.any():
        raise DomainViolation(op, ", ".join(map(repr, args)))
    return Interval._wrap(lo, hi)


def iv_mag(x: Interval) -> float:
    return max(abs(x.lo), abs(x.hi))


def iv_width(x: Interval) -> float:
    w = x.hi - x.lo
    _, up = add_rd(np.array([x.hi]), np.array([-x.lo]))
    return float(up[0]) if np.isfinite(up[0]) else w


def iv_contains(x: Interval, p) -> bool:
    return x.lo <= p <= x.hi


def iv_hull(a: Interval, b: Interval) -> Interval:
    return Interval(min(a.lo, b.lo), max(a.hi, b.hi))


def iv_split(x: Interval, frac: float = 0.5) -> tuple[Interval, Interval]:
    m = x.lo * (1.0 - frac) + x.hi * frac
    m = min(max(m, x.lo), x.hi)
    return Interval(x.lo, m), Interval(m, x.hi)
