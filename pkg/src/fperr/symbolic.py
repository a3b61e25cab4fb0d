"""Canonical symbolic expressions.

A :class:`SymExpr` is an expanded sum of monomials with exact rational
coefficients.  A monomial is a sorted tuple of ``(atom, exponent)`` pairs; an
exponent may be negative, which is how ``a/w`` stays a monomial and why the
DQMOM expression collapses to ``3*a0^2*m0*w0^-1 + ...``.

Atoms are variables or opaque kernels (``inv``, ``sqrt``, ``sin``, ``cos``,
``exp``, ``log``, ``abs``, and ``fac``, an unexpanded product kept when
expansion would be too large).  Atoms are interned by their canonical key, so
identity comparison is structural equality.
"""

from __future__ import annotations

import math
import threading
from fractions import Fraction
from typing import Callable, Iterable, Mapping

import gmpy2
import numpy as np

Coeff = int | Fraction

HARD_TERM_CEILING = 2_000_000


class ExpressionTooLarge(RuntimeError):
    pass


class EvalDomain(ArithmeticError):
    pass


class NonDifferentiable(ValueError):
    pass


def _norm(c: Coeff) -> Coeff:
    if isinstance(c, Fraction) and c.denominator == 1:
        return int(c.numerator)
    return c


def as_coeff(x) -> Coeff:
    """Exact rational for an int, float, Fraction or decimal string."""
    if isinstance(x, bool):
        return int(x)
    if isinstance(x, int):
        return x
    if isinstance(x, (float, str)):
        return _norm(Fraction(x))
    if isinstance(x, Fraction):
        return _norm(x)
    raise TypeError(f"not a coefficient: {x!r}")


def _fmt_coeff(c: Coeff) -> str:
    if isinstance(c, Fraction):
        return f"{c.numerator}/{c.denominator}"
    return str(c)


# ---------------------------------------------------------------------------
# atoms

_INTERN: dict[str, "Atom"] = {}
_INTERN_LOCK = threading.Lock()

KERNELS = ("inv", "sqrt", "sin", "cos", "exp", "log", "abs", "fac")


class Atom:
    __slots__ = ("key", "kind", "name", "args", "_hash", "_vars")

    def __init__(self, key: str, kind: str, name: str | None, args: tuple):
        self.key = key
        self.kind = kind
        self.name = name
        self.args = args
        self._hash = hash(key)
        self._vars = None

    def __hash__(self):
        return self._hash

    def __eq__(self, other):
        return self is other

    def __lt__(self, other):
        return self.key < other.key

    def __repr__(self):
        return self.key

    @property
    def is_var(self) -> bool:
        return self.kind == "var"

    def variables(self) -> frozenset[str]:
        if self._vars is None:
            if self.kind == "var":
                self._vars = frozenset((self.name,))
            else:
                out: set[str] = set()
                for a in self.args:
                    out |= a.variables()
                self._vars = frozenset(out)
        return self._vars


def _intern(key: str, kind: str, name, args) -> Atom:
    a = _INTERN.get(key)
    if a is None:
        with _INTERN_LOCK:
            a = _INTERN.get(key)
            if a is None:
                a = Atom(key, kind, name, args)
                _INTERN[key] = a
    return a


def var_atom(name: str) -> Atom:
    return _intern(name, "var", name, ())


def kernel_atom(kind: str, args: tuple["SymExpr", ...]) -> Atom:
    if kind == "fac":
        args = tuple(sorted(args, key=lambda e: e.key))
    key = f"{kind}(" + ", ".join(a.key for a in args) + ")"
    return _intern(key, kind, None, args)


# ---------------------------------------------------------------------------
# monomials: tuple of (atom, exp) sorted by atom key

Monomial = tuple


def _mono_mul(m1: Monomial, m2: Monomial) -> Monomial:
    if not m1:
        return m2
    if not m2:
        return m1
    d = dict(m1)
    for a, k in m2:
        nk = d.get(a, 0) + k
        if nk:
            d[a] = nk
        else:
            del d[a]
    return tuple(sorted(d.items(), key=lambda p: p[0].key))


def _mono_key(m: Monomial) -> str:
    return "*".join(a.key if k == 1 else f"{a.key}^{k}" for a, k in m)


def _mono_pow(m: Monomial, k: int) -> Monomial:
    return tuple((a, e * k) for a, e in m)


# ---------------------------------------------------------------------------


class SymExpr:
    """Immutable canonical sum of rational-coefficient monomials."""

    __slots__ = ("terms", "_key", "_hash", "_ops", "_vars")

    def __init__(self, terms: dict[Monomial, Coeff]):
        self.terms = terms
        self._key = None
        self._hash = None
        self._ops = None
        self._vars = None

    # -- construction ------------------------------------------------------
    @staticmethod
    def const(c) -> SymExpr:
        c = as_coeff(c)
        return SymExpr({(): c}) if c else ZERO

    @staticmethod
    def var(name: str) -> SymExpr:
        return SymExpr({((var_atom(name), 1),): 1})

    @staticmethod
    def atom(a: Atom, k: int = 1) -> SymExpr:
        return SymExpr({((a, k),): 1})

    # -- inspection --------------------------------------------------------
    @property
    def key(self) -> str:
        """Deterministic serialization; the identity used for hashing."""
        if self._key is None:
            if not self.terms:
                self._key = "0"
            else:
                parts = []
                for mk, m, c in sorted((_mono_key(m), m, c) for m, c in self.terms.items()):
                    if not m:
                        parts.append(_fmt_coeff(c))
                    elif c == 1:
                        parts.append(mk)
                    elif c == -1:
                        parts.append("-" + mk)
                    else:
                        parts.append(f"{_fmt_coeff(c)}*{mk}")
                self._key = " + ".join(parts).replace("+ -", "- ")
        return self._key

    def __str__(self):
        return self.key

    def __repr__(self):
        return f"SymExpr({self.key})"

    def __hash__(self):
        if self._hash is None:
            self._hash = hash(self.key)
        return self._hash

    def __eq__(self, other):
        if not isinstance(other, SymExpr):
            if isinstance(other, (int, float, Fraction)):
                return self.is_const and self.const_value == other
            return NotImplemented
        return self is other or self.terms == other.terms

    def __len__(self):
        return len(self.terms)

    @property
    def is_zero(self) -> bool:
        return not self.terms

    @property
    def is_const(self) -> bool:
        return not self.terms or (len(self.terms) == 1 and () in self.terms)

    @property
    def const_value(self) -> Coeff:
        return self.terms.get((), 0)

    @property
    def is_monomial(self) -> bool:
        return len(self.terms) == 1

    def atoms(self) -> set[Atom]:
        return {a for m in self.terms for a, _ in m}

    def variables(self) -> frozenset[str]:
        if self._vars is None:
            out: set[str] = set()
            for m in self.terms:
                for a, _ in m:
                    out |= a.variables()
            self._vars = frozenset(out)
        return self._vars

    def leading_coeff(self) -> Coeff:
        if not self.terms:
            return 0
        return min((_mono_key(m), c) for m, c in self.terms.items())[1]

    # -- arithmetic ----------------------------------------------------------
    def __add__(self, other) -> SymExpr:
        other = _lift(other)
        if not other.terms:
            return self
        if not self.terms:
            return other
        a, b = (self, other) if len(self.terms) >= len(other.terms) else (other, self)
        d = dict(a.terms)
        for m, c in b.terms.items():
            nc = d.get(m, 0) + c
            if nc:
                d[m] = _norm(nc)
            else:
                del d[m]
        return SymExpr(d)

    __radd__ = __add__

    def __neg__(self) -> SymExpr:
        return SymExpr({m: -c for m, c in self.terms.items()})

    def __sub__(self, other) -> SymExpr:
        return self + (-_lift(other))

    def __rsub__(self, other) -> SymExpr:
        return _lift(other) + (-self)

    def scale(self, c) -> SymExpr:
        c = as_coeff(c)
        if c == 0:
            return ZERO
        if c == 1:
            return self
        return SymExpr({m: _norm(v * c) for m, v in self.terms.items()})

    def __mul__(self, other) -> SymExpr:
        other = _lift(other)
        if other.is_const:
            return self.scale(other.const_value)
        if self.is_const:
            return other.scale(self.const_value)
        n = len(self.terms) * len(other.terms)
        if n > HARD_TERM_CEILING:
            raise ExpressionTooLarge(f"product of {len(self.terms)} x {len(other.terms)} terms")
        d: dict = {}
        for m1, c1 in self.terms.items():
            for m2, c2 in other.terms.items():
                m = _mono_mul(m1, m2)
                nc = d.get(m, 0) + c1 * c2
                if nc:
                    d[m] = nc
                else:
                    del d[m]
        return SymExpr({m: _norm(c) for m, c in d.items()})

    __rmul__ = __mul__

    def __truediv__(self, other) -> SymExpr:
        return self * inv(_lift(other))

    def __rtruediv__(self, other) -> SymExpr:
        return _lift(other) * inv(self)

    def __pow__(self, k: int) -> SymExpr:
        return pow_int(self, k)

    # -- derived ------------------------------------------------------------
    def op_count(self) -> int:
        if self._ops is None:
            self._ops = _op_count(self)
        return self._ops


ZERO = SymExpr({})
ONE = SymExpr({(): 1})


def _lift(x) -> SymExpr:
    if isinstance(x, SymExpr):
        return x
    return SymExpr.const(x)


def const(c) -> SymExpr:
    return SymExpr.const(c)


def var(name: str) -> SymExpr:
    return SymExpr.var(name)


def add_all(items: Iterable[SymExpr]) -> SymExpr:
    d: dict = {}
    for e in items:
        for m, c in e.terms.items():
            d[m] = d.get(m, 0) + c
    return SymExpr({m: _norm(c) for m, c in d.items() if c})


# ---------------------------------------------------------------------------
# kernels and constructors


def pow_int(e: SymExpr, k: int) -> SymExpr:
    if k < 0:
        return inv(pow_int(e, -k))
    if k == 0:
        return ONE
    if e.is_monomial:
        (m, c), = e.terms.items()
        return SymExpr({_mono_pow(m, k): _norm(Fraction(c) ** k)})
    result, base = ONE, e
    while k:
        if k & 1:
            result = result * base
        k >>= 1
        if k:
            base = base * base
    return result


def _primitive(e: SymExpr) -> tuple[Coeff, SymExpr]:
    """Split e = lc * p with p's leading coefficient 1."""
    lc = e.leading_coeff()
    if lc == 1:
        return 1, e
    return lc, e.scale(Fraction(1) / Fraction(lc))


def inv(b: SymExpr) -> SymExpr:
    if b.is_zero:
        raise EvalDomain("division by the zero expression")
    if b.is_monomial:
        (m, c), = b.terms.items()
        return SymExpr({_mono_pow(m, -1): _norm(Fraction(1) / Fraction(c))})
    lc, p = _primitive(b)
    return SymExpr.atom(kernel_atom("inv", (p,))).scale(Fraction(1) / Fraction(lc))


def _exact_sqrt(c: Coeff) -> Coeff | None:
    c = Fraction(c)
    if c < 0:
        return None
    n, d = math.isqrt(c.numerator), math.isqrt(c.denominator)
    if n * n == c.numerator and d * d == c.denominator:
        return _norm(Fraction(n, d))
    return None


def sqrt(e: SymExpr) -> SymExpr:
    if e.is_const:
        r = _exact_sqrt(e.const_value)
        if r is not None:
            return SymExpr.const(r)
    return SymExpr.atom(kernel_atom("sqrt", (e,)))


def _unary_kernel(kind: str) -> Callable[[SymExpr], SymExpr]:
    def build(e: SymExpr) -> SymExpr:
        if kind == "exp" and e.is_zero:
            return ONE
        if kind in ("sin",) and e.is_zero:
            return ZERO
        if kind == "cos" and e.is_zero:
            return ONE
        if kind == "log" and e == ONE:
            return ZERO
        return SymExpr.atom(kernel_atom(kind, (e,)))

    build.__name__ = kind
    return build


sin = _unary_kernel("sin")
cos = _unary_kernel("cos")
exp = _unary_kernel("exp")
log = _unary_kernel("log")


def sym_abs(e: SymExpr) -> SymExpr:
    """|e| with the rational content and even powers pulled out."""
    if e.is_const:
        return SymExpr.const(abs(e.const_value))
    if e.is_monomial:
        (m, c), = e.terms.items()
        even = tuple((a, k) for a, k in m if k % 2 == 0)
        odd = tuple((a, k) for a, k in m if k % 2)
        out = SymExpr({even: _norm(abs(c))})
        if odd:
            out = out * SymExpr.atom(kernel_atom("abs", (SymExpr({odd: 1}),)))
        return out
    lc, p = _primitive(e)
    return SymExpr.atom(kernel_atom("abs", (p,))).scale(abs(lc))


def fac(a: SymExpr, b: SymExpr) -> SymExpr:
    """Unexpanded product a*b (used when expansion would be too large)."""
    if a.is_const or b.is_const or a.is_monomial or b.is_monomial:
        return a * b
    ca, pa = _primitive(a)
    cb, pb = _primitive(b)
    return SymExpr.atom(kernel_atom("fac", (pa, pb))).scale(_norm(Fraction(ca) * Fraction(cb)))


def mul_throttled(a: SymExpr, b: SymExpr, max_ops: int | None) -> SymExpr:
    """a*b expanded unless the estimated expanded size exceeds max_ops."""
    if max_ops is not None and len(a) * len(b) > max_ops:
        return fac(a, b)
    return a * b


KERNEL_BUILDERS: dict[str, Callable] = {
    "inv": inv, "sqrt": sqrt, "sin": sin, "cos": cos, "exp": exp, "log": log, "abs": sym_abs,
}


def rebuild_atom(a: Atom, args: tuple[SymExpr, ...]) -> SymExpr:
    if a.kind == "fac":
        return args[0] * args[1]
    return KERNEL_BUILDERS[a.kind](args[0])


# ---------------------------------------------------------------------------
# canonicalize: build a SymExpr from a tuple tree


def canonicalize(tree) -> SymExpr:
    """Canonical form of a nested expression.

    ``tree`` may be a SymExpr, a number, a variable name, or a tuple
    ``(op, *args)`` with op in ``+ - * / neg pow sqrt sin cos exp log abs``.
    Canonicalizing a SymExpr returns it unchanged (idempotence).
    """
    if isinstance(tree, SymExpr):
        return tree
    if isinstance(tree, str):
        return var(tree)
    if isinstance(tree, (int, float, Fraction)):
        return const(tree)
    op, *args = tree
    if op == "pow":
        return pow_int(canonicalize(args[0]), int(args[1]))
    xs = [canonicalize(a) for a in args]
    if op == "+":
        return add_all(xs)
    if op == "-":
        return xs[0] - xs[1] if len(xs) == 2 else -xs[0]
    if op == "neg":
        return -xs[0]
    if op == "*":
        out = xs[0]
        for x in xs[1:]:
            out = out * x
        return out
    if op == "/":
        return xs[0] / xs[1]
    if op in KERNEL_BUILDERS:
        return KERNEL_BUILDERS[op](xs[0])
    raise ValueError(f"unknown operator {op!r}")


# ---------------------------------------------------------------------------
# differentiation


def diff_primitive(op: str, which: int, args: list[SymExpr]) -> SymExpr:
    """Partial derivative of a primitive operator w.r.t. one argument."""
    if op in ("+", "add"):
        return ONE
    if op in ("-", "sub"):
        return ONE if which == 0 else -ONE
    if op == "neg":
        return -ONE
    if op in ("*", "mul"):
        return args[1 - which]
    if op in ("/", "div"):
        if which == 0:
            return inv(args[1])
        return -(args[0] * pow_int(inv(args[1]), 2))
    a = args[0]
    if op == "sqrt":
        return pow_int(sqrt(a), -1).scale(Fraction(1, 2))
    if op == "sin":
        return cos(a)
    if op == "cos":
        return -sin(a)
    if op == "exp":
        return exp(a)
    if op == "log":
        return inv(a)
    if op.startswith("pow"):
        k = int(args[1].const_value) if len(args) > 1 else int(op[3:])
        return pow_int(a, k - 1).scale(k)
    raise NonDifferentiable(op)


def _atom_diff(a: Atom, v: str, memo: dict) -> SymExpr:
    if a.kind == "var":
        return ONE if a.name == v else ZERO
    if v not in a.variables():
        return ZERO
    r = memo.get(a)
    if r is not None:
        return r
    if a.kind == "fac":
        x, y = a.args
        r = diff(x, v, memo) * y + x * diff(y, v, memo)
    else:
        arg = a.args[0]
        d = diff(arg, v, memo)
        if a.kind == "inv":
            r = -(SymExpr.atom(a, 2) * d)
        elif a.kind == "abs":
            r = SymExpr.atom(a) * inv(arg) * d
        else:
            r = diff_primitive(a.kind, 0, [arg]) * d
    memo[a] = r
    return r


def diff(e: SymExpr, v: str, memo: dict | None = None) -> SymExpr:
    """Symbolic partial derivative d e / d v."""
    if memo is None:
        memo = {}
    if v not in e.variables():
        return ZERO
    out: list[SymExpr] = []
    for m, c in e.terms.items():
        for i, (a, k) in enumerate(m):
            da = _atom_diff(a, v, memo)
            if da.is_zero:
                continue
            rest = list(m)
            if k == 1:
                rest.pop(i)
            else:
                rest[i] = (a, k - 1)
            out.append(SymExpr({tuple(rest): _norm(c * k)}) * da)
    return add_all(out)


# ---------------------------------------------------------------------------
# substitution


def substitute(e: SymExpr, bindings: Mapping[str, SymExpr]) -> SymExpr:
    """Simultaneous substitution of variables (by name), then canonicalize."""
    bindings = {k: _lift(v) for k, v in bindings.items()}
    names = set(bindings)
    memo: dict[Atom, SymExpr] = {}

    def sub_atom(a: Atom) -> SymExpr:
        r = memo.get(a)
        if r is None:
            if a.kind == "var":
                r = bindings.get(a.name, SymExpr.atom(a))
            elif not (a.variables() & names):
                r = SymExpr.atom(a)
            else:
                r = rebuild_atom(a, tuple(go(x) for x in a.args))
            memo[a] = r
        return r

    def go(x: SymExpr) -> SymExpr:
        if not (x.variables() & names):
            return x
        parts = []
        for m, c in x.terms.items():
            t = SymExpr({(): c})
            for a, k in m:
                t = t * pow_int(sub_atom(a), k)
            parts.append(t)
        return add_all(parts)

    return go(e)


# ---------------------------------------------------------------------------
# operation count


def _op_count(e: SymExpr) -> int:
    """Counting rule.

    * a sum of T terms costs T-1 additions;
    * a monomial costs one multiplication between consecutive numerator
      factors (a coefficient other than +-1 counts as a factor), one power per
      factor with |exponent| >= 2, and, if it has a denominator, one division
      plus a multiplication between consecutive denominator factors;
    * each kernel occurrence costs 1 plus the cost of its arguments.
    Signs are free.
    """
    if not e.terms:
        return 0
    n = len(e.terms) - 1
    for m, c in e.terms.items():
        num = 1 if abs(c) != 1 else 0
        den = 0
        for a, k in m:
            if k > 0:
                num += 1
            else:
                den += 1
            if abs(k) >= 2:
                n += 1
            if a.kind != "var":
                n += 1 + sum(x.op_count() for x in a.args)
        if num == 0 and den:
            num = 1
        n += max(num - 1, 0)
        if den:
            n += 1 + den - 1
    return n


def op_count(e: SymExpr) -> int:
    return e.op_count()


# ---------------------------------------------------------------------------
# point evaluation

_PREC_BITS = {"fp16": 11, "fp32": 24, "fp64": 53}
HIGH_PRECISION_BITS = 128


def _mpfr_kernel(kind: str, x):
    if kind == "inv":
        if x == 0:
            raise EvalDomain("division by zero")
        return 1 / x
    if kind == "sqrt":
        if x < 0:
            raise EvalDomain("sqrt of a negative number")
        return gmpy2.sqrt(x)
    if kind == "log":
        if x <= 0:
            raise EvalDomain("log of a non-positive number")
        return gmpy2.log(x)
    if kind == "abs":
        return abs(x)
    return getattr(gmpy2, kind)(x)


def eval_point(e: SymExpr, point: Mapping[str, object], mode: str = "high"):
    """Evaluate at a point.

    ``mode`` is ``"high"`` (128-bit oracle) or a precision name ``fp16``,
    ``fp32``, ``fp64``; in working mode every primitive is rounded to nearest
    at that precision.  Returns a gmpy2 mpfr.
    """
    bits = HIGH_PRECISION_BITS if mode == "high" else _PREC_BITS[getattr(mode, "name", mode)]
    ctx = gmpy2.context(precision=bits, round=gmpy2.RoundToNearest)
    with ctx:
        return _eval_mpfr(e, point, {})


def _eval_mpfr(e: SymExpr, point, memo):
    def atom_val(a: Atom):
        r = memo.get(a)
        if r is None:
            if a.kind == "var":
                if a.name not in point:
                    raise KeyError(f"no value for {a.name}")
                r = gmpy2.mpfr(point[a.name])
            elif a.kind == "fac":
                r = _eval_mpfr(a.args[0], point, memo) * _eval_mpfr(a.args[1], point, memo)
            else:
                r = _mpfr_kernel(a.kind, _eval_mpfr(a.args[0], point, memo))
            memo[a] = r
        return r

    total = gmpy2.mpfr(0)
    first = True
    for m, c in sorted(e.terms.items(), key=lambda t: _mono_key(t[0])):
        t = gmpy2.mpfr(c) if isinstance(c, int) else gmpy2.mpfr(c.numerator) / c.denominator
        for a, k in m:
            v = atom_val(a)
            if k < 0:
                if v == 0:
                    raise EvalDomain("division by zero")
                t = t / (v ** -k)
            else:
                t = t * (v ** k)
        total = t if first else total + t
        first = False
    return total


def eval_numpy(e: SymExpr, env: Mapping[str, np.ndarray], memo: dict | None = None) -> np.ndarray:
    """Vectorized float64 evaluation (non-rigorous; used for profiling)."""
    if memo is None:
        memo = {}
    shape = np.shape(next(iter(env.values()))) if env else ()

    def atom_val(a: Atom):
        r = memo.get(a)
        if r is None:
            if a.kind == "var":
                r = np.asarray(env[a.name], dtype=np.float64)
            elif a.kind == "fac":
                r = eval_numpy(a.args[0], env, memo) * eval_numpy(a.args[1], env, memo)
            else:
                x = eval_numpy(a.args[0], env, memo)
                with np.errstate(all="ignore"):
                    r = 1.0 / x if a.kind == "inv" else getattr(np, a.kind)(x)
            memo[a] = r
        return r

    total = np.zeros(shape)
    with np.errstate(all="ignore"):
        for m, c in e.terms.items():
            t = np.full(shape, float(c))
            for a, k in m:
                t = t * atom_val(a) ** k if k > 0 else t / atom_val(a) ** (-k)
            total = total + t
    return total
