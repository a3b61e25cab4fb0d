"""Boolean predicates over comparisons.

The operand type is left open: the DSL frontend builds predicates over DAG
node ids, the analysis over SymExprs.  A comparison may carry a weakening
slack ``(left, right)``; the weakened atom ``l < r`` reads
``l - left < r + right`` and its weakened negation ``l + left >= r - right``.
Both contain the exact solution sets, so ``P^w`` and ``(not P)^w`` overlap on
a gray zone around the boundary.
"""

from __future__ import annotations

import operator
from dataclasses import dataclass, field, replace
from typing import Any, Callable

CMP_OPS = ("<", "<=", ">", ">=")
_FLIP = {"<": ">", "<=": ">=", ">": "<", ">=": "<="}
_NEG = {"<": ">=", "<=": ">", ">": "<=", ">=": "<"}
_PY = {"<": operator.lt, "<=": operator.le, ">": operator.gt, ">=": operator.ge}


@dataclass(frozen=True)
class Cmp:
    lhs: Any
    op: str
    rhs: Any
    slack: tuple[float, float] | None = field(default=None, compare=False)

    def __post_init__(self):
        if self.op not in CMP_OPS:
            raise ValueError(f"bad comparison {self.op!r}")

    def normalized(self) -> Cmp:
        """Same atom written with < or <= (operands swapped if needed)."""
        if self.op in ("<", "<="):
            return self
        s = self.slack
        return Cmp(self.rhs, _FLIP[self.op], self.lhs, None if s is None else (s[1], s[0]))


@dataclass(frozen=True)
class Not:
    arg: Any


@dataclass(frozen=True)
class And:
    args: tuple = ()


@dataclass(frozen=True)
class Or:
    args: tuple = ()


TRUE = And(())
FALSE = Or(())

Predicate = Cmp | Not | And | Or


def atoms(p) -> list[Cmp]:
    """Comparison atoms in order of first appearance."""
    out: list[Cmp] = []

    def go(q):
        if isinstance(q, Cmp):
            if q not in out:
                out.append(q)
        elif isinstance(q, Not):
            go(q.arg)
        else:
            for a in q.args:
                go(a)

    go(p)
    return out


def map_operands(p, f: Callable[[Any], Any]):
    if isinstance(p, Cmp):
        return Cmp(f(p.lhs), p.op, f(p.rhs), p.slack)
    if isinstance(p, Not):
        return Not(map_operands(p.arg, f))
    return type(p)(tuple(map_operands(a, f) for a in p.args))


def map_atoms(p, f: Callable[[Cmp], Any]):
    if isinstance(p, Cmp):
        return f(p)
    if isinstance(p, Not):
        return Not(map_atoms(p.arg, f))
    return type(p)(tuple(map_atoms(a, f) for a in p.args))


def weaken_predicate(p, bounds: Callable[[Any], float] | dict):
    """Attach slacks (the operands' error bounds) to every atom."""
    get = bounds.get if isinstance(bounds, dict) else bounds

    def w(c: Cmp) -> Cmp:
        l, r = get(c.lhs), get(c.rhs)
        if l is None or r is None:
            raise KeyError(f"missing error bound for an operand of {c}")
        return replace(c, slack=(float(l), float(r)))

    return map_atoms(p, w)


def evaluate(p, value: Callable[[Any], Any], positive: bool = True) -> bool:
    """Truth of p at a point; ``value`` maps an operand to a number.

    Slacks are honoured: positive atoms and negated atoms are each relaxed.
    """
    if isinstance(p, Cmp):
        l, r = value(p.lhs), value(p.rhs)
        sl, sr = p.slack or (0.0, 0.0)
        if positive:
            lo = p.normalized()
            if lo is not p:
                l, r, sl, sr = r, l, sr, sl
            return _PY[lo.op](l - sl, r + sr)
        neg = Cmp(p.lhs, _NEG[p.op], p.rhs).normalized()
        if neg.lhs is not p.lhs:
            l, r, sl, sr = r, l, sr, sl
        # closure of the relaxed negation
        return operator.le(l - sl, r + sr) if (sl or sr) else _PY[neg.op](l, r)
    if isinstance(p, Not):
        return evaluate(p.arg, value, not positive)
    if isinstance(p, And):
        vals = (evaluate(a, value, positive) for a in p.args)
        return all(vals) if positive else any(vals)
    vals = (evaluate(a, value, positive) for a in p.args)
    return any(vals) if positive else all(vals)


def to_str(p, name: Callable[[Any], str] = str) -> str:
    if isinstance(p, Cmp):
        return f"{name(p.lhs)} {p.op} {name(p.rhs)}"
    if isinstance(p, Not):
        return f"!({to_str(p.arg, name)})"
    if isinstance(p, And):
        return "True" if not p.args else "(" + " && ".join(to_str(a, name) for a in p.args) + ")"
    return "False" if not p.args else "(" + " || ".join(to_str(a, name) for a in p.args) + ")"
