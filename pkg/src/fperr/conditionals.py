"""Guards, predicated expressions and branch-instability measures.

A guard is a Boolean function of finitely many comparison atoms, stored as a
truth table.  Atoms compare two SymExprs and remember which DAG nodes they
came from, so that the error bounds of those nodes can later be attached as
weakening slacks.  A predicated expression is a list of cases with pairwise
disjoint guards; its value at a point is the expression of the active case
(or 0 when none is active).
"""

from __future__ import annotations

import threading
from dataclasses import dataclass, field
from functools import lru_cache
from typing import Callable, Iterable, Iterator

import numpy as np

from . import predicate as P
from .symbolic import ONE, ZERO, SymExpr

MAX_GUARD_ATOMS = 12
MAX_CASES = 64


class GuardOverflow(RuntimeError):
    """Raised when a guard or a predicated expression grows past its caps."""


# ---------------------------------------------------------------------------
# atoms

_ATOMS: dict[str, "GAtom"] = {}
_ATOM_LOCK = threading.Lock()


class GAtom:
    """Interned comparison ``lhs op rhs`` with op in {<, <=}."""

    __slots__ = ("key", "lhs", "op", "rhs", "origin")

    def __init__(self, key, lhs, op, rhs, origin):
        self.key = key
        self.lhs = lhs
        self.op = op
        self.rhs = rhs
        self.origin = origin

    def __hash__(self):
        return hash(self.key)

    def __eq__(self, other):
        return self is other

    def __lt__(self, other):
        return self.key < other.key

    def __repr__(self):
        return f"GAtom({self.text()})"

    def text(self) -> str:
        return f"{self.lhs} {self.op} {self.rhs}"

    def to_cmp(self, slacks: dict[int, float] | None = None) -> P.Cmp:
        s = None
        if slacks is not None and self.origin is not None:
            s = (float(slacks.get(self.origin[0], 0.0)), float(slacks.get(self.origin[1], 0.0)))
        return P.Cmp(self.lhs, self.op, self.rhs, s)


def make_atom(lhs: SymExpr, op: str, rhs: SymExpr, origin: tuple | None = None):
    """Returns ``(atom, positive)`` or a plain bool when the comparison is decided."""
    if op in (">", ">="):
        lhs, rhs = rhs, lhs
        op = "<" if op == ">" else "<="
        origin = None if origin is None else (origin[1], origin[0])
    d = lhs - rhs
    if d.is_const:
        v = d.const_value
        return v < 0 if op == "<" else v <= 0
    key = f"{lhs.key} {op} {rhs.key} @{origin}"
    with _ATOM_LOCK:
        a = _ATOMS.get(key)
        if a is None:
            a = GAtom(key, lhs, op, rhs, origin)
            _ATOMS[key] = a
    return a, True


# ---------------------------------------------------------------------------
# truth tables


@lru_cache(maxsize=4096)
def _index_map(n_dst: int, positions: tuple[int, ...]) -> np.ndarray:
    """For every assignment over n_dst atoms, the index of its restriction."""
    a = np.arange(1 << n_dst, dtype=np.int64)
    idx = np.zeros_like(a)
    for i, p in enumerate(positions):
        idx |= ((a >> p) & 1) << i
    return idx


def _align(atoms: tuple, table: np.ndarray, universe: tuple) -> np.ndarray:
    if atoms == universe:
        return table
    pos = {a: i for i, a in enumerate(universe)}
    return table[_index_map(len(universe), tuple(pos[a] for a in atoms))]


def _simplify(atoms: tuple, table: np.ndarray) -> tuple[tuple, np.ndarray]:
    """Drops atoms the table does not depend on."""
    n = len(atoms)
    keep = []
    for i in range(n):
        t = table.reshape((2,) * n) if n else table
        axis = n - 1 - i
        if not np.array_equal(np.take(t, 0, axis=axis), np.take(t, 1, axis=axis)):
            keep.append(i)
    if len(keep) == n:
        return atoms, table
    t = table.reshape((2,) * n)
    for i in sorted(set(range(n)) - set(keep), reverse=True):
        t = np.take(t, 0, axis=n - 1 - i)
        n -= 1
    new_atoms = tuple(atoms[i] for i in keep)
    return new_atoms, np.ascontiguousarray(t).reshape(-1)


@dataclass(frozen=True, eq=False)
class Guard:
    atoms: tuple = ()
    table: np.ndarray = field(default_factory=lambda: np.ones(1, dtype=bool))

    @staticmethod
    def of(atoms: tuple, table: np.ndarray) -> Guard:
        atoms, table = _simplify(atoms, np.asarray(table, dtype=bool))
        return Guard(atoms, table)

    @staticmethod
    def literal(atom: GAtom, positive: bool = True) -> Guard:
        return Guard((atom,), np.array([not positive, positive]))

    @staticmethod
    def const(v: bool) -> Guard:
        return TRUE if v else FALSE

    @property
    def is_true(self) -> bool:
        return bool(self.table.all())

    @property
    def is_false(self) -> bool:
        return not self.table.any()

    def __hash__(self):
        return hash((self.atoms, self.table.tobytes()))

    def __eq__(self, other):
        return (isinstance(other, Guard) and self.atoms == other.atoms
                and np.array_equal(self.table, other.table))

    def _binary(self, other: Guard, f) -> Guard:
        universe = tuple(sorted(set(self.atoms) | set(other.atoms)))
        if len(universe) > MAX_GUARD_ATOMS:
            raise GuardOverflow(f"guard over {len(universe)} atoms")
        a = _align(self.atoms, self.table, universe)
        b = _align(other.atoms, other.table, universe)
        return Guard.of(universe, f(a, b))

    def __and__(self, other: Guard) -> Guard:
        if self.is_true or other.is_false:
            return other
        if other.is_true or self.is_false:
            return self
        return self._binary(other, np.logical_and)

    def __or__(self, other: Guard) -> Guard:
        if self.is_false or other.is_true:
            return other
        if other.is_false or self.is_true:
            return self
        return self._binary(other, np.logical_or)

    def __invert__(self) -> Guard:
        return Guard(self.atoms, ~self.table)

    def over(self, universe: tuple) -> np.ndarray:
        """Truth table re-indexed over a superset of the atoms."""
        return _align(self.atoms, self.table, universe)

    def evaluate(self, truth: dict) -> bool:
        i = sum(1 << k for k, a in enumerate(self.atoms) if truth[a])
        return bool(self.table[i])

    def implicants(self) -> list[list[tuple[GAtom, bool]]]:
        """A small DNF cover (prime implicants, greedy cover)."""
        if self.is_false:
            return []
        if self.is_true:
            return [[]]
        n = len(self.atoms)
        cover = _cover(n, tuple(int(i) for i in np.flatnonzero(self.table)))
        out = []
        for val, care in cover:
            out.append([(self.atoms[i], bool((val >> i) & 1)) for i in range(n) if (care >> i) & 1])
        return out

    def to_predicate(self, slacks: dict[int, float] | None = None):
        """Predicate tree for the optimizer; slacks weaken every literal."""
        if self.is_true:
            return P.TRUE
        if self.is_false:
            return P.FALSE
        terms = []
        for conj in self.implicants():
            lits = [a.to_cmp(slacks) if pos else P.Not(a.to_cmp(slacks)) for a, pos in conj]
            terms.append(lits[0] if len(lits) == 1 else P.And(tuple(lits)))
        if len(terms) == 1:
            return terms[0]
        return P.Or(tuple(terms))

    def __str__(self):
        if self.is_true:
            return "True"
        if self.is_false:
            return "False"
        parts = []
        for conj in self.implicants():
            lits = [a.text() if pos else f"!({a.text()})" for a, pos in conj]
            parts.append(" && ".join(lits))
        return " || ".join(f"({p})" if len(parts) > 1 and "&&" in p else p for p in parts)

    __repr__ = __str__


TRUE = Guard()
FALSE = Guard((), np.zeros(1, dtype=bool))


@lru_cache(maxsize=1024)
def _cover(n: int, minterms: tuple[int, ...]) -> list[tuple[int, int]]:
    full = (1 << n) - 1
    current = {(m, full) for m in minterms}
    primes: set[tuple[int, int]] = set()
    while current:
        merged = set()
        used = set()
        items = sorted(current)
        by_care: dict[int, set[int]] = {}
        for v, c in items:
            by_care.setdefault(c, set()).add(v)
        for v, c in items:
            for i in range(n):
                bit = 1 << i
                if c & bit and not v & bit and (v | bit) in by_care[c]:
                    merged.add((v, c & ~bit))
                    used.add((v, c))
                    used.add((v | bit, c))
        primes |= current - used
        current = merged
    # greedy cover
    remaining = set(minterms)
    chosen = []

    def covers(p, m):
        return (m & p[1]) == p[0]

    plist = sorted(primes, key=lambda p: (-bin(~p[1] & full).count("1"), p))
    while remaining:
        best = max(plist, key=lambda p: sum(1 for m in remaining if covers(p, m)))
        chosen.append(best)
        remaining = {m for m in remaining if not covers(best, m)}
    return chosen


def guard_all(gs: Iterable[Guard]) -> Guard:
    out = TRUE
    for g in gs:
        out = out & g
    return out


def guard_any(gs: Iterable[Guard]) -> Guard:
    out = FALSE
    for g in gs:
        out = out | g
    return out


# ---------------------------------------------------------------------------
# predicated expressions


@dataclass(frozen=True)
class PredicatedExpr:
    cases: tuple[tuple[Guard, SymExpr], ...]

    @staticmethod
    def of(e: SymExpr) -> PredicatedExpr:
        return PredicatedExpr(((TRUE, e),))

    @property
    def unconditional(self) -> bool:
        return len(self.cases) == 1 and self.cases[0][0].is_true

    @property
    def expr(self) -> SymExpr:
        if not self.unconditional:
            raise ValueError("predicated expression has several cases")
        return self.cases[0][1]

    def __iter__(self) -> Iterator[tuple[Guard, SymExpr]]:
        return iter(self.cases)

    def __len__(self):
        return len(self.cases)

    def map(self, f: Callable[[SymExpr], SymExpr], drop_zero: bool = False) -> PredicatedExpr:
        return _normalize([(g, f(e)) for g, e in self.cases], drop_zero)

    def restrict(self, g: Guard, drop_zero: bool = False) -> PredicatedExpr:
        return _normalize([(g & h, e) for h, e in self.cases], drop_zero)

    def __str__(self):
        if self.unconditional:
            return str(self.cases[0][1])
        return " ; ".join(f"[{g}] {e}" for g, e in self.cases)


ZERO_P = PredicatedExpr(())


def _normalize(cases, drop_zero: bool) -> PredicatedExpr:
    by_expr: dict[SymExpr, Guard] = {}
    for g, e in cases:
        if g.is_false or (drop_zero and e.is_zero):
            continue
        prev = by_expr.get(e)
        by_expr[e] = g if prev is None else prev | g
    if len(by_expr) > MAX_CASES:
        raise GuardOverflow(f"{len(by_expr)} cases")
    return PredicatedExpr(tuple((g, e) for e, g in by_expr.items()))


def refine(a: PredicatedExpr, b: PredicatedExpr, outer: bool):
    """Cells of the common refinement: (guard, ea or None, eb or None)."""
    for g, ea in a.cases:
        for h, eb in b.cases:
            gh = g & h
            if not gh.is_false:
                yield gh, ea, eb
    if outer:
        ga = guard_any(g for g, _ in a.cases)
        gb = guard_any(h for h, _ in b.cases)
        for g, ea in a.cases:
            r = g & ~gb
            if not r.is_false:
                yield r, ea, None
        for h, eb in b.cases:
            r = h & ~ga
            if not r.is_false:
                yield r, None, eb


def bowtie(a: PredicatedExpr, b: PredicatedExpr, combine: Callable, drop_zero: bool = True) -> PredicatedExpr:
    """Case-wise combination where a missing case stands for zero."""
    if not a.cases:
        return b
    if not b.cases:
        return a
    if a.unconditional and b.unconditional:
        return _normalize([(TRUE, combine(a.cases[0][1], b.cases[0][1]))], drop_zero)
    cells = []
    for g, ea, eb in refine(a, b, outer=True):
        cells.append((g, combine(ZERO if ea is None else ea, ZERO if eb is None else eb)))
    return _normalize(cells, drop_zero)


def padd(a: PredicatedExpr, b: PredicatedExpr) -> PredicatedExpr:
    return bowtie(a, b, lambda x, y: x + y)


def pmul(a: PredicatedExpr, b: PredicatedExpr, mul: Callable = SymExpr.__mul__,
         drop_zero: bool = True) -> PredicatedExpr:
    """Products on intersections only (missing cases are zero)."""
    if a.unconditional and b.unconditional:
        return _normalize([(TRUE, mul(a.cases[0][1], b.cases[0][1]))], drop_zero)
    return _normalize([(g, mul(ea, eb)) for g, ea, eb in refine(a, b, outer=False)], drop_zero)


def papply(f: Callable, args: list[PredicatedExpr]) -> PredicatedExpr:
    """Applies an n-ary function case-wise (inputs are total)."""
    if all(a.unconditional for a in args):
        return PredicatedExpr.of(f(*[a.cases[0][1] for a in args]))
    acc: list[tuple[Guard, list]] = [(TRUE, [])]
    for a in args:
        nxt = []
        for g, vals in acc:
            for h, e in a.cases:
                gh = g & h
                if not gh.is_false:
                    nxt.append((gh, vals + [e]))
        acc = nxt
        if len(acc) > MAX_CASES * 4:
            raise GuardOverflow(f"{len(acc)} cases")
    return _normalize([(g, f(*vals)) for g, vals in acc], drop_zero=False)


def pselect(cond: Guard, then: PredicatedExpr, other: PredicatedExpr) -> PredicatedExpr:
    cases = [(cond & g, e) for g, e in then.cases] + [(~cond & g, e) for g, e in other.cases]
    return _normalize(cases, drop_zero=False)


def guard_of(pred, fwd: Callable[[int], PredicatedExpr]) -> Guard:
    """Guard of a DAG predicate whose comparison operands are node ids."""
    if isinstance(pred, P.Cmp):
        out = FALSE
        for g, el, er in refine(fwd(pred.lhs), fwd(pred.rhs), outer=False):
            lit = make_atom(el, pred.op, er, (pred.lhs, pred.rhs))
            lg = Guard.const(lit) if isinstance(lit, bool) else Guard.literal(*lit)
            out = out | (g & lg)
        return out
    if isinstance(pred, P.Not):
        return ~guard_of(pred.arg, fwd)
    parts = [guard_of(a, fwd) for a in pred.args]
    return guard_all(parts) if isinstance(pred, P.And) else guard_any(parts)


# ---------------------------------------------------------------------------
# instability


@dataclass
class InstabilityReport:
    node: int
    name: str
    guard: str
    window: float
    jump: float
    status: str = "ok"

    def to_dict(self) -> dict:
        return {"node": self.node, "name": self.name, "guard": self.guard,
                "width": self.window, "jump": self.jump, "status": self.status}


def instability_window_width(pred, slacks: dict[int, float]) -> float:
    """Width of the gray zone: the largest slack sum over the guard's atoms."""
    from .interval import add_rd
    w = 0.0
    for a in P.atoms(pred):
        w = max(w, float(add_rd(float(slacks.get(a.lhs, 0.0)), float(slacks.get(a.rhs, 0.0)))[1]))
    return w


def instability_jump(cond: Guard, then: PredicatedExpr, other: PredicatedExpr, domain,
                     slacks: dict[int, float], cfg) -> float:
    """Max |then - else| where both branches may be taken after round-off."""
    from .gopt import maximize_upper
    from .symbolic import sym_abs
    best = 0.0
    for g, et in then.cases:
        for h, ee in other.cases:
            diff = et - ee
            if diff.is_zero:
                continue
            if cfg.constraint_mode == "prune":
                region = (cond & g).to_predicate(slacks)
                region = P.And((region, (~cond & h).to_predicate(slacks)))
            else:
                region = P.TRUE
            r = maximize_upper(sym_abs(diff), domain, region, cfg)
            if r.status == "domain-violation":
                return float("inf")
            best = max(best, r.upper_bound)
    return best


def rank_instability(problem, config=None) -> list[InstabilityReport]:
    """Window and jump for every select node, largest jump first."""
    from .taylor import AnalysisConfig, SymbolicState, operand_error_bounds
    cfg = config or AnalysisConfig()
    state = SymbolicState(problem, cfg)
    slacks = operand_error_bounds(problem, cfg, state)
    dag = problem.dag
    out = []
    for n in dag.nodes:
        if n.op != "select" or n.id not in dag.reachable():
            continue
        window = instability_window_width(n.guard, slacks)
        cond = state.guard(n.id)
        t_id, e_id = n.children[-2:]
        try:
            jump = instability_jump(cond, state.fwd(t_id), state.fwd(e_id), state.domain, slacks, cfg.opt)
            status = "ok"
        except GuardOverflow as exc:
            jump, status = float("inf"), f"guard-overflow: {exc}"
        out.append(InstabilityReport(n.id, problem.node_name(n.id),
                                     P.to_str(n.guard, problem.node_name), window, jump, status))
    out.sort(key=lambda r: (-r.jump, -r.window, r.node))
    return out
