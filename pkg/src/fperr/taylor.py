"""First-order error analysis: symbolic forward pass, reverse derivatives,
error-term assembly and rigorous bounding.

For an output ``f`` the first-order error is ``sum_j deriv_j * fwd_j * d_j``
over every rounding (local operator roundings, input roundings and type
casts on edges).  Each ``d_j`` is an independent signed noise bounded by a
unit roundoff, so the bound is ``max sum_j |deriv_j * fwd_j| * noise_j``.
"""

from __future__ import annotations

import threading
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from fractions import Fraction

import numpy as np

from . import predicate as P
from . import symbolic as S
from .conditionals import (Guard, GuardOverflow, PredicatedExpr, ZERO_P, guard_of, padd, papply,
                           pmul, pselect)
from .dsl import Problem
from .gopt import OptConfig, maximize_upper, min_abs_lower
from .interval import DomainViolation, Interval, interval_apply, iv_hull
from .symbolic import ONE, SymExpr

HULL_ATOMS = 10  # beyond this many guard atoms all terms share one query


@dataclass
class AnalysisConfig:
    opt: OptConfig = field(default_factory=OptConfig)
    max_op_count: int = 30000
    transcendental_ulps: dict[str, float] = field(
        default_factory=lambda: {"sin": 1.0, "cos": 1.0, "exp": 1.0, "log": 1.0})
    abstraction: bool = False
    window: tuple[int, int] = (10, 40)
    relative: bool = True

    def __post_init__(self):
        if self.max_op_count < 1:
            raise ValueError("max_op_count must be positive")
        lo, hi = self.window
        if not 1 <= lo <= hi:
            raise ValueError(f"bad abstraction window {self.window}")

    @property
    def constraint_mode(self) -> str:
        return self.opt.constraint_mode


@dataclass
class ErrorTerm:
    guard: Guard
    coeff: SymExpr
    noise: float
    source: int
    kind: str  # local | cast | abstracted
    alpha: PredicatedExpr | None = None  # derivative factor (coeff = alpha * value)


@dataclass
class ErrorAccumulator:
    output: int
    terms: list[ErrorTerm] = field(default_factory=list)
    edge_visits: int = 0
    edges: int = 0


@dataclass
class OutputReport:
    output: str
    node: int
    bound: float
    relative: float | None = None
    guards: list[tuple[str, float]] = field(default_factory=list)
    queries: int = 0
    cache_hits: int = 0
    seconds: float = 0.0
    mode: str = "direct"
    window: tuple[int, int] | None = None
    status: str = "ok"
    error: str | None = None
    value_range: Interval | None = None
    info: dict = field(default_factory=dict)

    def to_dict(self) -> dict:
        d = {
            "output": self.output,
            "bound": self.bound,
            "relative": self.relative,
            "guards": [{"guard": g, "bound": b} for g, b in self.guards],
            "stats": {"queries": self.queries, "cache_hits": self.cache_hits,
                      "seconds": round(self.seconds, 6)},
            "mode": self.mode,
        }
        if self.window is not None:
            d["window"] = list(self.window)
        if self.status != "ok":
            d["status"] = self.status
        if self.error:
            d["error"] = self.error
        return d


@dataclass
class BoundReport:
    outputs: list[OutputReport]
    seconds: float = 0.0

    def __getitem__(self, i) -> OutputReport:
        return self.outputs[i]

    def by_name(self, name: str) -> OutputReport:
        for o in self.outputs:
            if o.output == name:
                return o
        raise KeyError(name)

    @property
    def max_bound(self) -> float:
        return max(o.bound for o in self.outputs)

    def to_dict(self) -> list[dict]:
        return [o.to_dict() for o in self.outputs]


# ---------------------------------------------------------------------------
# symbolic passes


class SymbolicState:
    """Forward expressions (memoized, computed on demand) and reverse passes."""

    def __init__(self, problem: Problem, cfg: AnalysisConfig | None = None):
        self.problem = problem
        self.cfg = cfg or AnalysisConfig()
        self.dag = problem.dag
        self._fwd: dict[int, PredicatedExpr] = {}
        self._guard: dict[int, Guard] = {}
        self._lock = threading.RLock()
        self.domain = dict(problem.input_domains)

    def _mul(self, a: SymExpr, b: SymExpr) -> SymExpr:
        return S.mul_throttled(a, b, self.cfg.max_op_count)

    def _pow(self, a: SymExpr, k: int) -> SymExpr:
        if a.is_monomial or k in (0, 1):
            return S.pow_int(a, k)
        if k < 0:
            return S.inv(self._pow(a, -k))
        out = a
        for _ in range(k - 1):
            out = self._mul(out, a)
        return out

    def _apply(self, op: str, args: list[SymExpr], k: int | None) -> SymExpr:
        if op == "+":
            return args[0] + args[1]
        if op == "-":
            return args[0] - args[1]
        if op == "*":
            return self._mul(args[0], args[1])
        if op == "/":
            return self._mul(args[0], S.inv(args[1]))
        if op == "neg":
            return -args[0]
        if op == "pow":
            return self._pow(args[0], k)
        return S.KERNEL_BUILDERS[op](args[0])

    def fwd(self, i: int) -> PredicatedExpr:
        r = self._fwd.get(i)
        if r is not None:
            return r
        with self._lock:
            for j in range(i + 1):
                if j not in self._fwd:
                    self._fwd[j] = self._compute_fwd(j)
        return self._fwd[i]

    def _compute_fwd(self, i: int) -> PredicatedExpr:
        n = self.dag[i]
        if n.op == "input":
            return PredicatedExpr.of(S.var(n.name))
        if n.op == "const":
            return PredicatedExpr.of(S.const(n.value))
        if n.op == "select":
            t, e = n.children[-2:]
            return pselect(self.guard(i), self._fwd[t], self._fwd[e])
        args = [self._fwd[c] for c in n.children]
        return papply(lambda *xs: self._apply(n.op, list(xs), n.k), args)

    def guard(self, i: int) -> Guard:
        g = self._guard.get(i)
        if g is None:
            g = guard_of(self.dag[i].guard, self.fwd)
            self._guard[i] = g
        return g

    def partial(self, p: int, pos: int) -> PredicatedExpr | None:
        """d node_p / d child_pos; None stands for the constant 1."""
        n = self.dag[p]
        if n.op == "select":
            nops = len(n.children) - 2
            if pos < nops:
                return ZERO_P
            g = self.guard(p)
            return PredicatedExpr(((g if pos == nops else ~g, ONE),))
        if n.op == "+" or (n.op == "-" and pos == 0):
            return None
        if n.op == "-" or n.op == "neg":
            return PredicatedExpr.of(-ONE)
        args = [self.fwd(c) for c in n.children]
        if n.op == "pow":
            return papply(lambda a: S.diff_primitive("pow", 0, [a, S.const(n.k)]), args)
        return papply(lambda *xs: S.diff_primitive(n.op, pos, list(xs)), args)

    def reverse(self, output: int, cast_edges: bool = True):
        """Derivatives of ``output`` w.r.t. every node of its cone.

        Returns (deriv, edge_contrib, visits, edges) where edge_contrib holds
        the derivative at consumer input positions that carry a cast.
        """
        dag = self.dag
        cone = sorted(dag.reachable([output]), reverse=True)
        deriv: dict[int, PredicatedExpr] = {output: PredicatedExpr.of(ONE)}
        contrib_at: dict[tuple[int, int], PredicatedExpr] = {}
        visits = 0
        nedges = 0
        mul = self._mul
        for p in cone:
            n = dag[p]
            nedges += len(n.children)
            dp = deriv.get(p)
            if dp is None or not n.children:
                continue
            for pos, c in enumerate(n.children):
                visits += 1
                part = self.partial(p, pos)
                if part is None:
                    contrib = dp
                else:
                    contrib = pmul(dp, part, mul)
                if cast_edges and n.cast_bounds.get(pos, 0.0) > 0:
                    contrib_at[(p, pos)] = contrib
                if not contrib.cases:
                    continue
                prev = deriv.get(c)
                deriv[c] = contrib if prev is None else padd(prev, contrib)
        return deriv, contrib_at, visits, nedges


def forward_symbolic(problem: Problem, cfg: AnalysisConfig | None = None) -> dict[int, PredicatedExpr]:
    st = SymbolicState(problem, cfg)
    return {i: st.fwd(i) for i in sorted(problem.dag.reachable())}


def reverse_derivatives(problem: Problem, output: int, cfg: AnalysisConfig | None = None,
                        state: SymbolicState | None = None) -> dict[int, PredicatedExpr]:
    st = state or SymbolicState(problem, cfg)
    return st.reverse(output)[0]


def _local_noise(node, cfg: AnalysisConfig) -> float:
    d = node.delta_bound
    if d and node.op in cfg.transcendental_ulps:
        d *= cfg.transcendental_ulps[node.op]
    return d


def assemble_total_error(problem: Problem, output: int, cfg: AnalysisConfig | None = None,
                         state: SymbolicState | None = None) -> ErrorAccumulator:
    cfg = cfg or AnalysisConfig()
    st = state or SymbolicState(problem, cfg)
    deriv, contrib_at, visits, nedges = st.reverse(output)
    acc = ErrorAccumulator(output, edge_visits=visits, edges=nedges)
    mul = st._mul
    free = problem.free_vars
    for j in sorted(deriv):
        n = problem.dag[j]
        dj = deriv[j]
        if n.op == "input" and n.name in free:
            noise = float(free[n.name].error_bound)
            if noise > 0:
                for g, c in dj:
                    acc.terms.append(ErrorTerm(g, c, noise, j, "abstracted", PredicatedExpr(((g, c),))))
            continue
        noise = _local_noise(n, cfg)
        if noise > 0:
            for g, c in pmul(dj, st.fwd(j), mul):
                acc.terms.append(ErrorTerm(g, c, noise, j, "local", dj))
    for (p, pos), contrib in sorted(contrib_at.items()):
        noise = problem.dag[p].cast_bounds[pos]
        c = problem.dag[p].children[pos]
        for g, e in pmul(contrib, st.fwd(c), mul):
            acc.terms.append(ErrorTerm(g, e, noise, c, "cast", contrib))
    return acc


# ---------------------------------------------------------------------------
# bounding


def _frac(x: float) -> Fraction:
    return Fraction(x)


def _round_up(q: Fraction) -> float:
    f = float(q)
    if Fraction(f) < q:
        f = np.nextafter(f, np.inf)
    return float(f)


@dataclass
class _Stats:
    queries: int = 0
    cache_hits: int = 0
    status: str = "ok"
    error: str | None = None

    def add(self, r):
        self.queries += r.queries
        self.cache_hits += r.cache_hits
        if r.status == "domain-violation":
            self.status = "domain-violation"
        elif r.status != "converged" and self.status == "ok":
            self.status = r.status


_NONNEG_KERNELS = frozenset({"abs", "sqrt", "exp"})


def _atom_sign(a, domain) -> int:
    if a.kind == "var":
        d = domain.get(a.name)
        if d is None:
            return 0
        return 1 if d.lo >= 0 else -1 if d.hi <= 0 else 0
    return 1 if a.kind in _NONNEG_KERNELS else 0


def sign_definite(e: SymExpr, domain) -> int:
    """+1 (or -1) when every monomial of e is provably >= 0 (<= 0) on the box, else 0.

    Purely syntactic, so a 0 answer only means "not shown".
    """
    sign = 0
    for m, c in e.terms.items():
        s = 1 if c > 0 else -1
        for a, k in m:
            if k % 2 == 0:
                continue
            t = _atom_sign(a, domain)
            if t == 0:
                return 0
            s *= t
        if sign and s != sign:
            return 0
        sign = s
    return sign


def _objective(terms: list[ErrorTerm], domain=None) -> SymExpr:
    parts = []
    for t in terms:
        s = sign_definite(t.coeff, domain) if domain is not None else 0
        # |c| = +-c on the box; keeping the sum polynomial lets the optimizer fuse terms
        a = t.coeff.scale(s) if s else S.sym_abs(t.coeff)
        parts.append(a.scale(_frac(t.noise)))
    return S.add_all(parts)


def _bound_group(terms: list[ErrorTerm], domain, guard_pred, cfg: AnalysisConfig, st: _Stats) -> float:
    if not terms:
        return 0.0
    obj = _objective(terms, domain)
    if obj.is_zero:
        return 0.0
    if obj.op_count() <= cfg.max_op_count:
        r = maximize_upper(obj, domain, guard_pred, cfg.opt)
        st.add(r)
        if r.status == "domain-violation":
            srcs = sorted({t.source for t in terms})
            st.error = f"domain violation in error terms of nodes {srcs[:8]}"
            return float("inf")
        return max(r.upper_bound, 0.0)
    # fallback: split the objective into chunks that each fit the op budget
    # and add their separate maxima (sound, looser than one fused query)
    total = Fraction(0)
    for chunk in _chunks(obj, cfg.max_op_count):
        if chunk.is_const:
            total += Fraction(chunk.const_value)
            continue
        r = maximize_upper(chunk, domain, guard_pred, cfg.opt)
        st.add(r)
        if r.status == "domain-violation":
            st.error = "domain violation in a per-term query"
            return float("inf")
        if r.upper_bound == float("inf"):
            return float("inf")
        total += Fraction(max(r.upper_bound, 0.0))
    return _round_up(total)


def _chunks(obj: SymExpr, budget: int) -> list[SymExpr]:
    out, cur, size = [], {}, 0
    for m, w in obj.terms.items():
        c = SymExpr({m: w}).op_count() + 1
        if cur and size + c > budget:
            out.append(SymExpr(cur))
            cur, size = {}, 0
        cur[m] = w
        size += c
    if cur:
        out.append(SymExpr(cur))
    return out


def bound_total_error(acc: ErrorAccumulator, domain, cfg: AnalysisConfig | None = None,
                      slacks: dict[int, float] | None = None):
    """Returns (bound, [(guard text, bound)], stats)."""
    cfg = cfg or AnalysisConfig()
    st = _Stats()
    terms = [t for t in acc.terms if t.noise > 0 and not t.coeff.is_zero and not t.guard.is_false]
    if not terms:
        return 0.0, [("True", 0.0)], st
    universe = tuple(sorted({a for t in terms for a in t.guard.atoms}))
    prune = cfg.constraint_mode == "prune"
    if not universe or len(universe) > HULL_ATOMS:
        b = _bound_group(terms, domain, P.TRUE, cfg, st)
        label = "True" if not universe else "True (hull)"
        return b, [(label, b)], st
    table = np.array([t.guard.over(universe) for t in terms])  # terms x assignments
    groups: dict[frozenset, list[int]] = {}
    for a in range(table.shape[1]):
        active = frozenset(np.flatnonzero(table[:, a]).tolist())
        groups.setdefault(active, []).append(a)
    keys = list(groups)
    if not prune:
        keys = [k for k in keys if not any(k < o for o in keys)]
    results = []
    for k in sorted(keys, key=lambda s: min(groups[s])):
        mask = np.zeros(table.shape[1], dtype=bool)
        mask[groups[k]] = True
        g = Guard.of(universe, mask)
        pred = g.to_predicate(slacks or {}) if prune else P.TRUE
        b = _bound_group([terms[i] for i in sorted(k)], domain, pred, cfg, st)
        results.append((str(g), b))
    bound = max(b for _, b in results)
    return bound, results, st


def relative_error_estimate(bound: float, fwd: PredicatedExpr, domain, cfg: AnalysisConfig | None = None):
    """bound / min |output|, or None when the output range meets zero."""
    cfg = cfg or AnalysisConfig()
    m = float("inf")
    for _, e in fwd:
        try:
            m = min(m, min_abs_lower(e, domain, cfg.opt))
        except DomainViolation:
            return None
    if not fwd.cases or m <= 0 or m == float("inf"):
        return None
    q = Fraction(bound) / Fraction(m)
    return _round_up(q)


def value_range(fwd: PredicatedExpr, domain, cfg: AnalysisConfig | None = None) -> Interval:
    from .gopt import range_of
    cfg = cfg or AnalysisConfig()
    out = None
    for _, e in fwd:
        r = range_of(e, domain, cfg.opt)
        out = r if out is None else iv_hull(out, r)
    return out if out is not None else Interval(0.0, 0.0)


# ---------------------------------------------------------------------------
# orchestration


def operand_error_bounds(problem: Problem, cfg: AnalysisConfig, state: SymbolicState | None = None,
                         nodes: list[int] | None = None) -> dict[int, float]:
    """Error bounds of all guard operands, computed in increasing node order."""
    st = state or SymbolicState(problem, cfg)
    dag = problem.dag
    if nodes is None:
        live = dag.reachable()
        ops: set[int] = set()
        for n in dag.nodes:
            if n.op == "select" and n.id in live:
                ops.update(n.children[:-2])
        nodes = sorted(ops)
    slacks: dict[int, float] = {}
    for j in sorted(nodes):
        acc = assemble_total_error(problem, j, cfg, st)
        b, _, _ = bound_total_error(acc, st.domain, cfg, slacks)
        slacks[j] = b
    return slacks


def analyze_node(problem: Problem, node: int, cfg: AnalysisConfig, state: SymbolicState,
                 slacks: dict[int, float] | None = None, name: str | None = None,
                 want_range: bool = False) -> OutputReport:
    t0 = time.perf_counter()
    rep = OutputReport(name or problem.node_name(node), node, float("inf"))
    try:
        acc = assemble_total_error(problem, node, cfg, state)
        b, groups, st = bound_total_error(acc, state.domain, cfg, slacks)
        rep.bound, rep.guards = b, groups
        rep.queries, rep.cache_hits = st.queries, st.cache_hits
        rep.info = {"terms": len(acc.terms), "edge_visits": acc.edge_visits, "edges": acc.edges}
        if st.status != "ok":
            rep.status = st.status
            rep.error = st.error
        fwd = state.fwd(node)
        if cfg.relative and np.isfinite(b):
            rep.relative = relative_error_estimate(b, fwd, state.domain, cfg)
        if want_range:
            rep.value_range = value_range(fwd, state.domain, cfg)
    except (GuardOverflow, DomainViolation, S.ExpressionTooLarge, S.NonDifferentiable,
            S.EvalDomain, KeyError) as exc:
        rep.status = "error"
        rep.error = f"{type(exc).__name__}: {exc}"
    rep.seconds = time.perf_counter() - t0
    return rep


def analyze_direct(problem: Problem, cfg: AnalysisConfig | None = None,
                   outputs: list[int] | None = None, want_range: bool = False) -> BoundReport:
    """Direct solve of every output (no abstraction)."""
    cfg = cfg or AnalysisConfig()
    t0 = time.perf_counter()
    problem.validate()
    state = SymbolicState(problem, cfg)
    slacks = None
    if cfg.constraint_mode == "prune":
        slacks = operand_error_bounds(problem, cfg, state)
    outs = list(problem.outputs if outputs is None else outputs)
    names = problem.output_names if outputs is None and problem.output_names else [problem.node_name(o) for o in outs]

    def run(item):
        o, nm = item
        return analyze_node(problem, o, cfg, state, slacks, nm, want_range)

    items = list(zip(outs, names))
    if cfg.opt.workers > 1 and len(items) > 1:
        for o, _ in items:
            state.fwd(o)  # finish the forward pass before fanning out
        with ThreadPoolExecutor(cfg.opt.workers) as ex:
            reports = list(ex.map(run, items))
    else:
        reports = [run(it) for it in items]
    return BoundReport(reports, time.perf_counter() - t0)


def analyze(problem: Problem, cfg: AnalysisConfig | None = None) -> BoundReport:
    cfg = cfg or AnalysisConfig()
    if cfg.abstraction:
        from .abstraction import abstraction_loop
        return abstraction_loop(problem, cfg.window, cfg)
    return analyze_direct(problem, cfg)


# ---------------------------------------------------------------------------
# naive interval evaluation of the DAG


def naive_interval(problem: Problem, node: int | None = None) -> Interval:
    """Plain interval evaluation node by node (no symbolic simplification)."""
    dag = problem.dag
    target = problem.outputs[0] if node is None else node
    vals: dict[int, Interval] = {}
    for n in dag.nodes[: target + 1]:
        if n.op == "input":
            vals[n.id] = problem.input_domains[n.name]
        elif n.op == "const":
            lo = float(n.value)
            hi = lo
            if Fraction(lo) != n.value:
                lo, hi = np.nextafter(lo, -np.inf), np.nextafter(lo, np.inf)
            vals[n.id] = Interval(float(min(lo, hi)), float(max(lo, hi)))
        elif n.op == "select":
            t, e = n.children[-2:]
            vals[n.id] = iv_hull(vals[t], vals[e])
        else:
            vals[n.id] = interval_apply(n.op, [vals[c] for c in n.children], n.k)
    return vals[target]

