"""Computation-graph abstraction for large DAGs.

Nodes at a chosen depth (distance from the outputs) are solved on their own,
then replaced by free variables carrying the node's value range and error
bound.  The remaining DAG is analyzed with one extra error term per free
variable (adjoint times the abstracted error).  Both halves are themselves
abstracted again while they are deep enough.
"""

from __future__ import annotations

import math
import time
from dataclasses import dataclass, replace

from . import predicate as P
from .dsl import Dag, Node, Problem
from .interval import Interval
from .taylor import AnalysisConfig, BoundReport, OutputReport, SymbolicState, analyze_direct


class NoAbstractionNeeded(Exception):
    """The DAG is shallower than the abstraction window."""


@dataclass(frozen=True)
class FreeVar:
    name: str
    value_range: Interval
    error_bound: float
    source: int  # node id in the DAG it was cut from


def depths(dag: Dag, roots: list[int]) -> dict[int, int]:
    """Longest distance from any root, for every node in the roots' cone."""
    cone = sorted(dag.reachable(roots), reverse=True)
    d = {r: 0 for r in roots}
    for p in cone:
        dp = d.get(p)
        if dp is None:
            continue
        for c in dag[p].children:
            if d.get(c, -1) < dp + 1:
                d[c] = dp + 1
    return d


def fanouts(dag: Dag, nodes) -> dict[int, int]:
    nodes = set(nodes)
    f = {i: 0 for i in nodes}
    for i in nodes:
        for c in dag[i].children:
            if c in f:
                f[c] += 1
    return f


def node_information(depth: int, fanout: int, h2: int) -> float:
    """Entropy-style weight of a node at the given depth."""
    if depth <= 0 or depth >= h2:
        return 0.0
    q = depth / h2
    return -q * math.log(q) * fanout


def choose_height(weight_by_depth: dict[int, float], window: tuple[int, int], height: int) -> int:
    """Argmax over h in [H1, min(H2, height-1)] of sum of node information.

    ``weight_by_depth[h]`` is the summed fanout of the cuttable nodes at
    depth h; depths without such nodes are skipped.  Ties go to the smaller h.
    """
    h1, h2 = window
    cands = [h for h in range(max(h1, 1), min(h2, height - 1) + 1) if weight_by_depth.get(h, 0) > 0]
    if not cands:
        raise NoAbstractionNeeded(f"height {height} below window {window}")
    best, best_score = cands[0], node_information(cands[0], weight_by_depth[cands[0]], h2)
    for h in cands[1:]:
        sc = node_information(h, weight_by_depth[h], h2)
        if sc > best_score:
            best, best_score = h, sc
    return best


def select_abstraction_height(dag: Dag, window: tuple[int, int], roots: list[int] | None = None) -> int:
    roots = list(dag.roots if roots is None else roots)
    d = depths(dag, roots)
    fo = fanouts(dag, d)
    weights: dict[int, float] = {}
    for i, h in d.items():
        if not dag[i].is_leaf:
            weights[h] = weights.get(h, 0) + max(fo[i], 1)
    return choose_height(weights, window, max(d.values(), default=0))


def abstract_at_height(problem: Problem, roots: list[int], cut: list[int],
                       infos: dict[int, OutputReport], fv_start: int = 0):
    """Residue problem with every cut node replaced by a free variable.

    Returns (residue, id map old->new for the roots, next free-variable index).
    """
    dag = problem.dag
    cutset = set(cut)
    need: set[int] = set()
    stack = list(roots)
    while stack:
        i = stack.pop()
        if i in need:
            continue
        need.add(i)
        if i not in cutset:
            stack.extend(dag[i].children)
    remap: dict[int, int] = {}
    nodes: list[Node] = []
    domains = {}
    free = dict(problem.free_vars)
    names = {}
    k = fv_start
    taken = set(problem.input_domains)
    for i in sorted(need):
        old = dag[i]
        nid = len(nodes)
        if i in cutset:
            while f"FV{k}" in taken:
                k += 1
            name = f"FV{k}"
            k += 1
            rep = infos[i]
            fv = FreeVar(name, rep.value_range, rep.bound, i)
            free[name] = fv
            domains[name] = rep.value_range
            nodes.append(Node(nid, "input", (), old.precision, 0.0, name=name))
        else:
            ch = tuple(remap[c] for c in old.children)
            guard = P.map_operands(old.guard, lambda x: remap[x]) if old.guard is not None else None
            nodes.append(replace(old, id=nid, children=ch, guard=guard, cast_bounds=dict(old.cast_bounds)))
            if old.op == "input":
                domains[old.name] = problem.input_domains[old.name]
            if i in problem.names:
                names[nid] = problem.names[i]
        remap[i] = nid
    outs = [remap[r] for r in roots]
    residue = Problem(Dag(nodes, outs), domains, outs, names,
                      [problem.node_name(r) for r in roots], dict(problem.config_overrides),
                      {n: fv for n, fv in free.items() if n in domains})
    return residue, remap, k


@dataclass
class _Ctx:
    cfg: AnalysisConfig
    window: tuple[int, int]
    fv: int = 0
    rounds: int = 0
    queries: int = 0
    cache_hits: int = 0
    deepest: int = 0


def _residue_too_large(residue: Problem, cfg: AnalysisConfig) -> bool:
    st = SymbolicState(residue, cfg)
    for o in residue.outputs:
        for _, e in st.fwd(o):
            if e.op_count() > cfg.max_op_count:
                return True
    return False


def _solve(problem: Problem, roots: list[int], want_range: bool, ctx: _Ctx, level: int) -> dict[int, OutputReport]:
    ctx.deepest = max(ctx.deepest, level)
    h1, h2 = ctx.window
    while True:
        try:
            h = select_abstraction_height(problem.dag, (h1, h2), roots)
        except NoAbstractionNeeded:
            rep = analyze_direct(problem, ctx.cfg, roots, want_range)
            out = {}
            for r, o in zip(roots, rep.outputs):
                ctx.queries += o.queries
                ctx.cache_hits += o.cache_hits
                out[r] = o
            return out
        d = depths(problem.dag, roots)
        cut = sorted(i for i, di in d.items() if di == h and not problem.dag[i].is_leaf)
        t0 = time.perf_counter()
        infos = _solve(problem, cut, True, ctx, level + 1)
        slow = (time.perf_counter() - t0) / max(len(cut), 1) > 3 * ctx.cfg.opt.timeout
        failed = [i for i in cut if infos[i].value_range is None or infos[i].status == "error"]
        if failed:
            # a cut node could not be bounded: fall back to solving these roots directly
            h2 = h - 1
            if h2 < h1:
                return _solve_direct(problem, roots, want_range, ctx)
            continue
        residue, remap, ctx.fv = abstract_at_height(problem, roots, cut, infos, ctx.fv)
        if (slow or _residue_too_large(residue, ctx.cfg)) and h - 1 >= h1:
            # runtime saturation or oversized residue: pick a shallower cut
            h2 = h - 1
            ctx.window = (h1, min(ctx.window[1], h2))
            continue
        ctx.rounds += 1
        res = _solve(residue, residue.outputs, want_range, ctx, level + 1)
        out = {}
        for r in roots:
            o = res[remap[r]]
            out[r] = replace(o, node=r, output=problem.node_name(r))
        return out


def _solve_direct(problem, roots, want_range, ctx) -> dict[int, OutputReport]:
    rep = analyze_direct(problem, ctx.cfg, roots, want_range)
    for o in rep.outputs:
        ctx.queries += o.queries
        ctx.cache_hits += o.cache_hits
    return dict(zip(roots, rep.outputs))


def abstraction_loop(problem: Problem, window: tuple[int, int] | None = None,
                     cfg: AnalysisConfig | None = None) -> BoundReport:
    """Bounds every output, abstracting sub-DAGs inside the window."""
    cfg = cfg or AnalysisConfig()
    window = tuple(window or cfg.window)
    t0 = time.perf_counter()
    problem.validate()
    ctx = _Ctx(cfg, window)
    outs = list(problem.outputs)
    res = _solve(problem, outs, False, ctx, 0)
    names = problem.output_names or [problem.node_name(o) for o in outs]
    reports = []
    elapsed = time.perf_counter() - t0
    for o, nm in zip(outs, names):
        r = replace(res[o], output=nm, node=o)
        if ctx.rounds:
            r.mode = "abstracted"
            r.window = ctx.window
            r.queries, r.cache_hits = ctx.queries, ctx.cache_hits
            r.seconds = elapsed
            r.info = dict(r.info, rounds=ctx.rounds, free_vars=ctx.fv)
        reports.append(r)
    return BoundReport(reports, elapsed)
