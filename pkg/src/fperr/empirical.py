"""Empirical checks of the rigorous bounds.

Shadow testing runs every sample twice: in the declared working precisions
and in 128-bit MPFR arithmetic, and records the largest output discrepancy.
Profiling evaluates the first-order error expression (the same objective the
rigorous bound maximizes) at the samples.  On every program the three numbers
must be ordered: shadow <= profiled <= rigorous.

Conditionals are run under two branch policies: every select follows the
working-precision decision, or every select follows the exact decision.  In
both cases the working and the exact computation take the same path, so a
branch flip is counted separately instead of being reported as round-off.
"""

from __future__ import annotations

import time
from dataclasses import dataclass, field

import gmpy2
import numpy as np

from . import predicate as P
from .conditionals import Guard, PredicatedExpr
from .dsl import Problem
from .symbolic import HIGH_PRECISION_BITS, eval_numpy
from .taylor import AnalysisConfig, SymbolicState, _local_noise

_NP = {"fp16": np.float16, "fp32": np.float32, "fp64": np.float64}
_CMP = {"<": np.less, "<=": np.less_equal, ">": np.greater, ">=": np.greater_equal}
_MPFR_FN = {k: np.frompyfunc(getattr(gmpy2, k), 1, 1) for k in ("sqrt", "sin", "cos", "exp", "log")}
_TO_FLOAT = np.frompyfunc(float, 1, 1)


def _to_mpfr(x: np.ndarray) -> np.ndarray:
    # adding an mpfr zero converts exactly and is much faster than mpfr() per element
    return gmpy2.mpfr(0) + np.asarray(x, dtype=np.float64).astype(object)


@dataclass
class SampleConfig:
    samples: int = 100_000
    seed: int = 0
    batch: int = 4096
    oracle_bits: int = HIGH_PRECISION_BITS

    def __post_init__(self):
        if self.samples < 1 or self.batch < 1:
            raise ValueError("sample and batch counts must be positive")
        if self.oracle_bits < 113:
            raise ValueError("the oracle needs at least 113 significand bits")


@dataclass
class EmpiricalReport:
    outputs: list[str]
    shadow: list[float]
    profiled: list[float] | None = None
    samples: int = 0
    skipped: int = 0  # samples with a non-finite value
    divergent: int = 0  # samples where some branch decision flips
    seconds: float = 0.0
    argmax: list[dict] = field(default_factory=list)

    @property
    def shadow_max(self) -> float:
        return max(self.shadow)

    @property
    def profiled_max(self) -> float:
        return max(self.profiled) if self.profiled else float("nan")

    def to_dict(self) -> dict:
        return {"outputs": self.outputs, "shadow": self.shadow, "profiled": self.profiled,
                "shadow_max": self.shadow_max,
                "profiled_max": None if self.profiled is None else self.profiled_max,
                "samples": self.samples, "skipped": self.skipped, "divergent": self.divergent,
                "seconds": round(self.seconds, 3)}


# ---------------------------------------------------------------------------
# sampling


def _round_to(x: np.ndarray, prec: str) -> np.ndarray:
    if prec == "fp64":
        return x
    with np.errstate(over="ignore"):
        return x.astype(_NP[prec]).astype(np.float64)


def _sample_input(rng, lo: float, hi: float, prec: str, n: int, exact: bool) -> tuple[np.ndarray, np.ndarray]:
    """(real value, working value) for one input."""
    x = rng.uniform(lo, hi, n) if hi > lo else np.full(n, lo)
    r = _round_to(x, prec)
    if exact:
        # representable values only; fix samples pushed out of the box
        t = _NP[prec]
        below, above = r < lo, r > hi
        if below.any():
            r[below] = np.nextafter(r[below].astype(t), t(np.inf)).astype(np.float64)
        if above.any():
            r[above] = np.nextafter(r[above].astype(t), t(-np.inf)).astype(np.float64)
        bad = (r < lo) | (r > hi)
        r[bad] = x[bad]
        return r, r
    return x, r


# ---------------------------------------------------------------------------
# paired evaluation


def _last_use(problem: Problem, keep: set[int]) -> dict[int, list[int]]:
    """node -> nodes whose last consumer it is (for freeing oracle arrays)."""
    last: dict[int, int] = {}
    for n in problem.dag.nodes:
        for c in n.children:
            last[c] = n.id
    free: dict[int, list[int]] = {}
    for c, p in last.items():
        if c not in keep:
            free.setdefault(p, []).append(c)
    return free


def _pred_eval(pred, val) -> np.ndarray:
    if isinstance(pred, P.Cmp):
        return np.asarray(_CMP[pred.op](val(pred.lhs), val(pred.rhs)), dtype=bool)
    if isinstance(pred, P.Not):
        return ~_pred_eval(pred.arg, val)
    parts = [_pred_eval(a, val) for a in pred.args]
    if isinstance(pred, P.And):
        return np.logical_and.reduce(parts) if parts else np.array(True)
    return np.logical_or.reduce(parts) if parts else np.array(False)


def _working_op(n, args: list[np.ndarray]) -> np.ndarray:
    op, prec = n.op, n.precision.name
    with np.errstate(all="ignore"):
        if op == "+":
            r = args[0] + args[1]
        elif op == "-":
            r = args[0] - args[1]
        elif op == "*":
            r = args[0] * args[1]
        elif op == "/":
            r = args[0] / args[1]
        elif op == "neg":
            return -args[0]
        elif op == "sqrt":
            r = np.sqrt(args[0])
        else:
            # pow and transcendentals: correctly rounded through MPFR
            return _correctly_rounded(n, args[0])
    return _round_to(r, prec)


def _correctly_rounded(n, x: np.ndarray) -> np.ndarray:
    ctx = gmpy2.context(precision=n.precision.bits, emax=1 << 20, emin=-(1 << 20))
    out = np.empty_like(x)
    with ctx:
        for i, v in enumerate(x.tolist()):
            try:
                if n.op == "pow":
                    r = gmpy2.mpfr(v) ** n.k
                else:
                    r = getattr(gmpy2, n.op)(gmpy2.mpfr(v))
                out[i] = float(r)
            except (ZeroDivisionError, ValueError):
                out[i] = np.nan
    return _round_to(out, n.precision.name)


def _oracle_op(n, args: list[np.ndarray]) -> np.ndarray:
    op = n.op
    if op == "+":
        return args[0] + args[1]
    if op == "-":
        return args[0] - args[1]
    if op == "*":
        return args[0] * args[1]
    if op == "/":
        return args[0] / args[1]
    if op == "neg":
        return -args[0]
    if op == "pow":
        return args[0] ** n.k
    return _MPFR_FN[op](args[0])


def _sweep(problem: Problem, env_real: dict, env_work: dict, policy: str, bits: int,
           keep_working: set[int]):
    """One batch through the DAG.

    Returns (oracle float64 values for every node, working values for the
    nodes in keep_working and the outputs, per-output errors, flips).
    """
    dag = problem.dag
    outs = set(problem.outputs)
    B = len(next(iter(env_real.values())))
    V = np.empty((len(dag), B))
    work: dict[int, np.ndarray] = {}
    orc: dict[int, np.ndarray] = {}
    free = _last_use(problem, outs | keep_working)
    flips = np.zeros(B, dtype=bool)
    ctx = gmpy2.context(precision=bits, emax=1 << 30, emin=-(1 << 30))
    with ctx:
        for n in dag.nodes:
            i = n.id
            if n.op == "input":
                w = env_work[n.name]
                o = _to_mpfr(env_real[n.name])
            elif n.op == "const":
                w = np.full(B, float(n.value))
                o = np.full(B, gmpy2.mpfr(gmpy2.mpq(n.value.numerator, n.value.denominator)), dtype=object)
            else:
                cw = []
                for pos, c in enumerate(n.children):
                    x = work[c]
                    if n.cast_bounds.get(pos, 0.0) > 0:
                        x = _round_to(x, n.precision.name)
                    cw.append(x)
                if n.op == "select":
                    dw = _pred_eval(n.guard, lambda j: work[j])
                    do = _pred_eval(n.guard, lambda j: orc[j])
                    flips |= dw != do
                    d = dw if policy == "working" else do
                    w = np.where(d, cw[-2], cw[-1])
                    o = np.where(d, orc[n.children[-2]], orc[n.children[-1]])
                else:
                    w = _working_op(n, cw)
                    o = _oracle_op(n, [orc[c] for c in n.children])
            work[i], orc[i] = w, o
            V[i] = _TO_FLOAT(o).astype(np.float64)
            for c in free.get(i, ()):
                work.pop(c, None)
                orc.pop(c, None)
        errs = {}
        for out in problem.outputs:
            diff = _to_mpfr(work[out]) - orc[out]
            errs[out] = np.abs(_TO_FLOAT(diff).astype(np.float64))
    return V, work, errs, flips


# ---------------------------------------------------------------------------
# profiling


@dataclass
class _Term:
    source: int
    noise: float
    alpha: PredicatedExpr


@dataclass
class _Profile:
    outputs: list[int]
    weights: np.ndarray  # outputs x nodes, |alpha| * noise for constant alphas
    varying: dict[int, list[_Term]]


def _profile_terms(problem: Problem, cfg: AnalysisConfig) -> _Profile:
    st = SymbolicState(problem, cfg)
    outs = list(problem.outputs)
    W = np.zeros((len(outs), len(problem.dag)))
    varying: dict[int, list[_Term]] = {}
    for k, o in enumerate(outs):
        deriv, contrib_at, _, _ = st.reverse(o)
        terms = []
        for j, dj in deriv.items():
            nz = _local_noise(problem.dag[j], cfg)
            if nz > 0:
                terms.append(_Term(j, nz, dj))
        for (p, pos), c in contrib_at.items():
            terms.append(_Term(problem.dag[p].children[pos], problem.dag[p].cast_bounds[pos], c))
        rest = []
        for t in terms:
            if t.alpha.unconditional and t.alpha.expr.is_const:
                W[k, t.source] += abs(float(t.alpha.expr.const_value)) * t.noise
            else:
                rest.append(t)
        varying[o] = rest
    return _Profile(outs, W, varying)


def _guard_truth(g: Guard, V: np.ndarray, memo: dict) -> np.ndarray:
    if g.is_true:
        return np.ones(V.shape[1], dtype=bool)
    idx = np.zeros(V.shape[1], dtype=np.int64)
    for k, a in enumerate(g.atoms):
        t = memo.get(a)
        if t is None:
            l, r = a.origin
            t = V[l] < V[r] if a.op == "<" else V[l] <= V[r]
            memo[a] = t
        idx |= t.astype(np.int64) << k
    return g.table[idx]


def _alpha_values(alpha: PredicatedExpr, env: dict, V: np.ndarray, memo: dict, emem: dict):
    """Values of a predicated derivative at the samples (scalar if constant)."""
    if alpha.unconditional and alpha.expr.is_const:
        return float(alpha.expr.const_value)
    total = np.zeros(V.shape[1])
    for g, e in alpha:
        val = float(e.const_value) if e.is_const else eval_numpy(e, env, emem)
        total = total + np.where(_guard_truth(g, V, memo), val, 0.0)
    return total


def _profile_batch(prof: _Profile, env: dict, V: np.ndarray, guard_vals: np.ndarray) -> dict[int, np.ndarray]:
    memo: dict = {}
    emem: dict = {}
    absV = np.abs(V)
    fixed = prof.weights @ absV
    out = {}
    for k, o in enumerate(prof.outputs):
        acc = fixed[k]
        for t in prof.varying[o]:
            a = _alpha_values(t.alpha, env, guard_vals, memo, emem)
            acc = acc + np.abs(a) * absV[t.source] * t.noise
        out[o] = acc
    return out


# ---------------------------------------------------------------------------
# drivers


def _policies(problem: Problem) -> list[str]:
    has_select = any(n.op == "select" for n in problem.dag.nodes)
    return ["working", "exact"] if has_select else ["working"]


def run_samples(problem: Problem, scfg: SampleConfig | None = None, profile: bool = True,
                cfg: AnalysisConfig | None = None) -> EmpiricalReport:
    """Shadow test (and optionally profile) on the same sample set."""
    scfg = scfg or SampleConfig()
    cfg = cfg or AnalysisConfig()
    t0 = time.perf_counter()
    problem.validate()
    dag = problem.dag
    rng = np.random.default_rng(scfg.seed)
    inputs = [n for n in dag.nodes if n.op == "input"]
    guard_ops = {c for n in dag.nodes if n.op == "select" for c in n.children[:-2]}
    terms = _profile_terms(problem, cfg) if profile else None
    outs = list(problem.outputs)
    shadow = {o: 0.0 for o in outs}
    prof = {o: 0.0 for o in outs}
    argmax: dict[int, dict] = {}
    skipped = divergent = 0
    done = 0
    while done < scfg.samples:
        B = min(scfg.batch, scfg.samples - done)
        env_real, env_work = {}, {}
        for n in inputs:
            d = problem.input_domains[n.name]
            env_real[n.name], env_work[n.name] = _sample_input(
                rng, d.lo, d.hi, n.precision.name, B, exact=not n.rounded)
        flips_any = np.zeros(B, dtype=bool)
        for policy in _policies(problem):
            V, work, errs, flips = _sweep(problem, env_real, env_work, policy, scfg.oracle_bits, guard_ops)
            flips_any |= flips
            ok = np.ones(B, dtype=bool)
            for o in outs:
                ok &= np.isfinite(errs[o]) & np.isfinite(work[o])
            if profile:
                # guard atoms follow the same decisions as the branches taken
                G = V.copy()
                if policy == "working":
                    for j in guard_ops:
                        G[j] = work[j]
                pv = _profile_batch(terms, env_real, V, G)
            for o in outs:
                e = np.where(ok, errs[o], 0.0)
                k = int(np.argmax(e))
                if e[k] > shadow[o]:
                    shadow[o] = float(e[k])
                    argmax[o] = {name: float(env_real[name][k]) for name in env_real}
                if profile:
                    p = np.where(ok & np.isfinite(pv[o]), pv[o], 0.0)
                    prof[o] = max(prof[o], float(p.max()))
            skipped += int((~ok).sum()) if policy == "working" else 0
        divergent += int(flips_any.sum())
        done += B
    names = problem.output_names or [problem.node_name(o) for o in outs]
    return EmpiricalReport(names, [shadow[o] for o in outs], [prof[o] for o in outs] if profile else None,
                           done, skipped, divergent, time.perf_counter() - t0,
                           [argmax.get(o, {}) for o in outs])


def shadow_test(problem: Problem, samples: int = 100_000, seed: int = 0) -> EmpiricalReport:
    return run_samples(problem, SampleConfig(samples, seed), profile=False)


def profile_error_expr(problem: Problem, samples: int = 100_000, seed: int = 0,
                       cfg: AnalysisConfig | None = None) -> EmpiricalReport:
    return run_samples(problem, SampleConfig(samples, seed), profile=True, cfg=cfg)


def _ulp_up(x: float) -> float:
    return float(np.nextafter(x, np.inf))


def check_ordering(report: EmpiricalReport, rigorous: list[float]) -> tuple[bool, list[str]]:
    """shadow <= profiled <= rigorous per output, with one ulp of slack."""
    bad = []
    prof = report.profiled or [None] * len(report.outputs)
    for name, s, p, r in zip(report.outputs, report.shadow, prof, rigorous):
        if p is not None:
            if s > _ulp_up(p):
                bad.append(f"{name}: shadow {s!r} > profiled {p!r}")
            if p > _ulp_up(r):
                bad.append(f"{name}: profiled {p!r} > rigorous {r!r}")
        elif s > _ulp_up(r):
            bad.append(f"{name}: shadow {s!r} > rigorous {r!r}")
    return not bad, bad
