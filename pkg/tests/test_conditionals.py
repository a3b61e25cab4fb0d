from __future__ import annotations

import itertools

import numpy as np
import pytest

from fperr import benchmarks as B
from fperr import predicate as P
from fperr import symbolic as S
from fperr.conditionals import (
    FALSE,
    MAX_CASES,
    TRUE,
    ZERO_P,
    Guard,
    GuardOverflow,
    PredicatedExpr,
    bowtie,
    instability_jump,
    instability_window_width,
    make_atom,
    padd,
    pselect,
    rank_instability,
)
from fperr.dsl import parse_problem
from fperr.gopt import OptConfig
from fperr.taylor import AnalysisConfig, SymbolicState, analyze, operand_error_bounds, reverse_derivatives

x, y = S.var("x"), S.var("y")


def _lit(lhs, op, rhs, positive=True):
    a, pos = make_atom(lhs, op, S.const(rhs) if not isinstance(rhs, S.SymExpr) else rhs)
    return Guard.literal(a, pos == positive)


P1 = _lit(x, "<=", 1.5)
P2 = _lit(x * y, "<=", 2.5)


def _semantics(pe: PredicatedExpr, universe):
    """Map assignment index -> expression (missing cases are zero)."""
    out = {}
    for a in range(1 << len(universe)):
        hits = [e for g, e in pe if g.over(universe)[a]]
        assert len(hits) <= 1, "cases overlap"
        out[a] = hits[0] if hits else S.ZERO
    return out


def test_make_atom_decides_constant_comparisons():
    assert make_atom(S.const(3), "<=", S.const(5)) is True
    assert make_atom(x + 1, "<", x) is False
    a1, _ = make_atom(x, ">=", S.const(2))
    a2, _ = make_atom(S.const(2), "<=", x)
    assert a1 is a2


def test_guard_algebra():
    assert (P1 & ~P1).is_false
    assert (P1 | ~P1).is_true
    assert (P1 & TRUE) == P1 and (P1 | FALSE) == P1
    assert ~~P2 == P2


def test_bowtie_unconditional_reconvergence():
    r = bowtie(PredicatedExpr.of(x), PredicatedExpr.of(y), lambda a, b: a + b)
    assert r.unconditional and r.expr == x + y


def test_bowtie_with_zero_case_is_identity():
    a = PredicatedExpr(((P1, x),))
    assert bowtie(a, ZERO_P, lambda u, v: u + v) == a
    assert bowtie(ZERO_P, a, lambda u, v: u + v) == a


def test_bowtie_cells_are_disjoint_and_exhaustive():
    a = PredicatedExpr(((P1, x),))
    b = PredicatedExpr(((P2, y),))
    r = bowtie(a, b, lambda u, v: u + v)
    universe = tuple(sorted(set(P1.atoms) | set(P2.atoms)))
    # the four cells over {P1, P2}: both, only P1, only P2, neither (dropped as zero)
    expected = {}
    for asg in range(1 << len(universe)):
        truth = {atom: bool(asg >> i & 1) for i, atom in enumerate(universe)}
        p1, p2 = P1.evaluate(truth), P2.evaluate(truth)
        expected[asg] = (x if p1 else S.ZERO) + (y if p2 else S.ZERO)
    assert _semantics(r, universe) == expected
    assert len(r) == 3
    tables = [g.over(universe) for g, _ in r]
    for t1, t2 in itertools.combinations(tables, 2):
        assert not (t1 & t2).any()
    union = np.logical_or.reduce(tables)
    assert (union == (P1 | P2).over(universe)).all()


def test_bowtie_sum_is_associative_and_commutative():
    P3 = _lit(y, "<", 1.2)
    a = PredicatedExpr(((P1, x), (~P1, S.const(2))))
    b = PredicatedExpr(((P2, y),))
    c = PredicatedExpr(((P3, x * y), (~P3 & P1, S.const(1))))
    universe = tuple(sorted(set(P1.atoms) | set(P2.atoms) | set(P3.atoms)))
    left = padd(padd(a, b), c)
    right = padd(a, padd(b, c))
    swapped = padd(c, padd(b, a))
    assert _semantics(left, universe) == _semantics(right, universe) == _semantics(swapped, universe)


def test_equal_expressions_merge_their_guards():
    r = pselect(P1, PredicatedExpr.of(x), PredicatedExpr.of(x))
    assert r.unconditional and r.expr == x


def test_nested_select_derivative_has_three_cases():
    p = B.load("cond_nested")
    n3 = next(i for i, n in p.names.items() if n == "n3")
    d = reverse_derivatives(p, p.outputs[0])[n3]
    cases = {str(g): str(e) for g, e in d}
    assert cases == {
        "x <= 3/2 && x*y <= 5/2": "1 - inv(x + x*y)^2",
        "!(x <= 3/2) && x*y <= 5/2": "-inv(x + x*y)^2",
        "!(x*y <= 5/2)": "1",
    }


def test_case_cap_raises():
    atoms = [_lit(x, "<=", 1 + k / 100) for k in range(7)]
    cases = []
    for bits in itertools.product([False, True], repeat=7):
        g = TRUE
        for lit, b in zip(atoms, bits):
            g = g & (lit if b else ~lit)
        cases.append((g, x * (len(cases) + 1)))
    assert len(cases) > MAX_CASES
    with pytest.raises(GuardOverflow):
        PredicatedExpr(tuple(cases)).map(lambda e: e)
    assert len(PredicatedExpr(tuple(cases[:MAX_CASES])).map(lambda e: e)) == MAX_CASES


def test_weakened_predicate_contains_exact_one():
    # x1^2 + x2^2 <= 10 weakened by its operands' error bounds
    p = B.load("intro")
    cfg = AnalysisConfig()
    st = SymbolicState(p, cfg)
    slacks = operand_error_bounds(p, cfg, st)
    sel = p.dag[p.outputs[0]]
    g = st.guard(sel.id)
    pos = g.to_predicate(slacks)
    neg = (~g).to_predicate(slacks)
    rng = np.random.default_rng(1)
    pts = rng.uniform(0.1, 5.0, size=(10_000, 2))
    # concentrate half of the samples near the boundary
    ang = rng.uniform(0, np.pi / 2, 5000)
    pts[:5000, 0] = np.sqrt(10.0) * np.cos(ang)
    pts[:5000, 1] = np.sqrt(10.0) * np.sin(ang)
    for a, b in pts:
        def value(e):
            return float(S.eval_point(e, {"x1": a, "x2": b}))
        exact = a * a + b * b <= 10.0
        if exact:
            assert P.evaluate(pos, value)
        else:
            assert P.evaluate(neg, value)


def test_window_width_intro():
    for name, want, rel in (("intro", 5.96e-6, 0.05), ("intro64", 1.11e-14, 0.01)):
        (r,) = rank_instability(B.load(name))
        assert r.window == pytest.approx(want, rel=rel)


def test_constant_guard_has_zero_width():
    assert instability_window_width(P.Cmp(0, "<=", 1), {0: 0.0, 1: 0.0}) == 0.0


def test_jump_examples():
    dom = B.load("intro").input_domains
    cfg = OptConfig(use_cache=False)
    g = _lit(S.var("x1"), "<=", 2.0)
    same = PredicatedExpr.of(S.var("x1"))
    assert instability_jump(g, same, same, dom, {}, cfg) == 0.0
    shifted = PredicatedExpr.of(S.var("x1") + S.const(0.75))
    assert instability_jump(g, same, shifted, dom, {}, cfg) == 0.75
    (r,) = rank_instability(B.load("intro"))
    assert r.jump == pytest.approx(0.99, rel=1e-2)


def test_prune_jump_not_larger_than_ignore():
    for name in ("intro", "intro64", "cond_nested"):
        p = B.load(name)
        ign = {r.node: r.jump for r in rank_instability(p, AnalysisConfig())}
        pr = AnalysisConfig(opt=OptConfig(constraint_mode="prune"))
        for r in rank_instability(p, pr):
            assert r.jump <= ign[r.node] * (1 + 1e-12)


def test_prune_jump_restricted_to_gray_zone():
    pr = AnalysisConfig(opt=OptConfig(constraint_mode="prune"))
    (r,) = rank_instability(B.load("intro"), pr)
    # near x1^2 + x2^2 = 10 the jump is far below the box-wide 0.99
    assert r.jump < 0.99
    assert r.jump > 0.3


def test_rank_orders_nested_selects():
    ranks = rank_instability(B.load("cond_nested"))
    assert len(ranks) == 2
    assert ranks[0].jump >= ranks[1].jump
    assert rank_instability(B.load("dqmom")) == []


def test_zero_overlap_degeneration():
    # exact comparisons: the conditional bound is the worst branch-only bound
    src = """INPUTS {{ x: fl64 in [1, 2]; y: fl64 in [1, 2]; }}
EXPRS {{ r: fl64 = {body}; }} OUTPUTS {{ r; }}"""
    cond = analyze(parse_problem(src.format(body="if (x <= y) then x * y + x else x * x * 3.0")))
    a = analyze(parse_problem(src.format(body="x * y + x")))
    b = analyze(parse_problem(src.format(body="x * x * 3.0")))
    assert cond[0].bound == max(a[0].bound, b[0].bound)
