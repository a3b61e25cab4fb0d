from __future__ import annotations

import math

import pytest

from fperr import benchmarks as B
from fperr.dsl import parse_problem
from fperr.gopt import OptConfig
from fperr.taylor import (
    AnalysisConfig,
    analyze,
    assemble_total_error,
    naive_interval,
    value_range,
    SymbolicState,
)

U32, U64 = 2.0**-24, 2.0**-53


def _one(src: str, **kw):
    return analyze(parse_problem(src), AnalysisConfig(**kw))[0]


def test_single_rounding():
    r = _one("INPUTS { x: fl64 in [1, 2]; y: fl64 in [1, 3]; } EXPRS { z: fl64 = x * y; } OUTPUTS { z; }")
    assert r.bound == pytest.approx(6 * U64, rel=1e-2)
    assert r.bound >= 6 * U64


def test_identity_has_zero_error():
    r = _one("INPUTS { x: fl32 in [1, 2]; } EXPRS { y: fl32 = x; } OUTPUTS { y; }")
    assert r.bound == 0.0


def test_intro_bound():
    r = analyze(B.load("intro"))[0]
    assert r.bound == pytest.approx(5.96e-8, rel=1e-2)
    assert len(r.guards) == 2


def test_mixed_precision_hand_oracle():
    p = B.load("mixed_sub")
    r = analyze(p)[0]
    oracle = 8 * U32 + 4 * U64
    assert oracle <= r.bound <= oracle * 1.01
    acc = assemble_total_error(p, p.outputs[0])
    x = p.input_node("x").id
    assert not [t for t in acc.terms if t.kind == "local" and t.source == x]
    kinds = sorted(t.kind for t in acc.terms)
    assert kinds == ["cast", "cast", "local", "local"]


def test_rounded_inputs_add_a_term():
    src = "INPUTS {{ x: fl32{r} in [1, 2]; }} EXPRS {{ y: fl32 = x * 3.0; }} OUTPUTS {{ y; }}"
    exact = _one(src.format(r=""))
    rounded = _one(src.format(r=" rounded"))
    assert rounded.bound == pytest.approx(exact.bound * 2, rel=1e-2)


def test_relative_error():
    r = _one("INPUTS { x: fl64 in [1, 2]; } EXPRS { y: fl64 = x * 3.0; } OUTPUTS { y; }")
    assert r.relative == pytest.approx(U64, rel=1e-2)
    r = _one("INPUTS { x: fl64 in [-1, 2]; } EXPRS { y: fl64 = x * 3.0; } OUTPUTS { y; }")
    assert r.relative is None


def test_division_by_zero_range_is_an_error():
    r = _one("INPUTS { x: fl64 in [-1, 2]; } EXPRS { y: fl64 = 1.0 / x; } OUTPUTS { y; }")
    assert r.status in ("error", "domain-violation")
    assert not math.isfinite(r.bound)


def test_reverse_pass_visits_each_edge_once():
    for name in ("intro", "dqmom", "cond_nested", "horner50", "mixed_sub"):
        p = B.load(name)
        acc = assemble_total_error(p, p.outputs[0])
        assert acc.edge_visits <= 2 * acc.edges


def test_dqmom_bound_and_ranges():
    p = B.load("dqmom")
    r = analyze(p)[0]
    assert r.bound <= 2 * 5.0e-10
    st = SymbolicState(p)
    v = value_range(st.fwd(p.outputs[0]), st.domain)
    assert v.lo == pytest.approx(-9.0e5, rel=1e-2) and v.hi == pytest.approx(9.0e5, rel=1e-2)
    naive = naive_interval(p)
    assert naive.lo <= -4.5e10 and naive.hi >= 4.5e10


def test_transcendental_multiplier():
    src = "INPUTS { x: fl64 in [0, 1]; } EXPRS { y: fl64 = exp(x); } OUTPUTS { y; }"
    one = _one(src)
    three = _one(src, transcendental_ulps={"exp": 3.0})
    assert three.bound == pytest.approx(3 * one.bound, rel=1e-2)


def test_serial_sum_small_closed_form():
    n = 32
    p = parse_problem(B.serial_sum(n))
    r = analyze(p)[0]
    oracle = U64 * sum(0.5 * k for k in range(2, n + 1))
    assert oracle <= r.bound <= oracle * 1.01


def test_bound_is_deterministic_and_worker_independent():
    p = B.load("cond_nested")
    a = analyze(p, AnalysisConfig(opt=OptConfig(use_cache=False)))
    b = analyze(p, AnalysisConfig(opt=OptConfig(use_cache=False)))
    assert a.to_dict()[0]["bound"] == b.to_dict()[0]["bound"]
    q = parse_problem(B.scan(16))
    one = analyze(q, AnalysisConfig(opt=OptConfig(use_cache=False)))
    four = analyze(q, AnalysisConfig(opt=OptConfig(use_cache=False, workers=4)))
    assert [o.bound for o in one.outputs] == [o.bound for o in four.outputs]


def test_prune_mode_not_looser_than_ignore():
    p = B.load("intro")
    ign = analyze(p)[0].bound
    pr = analyze(p, AnalysisConfig(opt=OptConfig(constraint_mode="prune")))[0].bound
    assert pr <= ign * (1 + 1e-9)


def test_small_op_budget_falls_back_to_chunks():
    p = parse_problem(B.horner(8))
    full = analyze(p)[0].bound
    chunked = analyze(p, AnalysisConfig(max_op_count=40))[0]
    assert chunked.status == "ok"
    assert chunked.bound >= full * (1 - 1e-2)


def test_report_json_shape():
    d = analyze(B.load("intro")).to_dict()[0]
    assert set(d) >= {"output", "bound", "relative", "guards", "stats", "mode"}
    assert set(d["stats"]) == {"queries", "cache_hits", "seconds"}
    assert d["mode"] == "direct"


def test_mixed_precision_between_uniform_precisions():
    src = """INPUTS {{ x: fl64 in [0, 1]; a: fl64 in [0, 2]; b: fl64 in [0, 2]; c: fl64 in [0, 2]; }}
EXPRS {{ h1: {p1} = b + x * c; h0: {p0} = a + x * h1; }} OUTPUTS {{ h0; }}"""
    wide = _one(src.format(p1="fl64", p0="fl64")).bound
    mixed = _one(src.format(p1="fl64", p0="fl32")).bound
    narrow = _one(src.format(p1="fl32", p0="fl32")).bound
    assert wide < mixed <= narrow

