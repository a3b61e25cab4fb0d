from __future__ import annotations

import pytest

from fperr import benchmarks as B
from fperr.dsl import (
    FP32,
    FP64,
    CycleError,
    Dag,
    DuplicateBinding,
    EmptyOutputs,
    InvalidInterval,
    Node,
    ParseError,
    UndefinedVariable,
    cast_table,
    parse_problem,
    post_order_number,
    print_problem,
)


def _prog(body: str, outs: str = "y", inputs: str = "x: fl64 in [1, 2];") -> str:
    return f"INPUTS {{ {inputs} }} EXPRS {{ {body} }} OUTPUTS {{ {outs}; }}"


def test_parse_builds_topological_dag():
    p = parse_problem(_prog("a: fl64 = x * x; y: fl64 = a + x;"))
    for n in p.dag.nodes:
        assert all(c < n.id for c in n.children)
    assert p.output_names == ["y"]
    assert p.dag[p.outputs[0]].op == "+"


def test_unit_roundoff_per_node():
    p = parse_problem(_prog("y: fl32 = x * 3.0;"))
    n = p.dag[p.outputs[0]]
    assert n.precision == FP32 and n.delta_bound == 2.0**-24
    assert FP64.unit_roundoff == 2.0**-53


def test_exact_operations_carry_no_rounding():
    p = parse_problem(_prog("a: fl64 = x * 2.0; b: fl64 = a * 0.25; c: fl64 = -b; y: fl64 = c + 0.0;"))
    assert all(n.delta_bound == 0.0 for n in p.dag.nodes)


def test_pow_extension():
    p = parse_problem(_prog("y: fl64 = pow(x, 3);"))
    n = p.dag[p.outputs[0]]
    assert n.op == "pow" and n.k == 3


def test_comments_and_negative_literals():
    p = parse_problem("# header\n" + _prog("y: fl64 = x * -2.5; # trailing\n"))
    consts = [n.value for n in p.dag.nodes if n.op == "const"]
    assert consts == [-2.5]


@pytest.mark.parametrize("src, exc", [
    (_prog("y: fl64 = x + z;"), UndefinedVariable),
    (_prog("y: fl64 = x;", inputs="x: fl64 in [2, 1];"), InvalidInterval),
    (_prog("y: fl64 = x; y: fl64 = x;"), DuplicateBinding),
    (_prog("y: fl64 = x +;"), ParseError),
    (_prog("y: fl64 = x;", inputs="x: fl99 in [1, 2];"), ParseError),
    ("INPUTS { x: fl64 in [1, 2]; } EXPRS { y: fl64 = x; } OUTPUTS { }", EmptyOutputs),
])
def test_parse_errors(src, exc):
    with pytest.raises(exc):
        parse_problem(src)


def test_error_messages_carry_position():
    with pytest.raises(UndefinedVariable, match=r"1:\d+"):
        parse_problem(_prog("y: fl64 = x + z;"))


def test_print_round_trip_on_corpus():
    for name in B.corpus_names():
        if name in ("sum1024", "reduction1024", "scan1024"):
            continue
        p = B.load(name)
        q = parse_problem(print_problem(p))
        assert [(n.op, n.children, n.precision, n.value, n.k) for n in p.dag.nodes] == \
               [(n.op, n.children, n.precision, n.value, n.k) for n in q.dag.nodes]
        assert q.input_domains == p.input_domains


def test_cast_inference_on_mixed_program():
    p = B.load("mixed_sub")
    assert cast_table(p.dag) == [0.0, 0.0, 2.0**-24, 2.0**-24, 0.0]


def test_select_guard_operands_are_nodes():
    p = parse_problem(_prog("y: fl64 = if (x * x <= 2.0) then x else 0.5 * x;"))
    sel = p.dag[p.outputs[0]]
    assert sel.op == "select"
    assert len(sel.children) == 4  # two guard operands, then, else


def test_post_order_renumbering():
    nodes = [Node(0, "+", (1, 2)), Node(1, "input", name="a"), Node(2, "input", name="b")]
    dag, remap = post_order_number(Dag(nodes, [0]))
    assert remap == {1: 0, 2: 1, 0: 2}
    assert dag[2].children == (0, 1)


def test_cycle_detection():
    nodes = [Node(0, "neg", (1,)), Node(1, "neg", (0,))]
    with pytest.raises(CycleError):
        post_order_number(Dag(nodes, [0]))
