"""Problem files: precisions, the expression DAG, parser and printer.

Grammar::

    program := inputs exprs outputs
    inputs  := "INPUTS" "{" (ident ":" prec ["rounded"] "in" "[" num "," num "]" ";")+ "}"
    exprs   := "EXPRS" "{" (ident ":" prec "=" expr ";")+ "}"
    outputs := "OUTPUTS" "{" (ident ";")+ "}"
    prec    := "fl16" | "fl32" | "fl64"
    expr    := term (("+" | "-") term)*
    term    := unary (("*" | "/") unary)*
    unary   := "-" unary | primary
    primary := num | ident | "(" expr ")" | fn "(" expr ")" | "pow" "(" expr "," int ")"
             | "if" "(" pred ")" "then" expr "else" expr
    pred    := conj ("||" conj)* ;  conj := neg ("&&" neg)*
    neg     := "!" neg | "(" pred ")" | expr cmp expr

``#`` starts a comment.  A unary minus applied to a number literal is folded
into the constant.
"""

from __future__ import annotations

import math
import re
from dataclasses import dataclass, field, replace
from decimal import Decimal
from fractions import Fraction
from typing import Any

import gmpy2

from . import predicate as P
from .interval import Interval


# ---------------------------------------------------------------------------
# precisions


@dataclass(frozen=True)
class Precision:
    name: str
    mantissa: int  # stored mantissa bits

    @property
    def bits(self) -> int:
        return self.mantissa + 1

    @property
    def unit_roundoff(self) -> float:
        return 2.0 ** -(self.mantissa + 1)

    @property
    def u_exact(self) -> Fraction:
        return Fraction(1, 2 ** (self.mantissa + 1))

    @property
    def dsl(self) -> str:
        return "fl" + self.name[2:]

    def round(self, x) -> Fraction:
        """Exact value of x rounded to nearest at this precision."""
        ctx = gmpy2.context(precision=self.bits, round=gmpy2.RoundToNearest,
                            emax=1 << 20, emin=-(1 << 20))
        with ctx:
            if isinstance(x, Fraction):
                v = gmpy2.mpfr(gmpy2.mpq(x.numerator, x.denominator))
            else:
                v = gmpy2.mpfr(x)
        return Fraction(*v.as_integer_ratio())


FP16 = Precision("fp16", 10)
FP32 = Precision("fp32", 23)
FP64 = Precision("fp64", 52)
PRECISIONS = {"fp16": FP16, "fp32": FP32, "fp64": FP64, "fl16": FP16, "fl32": FP32, "fl64": FP64}


def precision(name) -> Precision:
    if isinstance(name, Precision):
        return name
    return PRECISIONS[name]


# ---------------------------------------------------------------------------
# DAG

ARITH = ("+", "-", "*", "/")
UNARY_FN = ("sqrt", "sin", "cos", "exp", "log")
OPS = ("input", "const") + ARITH + ("neg",) + UNARY_FN + ("pow", "select")


@dataclass
class Node:
    id: int
    op: str
    children: tuple[int, ...] = ()
    precision: Precision = FP64
    delta_bound: float = 0.0
    cast_bounds: dict[int, float] = field(default_factory=dict)
    guard: Any = None  # select nodes: Predicate over node ids
    value: Fraction | None = None  # const nodes
    name: str | None = None  # input nodes
    k: int | None = None  # pow exponent
    rounded: bool = False  # input rounding

    @property
    def is_leaf(self) -> bool:
        return self.op in ("input", "const")

    def arg_children(self) -> tuple[int, ...]:
        """Children that carry value (for select: then, else)."""
        if self.op == "select":
            return self.children[-2:]
        return self.children


@dataclass
class Dag:
    nodes: list[Node]
    roots: list[int]

    def __len__(self):
        return len(self.nodes)

    def __getitem__(self, i) -> Node:
        return self.nodes[i]

    def edges(self):
        for n in self.nodes:
            for pos, c in enumerate(n.children):
                yield c, n.id, pos

    def consumers(self) -> list[list[int]]:
        out: list[list[int]] = [[] for _ in self.nodes]
        for c, n, _ in self.edges():
            out[c].append(n)
        return out

    def reachable(self, roots=None) -> set[int]:
        seen: set[int] = set()
        stack = list(self.roots if roots is None else roots)
        while stack:
            i = stack.pop()
            if i in seen:
                continue
            seen.add(i)
            stack.extend(self.nodes[i].children)
        return seen


@dataclass
class Problem:
    dag: Dag
    input_domains: dict[str, Interval]
    outputs: list[int]
    names: dict[int, str] = field(default_factory=dict)
    output_names: list[str] = field(default_factory=list)
    config_overrides: dict = field(default_factory=dict)
    # free variables introduced by abstraction: name -> FreeVar
    free_vars: dict = field(default_factory=dict)

    def input_node(self, name: str) -> Node:
        for n in self.dag.nodes:
            if n.op == "input" and n.name == name:
                return n
        raise KeyError(name)

    def node_name(self, i: int) -> str:
        n = self.dag.nodes[i]
        if n.op == "input":
            return n.name
        if n.op == "const" and i not in self.names:
            return _fmt_exact(n.value)
        return self.names.get(i, f"t{i}")

    def validate(self) -> Problem:
        for n in self.dag.nodes:
            if any(c >= n.id for c in n.children):
                raise DslError(f"node {n.id} has a child with a larger id")
            if n.op == "input" and n.name not in self.input_domains:
                raise UndefinedVariable(n.name)
        for o in self.outputs:
            if not 0 <= o < len(self.dag.nodes):
                raise DslError(f"invalid output id {o}")
        if not self.outputs:
            raise EmptyOutputs("OUTPUTS is empty")
        return self


class DslError(ValueError):
    pass


class ParseError(DslError):
    def __init__(self, msg: str, line: int = 0, col: int = 0):
        self.line, self.col = line, col
        super().__init__(f"{line}:{col}: {msg}")


class UndefinedVariable(DslError):
    pass


class DuplicateBinding(DslError):
    pass


class EmptyOutputs(DslError):
    pass


class InvalidInterval(DslError):
    pass


class CycleError(DslError):
    pass


def _is_pow2(v: Fraction) -> bool:
    v = abs(v)
    if v == 0:
        return False
    n, d = v.numerator, v.denominator
    return (n & (n - 1) == 0) and (d & (d - 1) == 0)


class DagBuilder:
    """Hash-consing node factory; ids are assigned in creation order."""

    def __init__(self, exact_ops: bool = True):
        self.nodes: list[Node] = []
        self._memo: dict[tuple, int] = {}
        self.exact_ops = exact_ops

    def _add(self, key: tuple, node: Node) -> int:
        i = self._memo.get(key)
        if i is not None:
            return i
        node.id = len(self.nodes)
        self.nodes.append(node)
        self._memo[key] = node.id
        return node.id

    def input(self, name: str, prec, rounded: bool = False) -> int:
        prec = precision(prec)
        key = ("input", name)
        if key in self._memo:
            raise DuplicateBinding(name)
        return self._add(key, Node(0, "input", (), prec, prec.unit_roundoff if rounded else 0.0,
                                   name=name, rounded=rounded))

    def const(self, value, prec) -> int:
        prec = precision(prec)
        v = prec.round(Fraction(value) if not isinstance(value, Fraction) else value)
        return self._add(("const", v, prec.name), Node(0, "const", (), prec, 0.0, value=v))

    def _delta(self, op: str, children: tuple, prec: Precision) -> float:
        if op in ("neg", "select"):
            return 0.0
        if self.exact_ops and op in ARITH:
            a, b = (self.nodes[c] for c in children)
            if op in "+-" and ((a.op == "const" and a.value == 0) or (b.op == "const" and b.value == 0)):
                return 0.0
            if op == "*" and any(n.op == "const" and _is_pow2(n.value) for n in (a, b)):
                return 0.0
            if op == "/" and b.op == "const" and _is_pow2(b.value):
                return 0.0
        return prec.unit_roundoff

    def op(self, op: str, children, prec, k: int | None = None) -> int:
        prec = precision(prec)
        children = tuple(children)
        if op not in OPS or op in ("input", "const", "select"):
            raise DslError(f"bad operator {op!r}")
        key = (op, children, prec.name, k)
        if key in self._memo:
            return self._memo[key]
        return self._add(key, Node(0, op, children, prec, self._delta(op, children, prec), k=k))

    def select(self, guard, then_id: int, else_id: int, prec) -> int:
        prec = precision(prec)
        operands: list[int] = []
        for a in P.atoms(guard):
            for x in (a.lhs, a.rhs):
                if x not in operands:
                    operands.append(x)
        children = tuple(operands) + (then_id, else_id)
        key = ("select", guard, children, prec.name)
        if key in self._memo:
            return self._memo[key]
        return self._add(key, Node(0, "select", children, prec, 0.0, guard=guard))

    def build(self, outputs: list[int]) -> Dag:
        return Dag(list(self.nodes), list(outputs))


# ---------------------------------------------------------------------------
# parser

_TOKEN = re.compile(r"""
    (?P<ws>[ \t\r]+|\#[^\n]*)
  | (?P<nl>\n)
  | (?P<num>(?:\d+\.\d*|\.\d+|\d+)(?:[eE][+-]?\d+)?)
  | (?P<id>[A-Za-z_][A-Za-z0-9_]*)
  | (?P<op><=|>=|&&|\|\||[-+*/<>(){}\[\];:,=!])
  | (?P<bad>.)
""", re.VERBOSE)

KEYWORDS = {"INPUTS", "EXPRS", "OUTPUTS", "in", "if", "then", "else", "rounded", "fl16", "fl32", "fl64", "pow"}


@dataclass
class _Tok:
    kind: str
    text: str
    line: int
    col: int


def _tokenize(text: str) -> list[_Tok]:
    toks: list[_Tok] = []
    line, start = 1, 0
    for m in _TOKEN.finditer(text):
        kind = m.lastgroup
        col = m.start() - start + 1
        if kind == "nl":
            line += 1
            start = m.end()
            continue
        if kind == "ws":
            continue
        if kind == "bad":
            raise ParseError(f"unexpected character {m.group()!r}", line, col)
        toks.append(_Tok(kind, m.group(), line, col))
    toks.append(_Tok("eof", "", line, 1))
    return toks


class _Parser:
    def __init__(self, text: str, exact_ops: bool):
        self.toks = _tokenize(text)
        self.i = 0
        self.b = DagBuilder(exact_ops)
        self.env: dict[str, int] = {}
        self.domains: dict[str, Interval] = {}
        self.names: dict[int, str] = {}

    # -- token helpers
    @property
    def tok(self) -> _Tok:
        return self.toks[self.i]

    def error(self, msg: str):
        t = self.tok
        raise ParseError(msg, t.line, t.col)

    def accept(self, text: str) -> bool:
        if self.tok.text == text and self.tok.kind in ("op", "id"):
            self.i += 1
            return True
        return False

    def expect(self, text: str):
        if not self.accept(text):
            self.error(f"expected {text!r}, found {self.tok.text or 'end of input'!r}")

    def ident(self) -> str:
        t = self.tok
        if t.kind != "id" or t.text in KEYWORDS:
            self.error(f"expected identifier, found {t.text!r}")
        self.i += 1
        return t.text

    def number(self) -> Fraction:
        neg = self.accept("-")
        t = self.tok
        if t.kind != "num":
            self.error(f"expected number, found {t.text!r}")
        self.i += 1
        v = Fraction(t.text)
        return -v if neg else v

    def prec(self) -> Precision:
        t = self.tok
        if t.text not in ("fl16", "fl32", "fl64"):
            self.error(f"expected precision, found {t.text!r}")
        self.i += 1
        return PRECISIONS[t.text]

    # -- sections
    def program(self) -> Problem:
        self.expect("INPUTS")
        self.expect("{")
        while not self.accept("}"):
            self.input_decl()
        self.expect("EXPRS")
        self.expect("{")
        while not self.accept("}"):
            self.binding()
        self.expect("OUTPUTS")
        self.expect("{")
        outs: list[str] = []
        while not self.accept("}"):
            t = self.tok
            name = self.ident()
            if name not in self.env:
                raise UndefinedVariable(f"{t.line}:{t.col}: undefined output {name!r}")
            outs.append(name)
            self.expect(";")
        if self.tok.kind != "eof":
            self.error("trailing input")
        if not outs:
            raise EmptyOutputs("OUTPUTS is empty")
        ids = [self.env[o] for o in outs]
        prob = Problem(self.b.build(ids), self.domains, ids, self.names, outs)
        return prob.validate()

    def input_decl(self):
        t = self.tok
        name = self.ident()
        if name in self.env:
            raise DuplicateBinding(f"{t.line}:{t.col}: {name!r} bound twice")
        self.expect(":")
        prec = self.prec()
        rounded = self.accept("rounded")
        self.expect("in")
        self.expect("[")
        lo = self.number()
        self.expect(",")
        hi = self.number()
        self.expect("]")
        self.expect(";")
        if lo > hi:
            raise InvalidInterval(f"{t.line}:{t.col}: interval [{lo}, {hi}] for {name!r} has lo > hi")
        self.env[name] = self.b.input(name, prec, rounded)
        self.domains[name] = Interval(_round_down(lo), _round_up(hi))

    def binding(self):
        t = self.tok
        name = self.ident()
        if name in self.env:
            raise DuplicateBinding(f"{t.line}:{t.col}: {name!r} bound twice")
        self.expect(":")
        prec = self.prec()
        self.expect("=")
        i = self.expr(prec)
        self.expect(";")
        self.env[name] = i
        if self.b.nodes[i].op != "input":
            self.names.setdefault(i, name)

    # -- expressions
    def expr(self, prec) -> int:
        a = self.term(prec)
        while self.tok.text in ("+", "-") and self.tok.kind == "op":
            op = self.tok.text
            self.i += 1
            a = self.b.op(op, (a, self.term(prec)), prec)
        return a

    def term(self, prec) -> int:
        a = self.unary(prec)
        while self.tok.text in ("*", "/") and self.tok.kind == "op":
            op = self.tok.text
            self.i += 1
            a = self.b.op(op, (a, self.unary(prec)), prec)
        return a

    def unary(self, prec) -> int:
        if self.tok.text == "-" and self.tok.kind == "op":
            self.i += 1
            if self.tok.kind == "num":
                v = Fraction(self.tok.text)
                self.i += 1
                return self.b.const(-v, prec)
            return self.b.op("neg", (self.unary(prec),), prec)
        return self.primary(prec)

    def primary(self, prec) -> int:
        t = self.tok
        if t.kind == "num":
            self.i += 1
            return self.b.const(Fraction(t.text), prec)
        if self.accept("("):
            a = self.expr(prec)
            self.expect(")")
            return a
        if t.kind == "id" and t.text in UNARY_FN:
            self.i += 1
            self.expect("(")
            a = self.expr(prec)
            self.expect(")")
            return self.b.op(t.text, (a,), prec)
        if self.accept("pow"):
            self.expect("(")
            a = self.expr(prec)
            self.expect(",")
            k = self.number()
            if k.denominator != 1:
                self.error("pow exponent must be an integer")
            self.expect(")")
            return self.b.op("pow", (a,), prec, k=int(k))
        if self.accept("if"):
            self.expect("(")
            g = self.pred(prec)
            self.expect(")")
            self.expect("then")
            a = self.expr(prec)
            self.expect("else")
            b = self.expr(prec)
            return self.b.select(g, a, b, prec)
        if t.kind == "id" and t.text not in KEYWORDS:
            self.i += 1
            if t.text not in self.env:
                raise UndefinedVariable(f"{t.line}:{t.col}: undefined variable {t.text!r}")
            return self.env[t.text]
        self.error(f"unexpected {t.text or 'end of input'!r}")

    # -- predicates
    def pred(self, prec):
        parts = [self.conj(prec)]
        while self.accept("||"):
            parts.append(self.conj(prec))
        return parts[0] if len(parts) == 1 else P.Or(tuple(parts))

    def conj(self, prec):
        parts = [self.neg(prec)]
        while self.accept("&&"):
            parts.append(self.neg(prec))
        return parts[0] if len(parts) == 1 else P.And(tuple(parts))

    def neg(self, prec):
        if self.accept("!"):
            return P.Not(self.neg(prec))
        if self.tok.text == "(":
            # either a parenthesized predicate or an expression starting with "("
            save, nnodes, memo = self.i, len(self.b.nodes), dict(self.b._memo)
            try:
                return self.comparison(prec)
            except ParseError:
                self.i = save
                del self.b.nodes[nnodes:]
                self.b._memo = memo
            self.expect("(")
            p = self.pred(prec)
            self.expect(")")
            return p
        return self.comparison(prec)

    def comparison(self, prec):
        a = self.expr(prec)
        t = self.tok
        if t.text not in P.CMP_OPS:
            self.error(f"expected comparison operator, found {t.text!r}")
        self.i += 1
        b = self.expr(prec)
        return P.Cmp(a, t.text, b)


def _round_down(v: Fraction) -> float:
    f = float(v)
    return math.nextafter(f, -math.inf) if Fraction(f) > v else f


def _round_up(v: Fraction) -> float:
    f = float(v)
    return math.nextafter(f, math.inf) if Fraction(f) < v else f


def parse_problem(text: str, exact_ops: bool = True) -> Problem:
    """Parse DSL source into a validated Problem with casts inferred."""
    prob = _Parser(text, exact_ops).program()
    prob.dag = infer_cast_map(prob.dag)
    return prob


def load_problem(path, exact_ops: bool = True) -> Problem:
    with open(path, encoding="utf-8") as f:
        return parse_problem(f.read(), exact_ops)


# ---------------------------------------------------------------------------
# casts and numbering


def infer_cast_map(dag: Dag) -> Dag:
    """Fill per-edge down-cast bounds: u(consumer) if the child is wider."""
    nodes = []
    for n in dag.nodes:
        cb: dict[int, float] = {}
        value_pos = range(len(n.children) - 2, len(n.children)) if n.op == "select" else range(len(n.children))
        for pos, c in enumerate(n.children):
            child = dag.nodes[c]
            narrowing = n.precision.unit_roundoff > child.precision.unit_roundoff
            cb[pos] = n.precision.unit_roundoff if (narrowing and pos in value_pos) else 0.0
        nodes.append(replace(n, cast_bounds=cb))
    return Dag(nodes, list(dag.roots))


def cast_table(dag: Dag) -> list[float]:
    """Cast bounds listed edge by edge (consumers in post-order), then roots."""
    out = []
    for n in dag.nodes:
        if n.op in ("input", "const"):
            continue
        out.extend(n.cast_bounds.get(p, 0.0) for p in range(len(n.children)))
    out.extend(0.0 for _ in dag.roots)
    return out


def post_order_number(dag: Dag) -> tuple[Dag, dict[int, int]]:
    """Renumber so that children precede parents (left-to-right DFS).

    Returns the new Dag and the old-id -> new-id map.
    """
    state: dict[int, int] = {}
    order: list[int] = []
    by_id = {n.id: n for n in dag.nodes}

    def visit(root: int):
        stack = [(root, 0)]
        while stack:
            i, k = stack.pop()
            if k == 0:
                if state.get(i) == 2:
                    continue
                if state.get(i) == 1:
                    raise CycleError(f"cycle through node {i}")
                state[i] = 1
            ch = by_id[i].children
            if k < len(ch):
                stack.append((i, k + 1))
                c = ch[k]
                if state.get(c) == 1:
                    raise CycleError(f"cycle through node {c}")
                if state.get(c) != 2:
                    stack.append((c, 0))
            else:
                state[i] = 2
                order.append(i)

    for r in dag.roots:
        visit(r)
    for n in dag.nodes:
        if state.get(n.id) != 2:
            visit(n.id)
    remap = {old: new for new, old in enumerate(order)}
    nodes = []
    for old in order:
        n = by_id[old]
        g = P.map_operands(n.guard, remap.__getitem__) if n.guard is not None else None
        nodes.append(replace(n, id=remap[old], children=tuple(remap[c] for c in n.children), guard=g))
    return Dag(nodes, [remap[r] for r in dag.roots]), remap


# ---------------------------------------------------------------------------
# printer


def _fmt_num(v: Fraction | float) -> str:
    return repr(float(v))


def _fmt_exact(v: float) -> str:
    """Exact decimal expansion of a double (re-parses without rounding)."""
    f = float(v)
    if f == int(f) and abs(f) < 2**53:
        return repr(f)
    return format(Decimal(f), "f")


def print_problem(prob: Problem) -> str:
    """DSL source that parses back to the same DAG."""
    dag = prob.dag
    used = set(prob.names.values()) | set(prob.input_domains)
    names: dict[int, str] = {}
    for n in dag.nodes:
        if n.op == "input":
            names[n.id] = n.name
        elif n.id in prob.names:
            names[n.id] = prob.names[n.id]
        else:
            nm, k = f"t{n.id}", 0
            while nm in used:
                k += 1
                nm = f"t{n.id}_{k}"
            names[n.id] = nm
            used.add(nm)
    lines = ["INPUTS {"]
    for n in dag.nodes:
        if n.op == "input":
            d = prob.input_domains[n.name]
            r = " rounded" if n.rounded else ""
            lines.append(f"  {n.name}: {n.precision.dsl}{r} in [{_fmt_exact(d.lo)}, {_fmt_exact(d.hi)}];")
    lines.append("}")
    lines.append("EXPRS {")
    for n in dag.nodes:
        if n.op == "input":
            continue
        c = [names[x] for x in n.children]
        if n.op == "const":
            rhs = _fmt_num(n.value)
        elif n.op in ARITH:
            rhs = f"{c[0]} {n.op} {c[1]}"
        elif n.op == "neg":
            rhs = f"-{c[0]}"
        elif n.op == "pow":
            rhs = f"pow({c[0]}, {n.k})"
        elif n.op == "select":
            rhs = f"if ({P.to_str(n.guard, names.__getitem__)}) then {c[-2]} else {c[-1]}"
        else:
            rhs = f"{n.op}({c[0]})"
        lines.append(f"  {names[n.id]}: {n.precision.dsl} = {rhs};")
    lines.append("}")
    lines.append("OUTPUTS {")
    onames = prob.output_names or [names[o] for o in prob.outputs]
    for o, nm in zip(prob.outputs, onames):
        lines.append(f"  {nm if prob.dag.nodes[o].op == 'input' or names[o] == nm else names[o]};")
    lines.append("}")
    return "\n".join(lines) + "\n"
