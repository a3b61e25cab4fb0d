"""Generators for the benchmark programs shipped in ``corpus/``.

Each generator returns DSL source text.  ``write_corpus`` regenerates the
files; ``corpus_path`` and ``load`` locate and parse the shipped copies.
"""

from __future__ import annotations

from pathlib import Path

from .dsl import Problem, load_problem

CORPUS_DIR = Path(__file__).parent / "corpus"


def _inputs(decls: list[tuple[str, str, str, str]]) -> str:
    lines = [f"  {n}: {p} in [{lo}, {hi}];" for n, p, lo, hi in decls]
    return "INPUTS {\n" + "\n".join(lines) + "\n}\n"


def _program(inputs, exprs: list[tuple[str, str, str]], outputs: list[str], header: str = "") -> str:
    body = "\n".join(f"  {n}: {p} = {e};" for n, p, e in exprs)
    outs = " ".join(f"{o};" for o in outputs)
    head = "".join(f"# {line}\n" for line in header.splitlines()) if header else ""
    return f"{head}{_inputs(inputs)}EXPRS {{\n{body}\n}}\nOUTPUTS {{ {outs} }}\n"


def serial_sum(n: int = 1024, prec: str = "fl64", lo: str = "0.0", hi: str = "0.5") -> str:
    ins = [(f"x{i}", prec, lo, hi) for i in range(n)]
    exprs = [("s1", prec, "x0 + x1")]
    for i in range(2, n):
        exprs.append((f"s{i}", prec, f"s{i - 1} + x{i}"))
    return _program(ins, exprs, [f"s{n - 1}"], f"serial sum of {n} inputs")


def reduction(n: int = 1024, prec: str = "fl64", lo: str = "0.0", hi: str = "0.5") -> str:
    ins = [(f"x{i}", prec, lo, hi) for i in range(n)]
    level = [f"x{i}" for i in range(n)]
    exprs = []
    depth = 0
    while len(level) > 1:
        depth += 1
        nxt = []
        for j in range(0, len(level) - 1, 2):
            name = f"r{depth}_{j // 2}"
            exprs.append((name, prec, f"{level[j]} + {level[j + 1]}"))
            nxt.append(name)
        if len(level) % 2:
            nxt.append(level[-1])
        level = nxt
    return _program(ins, exprs, [level[0]], f"pairwise reduction of {n} inputs")


def horner(degree: int = 50, prec: str = "fl64") -> str:
    ins = [("x", prec, "0.0", "0.95")] + [(f"a{i}", prec, "0.0", "2.0") for i in range(degree + 1)]
    exprs = [(f"h{degree}", prec, f"a{degree - 1} + x * a{degree}")]
    for i in range(degree - 2, -1, -1):
        exprs.append((f"h{i + 1}", prec, f"a{i} + x * h{i + 2}"))
    return _program(ins, exprs, ["h1"], f"Horner evaluation of a degree-{degree} polynomial")


def poly(degree: int = 50, prec: str = "fl64") -> str:
    """Naive polynomial: a_i * x * ... * x (left-associated) summed in order."""
    ins = [("x", prec, "0.0", "0.95")] + [(f"a{i}", prec, "0.0", "2.0") for i in range(degree + 1)]
    exprs = []
    for i in range(1, degree + 1):
        exprs.append((f"m{i}", prec, " * ".join([f"a{i}"] + ["x"] * i)))
    acc = "a0"
    for i in range(1, degree + 1):
        exprs.append((f"p{i}", prec, f"{acc} + m{i}"))
        acc = f"p{i}"
    return _program(ins, exprs, [acc], f"term-by-term evaluation of a degree-{degree} polynomial")


def scan(n: int = 1024, prec: str = "fl64", lo: str = "0.0", hi: str = "0.5") -> str:
    """Work-efficient exclusive prefix sum (up-sweep then down-sweep)."""
    if n & (n - 1):
        raise ValueError("scan size must be a power of two")
    ins = [(f"x{i}", prec, lo, hi) for i in range(n)]
    cur = [f"x{i}" for i in range(n)]
    exprs = []
    counter = 0

    def bind(expr: str) -> str:
        nonlocal counter
        counter += 1
        name = f"u{counter}"
        exprs.append((name, prec, expr))
        return name

    d = 1
    while d < n:
        for k in range(0, n, 2 * d):
            i, j = k + d - 1, k + 2 * d - 1
            cur[j] = bind(f"{cur[i]} + {cur[j]}")
        d *= 2
    cur[n - 1] = "ZERO"
    d = n // 2
    while d >= 1:
        for k in range(0, n, 2 * d):
            i, j = k + d - 1, k + 2 * d - 1
            left = cur[i]
            cur[i] = cur[j]
            cur[j] = left if cur[j] == "ZERO" else bind(f"{cur[j]} + {left}")
        d //= 2
    outs = []
    for i, v in enumerate(cur):
        if v == "ZERO":
            exprs.append((f"y{i}", prec, "0.0"))
        else:
            exprs.append((f"y{i}", prec, f"{v} + 0.0"))
        outs.append(f"y{i}")
    return _program(ins, exprs, outs, f"exclusive prefix sum of {n} inputs")


def dqmom(prec: str = "fl64") -> str:
    ins = []
    for i in range(3):
        ins += [(f"m{i}", prec, "-1.0", "1.0"), (f"w{i}", prec, "0.00001", "1.0"),
                (f"a{i}", prec, "0.00001", "1.0")]
    exprs = []
    for i in range(3):
        exprs.append((f"q{i}", prec, f"(1.0 * (a{i} / w{i})) * (a{i} / w{i})"))
        exprs.append((f"t{i}", prec, f"((w{i} * (0.0 - m{i})) * (-3.0 * q{i})) * 1.0"))
    exprs.append(("r", prec, "0.0 + (t2 + (t1 + (t0 + 0.0)))"))
    return _program(ins, exprs, ["r"], "three-node quadrature moment source term")


def intro(prec: str = "fl32") -> str:
    ins = [("x1", prec, "0.1", "5.0"), ("x2", prec, "0.1", "5.0")]
    exprs = [("y", prec, "if (x1 * x1 + x2 * x2 <= 10.0) then 0.1 * x1 else 0.2 * x2")]
    return _program(ins, exprs, ["y"], "branch on the squared norm")


def cond_nested(prec: str = "fl64") -> str:
    """Nested branches over shared subexpressions n3 = x*y, n5 = 1/(x + n3)."""
    ins = [("x", prec, "1.0", "2.0"), ("y", prec, "1.0", "2.0")]
    exprs = [
        ("n3", prec, "x * y"),
        ("n4", prec, "x + n3"),
        ("n5", prec, "1.0 / n4"),
        ("res", prec, "if (n3 <= 2.5) then (if (x <= 1.5) then n5 + n3 else n5) else n3"),
    ]
    return _program(ins, exprs, ["res"], "nested branches over shared subexpressions")


def mixed_sub() -> str:
    """x - (x + y) with the inner sum in double and the outer difference in single."""
    ins = [("x", "fl64", "1.0", "2.0"), ("y", "fl64", "1.0", "2.0")]
    exprs = [("s", "fl64", "x + y"), ("d", "fl32", "x - s")]
    return _program(ins, exprs, ["d"], "mixed precision difference")


GENERATORS = {
    "intro": lambda: intro("fl32"),
    "intro64": lambda: intro("fl64"),
    "sum1024": serial_sum,
    "reduction1024": reduction,
    "horner50": horner,
    "poly50": poly,
    "scan1024": scan,
    "dqmom": dqmom,
    "cond_nested": cond_nested,
    "mixed_sub": mixed_sub,
}


def corpus_path(name: str) -> Path:
    return CORPUS_DIR / f"{name}.sat"


def load(name: str) -> Problem:
    return load_problem(corpus_path(name))


def corpus_names() -> list[str]:
    return sorted(p.stem for p in CORPUS_DIR.glob("*.sat"))


def write_corpus(directory: Path | None = None) -> list[Path]:
    out = Path(directory or CORPUS_DIR)
    out.mkdir(parents=True, exist_ok=True)
    paths = []
    for name, gen in GENERATORS.items():
        p = out / f"{name}.sat"
        p.write_text(gen())
        paths.append(p)
    return paths
