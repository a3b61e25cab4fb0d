"""Acceptance criteria 1-10, one PASS/FAIL line each.

Run alone with ``python3 -m pytest tests/test_acceptance.py -s`` or as a script.
"""

from __future__ import annotations

import subprocess
import sys
import time
from pathlib import Path

import pytest

from fperr import benchmarks as B
from fperr.abstraction import abstraction_loop
from fperr.conditionals import rank_instability
from fperr.dsl import cast_table, parse_problem
from fperr.empirical import SampleConfig, check_ordering, run_samples
from fperr.gopt import OptConfig
from fperr.taylor import (
    AnalysisConfig,
    SymbolicState,
    analyze,
    assemble_total_error,
    naive_interval,
    value_range,
)

U32, U64 = 2.0**-24, 2.0**-53
TESTS = Path(__file__).parent
NOCACHE = OptConfig(use_cache=False)


@pytest.fixture
def verdict(capsys):
    def report(n: int, checks: dict[str, bool], detail: str):
        ok = all(checks.values())
        failed = [k for k, v in checks.items() if not v]
        with capsys.disabled():
            tail = f" (failed: {', '.join(failed)})" if failed else ""
            print(f"\ncriterion {n}: {'PASS' if ok else 'FAIL'} {detail}{tail}")
        assert ok, failed
    return report


def _within(x: float, target: float, rel: float) -> bool:
    return abs(x - target) <= rel * abs(target)


def test_criterion_1_serial_sum(verdict):
    p = B.load("sum1024")
    t0 = time.perf_counter()
    r = analyze(p, AnalysisConfig(abstraction=True, window=(15, 25), opt=NOCACHE))[0]
    secs = time.perf_counter() - t0
    oracle = U64 * sum(0.5 * k for k in range(2, 1025))
    verdict(1, {
        "2.91e-11 +-5%": _within(r.bound, 2.91e-11, 0.05),
        "closed form": oracle <= r.bound <= oracle * 1.01,
        "runtime < 120 s": secs < 120,
    }, f"bound={r.bound:.4g} oracle={oracle:.4g} mode={r.mode} time={secs:.1f}s")


def test_criterion_2_reduction(verdict):
    tree = analyze(B.load("reduction1024"), AnalysisConfig(opt=NOCACHE))[0].bound
    serial = analyze(B.load("sum1024"), AnalysisConfig(opt=NOCACHE))[0].bound
    ratio = serial / tree
    verdict(2, {
        "5.68e-13 +-5%": _within(tree, 5.68e-13, 0.05),
        "serial/tree gap": ratio >= 10**1.5,
    }, f"bound={tree:.4g} serial/tree={ratio:.1f}")


def test_criterion_3_intro(verdict):
    t0 = time.perf_counter()
    r = analyze(B.load("intro"), AnalysisConfig(opt=NOCACHE))[0]
    (ins,) = rank_instability(B.load("intro"), AnalysisConfig(opt=NOCACHE))
    secs = time.perf_counter() - t0
    (ins64,) = rank_instability(B.load("intro64"), AnalysisConfig(opt=NOCACHE))
    verdict(3, {
        "bound 5.96e-8 +-1%": _within(r.bound, 5.96e-8, 0.01),
        "width 5.96e-6 +-5%": _within(ins.window, 5.96e-6, 0.05),
        "jump 0.99 +-1%": _within(ins.jump, 0.99, 0.01),
        "fp64 width ~1.0e-14 +-15%": _within(ins64.window, 1.0e-14, 0.15),
        "runtime < 5 s": secs < 5,
    }, f"bound={r.bound:.4g} width={ins.window:.4g} jump={ins.jump:.4g} "
       f"fp64 width={ins64.window:.4g} time={secs:.2f}s")


def test_criterion_4_dqmom(verdict):
    p = B.load("dqmom")
    t0 = time.perf_counter()
    r = analyze(p, AnalysisConfig(opt=NOCACHE))[0]
    st = SymbolicState(p)
    rng = value_range(st.fwd(p.outputs[0]), st.domain)
    naive = naive_interval(p)
    secs = time.perf_counter() - t0
    verdict(4, {
        "range -9e5 +-1%": _within(rng.lo, -9.0e5, 0.01),
        "range 9e5 +-1%": _within(rng.hi, 9.0e5, 0.01),
        "naive covers 4.5e10": naive.lo <= -4.5e10 and naive.hi >= 4.5e10,
        "bound <= 1e-9": r.bound <= 2 * 5.0e-10,
        "runtime < 30 s": secs < 30,
    }, f"range=[{rng.lo:.4g}, {rng.hi:.4g}] naive=[{naive.lo:.3g}, {naive.hi:.3g}] "
       f"bound={r.bound:.4g} time={secs:.2f}s")


def test_criterion_5_pow_canonicalization(verdict):
    p = parse_problem("INPUTS { x: fl64 in [-1, 5]; } EXPRS { y: fl64 = x * x * x; } OUTPUTS { y; }")
    st = SymbolicState(p)
    r = value_range(st.fwd(p.outputs[0]), st.domain, AnalysisConfig(opt=NOCACHE))
    verdict(5, {"exact [-1, 125]": (r.lo, r.hi) == (-1.0, 125.0)}, f"range=[{r.lo!r}, {r.hi!r}]")


def test_criterion_6_horner_poly(verdict):
    h = analyze(B.load("horner50"), AnalysisConfig(opt=NOCACHE))[0].bound
    q = analyze(B.load("poly50"), AnalysisConfig(opt=NOCACHE))[0].bound
    a = abstraction_loop(B.load("horner50"), (10, 20), AnalysisConfig(opt=NOCACHE))[0]
    verdict(6, {
        "Horner within 2x of 1.03e-13": 1.03e-13 / 2 <= h <= 1.03e-13 * 2,
        "Poly within 2x of 3.26e-13": 3.26e-13 / 2 <= q <= 3.26e-13 * 2,
        "Horner < Poly": h < q,
        "abstracted Horner same order as 4.43e-13": 0.1 <= a.bound / 4.43e-13 <= 10,
        "abstracted Horner sound vs direct": a.bound >= h * (1 - 1e-2),
    }, f"horner={h:.4g} poly={q:.4g} abstracted={a.bound:.4g} ({a.mode})")


def test_criterion_7_scan(verdict):
    p = B.load("scan1024")
    t0 = time.perf_counter()
    direct = max(o.bound for o in analyze(p, AnalysisConfig(opt=NOCACHE)).outputs)
    secs = time.perf_counter() - t0
    windows = {}
    for w in ((10, 20), (15, 25), (20, 40)):
        rs = abstraction_loop(p, w, AnalysisConfig(opt=NOCACHE))
        windows[w] = max(o.bound for o in rs)
    verdict(7, {
        "direct within 2x of 9.38e-13": 9.38e-13 / 2 <= direct <= 9.38e-13 * 2,
        "windows within 1%": all(_within(b, direct, 0.01) for b in windows.values()),
        "runtime < 10 min": secs < 600,
    }, f"direct={direct:.4g} time={secs:.1f}s "
       + " ".join(f"{w}={b:.4g}" for w, b in windows.items()))


def test_criterion_8_mixed_precision(verdict):
    p = B.load("mixed_sub")
    casts = cast_table(p.dag)
    r = analyze(p, AnalysisConfig(opt=NOCACHE))[0]
    oracle = 8 * U32 + 4 * U64
    acc = assemble_total_error(p, p.outputs[0])
    x = p.input_node("x").id
    x_terms = [t for t in acc.terms if t.source == x and t.kind == "local"]
    verdict(8, {
        "cast table": casts == [0.0, 0.0, U32, U32, 0.0],
        "bound ~ 8u32 within tolerance": oracle <= r.bound <= oracle * (1 + 1e-2),
        "input x has no delta term": not x_terms and p.dag[x].delta_bound == 0.0,
    }, f"casts={casts} bound={r.bound:.6g} oracle={oracle:.6g}")


def test_criterion_9_soundness_sandwich(verdict):
    lines, checks = [], {}
    for name in B.corpus_names():
        p = B.load(name)
        bounds = [o.bound for o in analyze(p, AnalysisConfig(abstraction=True)).outputs]
        rep = run_samples(p, SampleConfig(100_000, seed=2024))
        ok, bad = check_ordering(rep, bounds)
        checks[name] = ok and rep.skipped == 0
        lines.append(f"{name}: shadow={rep.shadow_max:.3g} prof={rep.profiled_max:.3g} "
                     f"bound={max(bounds):.3g} violations={len(bad)}")
    verdict(9, checks, "; ".join(lines))


PROPERTY_TESTS = [
    "test_properties.py",
    "test_interval.py::test_containment_fuzzing",
    "test_conditionals.py::test_bowtie_cells_are_disjoint_and_exhaustive",
    "test_conditionals.py::test_bowtie_sum_is_associative_and_commutative",
    "test_conditionals.py::test_weakened_predicate_contains_exact_one",
    "test_taylor.py::test_reverse_pass_visits_each_edge_once",
    "test_gopt.py::test_deterministic_single_worker",
]


def test_criterion_10_property_suites(verdict):
    cmd = [sys.executable, "-m", "pytest", "-q", "-p", "no:cacheprovider"]
    cmd += [str(TESTS / t) for t in PROPERTY_TESTS]
    proc = subprocess.run(cmd, capture_output=True, text=True, timeout=1800)
    summary = proc.stdout.strip().splitlines()[-1] if proc.stdout.strip() else proc.stderr[-200:]
    verdict(10, {"property suites": proc.returncode == 0}, summary)


if __name__ == "__main__":
    sys.exit(pytest.main([__file__, "-q", "-s"]))
