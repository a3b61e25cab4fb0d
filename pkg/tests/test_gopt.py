from __future__ import annotations

import numpy as np
import pytest

from fperr import predicate as P
from fperr import symbolic as S
from fperr.gopt import (
    OptConfig,
    QueryCache,
    interval_eval,
    maximize_upper,
    min_abs_lower,
    query_signature,
    range_of,
)
from fperr.interval import Interval

x, y = S.var("x"), S.var("y")
D = {"x": Interval(-1.0, 5.0), "y": Interval(1.0, 2.0)}
NOCACHE = OptConfig(use_cache=False)
PRUNE = OptConfig(use_cache=False, constraint_mode="prune")


def _brute_max(f, n=401):
    xs = np.linspace(D["x"].lo, D["x"].hi, n)
    ys = np.linspace(D["y"].lo, D["y"].hi, n)
    X, Y = np.meshgrid(xs, ys)
    return float(f(X, Y).max())


def test_canonical_cube_range_is_exact():
    assert range_of(S.pow_int(x, 3), D) == Interval(-1.0, 125.0)


def test_naive_interval_is_wider_than_canonical_range():
    e = x * x - x * S.const(2)
    naive = interval_eval(e, D)
    r = range_of(e, D, NOCACHE)
    assert naive.lo <= r.lo and r.hi <= naive.hi
    assert r.lo == pytest.approx(-1.0, rel=2e-2)


@pytest.mark.parametrize("expr, f", [
    (x * x - x * y, lambda X, Y: X * X - X * Y),
    (S.sin(x) * y, lambda X, Y: np.sin(X) * Y),
    (S.inv(x * x + y), lambda X, Y: 1 / (X * X + Y)),
    (S.sym_abs(x - y * 2), lambda X, Y: np.abs(X - 2 * Y)),
])
def test_upper_bound_is_sound_and_tight(expr, f):
    r = maximize_upper(expr, D, cfg=NOCACHE)
    true = _brute_max(f)
    assert r.upper_bound >= true - 1e-12
    assert r.certified_lower <= r.upper_bound
    assert r.upper_bound - r.certified_lower <= 1e-2 * abs(r.upper_bound) + 1e-12
    assert r.status == "converged"


def test_prune_mode_respects_guard():
    r = maximize_upper(x, D, P.Cmp(x, "<=", S.const(2)), PRUNE)
    assert 2.0 <= r.upper_bound <= 2.0 * 1.01
    r = maximize_upper(x * y, D, P.Not(P.Cmp(x, "<=", S.const(2))), PRUNE)
    assert r.upper_bound == 10.0


def test_ignore_mode_drops_guard():
    r = maximize_upper(x, D, P.Cmp(x, "<=", S.const(2)), NOCACHE)
    assert r.upper_bound == 5.0


def test_infeasible_guard_gives_minus_infinity():
    r = maximize_upper(x, D, P.Cmp(x, "<=", S.const(-2)), PRUNE)
    assert r.upper_bound == -np.inf


def test_slack_widens_feasible_set():
    g = P.Cmp(x, "<=", S.const(2), slack=(0.0, 0.5))
    r = maximize_upper(x, D, g, PRUNE)
    assert r.upper_bound >= 2.5


def test_domain_violation_is_reported():
    r = maximize_upper(S.inv(x), D, cfg=NOCACHE)
    assert r.status == "domain-violation" and r.upper_bound == np.inf


def test_min_abs_lower():
    assert min_abs_lower(y * y, D) == 1.0
    assert min_abs_lower(x, D) == 0.0


def test_high_dimensional_linear_objective():
    n = 500
    dom = {f"v{i}": Interval(-1.0, 1.0) for i in range(n)}
    e = S.sym_abs(S.add_all(S.var(f"v{i}") for i in range(n)))
    r = maximize_upper(e, dom, cfg=NOCACHE)
    assert n <= r.upper_bound <= n * (1 + 1e-9)


def test_budget_exhaustion_is_still_an_upper_bound():
    cfg = OptConfig(use_cache=False, max_subdivisions=2, tolerance=1e-12)
    r = maximize_upper(S.sin(x * y) * x, D, cfg=cfg)
    assert r.status == "budget-exhausted"
    assert r.upper_bound >= _brute_max(lambda X, Y: np.sin(X * Y) * X)


def test_deterministic_single_worker():
    e = S.sin(x * y) + S.cos(x) * y
    a = maximize_upper(e, D, cfg=NOCACHE)
    b = maximize_upper(e, D, cfg=NOCACHE)
    assert (a.upper_bound, a.certified_lower, a.queries) == (b.upper_bound, b.certified_lower, b.queries)


def test_cache_hits_and_renaming(tmp_path):
    cache = QueryCache(str(tmp_path / "q.tsv"))
    cfg = OptConfig()
    e1 = x * x - x * y
    r1 = maximize_upper(e1, D, cfg=cfg, cache=cache)
    r2 = maximize_upper(e1, D, cfg=cfg, cache=cache)
    assert r2.cache_hits == 1 and r2.upper_bound == r1.upper_bound
    # a renamed but otherwise identical query shares the signature
    a, b = S.var("a"), S.var("b")
    dom2 = {"a": D["x"], "b": D["y"]}
    assert query_signature(a * a - a * b, dom2) == query_signature(e1, D)
    reloaded = QueryCache(str(tmp_path / "q.tsv"))
    assert len(reloaded) == 1
