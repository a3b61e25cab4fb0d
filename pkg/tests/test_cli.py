from __future__ import annotations

import io
import json
from pathlib import Path

import jsonschema
import pytest

from fperr import benchmarks as B
from fperr.abstraction import depths
from fperr.cli import parse_args, run
from fperr.gopt import get_cache, set_cache

SCHEMA = json.loads((Path(__file__).parents[1] / "docs" / "report.schema.json").read_text())


@pytest.fixture(autouse=True)
def _fresh_cache(monkeypatch):
    monkeypatch.delenv("FPERR_CACHE", raising=False)
    set_cache(None)
    yield
    set_cache(None)


def _run(*argv) -> tuple[int, str, str]:
    out, err = io.StringIO(), io.StringIO()
    code = run([str(a) for a in argv], out, err)
    return code, out.getvalue(), err.getvalue()


def _json(*argv) -> dict:
    code, out, err = _run(*argv, "--format", "json")
    assert code == 0, err
    report = json.loads(out)
    jsonschema.validate(report, SCHEMA)
    return report


def test_defaults():
    cfg = parse_args(["x.sat"])
    assert cfg.command == "analyze"
    assert cfg.abstraction and cfg.window == (10, 40)
    assert cfg.max_op_count == 30000 and cfg.tolerance == 1e-2 and cfg.timeout == 10.0
    assert cfg.constraints == "none" and cfg.format == "text"


def test_intro_json():
    r = _json(B.corpus_path("intro"), "--instability", "report")
    out = r["outputs"][0]
    assert out["bound"] == pytest.approx(5.96e-8, rel=1e-2)
    (ins,) = r["instability"]
    assert ins["width"] == pytest.approx(5.96e-6, rel=5e-2)
    assert ins["jump"] == pytest.approx(0.99, rel=1e-2)


def test_serial_sum_without_abstraction():
    r = _json(B.corpus_path("sum1024"), "--no-abstract")
    assert r["outputs"][0]["bound"] == pytest.approx(2.91e-11, rel=5e-2)
    assert r["outputs"][0]["mode"] == "direct"


def test_text_report_columns():
    code, out, _ = _run(B.corpus_path("intro"))
    assert code == 0
    header = out.splitlines()[1]
    for col in ("Output", "Absolute Error Bound", "Execution Time"):
        assert col in header
    assert "when x1^2 + x2^2 <= 10:" in out


@pytest.mark.parametrize("argv", [
    ["--window", "20,10", "intro.sat"],
    ["--window", "ten", "intro.sat"],
    ["--tolerance", "-1", "intro.sat"],
    ["--constraints", "maybe", "intro.sat"],
    [],
])
def test_usage_errors_exit_2(argv, tmp_path):
    argv = [a if a != "intro.sat" else str(B.corpus_path("intro")) for a in argv]
    code, _, err = _run(*argv)
    assert code == 2
    assert "usage" in err


def test_missing_file_exit_2(tmp_path):
    code, _, err = _run(tmp_path / "nope.sat")
    assert code == 2 and "no such file" in err


def test_dsl_error_exit_1(tmp_path):
    f = tmp_path / "bad.sat"
    f.write_text("INPUTS { x: fl64 in [1, 2]; } EXPRS { y: fl64 = x + z; } OUTPUTS { y; }")
    code, _, err = _run(f)
    assert code == 1 and "dsl_frontend" in err


def test_domain_violation_exit_1(tmp_path):
    f = tmp_path / "dz.sat"
    f.write_text("INPUTS { x: fl64 in [-1, 2]; } EXPRS { y: fl64 = 1.0 / x; } OUTPUTS { y; }")
    code, out, _ = _run(f, "--format", "json")
    assert code == 1
    r = json.loads(out)
    jsonschema.validate(r, SCHEMA)
    assert r["status"] == "error" and r["errors"][0]["category"]
    assert r["outputs"][0]["bound"] == "inf"


@pytest.mark.parametrize("name", [n for n in B.corpus_names() if n != "scan1024"])
def test_corpus_reports_match_schema(name):
    r = _json(B.corpus_path(name), "--window", "10,20", "--instability", "rank")
    assert r["status"] == "ok"
    assert all(o["bound"] != "inf" for o in r["outputs"])


def test_no_abstract_equals_window_above_height():
    p = B.load("horner50")
    h = max(depths(p.dag, p.outputs).values()) + 1
    a = _json(B.corpus_path("horner50"), "--no-abstract")
    b = _json(B.corpus_path("horner50"), "--abstract", "--window", f"{h},{h}")
    assert [o["bound"] for o in a["outputs"]] == [o["bound"] for o in b["outputs"]]


def test_subcommands_standalone():
    path = B.corpus_path("cond_nested")
    s = _json("shadow", path, "--samples", "500")
    assert s["empirical"]["samples"] == 500 and s["empirical"]["shadow_max"] > 0
    p = _json("profile", path, "--samples", "500")
    assert p["empirical"]["profiled_max"] > 0
    i = _json("instability", path)
    assert [r["rank"] for r in i["instability"]] == [1, 2]


def test_shadow_and_profile_fold_into_analyze():
    r = _json(B.corpus_path("intro64"), "--shadow", "2000", "--profile", "2000")
    emp = r["empirical"]
    assert emp["ordering_ok"] and emp["violations"] == []
    assert emp["shadow_max"] <= emp["profiled_max"] <= r["outputs"][0]["bound"]


def test_cache_flag_and_environment(tmp_path, monkeypatch):
    env_file = tmp_path / "env.cache"
    flag_file = tmp_path / "flag.cache"
    monkeypatch.setenv("FPERR_CACHE", str(env_file))
    _json(B.corpus_path("intro"))
    assert env_file.exists() and not flag_file.exists()
    set_cache(None)
    _json(B.corpus_path("intro"), "--cache", flag_file)
    assert flag_file.exists()
    set_cache(None)
    again = _json(B.corpus_path("intro"), "--cache", flag_file)
    assert again["outputs"][0]["stats"]["cache_hits"] > 0
    assert get_cache().path == str(flag_file)
