"""Command-line driver.

    fperr analyze prog.sat [--no-abstract] [--window 10,40] [--instability report] ...
    fperr shadow prog.sat --samples 100000
    fperr profile prog.sat --samples 100000
    fperr instability prog.sat [--constraints prune]

Exit status: 0 on success, 1 when some output could not be analyzed, 2 on
usage errors (bad flags, unreadable input).
"""

from __future__ import annotations

import argparse
import json
import math
import os
import sys
import time
from dataclasses import dataclass

from . import __version__
from .dsl import DslError, Problem, load_problem
from .gopt import OptConfig, QueryCache, set_cache
from .taylor import AnalysisConfig, BoundReport, analyze

SUBCOMMANDS = ("analyze", "shadow", "profile", "instability")

# exception class name -> module that raised it
_CATEGORY = {
    "GuardOverflow": "conditionals",
    "DomainViolation": "interval_core",
    "ExpressionTooLarge": "symbolic_engine",
    "NonDifferentiable": "symbolic_engine",
    "EvalDomain": "symbolic_engine",
    "KeyError": "taylor_error",
}


class UsageError(Exception):
    pass


@dataclass
class RunConfig:
    command: str = "analyze"
    path: str = ""
    abstraction: bool = True
    window: tuple[int, int] = (10, 40)
    max_op_count: int = 30000
    tolerance: float = 1e-2
    timeout: float = 10.0
    workers: int = 1
    constraints: str = "none"
    instability: str = "off"
    shadow: int = 0
    profile: int = 0
    seed: int = 0
    format: str = "text"
    cache: str | None = None

    def analysis_config(self) -> AnalysisConfig:
        opt = OptConfig(tolerance=self.tolerance, timeout=self.timeout, workers=self.workers,
                        constraint_mode="prune" if self.constraints == "prune" else "ignore")
        return AnalysisConfig(opt=opt, max_op_count=self.max_op_count,
                              abstraction=self.abstraction, window=self.window)


def _window(text: str) -> tuple[int, int]:
    try:
        lo, hi = (int(x) for x in text.split(","))
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected LO,HI, got {text!r}") from None
    if not 1 <= lo <= hi:
        raise argparse.ArgumentTypeError(f"window needs 1 <= LO <= HI, got {text!r}")
    return lo, hi


def _positive_int(text: str) -> int:
    v = int(text)
    if v < 1:
        raise argparse.ArgumentTypeError("must be >= 1")
    return v


def _positive_float(text: str) -> float:
    v = float(text)
    if not v > 0:
        raise argparse.ArgumentTypeError("must be > 0")
    return v


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(f"{self.prog}: {message}")


def build_parser() -> argparse.ArgumentParser:
    common = _Parser(add_help=False)
    common.add_argument("path", help="program file (.sat)")
    g = common.add_argument_group("analysis")
    g.add_argument("--abstract", dest="abstraction", action="store_true", default=True,
                   help="abstract deep DAGs (default)")
    g.add_argument("--no-abstract", dest="abstraction", action="store_false")
    g.add_argument("--window", type=_window, default=(10, 40), metavar="LO,HI",
                   help="abstraction height window (default 10,40)")
    g.add_argument("--maxopcount", dest="max_op_count", type=_positive_int, default=30000,
                   help="operator budget per optimizer query (default 30000)")
    g.add_argument("--tolerance", type=_positive_float, default=1e-2)
    g.add_argument("--timeout", type=_positive_float, default=10.0, help="seconds per optimizer query")
    g.add_argument("--workers", type=_positive_int, default=1)
    g.add_argument("--constraints", choices=("none", "prune"), default="none")
    g.add_argument("--instability", choices=("off", "report", "rank"), default="off")
    g.add_argument("--cache", default=None, help="optimizer result cache file (or FPERR_CACHE)")
    e = common.add_argument_group("sampling")
    e.add_argument("--shadow", type=int, default=0, metavar="N", help="shadow-value samples")
    e.add_argument("--profile", type=int, default=0, metavar="N", help="error-expression samples")
    e.add_argument("--samples", type=_positive_int, default=None, metavar="N",
                   help="sample count for the shadow/profile subcommands")
    e.add_argument("--seed", type=int, default=0)
    common.add_argument("--format", choices=("text", "json"), default="text")

    p = _Parser(prog="fperr", description="Worst-case floating-point round-off error bounds.")
    p.add_argument("--version", action="version", version=f"fperr {__version__}")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)
    sub.add_parser("analyze", parents=[common], help="rigorous error bound (full pipeline)")
    sub.add_parser("shadow", parents=[common], help="shadow-value testing against a 128-bit oracle")
    sub.add_parser("profile", parents=[common], help="sample the assembled error expression")
    sub.add_parser("instability", parents=[common], help="instability window and jump per branch")
    return p


def parse_args(argv: list[str]) -> RunConfig:
    argv = list(argv)
    if argv and argv[0] not in SUBCOMMANDS and not argv[0].startswith("-"):
        argv.insert(0, "analyze")
    ns = build_parser().parse_args(argv)
    cfg = RunConfig(command=ns.command, path=ns.path, abstraction=ns.abstraction, window=ns.window,
                    max_op_count=ns.max_op_count, tolerance=ns.tolerance, timeout=ns.timeout,
                    workers=ns.workers, constraints=ns.constraints, instability=ns.instability,
                    shadow=max(ns.shadow, 0), profile=max(ns.profile, 0), seed=ns.seed,
                    format=ns.format, cache=ns.cache)
    n = ns.samples or 100_000
    if cfg.command == "shadow":
        cfg.shadow = cfg.shadow or n
    elif cfg.command == "profile":
        cfg.profile = cfg.profile or n
    elif cfg.command == "instability" and cfg.instability == "off":
        cfg.instability = "rank"
    return cfg


# ---------------------------------------------------------------------------


def _category(error: str | None, status: str) -> str:
    if error:
        head = error.split(":", 1)[0]
        if head in _CATEGORY:
            return _CATEGORY[head]
    if status == "domain-violation":
        return "interval_core"
    return "gopt"


def _finite(x):
    if isinstance(x, float) and not math.isfinite(x):
        return None if math.isnan(x) else ("inf" if x > 0 else "-inf")
    return x


def _clean(obj):
    if isinstance(obj, dict):
        return {k: _clean(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_clean(v) for v in obj]
    return _finite(obj)


def execute(cfg: RunConfig, problem: Problem) -> tuple[dict, int]:
    """Runs the pipeline; returns (report, exit status)."""
    acfg = cfg.analysis_config()
    t0 = time.perf_counter()
    report: dict = {"file": cfg.path, "command": cfg.command,
                    "config": {"abstraction": cfg.abstraction, "window": list(cfg.window),
                               "maxopcount": cfg.max_op_count, "tolerance": cfg.tolerance,
                               "timeout": cfg.timeout, "workers": cfg.workers,
                               "constraints": cfg.constraints, "instability": cfg.instability,
                               "seed": cfg.seed}}
    code = 0
    errors = []
    bounds: BoundReport | None = None
    if cfg.command == "analyze" or (cfg.shadow and cfg.profile):
        bounds = analyze(problem, acfg)
        report["outputs"] = bounds.to_dict()
        for o in bounds.outputs:
            if o.status in ("error", "domain-violation"):
                code = 1
                errors.append({"output": o.output, "category": _category(o.error, o.status),
                               "message": o.error or o.status})
    if cfg.instability != "off":
        from .conditionals import rank_instability
        entries = rank_instability(problem, acfg)
        report["instability"] = [dict(e.to_dict(), rank=k + 1) for k, e in enumerate(entries)]
        for e in entries:
            if e.status != "ok":
                code = 1
                errors.append({"output": e.name, "category": "conditionals", "message": e.status})
    n = max(cfg.shadow, cfg.profile)
    if n:
        from .empirical import SampleConfig, check_ordering, run_samples
        emp = run_samples(problem, SampleConfig(n, cfg.seed), profile=cfg.profile > 0, cfg=acfg)
        ed = emp.to_dict()
        if bounds is not None:
            ok, msgs = check_ordering(emp, [o.bound for o in bounds.outputs])
            ed["ordering_ok"] = ok
            ed["violations"] = msgs
        report["empirical"] = ed
    report["seconds"] = round(time.perf_counter() - t0, 6)
    report["status"] = "ok" if code == 0 else "error"
    if errors:
        report["errors"] = errors
    return _clean(report), code


def _g(x) -> str:
    if x is None:
        return "-"
    if isinstance(x, str):
        return x
    return f"{x:.6g}"


def format_text(report: dict) -> str:
    lines = [f"fperr {report['command']}: {report['file']}"]
    outs = report.get("outputs")
    if outs:
        w = max(10, *(len(o["output"]) for o in outs))
        lines.append(f"{'Output':<{w}}  {'Absolute Error Bound':>20}  {'Relative':>12}  "
                     f"{'Execution Time':>14}  Mode")
        for o in outs:
            mode = o["mode"] + (f" {o['window'][0]},{o['window'][1]}" if "window" in o else "")
            if o.get("status"):
                mode += f" [{o['status']}]"
            lines.append(f"{o['output']:<{w}}  {_g(o['bound']):>20}  {_g(o['relative']):>12}  "
                         f"{o['stats']['seconds']:>13.3f}s  {mode}")
            if len(o["guards"]) > 1 or (o["guards"] and o["guards"][0]["guard"] != "True"):
                for gb in o["guards"]:
                    lines.append(f"    when {gb['guard']}: {_g(gb['bound'])}")
    inst = report.get("instability")
    if inst is not None:
        if not inst:
            lines.append("instability: no branches")
        for e in inst:
            lines.append(f"instability #{e['rank']} {e['name']} if ({e['guard']}): "
                         f"width {_g(e['width'])}, jump {_g(e['jump'])}"
                         + ("" if e["status"] == "ok" else f" [{e['status']}]"))
    emp = report.get("empirical")
    if emp:
        lines.append(f"samples {emp['samples']} (skipped {emp['skipped']}, divergent {emp['divergent']})")
        for k, name in enumerate(emp["outputs"]):
            s = f"  {name}: shadow max {_g(emp['shadow'][k])}"
            if emp["profiled"] is not None:
                s += f", profiled max {_g(emp['profiled'][k])}"
            lines.append(s)
        if "ordering_ok" in emp:
            lines.append("ordering shadow <= profiled <= bound: " + ("ok" if emp["ordering_ok"] else "VIOLATED"))
            lines.extend(f"  {m}" for m in emp["violations"])
    for e in report.get("errors", []):
        lines.append(f"error [{e['category']}] {e['output']}: {e['message']}")
    lines.append(f"total time {report['seconds']:.3f}s")
    return "\n".join(lines)


def run(argv: list[str] | None = None, out=None, err=None) -> int:
    out = out or sys.stdout
    err = err or sys.stderr
    try:
        cfg = parse_args(sys.argv[1:] if argv is None else argv)
    except UsageError as exc:
        build_parser().print_usage(err)
        print(exc, file=err)
        return 2
    except SystemExit as exc:  # --help / --version
        return int(exc.code or 0)
    if not os.path.isfile(cfg.path):
        build_parser().print_usage(err)
        print(f"fperr: no such file: {cfg.path}", file=err)
        return 2
    cache_path = cfg.cache or os.environ.get("FPERR_CACHE")
    if cache_path:
        set_cache(QueryCache(cache_path))
    try:
        problem = load_problem(cfg.path)
    except DslError as exc:
        print(f"fperr: error [dsl_frontend] {type(exc).__name__}: {exc}", file=err)
        return 1
    except OSError as exc:
        print(f"fperr: cannot read {cfg.path}: {exc}", file=err)
        return 2
    try:
        report, code = execute(cfg, problem)
    except (ValueError, ArithmeticError, RuntimeError) as exc:
        print(f"fperr: error: {type(exc).__name__}: {exc}", file=err)
        return 1
    if cfg.format == "json":
        json.dump(report, out, indent=2)
        out.write("\n")
    else:
        print(format_text(report), file=out)
    return code


def main() -> None:
    sys.exit(run())
