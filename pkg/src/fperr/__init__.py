"""Rigorous worst-case floating-point round-off error analysis."""

from __future__ import annotations

from .dsl import Problem, load_problem, parse_problem
from .gopt import OptConfig, maximize_upper
from .taylor import AnalysisConfig, BoundReport, OutputReport, analyze

__version__ = "0.1.0"

__all__ = [
    "AnalysisConfig",
    "BoundReport",
    "OptConfig",
    "OutputReport",
    "Problem",
    "analyze",
    "load_problem",
    "maximize_upper",
    "parse_problem",
]
