"""Closed-loop simulator of saturation-aware autoscaling for LLM inference pools.

The package is layered: :mod:`~wvasim.domain` (types and scenario files),
:mod:`~wvasim.workload` (traffic), :mod:`~wvasim.cluster` (discrete-event
serving model), :mod:`~wvasim.saturation` and :mod:`~wvasim.optimizer`
(the scaling policy), :mod:`~wvasim.metrics` (metric sources and capacity
discovery), :mod:`~wvasim.control` (reconciliation loop and HPA baseline)
and :mod:`~wvasim.harness` (runs, summaries, comparisons).
"""

from .domain import (
    Baseline,
    HpaParams,
    SaturationParams,
    ScenarioConfig,
    ScenarioError,
    TrafficProgram,
    VariantSpec,
    load_scenario,
    validate_scenario,
)
from .harness import RunResult, RunSummary, compare_runs, run_scenario

__version__ = "0.1.0"

__all__ = [
    "Baseline",
    "HpaParams",
    "RunResult",
    "RunSummary",
    "SaturationParams",
    "ScenarioConfig",
    "ScenarioError",
    "TrafficProgram",
    "VariantSpec",
    "compare_runs",
    "load_scenario",
    "run_scenario",
    "validate_scenario",
]
