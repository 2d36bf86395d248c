"""Shared builders for small hand-made scenarios and snapshots."""

from __future__ import annotations

from pathlib import Path

import pytest
from hypothesis import settings

from wvasim.domain import (
    MetricSnapshot,
    RequestSpec,
    SaturationParams,
    ScenarioConfig,
    TrafficProgram,
    VariantSpec,
)

settings.register_profile("default", deadline=None, max_examples=100)
settings.load_profile("default")

SCENARIO_DIR = Path(__file__).resolve().parents[1] / "src" / "wvasim" / "scenarios"


def variant(vid: str = "va-a100", *, hw: str = "A100", cost: float = 1.0, model: str = "m",
            min_replicas: int = 1, max_replicas: int = 10, initial: int | None = None,
            gpus: int = 1, **kw) -> VariantSpec:
    return VariantSpec(
        variant_id=vid,
        model_id=model,
        hardware_class=hw,
        gpus_per_replica=gpus,
        variant_cost=cost,
        policy_params=SaturationParams(min_replicas=min_replicas, max_replicas=max_replicas),
        initial_replicas=initial,
        **kw,
    )


def scenario(*variants: VariantSpec, phases=((0.0, 0.0),), **kw) -> ScenarioConfig:
    variants = variants or (variant(),)
    return ScenarioConfig(variants=tuple(variants), traffic_program=TrafficProgram(phases=tuple(phases)), **kw)


def snap(rid: str, kv: float = 0.0, q: int = 0, *, vid: str = "va-a100", t: float = 0.0,
         in_flight: int | None = None, stale: bool = False) -> MetricSnapshot:
    if in_flight is None:
        in_flight = 1 if kv > 0 else 0
    return MetricSnapshot(rid, vid, t, kv, q, in_flight, stale)


def request(i: int, t: float = 0.0, inp: int = 4096, out: int = 1024) -> RequestSpec:
    return RequestSpec(i, t, inp, out)


@pytest.fixture
def scenario_dir() -> Path:
    return SCENARIO_DIR


# Acceptance verdicts, printed in the terminal summary so they survive output capture.
ACCEPTANCE_RESULTS: list[tuple[int, str, bool, str]] = []


def record_criterion(number: int, title: str, ok: bool, detail: str = "") -> None:
    ACCEPTANCE_RESULTS.append((number, title, bool(ok), detail))
    assert ok, f"criterion {number} ({title}) failed: {detail}"


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE_RESULTS:
        return
    terminalreporter.section("acceptance criteria")
    for number, title, ok, detail in sorted(ACCEPTANCE_RESULTS):
        terminalreporter.line(f"{'PASS' if ok else 'FAIL'} criterion {number}: {title} -- {detail}")
