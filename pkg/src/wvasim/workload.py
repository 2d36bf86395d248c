"""Open-loop traffic programs with bounded-normal token lengths."""

from __future__ import annotations

import csv
from pathlib import Path
from typing import Iterable

import numpy as np

from .domain import ArrivalProcess, BoundedNormal, RequestSpec, TrafficProgram


def arrival_streams(seed: int) -> tuple[np.random.Generator, np.random.Generator, np.random.Generator]:
    """Independent (arrival-times, input-lengths, output-lengths) streams for ``seed``.

    Keeping the three apart lets a test re-derive the exponential stream alone.
    """
    times, inputs, outputs = np.random.SeedSequence(seed).spawn(3)
    return np.random.default_rng(times), np.random.default_rng(inputs), np.random.default_rng(outputs)


def sample_length(dist: BoundedNormal, rng: np.random.Generator) -> int:
    raw = rng.normal(dist.mean, dist.stdev)
    clamped = min(max(raw, dist.min), dist.max)
    return max(1, int(round(clamped)))


def _phase_times(start: float, end: float, rps: float, process: ArrivalProcess,
                 rng: np.random.Generator) -> Iterable[float]:
    if rps <= 0:
        return
    if process is ArrivalProcess.DETERMINISTIC_UNIFORM:
        k = 0
        while (t := start + k / rps) < end:
            yield t
            k += 1
    else:
        t = start
        while True:
            t += rng.exponential(1.0 / rps)
            if t >= end:
                return
            yield t


def generate_arrivals(program: TrafficProgram, duration: float, seed: int) -> list[RequestSpec]:
    """Every request of ``program`` over ``[0, duration)``, ordered by arrival time."""
    t_rng, in_rng, out_rng = arrival_streams(seed)
    requests: list[RequestSpec] = []
    for start, end, rps in program.phase_windows(duration):
        for t in _phase_times(start, end, rps, program.arrival_process, t_rng):
            rid = len(requests)
            prefix = None
            if program.prefix_groups > 0:
                prefix = f"p{rid % program.prefix_groups}"
            requests.append(RequestSpec(
                request_id=rid,
                arrival_time=float(t),
                input_tokens=sample_length(program.input_dist, in_rng),
                output_tokens=sample_length(program.output_dist, out_rng),
                prefix_key=prefix,
            ))
    return requests


ARRIVAL_COLUMNS = ("request_id", "arrival_time", "input_tokens", "output_tokens")


def write_arrivals_csv(requests: Iterable[RequestSpec], path: str | Path) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(ARRIVAL_COLUMNS)
        for r in requests:
            w.writerow((r.request_id, repr(r.arrival_time), r.input_tokens, r.output_tokens))


def read_arrivals_csv(path: str | Path) -> list[RequestSpec]:
    with open(path, newline="") as fh:
        return [
            RequestSpec(int(row["request_id"]), float(row["arrival_time"]),
                        int(row["input_tokens"]), int(row["output_tokens"]))
            for row in csv.DictReader(fh)
        ]


def staircase(baseline_rps: float, steps: Iterable[tuple[int, float]], step_seconds: float) -> tuple[tuple[float, float], ...]:
    """Phases for a staircase where step ``k`` begins at ``k * step_seconds``."""
    phases = [(0.0, float(baseline_rps))]
    for k, rps in steps:
        phases.append((k * step_seconds, float(rps)))
    return tuple(phases)
