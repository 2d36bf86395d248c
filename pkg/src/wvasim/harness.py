"""Closed-loop runs, run summaries, WVA/HPA comparison and plot-ready tables."""

from __future__ import annotations

import csv
import hashlib
import json
import logging
import math
import warnings
from collections import Counter
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Any, Iterable, Mapping, Sequence

from .cluster import ClusterSim, SimOutcome
from .control import HpaController, SimActuator, SimClusterView, WvaController
from .domain import (
    Baseline,
    ScenarioConfig,
    config_digest,
    dump_scenario,
    scenario_to_dict,
    validate_scenario,
)
from .metrics import CapacityInventory, discover_capacity, registry_build, write_snapshot_csv
from .workload import generate_arrivals

logger = logging.getLogger(__name__)

TIMESERIES_COLUMNS = ("tick", "time", "variant", "replicas_ready", "replicas_observed",
                      "avg_kv", "avg_q", "rps_in", "rps_out", "drops")
TRACE_COLUMNS = ("time", "model", "variant", "n_snapshots", "avg_kv", "avg_q", "observed", "cap",
                 "metrics_available", "saturated", "nonsaturated", "avg_spare_kv", "avg_spare_q",
                 "trigger_kv", "trigger_q", "closed_form", "direction", "rec_reason",
                 "spare_capacity", "planned", "granted", "target_resolved", "gate_metrics",
                 "command", "reason")
REQUEST_COLUMNS = ("request_id", "arrival", "input_tokens", "output_tokens", "outcome", "drop_cause",
                   "replica_id", "ttft", "completion_time", "itl_mean")


class MismatchedTraffic(ValueError):
    pass


@dataclass
class PhaseRow:
    start: float
    end: float
    rps_target: float
    arrived: int
    completed: int
    dropped: int
    throughput_completed_rps: float
    drops_per_s: float
    drop_causes: dict[str, int]
    mean_ttft: float | None
    mean_itl: float | None
    mean_replicas: float
    max_replicas_hit: bool


@dataclass
class RunSummary:
    scenario: str
    baseline: str
    seed: int
    config_digest: str
    traffic_digest: str
    phases: list[PhaseRow]
    totals: dict[str, Any]
    event_log_hash: str

    def to_dict(self) -> dict[str, Any]:
        return asdict(self)

    @classmethod
    def from_dict(cls, data: Mapping[str, Any]) -> "RunSummary":
        data = dict(data)
        data["phases"] = [PhaseRow(**p) for p in data["phases"]]
        return cls(**data)


@dataclass
class RunResult:
    summary: RunSummary
    outcome: SimOutcome
    timeseries: list[dict]
    decision_trace: list[dict]
    allocation_trace: list[dict]
    snapshots: list
    commands: list
    event_log: list[str] = field(default_factory=list)


def traffic_digest(cfg: ScenarioConfig) -> str:
    raw = scenario_to_dict(cfg)
    payload = {"traffic_program": raw["traffic_program"], "seed": cfg.rng_seed, "duration": cfg.duration}
    return hashlib.sha256(json.dumps(payload, sort_keys=True).encode()).hexdigest()


def resolve_budget(cfg: ScenarioConfig) -> tuple[int | None, CapacityInventory | None]:
    """GPU budget and inventory for the configured optimizer mode."""
    if cfg.optimizer_mode == "unconstrained":
        return None, None
    inventory = None
    budget = cfg.cluster_gpu_budget
    if cfg.inventory is not None:
        inventory, derived = discover_capacity(cfg, constrained=True)
        if budget is None:
            budget = derived
    if cfg.optimizer_mode == "constrained" and budget is None:
        raise ValueError("constrained mode needs cluster_gpu_budget or an inventory")
    return budget, inventory


def _schedule(cfg: ScenarioConfig, fast_path: bool) -> list[tuple[float, int]]:
    """(time, kind) ticks in firing order; kind 0 = scale-from-zero, 1 = control."""
    ticks = []
    k = 0
    while (t := k * cfg.control_interval) < cfg.duration:
        ticks.append((t, 1))
        k += 1
    if fast_path:
        k = 1
        while (t := k * cfg.scale_from_zero_interval) < cfg.duration:
            ticks.append((t, 0))
            k += 1
    ticks.sort()
    return ticks


def run_scenario(cfg: ScenarioConfig, out_dir: str | Path | None = None,
                 keep_event_log: bool | None = None) -> RunResult:
    validate_scenario(cfg)
    budget, inventory = resolve_budget(cfg)
    requests = generate_arrivals(cfg.traffic_program, cfg.duration, cfg.rng_seed)
    if keep_event_log is None:
        keep_event_log = out_dir is not None
    sim = ClusterSim(cfg, requests, keep_event_log=keep_event_log)
    registry = registry_build(cfg.metrics_sources, sim, cfg.faults)
    source = registry.primary
    view = SimClusterView(sim, cfg)
    actuator = SimActuator(sim)
    wva = cfg.baseline is Baseline.WVA
    if wva:
        ctl = WvaController(cfg, source, view, actuator, budget, inventory)
    else:
        ctl = HpaController(cfg, source, view, actuator)

    model = cfg.traffic_model
    variants = [v for v in cfg.variants]
    timeseries: list[dict] = []
    consumed = []
    last_counts = sim.counters.copy()
    last_completed = Counter()
    last_t = 0.0
    for tick_no, (t, kind) in enumerate(_schedule(cfg, fast_path=wva)):
        sim.advance(t)
        if kind == 0:
            ctl.scale_from_zero_tick(t)
            continue
        if wva:
            ctl.control_tick(t)
        else:
            ctl.hpa_tick(t)
        consumed.extend(ctl.consumed)
        span = t - last_t if t > last_t else cfg.control_interval
        truth = sim.snapshot_metrics()
        for v in variants:
            mine = [s for s in truth if s.variant_id == v.variant_id]
            timeseries.append({
                "tick": int(round(t / cfg.control_interval)),
                "time": t,
                "variant": v.variant_id,
                "replicas_ready": sim.ready_count(v.variant_id),
                "replicas_observed": sim.observed_replicas(v.variant_id),
                "avg_kv": sum(s.kv_usage for s in mine) / len(mine) if mine else 0.0,
                "avg_q": sum(s.queue_depth for s in mine) / len(mine) if mine else 0.0,
                "rps_in": (sim.counters.arrived - last_counts.arrived) / span if t > 0 else 0.0,
                "rps_out": (sim.completed_by_variant[v.variant_id] - last_completed[v.variant_id]) / span if t > 0 else 0.0,
                "drops": sim.counters.dropped - last_counts.dropped,
            })
        last_counts = sim.counters.copy()
        last_completed = Counter(sim.completed_by_variant)
        last_t = t
    sim.advance(cfg.duration)
    outcome = sim.outcome()

    summary = summarize(cfg, outcome, timeseries)
    result = RunResult(
        summary=summary,
        outcome=outcome,
        timeseries=timeseries,
        decision_trace=ctl.trace,
        allocation_trace=getattr(ctl, "allocation_trace", []),
        snapshots=consumed,
        commands=list(actuator.published),
        event_log=sim.event_log,
    )
    if out_dir is not None:
        write_artifacts(cfg, result, Path(out_dir))
    return result


def _mean(values: Iterable[float | None]) -> float | None:
    vals = [v for v in values if v is not None]
    return sum(vals) / len(vals) if vals else None


def summarize(cfg: ScenarioConfig, outcome: SimOutcome, timeseries: Sequence[dict]) -> RunSummary:
    model = cfg.traffic_model
    pool = [v for v in cfg.variants if v.model_id == model]
    pool_ids = {v.variant_id for v in pool}
    cap = sum(v.policy_params.max_replicas for v in pool)
    per_tick: dict[float, int] = Counter()
    for row in timeseries:
        if row["variant"] in pool_ids:
            per_tick[row["time"]] += row["replicas_observed"]
    phases = []
    for start, end, rps in cfg.traffic_program.phase_windows(cfg.duration):
        recs = [r for r in outcome.records if start <= r.arrival < end]
        done = [r for r in recs if r.outcome == "completed"]
        dropped = [r for r in recs if r.outcome == "dropped"]
        span = end - start
        counts = [n for t, n in per_tick.items() if start <= t < end]
        phases.append(PhaseRow(
            start=start,
            end=end,
            rps_target=rps,
            arrived=len(recs),
            completed=len(done),
            dropped=len(dropped),
            throughput_completed_rps=len(done) / span,
            drops_per_s=len(dropped) / span,
            drop_causes=dict(Counter(r.drop_cause.value for r in dropped)),
            mean_ttft=_mean(r.ttft for r in done),
            mean_itl=_mean(r.itl_mean for r in done),
            mean_replicas=sum(counts) / len(counts) if counts else 0.0,
            max_replicas_hit=any(n >= cap for n in counts),
        ))
    c = outcome.counters
    done = [r for r in outcome.records if r.outcome == "completed"]
    totals = {
        "arrived": c.arrived,
        "completed": c.completed,
        "dropped": c.dropped,
        "drop_causes": dict(sorted(c.drop_causes.items())),
        "in_flight_at_end": outcome.in_flight_at_end,
        "queued_at_end": outcome.queued_at_end,
        "flow_conserved": outcome.flow_conserved(),
        "mean_ttft": _mean(r.ttft for r in done),
        "mean_itl": _mean(r.itl_mean for r in done),
        "max_replicas_hit": any(n >= cap for n in per_tick.values()),
    }
    return RunSummary(
        scenario=cfg.name,
        baseline=cfg.baseline.value,
        seed=cfg.rng_seed,
        config_digest=config_digest(cfg),
        traffic_digest=traffic_digest(cfg),
        phases=phases,
        totals=totals,
        event_log_hash=outcome.event_log_hash,
    )


def _write_rows(path: Path, columns: Sequence[str], rows: Iterable[Mapping[str, Any]]) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=list(columns), restval="", extrasaction="ignore")
        w.writeheader()
        for row in rows:
            w.writerow(row)


def write_artifacts(cfg: ScenarioConfig, result: RunResult, out: Path) -> None:
    out.mkdir(parents=True, exist_ok=True)
    (out / "scenario.yaml").write_text(dump_scenario(cfg))
    (out / "summary.json").write_text(json.dumps(result.summary.to_dict(), indent=2, sort_keys=True))
    _write_rows(out / "timeseries.csv", TIMESERIES_COLUMNS, result.timeseries)
    _write_rows(out / "decision_trace.csv", TRACE_COLUMNS, result.decision_trace)
    with open(out / "allocation_trace.jsonl", "w") as fh:
        for row in result.allocation_trace:
            fh.write(json.dumps(row, sort_keys=True) + "\n")
    write_snapshot_csv(result.snapshots, out / "snapshots.csv")
    _write_rows(out / "requests.csv", REQUEST_COLUMNS, (
        {
            "request_id": r.request.request_id,
            "arrival": repr(r.arrival),
            "input_tokens": r.request.input_tokens,
            "output_tokens": r.request.output_tokens,
            "outcome": r.outcome,
            "drop_cause": r.drop_cause.value if r.drop_cause else "",
            "replica_id": r.replica_id or "",
            "ttft": "" if r.ttft is None else repr(r.ttft),
            "completion_time": "" if r.completion_time is None else repr(r.completion_time),
            "itl_mean": "" if r.itl_mean is None else repr(r.itl_mean),
        }
        for r in result.outcome.records
    ))
    (out / "events.log").write_text("\n".join(result.event_log) + ("\n" if result.event_log else ""))
    emit_plot_data(out, out / "plots")


def load_summary(run_dir: str | Path) -> RunSummary:
    return RunSummary.from_dict(json.loads((Path(run_dir) / "summary.json").read_text()))


# --------------------------------------------------------------------------
# comparison


def _pct(a: float | None, b: float | None) -> float | None:
    if a is None or b is None or b == 0:
        return None
    return (a - b) / b


def compare_runs(a: RunSummary, b: RunSummary) -> list[dict[str, Any]]:
    """Per-phase deltas of ``a`` relative to ``b``; percentages are ``(a - b) / b``."""
    if a.traffic_digest != b.traffic_digest:
        raise MismatchedTraffic(f"{a.scenario}/{a.seed} vs {b.scenario}/{b.seed}: traffic programs differ")
    rows = []
    for pa, pb in zip(a.phases, b.phases):
        def delta(x, y):
            return None if x is None or y is None else x - y
        rows.append({
            "rps": pa.rps_target,
            "throughput_a": pa.throughput_completed_rps,
            "throughput_b": pb.throughput_completed_rps,
            "throughput_delta": pa.throughput_completed_rps - pb.throughput_completed_rps,
            "throughput_pct": _pct(pa.throughput_completed_rps, pb.throughput_completed_rps),
            "drops_a": pa.drops_per_s,
            "drops_b": pb.drops_per_s,
            "drops_delta": pa.drops_per_s - pb.drops_per_s,
            "drop_ratio": None if pb.drops_per_s == 0 else pa.drops_per_s / pb.drops_per_s,
            "ttft_a": pa.mean_ttft,
            "ttft_b": pb.mean_ttft,
            "ttft_delta": delta(pa.mean_ttft, pb.mean_ttft),
            "itl_a": pa.mean_itl,
            "itl_b": pb.mean_itl,
            "itl_delta": delta(pa.mean_itl, pb.mean_itl),
            "replicas_a": pa.mean_replicas,
            "replicas_b": pb.mean_replicas,
            "replicas_delta": pa.mean_replicas - pb.mean_replicas,
        })
    return rows


COMPARISON_COLUMNS = ("rps", "throughput_a", "throughput_b", "throughput_delta", "throughput_pct",
                      "drops_a", "drops_b", "drops_delta", "drop_ratio", "ttft_a", "ttft_b", "ttft_delta",
                      "itl_a", "itl_b", "itl_delta", "replicas_a", "replicas_b", "replicas_delta")


def _fmt(v: Any) -> Any:
    return "" if v is None else v


def write_comparison(rows: Sequence[Mapping[str, Any]], out: Path) -> None:
    out.mkdir(parents=True, exist_ok=True)
    _write_rows(out / "comparison.csv", COMPARISON_COLUMNS,
                ({k: _fmt(v) for k, v in r.items()} for r in rows))
    _write_rows(out / "throughput_vs_rps.csv", ("rps", "throughput_a", "throughput_b"), rows)
    _write_rows(out / "drops_vs_rps.csv", ("rps", "drops_a", "drops_b"), rows)
    _write_rows(out / "latency_vs_rps.csv", ("rps", "ttft_a", "ttft_b", "itl_a", "itl_b"),
                ({k: _fmt(v) for k, v in r.items()} for r in rows))


# --------------------------------------------------------------------------
# plot-ready tables


def _read_csv(path: Path) -> list[dict[str, str]]:
    with open(path, newline="") as fh:
        return list(csv.DictReader(fh))


def emit_plot_data(run_dir: str | Path, out_dir: str | Path) -> list[Path]:
    """Write one table per figure analog from a run directory's artifacts.

    ``reactivity.csv``: time, replicas_ready, replicas_observed, rps_in, avg_kv, scale_command.
    ``cost_tiering.csv``: time, then one observed-replica column per variant.
    """
    run_dir, out_dir = Path(run_dir), Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    written = []
    ts = _read_csv(run_dir / "timeseries.csv")
    commands: dict[str, str] = {}
    trace_path = run_dir / "decision_trace.csv"
    if trace_path.exists():
        for row in _read_csv(trace_path):
            if row.get("command"):
                commands[row["time"]] = row["command"]
    else:
        warnings.warn(f"{trace_path} missing; reactivity table has no command markers", stacklevel=2)

    times: dict[str, dict[str, Any]] = {}
    variants: list[str] = []
    for row in ts:
        agg = times.setdefault(row["time"], {"time": row["time"], "replicas_ready": 0, "replicas_observed": 0,
                                             "rps_in": row["rps_in"], "_kv": [], "per_variant": {}})
        agg["replicas_ready"] += int(row["replicas_ready"])
        agg["replicas_observed"] += int(row["replicas_observed"])
        if int(row["replicas_ready"]) > 0:
            agg["_kv"].append((float(row["avg_kv"]), int(row["replicas_ready"])))
        agg["per_variant"][row["variant"]] = row["replicas_observed"]
        if row["variant"] not in variants:
            variants.append(row["variant"])
    reactivity = []
    tiering = []
    for t, agg in times.items():
        weight = sum(n for _, n in agg["_kv"])
        avg_kv = sum(k * n for k, n in agg["_kv"]) / weight if weight else 0.0
        reactivity.append({"time": t, "replicas_ready": agg["replicas_ready"],
                           "replicas_observed": agg["replicas_observed"], "rps_in": agg["rps_in"],
                           "avg_kv": avg_kv, "scale_command": commands.get(t, "")})
        tiering.append({"time": t, **agg["per_variant"]})
    path = out_dir / "reactivity.csv"
    _write_rows(path, ("time", "replicas_ready", "replicas_observed", "rps_in", "avg_kv", "scale_command"), reactivity)
    written.append(path)
    path = out_dir / "cost_tiering.csv"
    _write_rows(path, ("time", *variants), tiering)
    written.append(path)

    summary_path = run_dir / "summary.json"
    if summary_path.exists():
        s = load_summary(run_dir)
        path = out_dir / "phases.csv"
        _write_rows(path, ("rps_target", "throughput_completed_rps", "drops_per_s", "mean_ttft",
                           "mean_itl", "mean_replicas", "max_replicas_hit"),
                    ({k: _fmt(v) for k, v in asdict(p).items()} for p in s.phases))
        written.append(path)
    return written
