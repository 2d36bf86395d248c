"""Reconciliation loop: decision cache, readiness gates, scale-from-zero and the HPA baseline.

The saturation engine (producer) writes one :class:`TargetState` per model
into the :class:`DecisionCache` and raises the trigger; the
:class:`Reconciler` (consumer) reads the cache, updates each variant's
status and publishes :class:`ActuationCommand` objects only for variants
whose ``TargetResolved`` and ``MetricsAvailable`` conditions both hold.
"""

from __future__ import annotations

import logging
import math
import threading
from collections import defaultdict, deque
from dataclasses import dataclass, field
from typing import Iterable, Mapping, Protocol, Sequence

from .domain import HpaParams, MetricSnapshot, ScenarioConfig, TargetState, VariantSpec
from .metrics import SNAPSHOTS, CapacityInventory, MetricsSource, MetricsSourceError, RefreshSpec
from .optimizer import AllocationRequest, AllocationResult, optimize_constrained, optimize_unconstrained
from .saturation import (
    Direction,
    ScaleRecommendation,
    SaturationReport,
    compute_saturation,
    compute_target_replicas,
    occupied_tokens,
    replicas_for_load,
    safety_net,
)

logger = logging.getLogger(__name__)

TARGET_RESOLVED = "TargetResolved"
METRICS_AVAILABLE = "MetricsAvailable"


@dataclass(frozen=True)
class ActuationCommand:
    variant_id: str
    target_replicas: int
    drain_safe: bool
    issued_at: float
    reason: str = ""


class DecisionCache:
    """In-memory store of the latest :class:`TargetState` per model.

    Entries are immutable and swapped under a lock, so a reader never sees
    a half-written decision.
    """

    def __init__(self) -> None:
        self._lock = threading.Lock()
        self._entries: dict[str, TargetState] = {}
        self._pending: set[str] = set()
        self.last_trigger_at: float | None = None

    def write(self, state: TargetState) -> None:
        with self._lock:
            self._entries[state.model_id] = state

    def read(self, model_id: str) -> TargetState | None:
        with self._lock:
            return self._entries.get(model_id)

    def trigger(self, model_ids: Iterable[str], now: float) -> None:
        with self._lock:
            self._pending.update(model_ids)
            self.last_trigger_at = now

    def take_triggered(self) -> list[str]:
        with self._lock:
            out = sorted(self._pending)
            self._pending.clear()
            return out

    @property
    def entries(self) -> dict[str, TargetState]:
        with self._lock:
            return dict(self._entries)


@dataclass
class Condition:
    status: bool
    reason: str


@dataclass
class VariantAutoscalingRecord:
    model_id: str
    variant_id: str
    variant_cost: float
    scale_target: str
    desired_optimized_alloc: int = 0
    observed_replicas: int = 0
    conditions: dict[str, Condition] = field(default_factory=lambda: {
        TARGET_RESOLVED: Condition(True, "TargetFound"),
        METRICS_AVAILABLE: Condition(True, "Initial"),
    })
    status_writes: int = 0

    def gates_open(self) -> bool:
        return self.conditions[TARGET_RESOLVED].status and self.conditions[METRICS_AVAILABLE].status


class ClusterView(Protocol):
    """What the control plane may observe about the orchestrator."""

    def observed_replicas(self, variant_id: str) -> int: ...

    def ready_count(self, variant_id: str) -> int: ...

    def gateway_arrivals(self, model_id: str) -> int: ...

    def target_exists(self, variant_id: str, now: float) -> bool: ...


class SimClusterView:
    def __init__(self, sim, cfg: ScenarioConfig):
        self.sim = sim
        self.deletions = {vid: t for t, vid in cfg.faults.target_deletions}

    def observed_replicas(self, variant_id: str) -> int:
        return self.sim.observed_replicas(variant_id)

    def ready_count(self, variant_id: str) -> int:
        return self.sim.ready_count(variant_id)

    def gateway_arrivals(self, model_id: str) -> int:
        return self.sim.gateway_arrivals[model_id]

    def target_exists(self, variant_id: str, now: float) -> bool:
        t = self.deletions.get(variant_id)
        return t is None or now < t


class ActuationStrategy(Protocol):
    def publish(self, command: ActuationCommand) -> None: ...


class SimActuator:
    """Applies commands to the simulated orchestrator."""

    def __init__(self, sim):
        self.sim = sim
        self.published: list[ActuationCommand] = []

    def publish(self, command: ActuationCommand) -> None:
        self.published.append(command)
        self.sim.apply_replica_target(command.variant_id, command.target_replicas, command.drain_safe)


class RecordingActuator:
    def __init__(self) -> None:
        self.published: list[ActuationCommand] = []

    def publish(self, command: ActuationCommand) -> None:
        self.published.append(command)


# --------------------------------------------------------------------------
# saturation engine (AutoscalingPolicy)


@dataclass
class VariantAnalysis:
    variant: VariantSpec
    observed: int
    cap: int
    snapshots: list[MetricSnapshot]
    available: bool
    report: SaturationReport | None = None
    recommendation: ScaleRecommendation | None = None
    planned: int = 0

    def trace(self) -> dict:
        rep, rec = self.report, self.recommendation
        fresh = self.snapshots
        row = {
            "variant": self.variant.variant_id,
            "n_snapshots": len(fresh),
            "avg_kv": sum(s.kv_usage for s in fresh) / len(fresh) if fresh else "",
            "avg_q": sum(s.queue_depth for s in fresh) / len(fresh) if fresh else "",
            "observed": self.observed,
            "cap": self.cap,
            "metrics_available": self.available,
            "saturated": len(rep.saturated) if rep else "",
            "nonsaturated": len(rep.nonsaturated) if rep else "",
            "avg_spare_kv": "" if rep is None or rep.avg_spare_kv is None else rep.avg_spare_kv,
            "avg_spare_q": "" if rep is None or rep.avg_spare_q is None else rep.avg_spare_q,
            "trigger_kv": rep.trigger_kv if rep else "",
            "trigger_q": rep.trigger_q if rep else "",
            "closed_form": rec.desired if rec else "",
            "direction": rec.direction.value if rec else "",
            "rec_reason": rec.reason if rec else "",
            "spare_capacity": rec.spare_capacity if rec else "",
            "planned": self.planned,
        }
        return row


class SaturationEngine:
    """Model Analyzer plus Global Optimizer over every model pool."""

    def __init__(self, cfg: ScenarioConfig, budget: int | None = None,
                 inventory: CapacityInventory | None = None):
        self.cfg = cfg
        self.budget = budget
        self.inventory = inventory
        self.last_good: dict[str, int] = {}
        self.last_allocation: AllocationResult | None = None

    def cap(self, variant: VariantSpec) -> int:
        cap = variant.policy_params.max_replicas
        if self.budget is not None and self.inventory is not None:
            cap = min(cap, self.inventory.replica_cap(variant))
        return cap

    def analyze(self, now: float, snapshots: Sequence[MetricSnapshot] | None,
                view: ClusterView) -> dict[str, VariantAnalysis]:
        """Per-variant saturation analysis; ``snapshots=None`` means the source failed."""
        horizon = self.cfg.control_interval
        out: dict[str, VariantAnalysis] = {}
        for v in self.cfg.variants:
            observed = view.observed_replicas(v.variant_id)
            if snapshots is None:
                out[v.variant_id] = VariantAnalysis(v, observed, self.cap(v), [], False)
                continue
            mine = [s for s in snapshots if s.variant_id == v.variant_id and now - s.tick_time < horizon]
            fresh = [s for s in mine if not s.stale]
            available = bool(fresh) or (not mine and view.ready_count(v.variant_id) == 0)
            a = VariantAnalysis(v, observed, self.cap(v), fresh, available)
            if available:
                a.report = compute_saturation(fresh, v.policy_params, v.variant_id)
                a.recommendation = compute_target_replicas(a.report, fresh, v.policy_params, v, current=observed)
            out[v.variant_id] = a
        return out

    def plan_pool(self, pool: list[VariantAnalysis]) -> None:
        """Fill the pool's capacity target cheapest-first; sets ``planned`` per variant.

        A costlier tier only receives replicas once every cheaper tier is
        already running at its cap; a tier whose metrics are missing is
        frozen and does not hold back the others.
        """
        pool = sorted(pool, key=lambda a: (a.variant.variant_cost, a.variant.variant_id))
        live = [a for a in pool if a.available]
        for a in pool:
            a.planned = a.observed
        if not any(a.recommendation.direction is Direction.UP for a in live):
            for a in live:
                a.planned = a.recommendation.step_target
            return
        if len(pool) == 1:
            a = pool[0]
            a.planned = min(a.recommendation.desired, a.cap)
            return
        tokens = sum(occupied_tokens(a.snapshots, a.variant) for a in live)
        queued = sum(s.queue_depth for a in live for s in a.snapshots)
        loaded = tokens > 0 or queued > 0
        cheaper_exhausted = True
        for a in pool:
            if not a.available:
                # frozen at its held size, so it cannot absorb more: never blocks costlier tiers
                continue
            if cheaper_exhausted:
                n_kv, n_q = replicas_for_load(tokens, queued, a.variant)
                need = max(n_kv, n_q, 1 if loaded and a is pool[0] else 0)
                target = min(a.cap, max(need, a.observed, a.variant.policy_params.min_replicas))
                a.planned = target
                p = a.variant.policy_params
                tokens = max(0.0, tokens - target * a.variant.kv_capacity_tokens * (p.tau_kv - p.gamma_kv))
                queued = max(0.0, queued - target * max(p.tau_q - p.gamma_q, 1.0))
            cheaper_exhausted = cheaper_exhausted and a.observed >= a.cap

    def decide(self, now: float, analyses: dict[str, VariantAnalysis]) -> dict[str, TargetState]:
        by_model: dict[str, list[VariantAnalysis]] = defaultdict(list)
        for a in analyses.values():
            by_model[a.variant.model_id].append(a)
        held: dict[str, int] = {}
        for model_id, pool in by_model.items():
            self.plan_pool(pool)
            for a in pool:
                if not a.available:
                    last = TargetState(model_id, {a.variant.variant_id: self.last_good.get(a.variant.variant_id, a.observed)},
                                       True, now)
                    held[a.variant.variant_id] = safety_net(last, False, now=now).per_variant_desired[a.variant.variant_id]
                    a.planned = held[a.variant.variant_id]

        requests = [
            AllocationRequest(
                variant_id=a.variant.variant_id,
                model_id=a.variant.model_id,
                current_replicas=a.observed,
                desired_replicas=a.planned,
                gpus_per_replica=a.variant.gpus_per_replica,
                variant_cost=a.variant.variant_cost,
                spare_capacity=a.recommendation.spare_capacity if a.recommendation else 0.0,
            )
            for a in analyses.values()
        ]
        if self.budget is None:
            result = optimize_unconstrained(requests)
        else:
            result = optimize_constrained(requests, self.budget)
        self.last_allocation = result

        states: dict[str, TargetState] = {}
        for model_id, pool in by_model.items():
            desired = {}
            for a in pool:
                p = a.variant.policy_params
                n = result.per_variant_granted[a.variant.variant_id]
                if a.variant.variant_id in held:
                    n = held[a.variant.variant_id]
                desired[a.variant.variant_id] = min(max(n, p.min_replicas), p.max_replicas)
            blind = frozenset(a.variant.variant_id for a in pool if not a.available)
            for a in pool:
                if a.available:
                    self.last_good[a.variant.variant_id] = desired[a.variant.variant_id]
            states[model_id] = TargetState(
                model_id=model_id,
                per_variant_desired=desired,
                metrics_available=not blind,
                computed_at=now,
                reason=_pool_reason(pool, blind),
                unavailable=blind,
            )
        return states


def _pool_reason(pool: list[VariantAnalysis], blind: frozenset[str]) -> str:
    if blind and len(blind) == len(pool):
        return "safety-net"
    reasons = []
    for a in pool:
        if a.variant.variant_id in blind:
            reasons.append(f"{a.variant.variant_id}:safety-net")
        elif a.recommendation is not None and a.planned != a.observed:
            own = a.recommendation
            # a costlier tier grown on behalf of the pool, not its own signals
            spilled = a.planned > a.observed and own.direction is not Direction.UP
            reasons.append(f"{a.variant.variant_id}:{'spillover' if spilled else own.reason}")
    return ",".join(reasons) or "hold"


# --------------------------------------------------------------------------
# reconciler


class Reconciler:
    def __init__(self, cfg: ScenarioConfig, cache: DecisionCache, actuator: ActuationStrategy):
        self.cfg = cfg
        self.cache = cache
        self.actuator = actuator
        self.records: dict[str, VariantAutoscalingRecord] = {
            v.variant_id: VariantAutoscalingRecord(v.model_id, v.variant_id, v.variant_cost, v.target_name)
            for v in cfg.variants
        }

    def _set(self, rec: VariantAutoscalingRecord, name: str, status: bool, reason: str) -> None:
        cond = rec.conditions[name]
        if cond.status != status or cond.reason != reason:
            rec.conditions[name] = Condition(status, reason)
            rec.status_writes += 1

    def reconcile(self, now: float, view: ClusterView, drain_safe: bool = True) -> list[ActuationCommand]:
        commands = []
        for model_id in self.cache.take_triggered():
            state = self.cache.read(model_id)
            if state is None:
                continue
            for variant_id, desired in state.per_variant_desired.items():
                rec = self.records[variant_id]
                rec.observed_replicas = view.observed_replicas(variant_id)
                resolved = view.target_exists(variant_id, now)
                self._set(rec, TARGET_RESOLVED, resolved, "TargetFound" if resolved else "TargetNotFound")
                available = variant_id not in state.unavailable
                self._set(rec, METRICS_AVAILABLE, available, "MetricsFound" if available else "MetricsMissing")
                if not resolved:
                    continue
                if rec.desired_optimized_alloc != desired:
                    rec.desired_optimized_alloc = desired
                    rec.status_writes += 1
                if desired == rec.observed_replicas:
                    continue
                if not available:
                    # blind: the only permitted change is lifting an empty pool to the floor
                    if rec.observed_replicas >= 1:
                        continue
                    reason = "safety-net"
                else:
                    reason = state.reason
                cmd = ActuationCommand(variant_id, desired, drain_safe, now, reason)
                self.actuator.publish(cmd)
                commands.append(cmd)
        return commands


# --------------------------------------------------------------------------
# WVA controller


class WvaController:
    """Runs the analyzer/optimizer/reconciler pipeline on each control tick."""

    def __init__(self, cfg: ScenarioConfig, source: MetricsSource, view: ClusterView,
                 actuator: ActuationStrategy, budget: int | None = None,
                 inventory: CapacityInventory | None = None):
        self.cfg = cfg
        self.source = source
        self.view = view
        self.cache = DecisionCache()
        self.engine = SaturationEngine(cfg, budget, inventory)
        self.reconciler = Reconciler(cfg, self.cache, actuator)
        self.trace: list[dict] = []
        self.allocation_trace: list[dict] = []
        self.consumed: list[MetricSnapshot] = []
        self._seen_arrivals: dict[str, int] = defaultdict(int)
        for v in cfg.variants:
            self.engine.last_good[v.variant_id] = v.start_replicas

    def control_tick(self, now: float) -> list[ActuationCommand]:
        try:
            result = self.source.refresh(RefreshSpec(now))
            snapshots = list(result[SNAPSHOTS].value)
        except MetricsSourceError as exc:
            logger.warning("metrics refresh failed at %.1f: %s", now, exc)
            snapshots = None
        self.consumed = snapshots or []
        analyses = self.engine.analyze(now, snapshots, self.view)
        states = self.engine.decide(now, analyses)
        for state in states.values():
            self.cache.write(state)
        self.cache.trigger(states, now)
        alloc = self.engine.last_allocation
        self.allocation_trace.append({"time": now, **(alloc.trace() if alloc else {})})
        commands = self.reconciler.reconcile(now, self.view, drain_safe=True)
        issued = {c.variant_id: c for c in commands}
        for vid, a in analyses.items():
            rec = self.reconciler.records[vid]
            state = states[a.variant.model_id]
            cmd = issued.get(vid)
            self.trace.append({
                "time": now,
                "model": a.variant.model_id,
                **a.trace(),
                "granted": state.per_variant_desired[vid],
                "target_resolved": rec.conditions[TARGET_RESOLVED].status,
                "gate_metrics": rec.conditions[METRICS_AVAILABLE].status,
                "command": cmd.target_replicas if cmd else "",
                "reason": cmd.reason if cmd else state.reason,
            })
        return commands

    def scale_from_zero_tick(self, now: float) -> list[ActuationCommand]:
        commands = []
        for model_id in self.cfg.model_ids:
            seen = self.view.gateway_arrivals(model_id)
            fresh_demand = seen > self._seen_arrivals[model_id]
            self._seen_arrivals[model_id] = seen
            if not fresh_demand:
                continue
            pool = [v for v in self.cfg.variants if v.model_id == model_id]
            if any(self.view.observed_replicas(v.variant_id) > 0 for v in pool):
                continue
            candidates = [v for v in sorted(pool, key=lambda v: (v.variant_cost, v.variant_id))
                          if self.view.target_exists(v.variant_id, now) and self.engine.cap(v) > 0]
            if not candidates:
                continue
            v = candidates[0]
            target = max(1, v.policy_params.min_replicas)
            desired = {w.variant_id: self.view.observed_replicas(w.variant_id) for w in pool}
            desired[v.variant_id] = target
            self.cache.write(TargetState(model_id, desired, True, now, "scale-from-zero"))
            self.engine.last_good[v.variant_id] = target
            rec = self.reconciler.records[v.variant_id]
            rec.desired_optimized_alloc = target
            cmd = ActuationCommand(v.variant_id, target, True, now, "scale-from-zero")
            self.reconciler.actuator.publish(cmd)
            commands.append(cmd)
            self.trace.append({"time": now, "model": model_id, "variant": v.variant_id,
                               "observed": 0, "planned": target, "granted": target,
                               "target_resolved": True, "gate_metrics": True,
                               "command": target, "reason": "scale-from-zero"})
        return commands


# --------------------------------------------------------------------------
# HPA baseline


class HpaController:
    """Proportional per-variant autoscaler with tolerance and scale-down stabilization.

    Pods without metrics count as zero load when scaling up and as exactly
    on-target when scaling down.  Scale-downs terminate replicas at once.
    """

    def __init__(self, cfg: ScenarioConfig, source: MetricsSource, view: ClusterView,
                 actuator: ActuationStrategy, params: HpaParams | None = None):
        self.cfg = cfg
        self.params = params or cfg.hpa_params
        self.source = source
        self.view = view
        self.actuator = actuator
        self.history: dict[str, deque] = defaultdict(deque)
        self.trace: list[dict] = []
        self.consumed: list[MetricSnapshot] = []

    def _metric_desired(self, total: float, n_ready: int, current: int, target: float) -> int:
        tol = self.params.tolerance
        ratio = (total / n_ready) / target
        if abs(ratio - 1.0) <= tol:
            return current
        unready = max(current - n_ready, 0)
        if ratio > 1.0:
            ratio = (total / (n_ready + unready)) / target
            if ratio <= 1.0 + tol:
                return current
        else:
            ratio = ((total + unready * target) / (n_ready + unready)) / target
            if ratio >= 1.0 - tol:
                return current
        return math.ceil(ratio * current - 1e-9)

    def recommend(self, now: float, variant: VariantSpec, snaps: Sequence[MetricSnapshot],
                  current: int) -> tuple[int, int]:
        """(raw desired, stabilized final) for one variant."""
        p = variant.policy_params
        lo, hi = max(1, p.min_replicas), p.max_replicas
        if current == 0 or not snaps:
            return current, current
        n = len(snaps)
        d_q = self._metric_desired(sum(s.queue_depth for s in snaps), n, current, self.params.target_avg_queue)
        d_kv = self._metric_desired(sum(s.kv_usage for s in snaps), n, current, self.params.target_avg_kv)
        raw = min(max(d_q, d_kv, lo), hi)
        hist = self.history[variant.variant_id]
        hist.append((now, raw))
        while hist[0][0] < now - self.params.stabilization_window:
            hist.popleft()
        if raw >= current:
            return raw, raw
        return raw, min(current, max(d for _, d in hist))

    def hpa_tick(self, now: float) -> list[ActuationCommand]:
        try:
            snapshots = list(self.source.refresh(RefreshSpec(now))[SNAPSHOTS].value)
        except MetricsSourceError:
            snapshots = None
        self.consumed = snapshots or []
        commands = []
        for v in self.cfg.variants:
            current = self.view.observed_replicas(v.variant_id)
            mine = [s for s in (snapshots or []) if s.variant_id == v.variant_id
                    and now - s.tick_time < self.cfg.control_interval]
            fresh = [s for s in mine if not s.stale]
            blind = snapshots is None or (mine and not fresh)
            resolved = self.view.target_exists(v.variant_id, now)
            raw, final = (current, current) if blind else self.recommend(now, v, fresh, current)
            cmd = None
            if resolved and not blind and final != current:
                cmd = ActuationCommand(v.variant_id, final, False, now, "hpa")
                self.actuator.publish(cmd)
                commands.append(cmd)
            self.trace.append({
                "time": now, "model": v.model_id, "variant": v.variant_id,
                "n_snapshots": len(fresh),
                "avg_kv": sum(s.kv_usage for s in fresh) / len(fresh) if fresh else "",
                "avg_q": sum(s.queue_depth for s in fresh) / len(fresh) if fresh else "",
                "observed": current, "planned": raw, "granted": final,
                "target_resolved": resolved, "gate_metrics": not blind,
                "command": cmd.target_replicas if cmd else "", "reason": "hpa",
            })
        return commands
