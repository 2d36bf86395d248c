"""Model Analyzer: saturated set, headroom trigger, capacity target and safety net."""

from __future__ import annotations

import math
from dataclasses import dataclass, replace
from enum import Enum
from typing import Sequence

from .domain import MetricSnapshot, SaturationParams, TargetState, VariantSpec

_EPS = 1e-9


class Direction(str, Enum):
    UP = "up"
    HOLD = "hold"
    DOWN = "down"


@dataclass(frozen=True)
class SaturationReport:
    variant_id: str
    saturated: frozenset[str]
    nonsaturated: frozenset[str]
    avg_spare_kv: float | None
    avg_spare_q: float | None
    trigger_kv: bool
    trigger_q: bool

    @property
    def degenerate(self) -> bool:
        return not self.nonsaturated

    @property
    def triggered(self) -> bool:
        return self.trigger_kv or self.trigger_q

    @property
    def replicas(self) -> frozenset[str]:
        return self.saturated | self.nonsaturated


@dataclass(frozen=True)
class ScaleRecommendation:
    """Outcome of one analysis pass for a variant.

    ``desired`` is the clamped closed-form capacity target; ``step_target``
    is what the control loop actually asks for this tick (the full target
    on a scale-up, one replica less on a scale-down, unchanged on hold).
    """

    variant_id: str
    current: int
    desired: int
    direction: Direction
    reason: str
    spare_capacity: float

    @property
    def step_target(self) -> int:
        if self.direction is Direction.UP:
            return self.desired
        if self.direction is Direction.DOWN:
            return self.current - 1
        return self.current


def is_saturated(snap: MetricSnapshot, params: SaturationParams) -> bool:
    return snap.kv_usage >= params.tau_kv or snap.queue_depth >= params.tau_q


def compute_saturation(snapshots: Sequence[MetricSnapshot], params: SaturationParams,
                       variant_id: str | None = None) -> SaturationReport:
    snaps = [s for s in snapshots if not s.stale]
    if variant_id is None:
        variant_id = snaps[0].variant_id if snaps else ""
    sat = [s for s in snaps if is_saturated(s, params)]
    non = [s for s in snaps if not is_saturated(s, params)]
    if non:
        spare_kv = sum(params.tau_kv - s.kv_usage for s in non) / len(non)
        spare_q = sum(params.tau_q - s.queue_depth for s in non) / len(non)
        trig_kv = spare_kv < params.gamma_kv
        trig_q = spare_q < params.gamma_q
    else:
        spare_kv = spare_q = None
        # every reporting replica saturated is the strongest scale-up signal
        trig_kv = trig_q = bool(snaps)
    return SaturationReport(
        variant_id=variant_id,
        saturated=frozenset(s.replica_id for s in sat),
        nonsaturated=frozenset(s.replica_id for s in non),
        avg_spare_kv=spare_kv,
        avg_spare_q=spare_q,
        trigger_kv=trig_kv,
        trigger_q=trig_q,
    )


def occupied_tokens(snapshots: Sequence[MetricSnapshot], variant: VariantSpec) -> int:
    return sum(round(s.kv_usage * variant.kv_capacity_tokens) for s in snapshots if not s.stale)


def replicas_for_load(tokens: float, queued: float, variant: VariantSpec) -> tuple[int, int]:
    """Replicas needed so the average spare stays at the trigger level, per metric."""
    p = variant.policy_params
    per_replica_kv = variant.kv_capacity_tokens * (p.tau_kv - p.gamma_kv)
    per_replica_q = max(p.tau_q - p.gamma_q, 1.0)
    n_kv = math.ceil(tokens / per_replica_kv - _EPS) if tokens > 0 else 0
    n_q = math.ceil(queued / per_replica_q - _EPS) if queued > 0 else 0
    return n_kv, n_q


def projected_spare(report: SaturationReport, snapshots: Sequence[MetricSnapshot],
                    params: SaturationParams) -> tuple[float, float] | None:
    """Worst-case average spare of the non-saturated set after removing one replica.

    Removing the replica with the most spare is the worst case; removing a
    saturated one leaves the average untouched.  ``None`` when fewer than
    two non-saturated replicas would be left to average over.
    """
    non = [s for s in snapshots if s.replica_id in report.nonsaturated and not s.stale]
    if len(non) < 2:
        return None
    kv = [params.tau_kv - s.kv_usage for s in non]
    q = [params.tau_q - s.queue_depth for s in non]
    n = len(non) - 1
    return (sum(kv) - max(kv)) / n, (sum(q) - max(q)) / n


def scale_down_allowed(report: SaturationReport, snapshots: Sequence[MetricSnapshot],
                       params: SaturationParams) -> bool:
    if len(report.nonsaturated) <= params.min_nonsaturated_for_scaledown:
        return False
    proj = projected_spare(report, snapshots, params)
    if proj is None:
        return False
    return proj[0] >= params.gamma_kv and proj[1] >= params.gamma_q


def spare_capacity(report: SaturationReport, params: SaturationParams) -> float:
    if report.avg_spare_kv is None or report.avg_spare_q is None:
        return 0.0
    ratio = min(report.avg_spare_kv / params.tau_kv, report.avg_spare_q / params.tau_q)
    return min(max(ratio, 0.0), 1.0)


def compute_target_replicas(report: SaturationReport, snapshots: Sequence[MetricSnapshot],
                            params: SaturationParams, variant: VariantSpec,
                            current: int | None = None) -> ScaleRecommendation:
    snaps = [s for s in snapshots if not s.stale]
    if current is None:
        current = len(snaps)
    tokens = occupied_tokens(snaps, variant)
    queued = sum(s.queue_depth for s in snaps)
    loaded = tokens > 0 or queued > 0 or any(s.in_flight for s in snaps)
    n_kv, n_q = replicas_for_load(tokens, queued, variant)
    floor = 1 if loaded else params.min_replicas
    desired = min(max(n_kv, n_q, floor, params.min_replicas), params.max_replicas)

    if report.triggered and desired > current:
        direction = Direction.UP
        if report.degenerate:
            reason = "saturated-all"
        else:
            reason = "headroom-breach-" + "+".join(
                m for m, hit in (("kv", report.trigger_kv), ("q", report.trigger_q)) if hit)
    elif (not report.triggered and desired < current
          and scale_down_allowed(report, snaps, params)):
        direction, reason = Direction.DOWN, "scale-down"
    else:
        direction = Direction.HOLD
        if report.triggered and current >= params.max_replicas:
            reason = "at-max"
        elif not snaps:
            reason = "no-data"
        else:
            reason = "hold"
    return ScaleRecommendation(
        variant_id=report.variant_id or variant.variant_id,
        current=current,
        desired=desired,
        direction=direction,
        reason=reason,
        spare_capacity=spare_capacity(report, params),
    )


def safety_net(last_good: TargetState, metrics_available: bool,
               fresh: TargetState | None = None, now: float | None = None) -> TargetState:
    """Gate a fresh decision on metric availability.

    With metrics available the fresh decision passes through.  Otherwise the
    last known good allocation is held, floored at one replica per variant so
    a blind controller never scales a pool to zero.
    """
    if metrics_available:
        return fresh if fresh is not None else last_good
    held = {vid: max(1, n) for vid, n in last_good.per_variant_desired.items()}
    return replace(
        last_good,
        per_variant_desired=held,
        metrics_available=False,
        computed_at=last_good.computed_at if now is None else now,
        reason="safety-net",
    )
