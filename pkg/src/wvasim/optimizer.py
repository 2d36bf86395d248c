"""Global optimizer: unconstrained pass-through and Greedy-by-Saturation under a GPU budget."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Mapping, Sequence


@dataclass(frozen=True)
class AllocationRequest:
    variant_id: str
    model_id: str
    current_replicas: int
    desired_replicas: int
    gpus_per_replica: int
    variant_cost: float
    spare_capacity: float

    @property
    def priority(self) -> tuple[float, float, str]:
        return (self.spare_capacity, self.variant_cost, self.variant_id)


@dataclass(frozen=True)
class AllocationResult:
    per_variant_granted: Mapping[str, int]
    gpus_used: int
    gpus_budget: int | None = None
    unmet: Mapping[str, int] = field(default_factory=dict)
    order: tuple[str, ...] = ()
    infeasible_base: bool = False

    @property
    def residual(self) -> int | None:
        return None if self.gpus_budget is None else self.gpus_budget - self.gpus_used

    def trace(self) -> dict:
        return {
            "order": list(self.order),
            "granted": dict(self.per_variant_granted),
            "unmet": dict(self.unmet),
            "gpus_used": self.gpus_used,
            "gpus_budget": self.gpus_budget,
            "residual": self.residual,
            "infeasible_base": self.infeasible_base,
        }


def optimize_unconstrained(requests: Sequence[AllocationRequest]) -> AllocationResult:
    granted = {r.variant_id: r.desired_replicas for r in requests}
    used = sum(r.desired_replicas * r.gpus_per_replica for r in requests)
    return AllocationResult(granted, used, None, {}, tuple(r.variant_id for r in requests))


def optimize_constrained(requests: Sequence[AllocationRequest], budget_gpus: int) -> AllocationResult:
    """Grant retained capacity first, then scale-ups replica by replica in priority order.

    Priority is ascending spare capacity, then ascending cost, then variant id.
    A replica that does not fit the residual budget is skipped and the scan
    continues with the next variant.
    """
    if budget_gpus < 0:
        raise ValueError("budget_gpus must be >= 0")
    order = sorted(requests, key=lambda r: r.priority)
    granted = {r.variant_id: min(r.current_replicas, r.desired_replicas) for r in requests}
    unmet: dict[str, int] = {}
    base_gpus = sum(granted[r.variant_id] * r.gpus_per_replica for r in requests)
    infeasible = base_gpus > budget_gpus

    if infeasible:
        residual = budget_gpus
        for r in order:
            base = granted[r.variant_id]
            n = min(base, residual // r.gpus_per_replica)
            granted[r.variant_id] = n
            residual -= n * r.gpus_per_replica
            denied = r.desired_replicas - n
            if denied > 0:
                unmet[r.variant_id] = denied
    else:
        residual = budget_gpus - base_gpus
        for r in order:
            want = r.desired_replicas - granted[r.variant_id]
            if want <= 0:
                continue
            fit = min(want, residual // r.gpus_per_replica)
            granted[r.variant_id] += fit
            residual -= fit * r.gpus_per_replica
            if want > fit:
                unmet[r.variant_id] = want - fit

    used = sum(granted[r.variant_id] * r.gpus_per_replica for r in requests)
    return AllocationResult(granted, used, budget_gpus, unmet,
                            tuple(r.variant_id for r in order), infeasible)
