"""Independent reference implementations used by the test suite."""

from __future__ import annotations

import itertools
from typing import Sequence

from wvasim.optimizer import AllocationRequest


def brute_force_allocation(requests: Sequence[AllocationRequest], budget: int) -> dict[str, int]:
    """Lexicographically greatest feasible grant vector in priority order.

    Every combination of per-variant grants is enumerated; among those whose
    GPU total fits the budget, the winner maximises the grant of the
    highest-priority variant first, then the next, and so on.  Retained
    replicas (min(current, desired)) are granted before any growth; when they
    alone exceed the budget, only truncations of the retained base compete.
    """
    order = sorted(requests, key=lambda r: (r.spare_capacity, r.variant_cost, r.variant_id))
    base = {r.variant_id: min(r.current_replicas, r.desired_replicas) for r in requests}
    base_cost = sum(base[r.variant_id] * r.gpus_per_replica for r in requests)
    if base_cost > budget:
        ranges = [range(base[r.variant_id] + 1) for r in order]
    else:
        ranges = [range(base[r.variant_id], max(r.desired_replicas, base[r.variant_id]) + 1) for r in order]
    best: tuple[int, ...] | None = None
    for combo in itertools.product(*ranges):
        if sum(n * r.gpus_per_replica for n, r in zip(combo, order)) > budget:
            continue
        if best is None or combo > best:
            best = combo
    assert best is not None
    return {r.variant_id: n for n, r in zip(best, order)}


def brute_force_down_ok(snaps, params) -> bool:
    """Re-evaluate the headroom trigger on every set left after removing one replica."""
    from wvasim.saturation import compute_saturation

    report = compute_saturation(snaps, params)
    if len(report.nonsaturated) <= params.min_nonsaturated_for_scaledown:
        return False
    for i in range(len(snaps)):
        rest = compute_saturation(snaps[:i] + snaps[i + 1:], params)
        if rest.degenerate:
            return False
        if rest.avg_spare_kv < params.gamma_kv or rest.avg_spare_q < params.gamma_q:
            return False
    return True
