"""Pluggable metric sources, the source registry, and capacity discovery."""

from __future__ import annotations

import csv
import logging
from collections import defaultdict
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Iterable, Mapping, Protocol, Sequence

from .domain import (
    FaultProgram,
    InventoryRow,
    MetricSnapshot,
    ScenarioConfig,
    SourceSpec,
    VariantSpec,
)

logger = logging.getLogger(__name__)

SNAPSHOT_COLUMNS = ("tick_time", "replica_id", "variant_id", "kv_usage", "queue_depth", "in_flight", "stale")
INVENTORY_COLUMNS = ("node_id", "gpu_model", "count", "gpus_usable")

SNAPSHOTS = "snapshots"


class MetricsSourceError(RuntimeError):
    def __init__(self, code: str, message: str):
        self.code = code
        super().__init__(f"{code}: {message}")


@dataclass(frozen=True)
class RefreshSpec:
    now: float
    variants: frozenset[str] | None = None  # None: every variant


@dataclass(frozen=True)
class CachedValue:
    value: Any
    fetched_at: float


class MetricsSource(Protocol):
    def refresh(self, spec: RefreshSpec) -> Mapping[str, CachedValue]: ...

    def get(self, query_name: str, params: Mapping[str, str] | None = None) -> CachedValue | None: ...


class _CachingSource:
    """Shared ``get`` over the last published refresh result."""

    def __init__(self) -> None:
        self._cache: dict[str, CachedValue] = {}

    def _publish(self, snaps: list[MetricSnapshot], now: float) -> Mapping[str, CachedValue]:
        self._cache = {SNAPSHOTS: CachedValue(tuple(snaps), now)}
        return self._cache

    def get(self, query_name: str, params: Mapping[str, str] | None = None) -> CachedValue | None:
        hit = self._cache.get(query_name)
        if hit is None or not params or "variant" not in params:
            return hit
        wanted = params["variant"]
        return CachedValue(tuple(s for s in hit.value if s.variant_id == wanted), hit.fetched_at)


def sim_source_refresh(sim, faults: FaultProgram, now: float) -> list[MetricSnapshot]:
    """Live snapshots from the simulator, flagged stale inside outage windows."""
    out = []
    for s in sim.snapshot_metrics():
        if any(o.covers(now, s.variant_id) for o in faults.outages):
            s = MetricSnapshot(s.replica_id, s.variant_id, s.tick_time, s.kv_usage,
                               s.queue_depth, s.in_flight, stale=True)
        out.append(s)
    return out


class SimSource(_CachingSource):
    def __init__(self, sim, faults: FaultProgram | None = None):
        super().__init__()
        self.sim = sim
        self.faults = faults or FaultProgram()

    def refresh(self, spec: RefreshSpec) -> Mapping[str, CachedValue]:
        snaps = sim_source_refresh(self.sim, self.faults, spec.now)
        if spec.variants is not None:
            snaps = [s for s in snaps if s.variant_id in spec.variants]
        return self._publish(snaps, spec.now)


def _parse_bool(text: str) -> bool:
    low = text.strip().lower()
    if low in ("true", "1"):
        return True
    if low in ("false", "0"):
        return False
    raise ValueError(f"not a boolean: {text!r}")


def read_snapshot_csv(path: str | Path) -> list[MetricSnapshot]:
    try:
        fh = open(path, newline="")
    except FileNotFoundError as exc:
        raise MetricsSourceError("missing-file", str(path)) from exc
    rows: list[MetricSnapshot] = []
    with fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if header is None:
            return rows
        if tuple(header) != SNAPSHOT_COLUMNS:
            raise MetricsSourceError("parse-error", f"{path}:1: unexpected header {header}")
        for lineno, row in enumerate(reader, start=2):
            try:
                if len(row) != len(SNAPSHOT_COLUMNS):
                    raise ValueError(f"expected {len(SNAPSHOT_COLUMNS)} fields, got {len(row)}")
                t, rid, vid, kv, q, inf, stale = row
                rows.append(MetricSnapshot(rid, vid, float(t), float(kv), int(q), int(inf), _parse_bool(stale)))
            except ValueError as exc:
                raise MetricsSourceError("parse-error", f"{path}:{lineno}: {exc}") from exc
    return rows


def write_snapshot_csv(snapshots: Iterable[MetricSnapshot], path: str | Path, append: bool = False) -> None:
    path = Path(path)
    new = not append or not path.exists()
    with open(path, "a" if append else "w", newline="") as fh:
        w = csv.writer(fh)
        if new:
            w.writerow(SNAPSHOT_COLUMNS)
        for s in snapshots:
            w.writerow((repr(s.tick_time), s.replica_id, s.variant_id, repr(s.kv_usage),
                        s.queue_depth, s.in_flight, str(s.stale).lower()))


class FileSource(_CachingSource):
    """Replays a snapshot table; the file is opened lazily on first refresh."""

    def __init__(self, path: str | Path):
        super().__init__()
        self.path = Path(path)
        self._by_replica: dict[str, list[MetricSnapshot]] | None = None

    def _load(self) -> dict[str, list[MetricSnapshot]]:
        if self._by_replica is None:
            grouped: dict[str, list[MetricSnapshot]] = defaultdict(list)
            for s in read_snapshot_csv(self.path):
                grouped[s.replica_id].append(s)
            for rows in grouped.values():
                rows.sort(key=lambda s: s.tick_time)
            self._by_replica = dict(grouped)
        return self._by_replica

    def refresh(self, spec: RefreshSpec) -> Mapping[str, CachedValue]:
        latest = []
        for rows in self._load().values():
            best = None
            for s in rows:
                if s.tick_time > spec.now:
                    break
                best = s
            if best is not None and (spec.variants is None or best.variant_id in spec.variants):
                latest.append(best)
        latest.sort(key=lambda s: s.replica_id)
        return self._publish(latest, spec.now)


def file_source_refresh(path: str | Path, now: float) -> list[MetricSnapshot]:
    return list(FileSource(path).refresh(RefreshSpec(now))[SNAPSHOTS].value)


class RegistryError(ValueError):
    def __init__(self, code: str, message: str):
        self.code = code
        super().__init__(f"{code}: {message}")


@dataclass
class Registry:
    sources: dict[str, MetricsSource] = field(default_factory=dict)

    def resolve(self, name: str) -> MetricsSource:
        try:
            return self.sources[name]
        except KeyError:
            raise RegistryError("unknown-source", name) from None

    @property
    def primary(self) -> MetricsSource:
        return next(iter(self.sources.values()))

    def __len__(self) -> int:
        return len(self.sources)


SOURCE_KINDS = ("sim", "file")


def registry_build(specs: Sequence[SourceSpec], sim=None, faults: FaultProgram | None = None) -> Registry:
    reg = Registry()
    for spec in specs:
        if spec.name in reg.sources:
            raise RegistryError("duplicate-name", spec.name)
        if spec.kind == "sim":
            reg.sources[spec.name] = SimSource(sim, faults)
        elif spec.kind == "file":
            if not spec.path:
                raise RegistryError("invalid-source", f"{spec.name}: file source needs a path")
            reg.sources[spec.name] = FileSource(spec.path)
        else:
            raise RegistryError("unknown-source-kind", f"{spec.name}: {spec.kind!r}")
    return reg


# --------------------------------------------------------------------------
# capacity discovery


class CapacityError(ValueError):
    def __init__(self, code: str, message: str):
        self.code = code
        super().__init__(f"{code}: {message}")


@dataclass(frozen=True)
class ModelInfo:
    count: int
    gpus_usable: int


@dataclass(frozen=True)
class CapacityInventory:
    nodes: Mapping[str, Mapping[str, ModelInfo]]

    @property
    def budget(self) -> int:
        return sum(info.gpus_usable for models in self.nodes.values() for info in models.values())

    def usable_by_model(self) -> dict[str, int]:
        totals: dict[str, int] = defaultdict(int)
        for models in self.nodes.values():
            for gpu_model, info in models.items():
                totals[gpu_model] += info.gpus_usable
        return dict(totals)

    def replica_cap(self, variant: VariantSpec) -> int:
        """Replicas of ``variant`` that its hardware class can host at most."""
        usable = self.usable_by_model().get(variant.hardware_class, 0)
        return usable // variant.gpus_per_replica


def read_inventory_csv(path: str | Path) -> list[InventoryRow]:
    rows = []
    with open(path, newline="") as fh:
        reader = csv.DictReader(fh)
        if reader.fieldnames is None:
            return rows
        if tuple(reader.fieldnames) != INVENTORY_COLUMNS:
            raise CapacityError("malformed-inventory", f"unexpected header {reader.fieldnames}")
        for lineno, row in enumerate(reader, start=2):
            try:
                rows.append(InventoryRow(row["node_id"], row["gpu_model"], int(row["count"]), int(row["gpus_usable"])))
            except (TypeError, ValueError) as exc:
                raise CapacityError("malformed-inventory", f"{path}:{lineno}: {exc}") from exc
    return rows


def build_inventory(rows: Iterable[InventoryRow]) -> CapacityInventory:
    nodes: dict[str, dict[str, ModelInfo]] = defaultdict(dict)
    for r in rows:
        if r.count < 0 or r.gpus_usable < 0 or r.gpus_usable > r.count:
            raise CapacityError("malformed-inventory", f"{r.node_id}/{r.gpu_model}: bad counts")
        prev = nodes[r.node_id].get(r.gpu_model)
        if prev is not None:
            r = InventoryRow(r.node_id, r.gpu_model, prev.count + r.count, prev.gpus_usable + r.gpus_usable)
        nodes[r.node_id][r.gpu_model] = ModelInfo(r.count, r.gpus_usable)
    return CapacityInventory({k: dict(v) for k, v in nodes.items()})


def discover_capacity(source: str | Path | Sequence[InventoryRow] | ScenarioConfig,
                      constrained: bool = True) -> tuple[CapacityInventory, int]:
    """Inventory plus the derived cluster GPU budget (sum of usable GPUs)."""
    if isinstance(source, ScenarioConfig):
        rows = list(source.inventory or ())
    elif isinstance(source, (str, Path)):
        rows = read_inventory_csv(source)
    else:
        rows = list(source)
    inv = build_inventory(rows)
    budget = inv.budget
    if budget == 0:
        if constrained:
            raise CapacityError("budget-zero", "constrained mode requested with an empty inventory")
        logger.warning("inventory yields a zero GPU budget")
    return inv, budget
