"""Shared vocabulary types, scenario validation and the scenario file format."""

from __future__ import annotations

import hashlib
import json
import math
from dataclasses import asdict, dataclass, field, fields, replace
from enum import Enum
from pathlib import Path
from typing import Any, Mapping, Sequence

import yaml


class Role(str, Enum):
    UNIFIED = "unified"
    PREFILL = "prefill"
    DECODE = "decode"


class ArrivalProcess(str, Enum):
    DETERMINISTIC_UNIFORM = "deterministic_uniform"
    POISSON = "poisson"


class Baseline(str, Enum):
    WVA = "wva"
    HPA = "hpa"


@dataclass(frozen=True)
class SaturationParams:
    tau_kv: float = 0.8
    tau_q: int = 5
    gamma_kv: float = 0.3
    gamma_q: float = 2.0
    min_nonsaturated_for_scaledown: int = 2
    min_replicas: int = 0
    max_replicas: int = 10


@dataclass(frozen=True)
class VariantSpec:
    """One deployable configuration of a model (hardware x parallelism).

    ``quantization`` is carried as a label only and never changes behaviour.
    Rates are synthetic scenario inputs, not measured hardware numbers.
    """

    variant_id: str
    model_id: str
    hardware_class: str
    gpus_per_replica: int = 1
    variant_cost: float = 10.0
    kv_capacity_tokens: int = 16384
    max_concurrent_sequences: int = 256
    prefill_rate: float = 8192.0
    decode_rate: float = 1024.0
    role: Role = Role.UNIFIED
    policy_params: SaturationParams = field(default_factory=SaturationParams)
    quantization: str = "fp16"
    initial_replicas: int | None = None
    scale_target: str | None = None

    @property
    def start_replicas(self) -> int:
        if self.initial_replicas is None:
            return self.policy_params.min_replicas
        return self.initial_replicas

    @property
    def target_name(self) -> str:
        return self.scale_target or f"deployment-{self.variant_id}"


@dataclass(frozen=True)
class RequestSpec:
    request_id: int
    arrival_time: float
    input_tokens: int
    output_tokens: int
    prefix_key: str | None = None

    @property
    def footprint(self) -> int:
        return self.input_tokens + self.output_tokens


@dataclass(frozen=True)
class MetricSnapshot:
    replica_id: str
    variant_id: str
    tick_time: float
    kv_usage: float
    queue_depth: int
    in_flight: int
    stale: bool = False


@dataclass(frozen=True)
class TargetState:
    model_id: str
    per_variant_desired: Mapping[str, int]
    metrics_available: bool
    computed_at: float
    reason: str = ""
    unavailable: frozenset[str] = frozenset()  # variants decided blind this tick


@dataclass(frozen=True)
class BoundedNormal:
    min: int
    max: int
    mean: float
    stdev: float


@dataclass(frozen=True)
class TrafficProgram:
    phases: tuple[tuple[float, float], ...]
    arrival_process: ArrivalProcess = ArrivalProcess.DETERMINISTIC_UNIFORM
    input_dist: BoundedNormal = BoundedNormal(10, 8192, 4096.0, 2048.0)
    output_dist: BoundedNormal = BoundedNormal(10, 2048, 1024.0, 512.0)
    model_id: str | None = None
    prefix_groups: int = 0

    def phase_windows(self, duration: float) -> list[tuple[float, float, float]]:
        """(start, end, rps) per phase, truncated at ``duration``."""
        out = []
        for i, (start, rps) in enumerate(self.phases):
            if start >= duration:
                break
            end = self.phases[i + 1][0] if i + 1 < len(self.phases) else duration
            out.append((start, min(end, duration), rps))
        return out


@dataclass(frozen=True)
class HpaParams:
    target_avg_queue: float = 3.0
    target_avg_kv: float = 0.5
    stabilization_window: float = 300.0
    tolerance: float = 0.1


@dataclass(frozen=True)
class Outage:
    start: float
    end: float
    scope: str = "all"  # "all" or "variant:<id>"

    def covers(self, now: float, variant_id: str) -> bool:
        if not (self.start <= now < self.end):
            return False
        return self.scope == "all" or self.scope == f"variant:{variant_id}"


@dataclass(frozen=True)
class FaultProgram:
    outages: tuple[Outage, ...] = ()
    target_deletions: tuple[tuple[float, str], ...] = ()


@dataclass(frozen=True)
class InventoryRow:
    node_id: str
    gpu_model: str
    count: int
    gpus_usable: int


@dataclass(frozen=True)
class SourceSpec:
    name: str
    kind: str = "sim"
    path: str | None = None


@dataclass(frozen=True)
class ScenarioConfig:
    variants: tuple[VariantSpec, ...]
    traffic_program: TrafficProgram
    duration: float = 600.0
    control_interval: float = 30.0
    scale_from_zero_interval: float = 2.0
    provisioning_delay: float = 30.0
    drain_grace: float = math.inf
    rng_seed: int = 0
    scheduler_weights: Mapping[str, float] = field(
        default_factory=lambda: {"queue": 1.0, "kv_cache": 1.0, "prefix_cache": 0.0}
    )
    hard_queue_cap: int = 10
    baseline: Baseline = Baseline.WVA
    hpa_params: HpaParams = field(default_factory=HpaParams)
    cluster_gpu_budget: int | None = None
    inventory: tuple[InventoryRow, ...] | None = None
    optimizer_mode: str | None = None  # None: constrained iff a budget exists
    faults: FaultProgram = field(default_factory=FaultProgram)
    metrics_sources: tuple[SourceSpec, ...] = (SourceSpec("primary", "sim"),)
    name: str = "scenario"

    def variant(self, variant_id: str) -> VariantSpec:
        for v in self.variants:
            if v.variant_id == variant_id:
                return v
        raise KeyError(variant_id)

    @property
    def model_ids(self) -> list[str]:
        seen: dict[str, None] = {}
        for v in self.variants:
            seen.setdefault(v.model_id, None)
        return list(seen)

    @property
    def traffic_model(self) -> str:
        return self.traffic_program.model_id or self.variants[0].model_id


# --------------------------------------------------------------------------
# validation


@dataclass(frozen=True)
class Violation:
    path: str
    code: str
    message: str

    def __str__(self) -> str:
        return f"{self.path}: {self.code}: {self.message}"


class ScenarioError(ValueError):
    """Raised by :func:`validate_scenario`; carries every violation found."""

    def __init__(self, violations: Sequence[Violation]):
        self.violations = list(violations)
        super().__init__("; ".join(str(v) for v in self.violations))

    @property
    def codes(self) -> set[str]:
        return {v.code for v in self.violations}


def _check_dist(path: str, d: BoundedNormal, out: list[Violation]) -> None:
    if d.min < 1:
        out.append(Violation(f"{path}.min", "invalid-field", "min must be >= 1"))
    if not d.min <= d.mean <= d.max:
        out.append(Violation(f"{path}.mean", "invalid-field", "need min <= mean <= max"))
    if not d.stdev > 0:
        out.append(Violation(f"{path}.stdev", "invalid-field", "stdev must be > 0"))


def check_scenario(cfg: ScenarioConfig) -> list[Violation]:
    """Return every violated invariant of ``cfg`` (empty when valid)."""
    out: list[Violation] = []
    if not cfg.variants:
        out.append(Violation("variants", "invalid-field", "at least one variant required"))
    seen: set[tuple[str, str]] = set()
    for i, v in enumerate(cfg.variants):
        p = f"variants[{i}]"
        key = (v.model_id, v.variant_id)
        if key in seen or any(v.variant_id == w.variant_id for w in cfg.variants[:i]):
            out.append(Violation(f"{p}.variant_id", "duplicate-variant-id", f"{v.variant_id!r} repeated"))
        seen.add(key)
        if v.gpus_per_replica < 1:
            out.append(Violation(f"{p}.gpus_per_replica", "invalid-field", "must be >= 1"))
        if not v.variant_cost > 0:
            out.append(Violation(f"{p}.variant_cost", "invalid-field", "must be > 0"))
        if v.kv_capacity_tokens < 1:
            out.append(Violation(f"{p}.kv_capacity_tokens", "invalid-field", "must be >= 1"))
        if v.max_concurrent_sequences < 1:
            out.append(Violation(f"{p}.max_concurrent_sequences", "invalid-field", "must be >= 1"))
        for rate in ("prefill_rate", "decode_rate"):
            if not getattr(v, rate) > 0:
                out.append(Violation(f"{p}.{rate}", "invalid-field", "must be > 0"))
        sp = v.policy_params
        pp = f"{p}.policy_params"
        if not 0 < sp.tau_kv <= 1:
            out.append(Violation(f"{pp}.tau_kv", "invalid-field", "must be in (0, 1]"))
        if sp.tau_q < 1:
            out.append(Violation(f"{pp}.tau_q", "invalid-field", "must be a positive integer"))
        if not 0 < sp.gamma_kv < 1:
            out.append(Violation(f"{pp}.gamma_kv", "invalid-field", "must be in (0, 1)"))
        if sp.gamma_kv >= sp.tau_kv:
            out.append(Violation(f"{pp}.gamma_kv", "gamma-not-below-tau", "gamma_kv must be < tau_kv"))
        if sp.gamma_q < 0:
            out.append(Violation(f"{pp}.gamma_q", "invalid-field", "must be >= 0"))
        if sp.min_nonsaturated_for_scaledown < 0:
            out.append(Violation(f"{pp}.min_nonsaturated_for_scaledown", "invalid-field", "must be >= 0"))
        if sp.min_replicas < 0:
            out.append(Violation(f"{pp}.min_replicas", "invalid-field", "must be >= 0"))
        if sp.max_replicas < 1:
            out.append(Violation(f"{pp}.max_replicas", "invalid-field", "must be >= 1"))
        if sp.min_replicas > sp.max_replicas:
            out.append(Violation(f"{pp}.min_replicas", "invalid-field", "min_replicas > max_replicas"))
        if v.initial_replicas is not None and not (0 <= v.initial_replicas <= sp.max_replicas):
            out.append(Violation(f"{p}.initial_replicas", "invalid-field", "outside [0, max_replicas]"))

    tp = cfg.traffic_program
    if not tp.phases:
        out.append(Violation("traffic_program.phases", "invalid-field", "at least one phase required"))
    else:
        if tp.phases[0][0] != 0:
            out.append(Violation("traffic_program.phases[0]", "invalid-field", "first phase must start at 0"))
        for i in range(1, len(tp.phases)):
            if tp.phases[i][0] <= tp.phases[i - 1][0]:
                out.append(Violation(f"traffic_program.phases[{i}]", "invalid-field",
                                     "start times must be strictly increasing"))
        for i, (_, rps) in enumerate(tp.phases):
            if rps < 0:
                out.append(Violation(f"traffic_program.phases[{i}]", "invalid-field", "rps must be >= 0"))
    _check_dist("traffic_program.input_dist", tp.input_dist, out)
    _check_dist("traffic_program.output_dist", tp.output_dist, out)
    if tp.model_id is not None and tp.model_id not in cfg.model_ids:
        out.append(Violation("traffic_program.model_id", "invalid-field", f"unknown model {tp.model_id!r}"))

    if not cfg.duration > 0:
        out.append(Violation("duration", "invalid-field", "must be > 0"))
    if not cfg.control_interval > 0:
        out.append(Violation("control_interval", "invalid-field", "must be > 0"))
    if not cfg.scale_from_zero_interval > 0:
        out.append(Violation("scale_from_zero_interval", "invalid-field", "must be > 0"))
    if cfg.scale_from_zero_interval > cfg.control_interval:
        out.append(Violation("scale_from_zero_interval", "invalid-field",
                             "must not exceed control_interval"))
    if cfg.provisioning_delay < 0:
        out.append(Violation("provisioning_delay", "invalid-field", "must be >= 0"))
    if not cfg.drain_grace >= 0:
        out.append(Violation("drain_grace", "invalid-field", "must be >= 0"))
    if cfg.hard_queue_cap < 1:
        out.append(Violation("hard_queue_cap", "invalid-field", "must be >= 1"))
    for name, w in cfg.scheduler_weights.items():
        if name not in ("queue", "kv_cache", "prefix_cache"):
            out.append(Violation(f"scheduler_weights.{name}", "invalid-field", "unknown scorer"))
        elif w < 0:
            out.append(Violation(f"scheduler_weights.{name}", "invalid-field", "must be >= 0"))
    if not 0 <= cfg.rng_seed < 2**64:
        out.append(Violation("rng_seed", "invalid-field", "must be a 64-bit unsigned integer"))
    if cfg.cluster_gpu_budget is not None and cfg.cluster_gpu_budget < 1:
        out.append(Violation("cluster_gpu_budget", "invalid-field", "must be positive when set"))
    if cfg.optimizer_mode not in (None, "constrained", "unconstrained"):
        out.append(Violation("optimizer_mode", "invalid-field", "constrained|unconstrained"))
    hp = cfg.hpa_params
    if not hp.target_avg_queue > 0:
        out.append(Violation("hpa_params.target_avg_queue", "invalid-field", "must be > 0"))
    if not 0 < hp.target_avg_kv < 1:
        out.append(Violation("hpa_params.target_avg_kv", "invalid-field", "must be in (0, 1)"))
    if hp.stabilization_window < 0 or hp.tolerance < 0:
        out.append(Violation("hpa_params", "invalid-field", "window and tolerance must be >= 0"))
    for i, o in enumerate(cfg.faults.outages):
        if not o.start < o.end:
            out.append(Violation(f"faults.outages[{i}]", "invalid-field", "start must be < end"))
        if o.scope != "all" and not o.scope.startswith("variant:"):
            out.append(Violation(f"faults.outages[{i}].scope", "invalid-field", "all | variant:<id>"))
    names = [s.name for s in cfg.metrics_sources]
    if len(set(names)) != len(names):
        out.append(Violation("metrics_sources", "duplicate-name", "source names must be unique"))
    return out


def validate_scenario(cfg: ScenarioConfig) -> ScenarioConfig:
    violations = check_scenario(cfg)
    if violations:
        raise ScenarioError(violations)
    return cfg


# --------------------------------------------------------------------------
# scenario file format (YAML)


def _plain(value: Any) -> Any:
    if isinstance(value, Enum):
        return value.value
    if isinstance(value, float) and math.isinf(value):
        return None
    if isinstance(value, (list, tuple)):
        return [_plain(v) for v in value]
    if isinstance(value, Mapping):
        return {k: _plain(v) for k, v in value.items()}
    return value


def scenario_to_dict(cfg: ScenarioConfig) -> dict[str, Any]:
    raw = asdict(cfg)
    raw["scheduler_weights"] = dict(cfg.scheduler_weights)
    return _plain(raw)


def _build(cls, data: Mapping[str, Any] | None, path: str):
    data = dict(data or {})
    known = {f.name for f in fields(cls)}
    unknown = set(data) - known
    if unknown:
        raise ScenarioError([Violation(f"{path}.{k}", "invalid-field", "unknown key") for k in sorted(unknown)])
    return data


def scenario_from_dict(data: Mapping[str, Any]) -> ScenarioConfig:
    """Parse the plain-data form produced by :func:`scenario_to_dict`."""
    top = _build(ScenarioConfig, data, "scenario")
    try:
        variants = []
        for i, raw in enumerate(top.pop("variants", [])):
            v = _build(VariantSpec, raw, f"variants[{i}]")
            v["policy_params"] = SaturationParams(**_build(SaturationParams, v.get("policy_params"),
                                                           f"variants[{i}].policy_params"))
            if "role" in v:
                v["role"] = Role(v["role"])
            variants.append(VariantSpec(**v))
        tp = _build(TrafficProgram, top.pop("traffic_program", None), "traffic_program")
        tp["phases"] = tuple((float(s), float(r)) for s, r in tp.get("phases", ()))
        if "arrival_process" in tp:
            tp["arrival_process"] = ArrivalProcess(tp["arrival_process"])
        for key in ("input_dist", "output_dist"):
            if key in tp:
                tp[key] = BoundedNormal(**_build(BoundedNormal, tp[key], f"traffic_program.{key}"))
        top["traffic_program"] = TrafficProgram(**tp)
        top["variants"] = tuple(variants)
        if "drain_grace" in top and top["drain_grace"] is None:
            top["drain_grace"] = math.inf
        if "baseline" in top:
            top["baseline"] = Baseline(top["baseline"])
        if "hpa_params" in top:
            top["hpa_params"] = HpaParams(**_build(HpaParams, top["hpa_params"], "hpa_params"))
        if top.get("inventory") is not None:
            top["inventory"] = tuple(InventoryRow(**r) for r in top["inventory"])
        if "faults" in top:
            f = _build(FaultProgram, top["faults"], "faults")
            top["faults"] = FaultProgram(
                outages=tuple(Outage(**o) for o in f.get("outages", ())),
                target_deletions=tuple((float(t), str(v)) for t, v in f.get("target_deletions", ())),
            )
        if "metrics_sources" in top:
            top["metrics_sources"] = tuple(SourceSpec(**s) for s in top["metrics_sources"])
        if "scheduler_weights" in top:
            top["scheduler_weights"] = {k: float(w) for k, w in top["scheduler_weights"].items()}
        return ScenarioConfig(**top)
    except (TypeError, ValueError) as exc:
        if isinstance(exc, ScenarioError):
            raise
        raise ScenarioError([Violation("scenario", "invalid-field", str(exc))]) from exc


def load_scenario(path: str | Path) -> ScenarioConfig:
    with open(path) as fh:
        data = yaml.safe_load(fh) or {}
    return scenario_from_dict(data)


def dump_scenario(cfg: ScenarioConfig) -> str:
    return yaml.safe_dump(scenario_to_dict(cfg), sort_keys=False)


def config_digest(cfg: ScenarioConfig) -> str:
    canonical = json.dumps(scenario_to_dict(cfg), sort_keys=True, separators=(",", ":"))
    return hashlib.sha256(canonical.encode()).hexdigest()


def with_overrides(cfg: ScenarioConfig, **changes: Any) -> ScenarioConfig:
    return replace(cfg, **{k: v for k, v in changes.items() if v is not None})
