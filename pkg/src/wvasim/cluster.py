"""Discrete-event model of inference replicas behind an endpoint picker.

Each replica holds a FIFO queue and a set of in-flight sequences.  A
sequence is admitted when a concurrency slot is free, ``input_tokens`` of
KV are free *and* its worst-case footprint (input + output) still fits the
committed budget, so decode growth can never overflow the cache.  Prefill
takes ``input_tokens / prefill_rate``; decode then grows the footprint by
one token every ``1 / decode_rate`` seconds.  Decode growth is applied
lazily whenever a replica is touched (``sync``), which keeps the event
count at four per request.
"""

from __future__ import annotations

import hashlib
import heapq
import itertools
import math
from collections import Counter, deque
from dataclasses import dataclass, field
from enum import Enum, IntEnum
from typing import Iterable, Mapping, Sequence

from .domain import MetricSnapshot, RequestSpec, ScenarioConfig, VariantSpec


class Phase(str, Enum):
    PROVISIONING = "provisioning"
    READY = "ready"
    DRAINING = "draining"
    TERMINATED = "terminated"


class Stage(str, Enum):
    PREFILL = "prefill"
    DECODE = "decode"


class DropCause(str, Enum):
    NO_READY_REPLICA = "no_ready_replica"
    QUEUE_FULL = "queue_full"
    KV_FULL = "kv_full"
    TERMINATED = "terminated"


class EventKind(IntEnum):
    # same-timestamp order: completions, then arrivals, then control actions
    COMPLETE = 0
    PREFILL_DONE = 1
    REPLICA_READY = 2
    DRAIN_DEADLINE = 3
    ARRIVAL = 4


class InvalidTarget(ValueError):
    pass


@dataclass
class ActiveRequest:
    request: RequestSpec
    started_at: float
    stage: Stage = Stage.PREFILL
    tokens_generated: int = 0
    first_token_at: float | None = None

    @property
    def request_id(self) -> int:
        return self.request.request_id

    @property
    def tokens_reserved(self) -> int:
        return self.request.input_tokens + self.tokens_generated


@dataclass
class ReplicaState:
    replica_id: str
    variant: VariantSpec
    phase: Phase
    created_at: float
    ready_at: float
    occupied_tokens: int = 0
    committed_tokens: int = 0
    queue: deque = field(default_factory=deque)
    in_flight: dict[int, ActiveRequest] = field(default_factory=dict)
    drain_deadline: float | None = None
    terminated_at: float | None = None
    last_prefix: str | None = None
    peak_occupied: int = 0
    served: int = 0

    @property
    def variant_id(self) -> str:
        return self.variant.variant_id

    @property
    def kv_capacity(self) -> int:
        return self.variant.kv_capacity_tokens

    @property
    def kv_usage(self) -> float:
        return self.occupied_tokens / self.kv_capacity

    @property
    def free_tokens(self) -> int:
        return self.kv_capacity - self.occupied_tokens

    @property
    def queue_depth(self) -> int:
        return len(self.queue)

    def sync(self, now: float) -> None:
        """Bring decode growth of every in-flight sequence up to ``now``."""
        rate = self.variant.decode_rate
        for ar in self.in_flight.values():
            if ar.stage is not Stage.DECODE:
                continue
            gen = min(ar.request.output_tokens, int((now - ar.first_token_at) * rate))
            if gen > ar.tokens_generated:
                self.occupied_tokens += gen - ar.tokens_generated
                ar.tokens_generated = gen
        if self.occupied_tokens > self.peak_occupied:
            self.peak_occupied = self.occupied_tokens

    def can_admit(self, req: RequestSpec) -> bool:
        return (
            len(self.in_flight) < self.variant.max_concurrent_sequences
            and self.free_tokens >= req.input_tokens
            and self.committed_tokens + req.footprint <= self.kv_capacity
        )


@dataclass(frozen=True)
class Rejection:
    cause: DropCause


SCORERS = ("queue", "kv_cache", "prefix_cache")


def schedule_request(req: RequestSpec, ready_replicas: Sequence[ReplicaState],
                     weights: Mapping[str, float], hard_queue_cap: int) -> str | Rejection:
    """Pick the best-scoring ready replica for ``req`` or reject it.

    Replicas are expected to be synced to the current time by the caller.
    """
    if not ready_replicas:
        return Rejection(DropCause.NO_READY_REPLICA)
    if all(r.free_tokens < req.input_tokens for r in ready_replicas):
        return Rejection(DropCause.KV_FULL)
    w_q = weights.get("queue", 0.0)
    w_kv = weights.get("kv_cache", 0.0)
    w_pfx = weights.get("prefix_cache", 0.0)

    def score(r: ReplicaState) -> float:
        affinity = 1.0 if req.prefix_key is not None and r.last_prefix == req.prefix_key else 0.0
        return (w_q * (1.0 - min(r.queue_depth / hard_queue_cap, 1.0))
                + w_kv * (1.0 - r.kv_usage)
                + w_pfx * affinity)

    best = min(ready_replicas, key=lambda r: (-score(r), r.replica_id))
    if best.queue_depth >= hard_queue_cap:
        return Rejection(DropCause.QUEUE_FULL)
    return best.replica_id


@dataclass
class RequestRecord:
    request: RequestSpec
    outcome: str = "pending"  # pending | queued | running | completed | dropped
    drop_cause: DropCause | None = None
    replica_id: str | None = None
    admitted_at: float | None = None
    first_token_at: float | None = None
    completion_time: float | None = None

    @property
    def arrival(self) -> float:
        return self.request.arrival_time

    @property
    def ttft(self) -> float | None:
        if self.first_token_at is None:
            return None
        return self.first_token_at - self.request.arrival_time

    @property
    def itl_mean(self) -> float | None:
        if self.completion_time is None or self.first_token_at is None:
            return None
        if self.request.output_tokens <= 1:
            return 0.0
        return (self.completion_time - self.first_token_at) / (self.request.output_tokens - 1)


@dataclass(frozen=True)
class Transition:
    time: float
    replica_id: str
    variant_id: str
    old: Phase | None
    new: Phase


@dataclass
class SimCounters:
    arrived: int = 0
    completed: int = 0
    dropped: int = 0
    drop_causes: Counter = field(default_factory=Counter)

    def copy(self) -> "SimCounters":
        return SimCounters(self.arrived, self.completed, self.dropped, Counter(self.drop_causes))


@dataclass
class SimOutcome:
    records: list[RequestRecord]
    counters: SimCounters
    in_flight_at_end: int
    queued_at_end: int
    peak_occupied: Mapping[str, int]
    event_log_hash: str

    def flow_conserved(self) -> bool:
        c = self.counters
        return c.arrived == c.completed + c.dropped + self.in_flight_at_end + self.queued_at_end


class ClusterSim:
    """Single-threaded event loop over replicas of every configured variant."""

    def __init__(self, cfg: ScenarioConfig, requests: Iterable[RequestSpec] = (),
                 keep_event_log: bool = True):
        self.cfg = cfg
        self.now = 0.0
        self.replicas: dict[str, ReplicaState] = {}
        self.records: dict[int, RequestRecord] = {}
        self.counters = SimCounters()
        self.completed_by_variant: Counter = Counter()
        self.gateway_arrivals: Counter = Counter()
        self._heap: list = []
        self._seq = itertools.count()
        self._replica_seq = itertools.count(1)
        self._hash = hashlib.sha256()
        self.keep_event_log = keep_event_log
        self.event_log: list[str] = []
        self._model = cfg.traffic_model
        for v in cfg.variants:
            for _ in range(v.start_replicas):
                self._spawn(v, ready_at=0.0)
        self.add_requests(requests)

    # -- bookkeeping -----------------------------------------------------

    def _log(self, kind: str, replica: str = "-", request: object = "-", payload: str = "") -> None:
        line = f"{self.now:.9f}\t{kind}\t{replica}\t{request}\t{payload}"
        self._hash.update(line.encode())
        self._hash.update(b"\n")
        if self.keep_event_log:
            self.event_log.append(line)

    def event_log_hash(self) -> str:
        return self._hash.hexdigest()

    def _push(self, t: float, kind: EventKind, payload: tuple) -> None:
        heapq.heappush(self._heap, (t, int(kind), next(self._seq), payload))

    def add_requests(self, requests: Iterable[RequestSpec]) -> None:
        for req in requests:
            self.records[req.request_id] = RequestRecord(req)
            self._push(req.arrival_time, EventKind.ARRIVAL, (req.request_id,))

    def _spawn(self, variant: VariantSpec, ready_at: float) -> ReplicaState:
        rid = f"r{next(self._replica_seq):05d}"
        phase = Phase.READY if ready_at <= self.now else Phase.PROVISIONING
        rep = ReplicaState(rid, variant, phase, created_at=self.now, ready_at=ready_at)
        self.replicas[rid] = rep
        self._log("spawn", rid, payload=f"{variant.variant_id} {phase.value}")
        if phase is Phase.PROVISIONING:
            self._push(ready_at, EventKind.REPLICA_READY, (rid,))
        return rep

    # -- queries ---------------------------------------------------------

    def replicas_of(self, variant_id: str, phases: Iterable[Phase]) -> list[ReplicaState]:
        wanted = set(phases)
        return [r for r in self.replicas.values() if r.variant_id == variant_id and r.phase in wanted]

    def ready_replicas(self, model_id: str | None = None) -> list[ReplicaState]:
        return [r for r in self.replicas.values()
                if r.phase is Phase.READY and (model_id is None or r.variant.model_id == model_id)]

    def observed_replicas(self, variant_id: str) -> int:
        """Replica count as the orchestrator sees it (ready + provisioning)."""
        return len(self.replicas_of(variant_id, (Phase.READY, Phase.PROVISIONING)))

    def ready_count(self, variant_id: str) -> int:
        return len(self.replicas_of(variant_id, (Phase.READY,)))

    def in_flight_total(self) -> int:
        return sum(len(r.in_flight) for r in self.replicas.values())

    def queued_total(self) -> int:
        return sum(len(r.queue) for r in self.replicas.values())

    def snapshot_metrics(self) -> list[MetricSnapshot]:
        """One snapshot per replica exposing metrics (ready or draining).

        Provisioning replicas have no metrics endpoint yet and are skipped.
        """
        out = []
        for r in self.replicas.values():
            if r.phase not in (Phase.READY, Phase.DRAINING):
                continue
            r.sync(self.now)
            out.append(MetricSnapshot(r.replica_id, r.variant_id, self.now, r.kv_usage,
                                      r.queue_depth, len(r.in_flight)))
        return out

    # -- event loop ------------------------------------------------------

    def advance(self, to_time: float) -> SimCounters:
        """Process every event with timestamp <= ``to_time``; return the window's counts."""
        if to_time < self.now:
            raise ValueError(f"cannot rewind from {self.now} to {to_time}")
        before = self.counters.copy()
        heap = self._heap
        while heap and heap[0][0] <= to_time:
            t, kind, _, payload = heapq.heappop(heap)
            self.now = t
            if kind == EventKind.ARRIVAL:
                self._on_arrival(payload[0])
            elif kind == EventKind.PREFILL_DONE:
                self._on_prefill_done(*payload)
            elif kind == EventKind.COMPLETE:
                self._on_complete(*payload)
            elif kind == EventKind.REPLICA_READY:
                self._on_ready(payload[0])
            elif kind == EventKind.DRAIN_DEADLINE:
                self._on_drain_deadline(payload[0])
        self.now = to_time
        delta = SimCounters(
            self.counters.arrived - before.arrived,
            self.counters.completed - before.completed,
            self.counters.dropped - before.dropped,
            self.counters.drop_causes - before.drop_causes,
        )
        return delta

    def _drop(self, rec: RequestRecord, cause: DropCause, replica: str = "-") -> None:
        rec.outcome = "dropped"
        rec.drop_cause = cause
        self.counters.dropped += 1
        self.counters.drop_causes[cause.value] += 1
        self._log("drop", replica, rec.request.request_id, cause.value)

    def _on_arrival(self, request_id: int) -> None:
        rec = self.records[request_id]
        req = rec.request
        self.counters.arrived += 1
        self.gateway_arrivals[self._model] += 1
        self._log("arrival", request=request_id, payload=f"{req.input_tokens} {req.output_tokens}")
        ready = self.ready_replicas(self._model)
        for r in ready:
            r.sync(self.now)
        decision = schedule_request(req, ready, self.cfg.scheduler_weights, self.cfg.hard_queue_cap)
        if isinstance(decision, Rejection):
            self._drop(rec, decision.cause)
            return
        rep = self.replicas[decision]
        rep.queue.append(req)
        rep.last_prefix = req.prefix_key if req.prefix_key is not None else rep.last_prefix
        rec.outcome = "queued"
        rec.replica_id = rep.replica_id
        self._log("route", rep.replica_id, request_id)
        self._try_admit(rep)

    def _try_admit(self, rep: ReplicaState) -> None:
        if rep.phase not in (Phase.READY, Phase.DRAINING):
            return
        while rep.queue and rep.can_admit(rep.queue[0]):
            req = rep.queue.popleft()
            ar = ActiveRequest(req, started_at=self.now)
            rep.in_flight[req.request_id] = ar
            rep.occupied_tokens += req.input_tokens
            rep.committed_tokens += req.footprint
            if rep.occupied_tokens > rep.peak_occupied:
                rep.peak_occupied = rep.occupied_tokens
            rec = self.records[req.request_id]
            rec.outcome = "running"
            rec.admitted_at = self.now
            self._log("admit", rep.replica_id, req.request_id, str(rep.occupied_tokens))
            self._push(self.now + req.input_tokens / rep.variant.prefill_rate,
                       EventKind.PREFILL_DONE, (rep.replica_id, req.request_id))

    def _active(self, replica_id: str, request_id: int) -> tuple[ReplicaState, ActiveRequest] | None:
        rep = self.replicas.get(replica_id)
        if rep is None or rep.phase is Phase.TERMINATED:
            return None
        ar = rep.in_flight.get(request_id)
        return None if ar is None else (rep, ar)

    def _on_prefill_done(self, replica_id: str, request_id: int) -> None:
        found = self._active(replica_id, request_id)
        if found is None:
            return
        rep, ar = found
        rep.sync(self.now)
        ar.stage = Stage.DECODE
        ar.first_token_at = self.now
        self.records[request_id].first_token_at = self.now
        self._log("first_token", replica_id, request_id)
        self._push(self.now + ar.request.output_tokens / rep.variant.decode_rate,
                   EventKind.COMPLETE, (replica_id, request_id))

    def _on_complete(self, replica_id: str, request_id: int) -> None:
        found = self._active(replica_id, request_id)
        if found is None:
            return
        rep, ar = found
        rep.sync(self.now)
        # the final token lands exactly now, independent of float rounding in sync
        if ar.tokens_generated < ar.request.output_tokens:
            rep.occupied_tokens += ar.request.output_tokens - ar.tokens_generated
            ar.tokens_generated = ar.request.output_tokens
            rep.peak_occupied = max(rep.peak_occupied, rep.occupied_tokens)
        rep.occupied_tokens -= ar.tokens_reserved
        rep.committed_tokens -= ar.request.footprint
        del rep.in_flight[request_id]
        rep.served += 1
        rec = self.records[request_id]
        rec.outcome = "completed"
        rec.completion_time = self.now
        self.counters.completed += 1
        self.completed_by_variant[rep.variant_id] += 1
        self._log("complete", replica_id, request_id, str(rep.occupied_tokens))
        self._try_admit(rep)
        if rep.phase is Phase.DRAINING and not rep.in_flight and not rep.queue:
            self._terminate(rep)

    def _on_ready(self, replica_id: str) -> None:
        rep = self.replicas[replica_id]
        if rep.phase is not Phase.PROVISIONING:
            return
        rep.phase = Phase.READY
        self._log("ready", replica_id)

    def _on_drain_deadline(self, replica_id: str) -> None:
        rep = self.replicas[replica_id]
        if rep.phase is Phase.DRAINING:
            self._terminate(rep)

    def _terminate(self, rep: ReplicaState) -> list[int]:
        """Kill ``rep``; anything still queued or in flight becomes a drop."""
        lost = list(rep.in_flight) + [q.request_id for q in rep.queue]
        for request_id in lost:
            self._drop(self.records[request_id], DropCause.TERMINATED, rep.replica_id)
        rep.in_flight.clear()
        rep.queue.clear()
        rep.occupied_tokens = 0
        rep.committed_tokens = 0
        rep.phase = Phase.TERMINATED
        rep.terminated_at = self.now
        self._log("terminate", rep.replica_id, payload=str(len(lost)))
        return lost

    # -- actuation -------------------------------------------------------

    def apply_replica_target(self, variant_id: str, desired: int, drain_safe: bool) -> list[Transition]:
        variant = self.cfg.variant(variant_id)
        if desired < 0 or desired > variant.policy_params.max_replicas:
            raise InvalidTarget(f"{variant_id}: target {desired} outside [0, {variant.policy_params.max_replicas}]")
        active = self.replicas_of(variant_id, (Phase.PROVISIONING, Phase.READY))
        self._log("target", payload=f"{variant_id} {len(active)}->{desired} drain_safe={drain_safe}")
        transitions: list[Transition] = []
        if desired > len(active):
            for _ in range(desired - len(active)):
                rep = self._spawn(variant, ready_at=self.now + self.cfg.provisioning_delay)
                transitions.append(Transition(self.now, rep.replica_id, variant_id, None, rep.phase))
        elif desired < len(active):
            for r in active:
                r.sync(self.now)
            if drain_safe:
                order = sorted(active, key=lambda r: (len(r.in_flight), r.occupied_tokens, _neg_id(r)))
            else:
                # orchestrator-style: not-yet-ready first, then newest
                order = sorted(active, key=lambda r: (r.phase is not Phase.PROVISIONING, _neg_id(r)))
            for rep in order[: len(active) - desired]:
                old = rep.phase
                if drain_safe and rep.phase is Phase.READY and (rep.in_flight or rep.queue):
                    rep.phase = Phase.DRAINING
                    grace = self.cfg.drain_grace
                    self._log("drain", rep.replica_id, payload=str(len(rep.in_flight)))
                    if math.isfinite(grace):
                        rep.drain_deadline = self.now + grace
                        self._push(rep.drain_deadline, EventKind.DRAIN_DEADLINE, (rep.replica_id,))
                else:
                    self._terminate(rep)
                transitions.append(Transition(self.now, rep.replica_id, variant_id, old, rep.phase))
        return transitions

    # -- results ---------------------------------------------------------

    def check_invariants(self) -> None:
        for r in self.replicas.values():
            if r.phase is Phase.TERMINATED:
                assert not r.in_flight and not r.queue, r.replica_id
                continue
            r.sync(self.now)
            assert 0 <= r.occupied_tokens <= r.kv_capacity, r.replica_id
            assert r.committed_tokens <= r.kv_capacity, r.replica_id
            assert len(r.in_flight) <= r.variant.max_concurrent_sequences, r.replica_id
            assert r.occupied_tokens == sum(a.tokens_reserved for a in r.in_flight.values()), r.replica_id
        c = self.counters
        assert c.arrived == c.completed + c.dropped + self.in_flight_total() + self.queued_total()

    def outcome(self) -> SimOutcome:
        for r in self.replicas.values():
            if r.phase is not Phase.TERMINATED:
                r.sync(self.now)
        peaks: dict[str, int] = {}
        for r in self.replicas.values():
            peaks[r.replica_id] = r.peak_occupied
        arrived_ids = sorted(self.records)
        return SimOutcome(
            records=[self.records[i] for i in arrived_ids],
            counters=self.counters.copy(),
            in_flight_at_end=self.in_flight_total(),
            queued_at_end=self.queued_total(),
            peak_occupied=peaks,
            event_log_hash=self.event_log_hash(),
        )


def _neg_id(rep: ReplicaState) -> int:
    return -int(rep.replica_id[1:])
