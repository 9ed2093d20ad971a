"""Trace-driven serving engine: continuous batching over a chosen allocator.

Each engine step runs one batch. Memory work (creates, maps, extends,
preemption releases) is dispatched onto a serial memory lane at the start of
the previous step's compute, which is when the scheduler prepares the next
batch; compute runs on its own lane. A step stalls when a decode request's
capacity extension finishes after compute could otherwise have started.

Preemption is release-and-recompute: on device out-of-memory the
lowest-priority active request is fully released and requeued; generated
tokens come from seeded streams, so the rerun reproduces them exactly.
"""

from __future__ import annotations

import enum
from dataclasses import dataclass, field

from .baselines import NativeAllocator, PagedAllocator
from .config import SimConfig
from .device import DeviceConfig, DeviceOutOfMemory, VirtualMemoryDevice
from .metrics import (
    MemoryBreakdown,
    flexibility_summary,
    snapshot,
    vtensor_kv_stats,
)
from .ops import VTensorOps
from .pool import TensorPool
from .scheduler import AdmitStats, ExceedsMaxSeqLen, VTensorScheduler
from .trace import TraceRequest, output_token


class NothingToPreempt(Exception):
    pass


class TraceInfeasible(Exception):
    pass


ALLOCATORS = ("native", "paged", "vtensor")


class RequestState(enum.Enum):
    QUEUED = "queued"
    PREFILLING = "prefilling"
    DECODING = "decoding"
    RELEASED = "released"


@dataclass
class LiveRequest:
    trace: TraceRequest
    state: RequestState = RequestState.QUEUED
    effective: list[int] | None = None  # full prompt incl. conversation history
    tokens: list[int] = field(default_factory=list)
    token_count: int = 0
    generated: int = 0
    admit: AdmitStats | None = None

    @property
    def id(self) -> str:
        return self.trace.id

    @property
    def priority(self) -> tuple[int, int]:
        # Earlier arrival wins; trace order breaks ties.
        return (self.trace.arrival_step, self.trace.seq)


@dataclass
class MemoryOpEvent:
    request_id: str
    kind: str  # admit | reserve | extend | release
    calls: int
    dispatched: float
    completed: float


@dataclass
class StepRow:
    step: int
    created_bytes: int
    mapped_bytes: int
    used_bytes: int
    reserved_virtual_bytes: int
    free_bytes: int
    active_requests: int
    stall: int
    preemptions: int
    kv_allocated: int = 0
    reserved: int = 0
    fragmentation: int = 0
    pinned: int = 0
    retained: int = 0
    activation: int = 0
    live_tokens: int = 0

    CSV_COLUMNS = (
        "step",
        "created_bytes",
        "mapped_bytes",
        "used_bytes",
        "reserved_virtual_bytes",
        "free_bytes",
        "active_requests",
        "stalls",
        "preemptions",
    )

    def csv_values(self) -> list[int]:
        return [
            self.step,
            self.created_bytes,
            self.mapped_bytes,
            self.used_bytes,
            self.reserved_virtual_bytes,
            self.free_bytes,
            self.active_requests,
            self.stall,
            self.preemptions,
        ]


@dataclass
class EngineStep:
    index: int
    batch: list[str]
    compute_start: float
    compute_end: float
    stall: bool
    events: list[MemoryOpEvent] = field(default_factory=list)


@dataclass
class SimulationReport:
    allocator: str
    config: SimConfig
    rows: list[StepRow] = field(default_factory=list)
    steps: list[EngineStep] = field(default_factory=list)
    admissions: list[dict] = field(default_factory=list)
    generated: dict[str, int] = field(default_factory=dict)
    stall_count: int = 0
    preemption_count: int = 0
    final_created_bytes: int = 0
    reclaim: dict = field(default_factory=dict)
    extra: dict = field(default_factory=dict)

    def to_csv(self) -> str:
        lines = [",".join(StepRow.CSV_COLUMNS)]
        for row in self.rows:
            lines.append(",".join(str(v) for v in row.csv_values()))
        return "\n".join(lines) + "\n"

    def summary(self) -> dict:
        flex = flexibility_summary(self.rows, self.config.capacity_bytes)
        return {
            "allocator": self.allocator,
            "capacity_bytes": self.config.capacity_bytes,
            "weights_bytes": self.config.weights_bytes,
            "chunk_size_bytes": self.config.chunk_size_bytes,
            "max_seq_len": self.config.max_seq_len,
            "bytes_per_token": self.config.bytes_per_token,
            "steps": len(self.rows),
            "requests_finished": len(self.generated),
            "stall_count": self.stall_count,
            "preemption_count": self.preemption_count,
            "final_created_bytes": self.final_created_bytes,
            "flexibility": flex,
            "generated_tokens": dict(sorted(self.generated.items())),
            **self.extra,
        }


class VTensorAdapter:
    """Engine-facing wrapper around the chunked virtual-memory stack."""

    name = "vtensor"

    def __init__(self, device: VirtualMemoryDevice, config: SimConfig) -> None:
        self.device = device
        self.config = config
        self.pool = TensorPool(config.tokens_per_chunk)
        self.ops = VTensorOps(device, self.pool, config)
        self.scheduler = VTensorScheduler(self.ops)

    def startup(self) -> None:
        pass

    def can_admit(self, prompt_len: int) -> bool:
        tpc = self.config.tokens_per_chunk
        need = -(-max(prompt_len, self.config.initial_alloc_tokens) // tpc)
        need += self.config.lookahead_chunks
        have = self.device.free_bytes // self.config.chunk_size_bytes
        have += self.pool.free_count()
        return need <= have

    def admit(self, request_id: str, tokens: list[int], try_prefix: bool) -> AdmitStats:
        if try_prefix:
            hit = self.scheduler.prefix_match(request_id, tokens)
            if hit is not None:
                return hit[1]
        return self.scheduler.create(request_id, tokens)[1]

    def prefill_reserve(self, request_id: str, prompt_len: int) -> int:
        """Provision lookahead headroom past the prompt; best effort."""
        target = min(
            self.scheduler.lookahead_target(prompt_len), self.config.max_seq_len
        )
        try:
            return self.scheduler.extend(request_id, target)
        except DeviceOutOfMemory:
            return 0  # headroom only; the decode-path extend will fight for memory

    def ensure_capacity(self, request_id: str, target_tokens: int) -> None:
        self.scheduler.extend(request_id, target_tokens)

    def mark_prefilled(self, request_id: str, prompt_len: int) -> None:
        self.scheduler.mark_prefilled(request_id)

    def append_token(self, request_id: str, token: int) -> None:
        self.scheduler.append_token(request_id, token)

    def finish(self, request_id: str, record: bool) -> bool:
        if record and self.scheduler.prefix_record(request_id):
            return True
        self.scheduler.release(request_id)
        return False

    def release(self, request_id: str) -> None:
        self.scheduler.release(request_id)

    def shutdown(self) -> dict:
        self.scheduler.release_all()
        report = self.ops.empty_memory(evict_prefix=self.config.evict_prefix_on_empty)
        return {
            "chunks_destroyed": report.chunks_destroyed,
            "spaces_released": report.spaces_released,
            "records_evicted": report.records_evicted,
        }

    def kv_stats(self):
        return vtensor_kv_stats(self.scheduler, self.ops)

    def extra_summary(self) -> dict:
        return {
            "prefix_records": len(self.pool.tree.records()),
            "pinned_chunks": self.pool.n_pinned,
        }


def build_device(config: SimConfig) -> VirtualMemoryDevice:
    return VirtualMemoryDevice(
        DeviceConfig(
            capacity_bytes=config.capacity_bytes,
            chunk_size_bytes=config.chunk_size_bytes,
            weights_bytes=config.weights_bytes,
            activation_bytes_per_request=config.activation_bytes_per_request,
        )
    )


def build_allocator(name: str, device: VirtualMemoryDevice, config: SimConfig):
    if name == "vtensor":
        return VTensorAdapter(device, config)
    if name == "native":
        return NativeAllocator(device, config)
    if name == "paged":
        return PagedAllocator(device, config)
    raise ValueError(f"unknown allocator {name!r}; choose from {ALLOCATORS}")


class ServingEngine:
    def __init__(
        self,
        config: SimConfig,
        requests: list[TraceRequest],
        allocator: str = "vtensor",
        device: VirtualMemoryDevice | None = None,
    ) -> None:
        self.config = config
        self.device = device or build_device(config)
        self.allocator = build_allocator(allocator, self.device, config)
        self.requests = [LiveRequest(trace=t) for t in requests]
        self._validate()

    def _validate(self) -> None:
        """Reject traces that can never fit a sequence, before any work."""
        history: dict[str, int] = {}
        for req in self.requests:
            t = req.trace
            if t.prompt_tokens is not None:
                effective = t.prompt_len
            else:
                effective = history.get(t.conversation, 0) + t.prompt_len
            total = effective + t.output_len
            if total > self.config.max_seq_len:
                raise TraceInfeasible(
                    f"request {t.id}: {total} tokens exceed max_seq_len "
                    f"{self.config.max_seq_len}"
                )
            if t.conversation is not None:
                history[t.conversation] = total

    # -- helpers -------------------------------------------------------------

    def _effective_tokens(self, req: LiveRequest, conv_history: dict[str, list[int]]) -> list[int]:
        from .trace import token_stream

        t = req.trace
        if t.prompt_tokens is not None:
            return list(t.prompt_tokens)
        base = conv_history.get(t.conversation, []) if t.conversation else []
        fresh = token_stream(
            self.config.seed, t.id, "prompt", n=t.prompt_len, vocab=self.config.vocab_size
        )
        return base + fresh

    # -- main loop -----------------------------------------------------------

    def run(self) -> SimulationReport:
        config = self.config
        device = self.device
        allocator = self.allocator
        report = SimulationReport(allocator=allocator.name, config=config)

        allocator.startup()

        pending = sorted(self.requests, key=lambda r: (r.trace.arrival_step, r.trace.seq))
        queued: list[LiveRequest] = []
        active: dict[str, LiveRequest] = {}
        conv_history: dict[str, list[int]] = {}
        recorded_convs: set[str] = set()
        conv_line: dict[str, list[int]] = {}
        for req in self.requests:
            conv = req.trace.conversation
            if conv is not None:
                conv_line.setdefault(conv, []).append(req.trace.seq)
        for seqs in conv_line.values():
            seqs.sort()

        step = 0
        mem_clock = 0.0
        compute_clock = 0.0
        prev_compute_start = 0.0

        def conv_ready(req: LiveRequest) -> bool:
            conv = req.trace.conversation
            if conv is None:
                return True
            return conv_line[conv][0] == req.trace.seq

        def preempt_victim(reason_req: LiveRequest) -> LiveRequest:
            candidates = sorted(active.values(), key=lambda r: r.priority)
            if not candidates or (
                len(candidates) == 1 and candidates[0] is reason_req
            ):
                raise NothingToPreempt(
                    f"request {reason_req.id} is out of memory with no one to preempt"
                )
            return candidates[-1]

        while pending or queued or active:
            while pending and pending[0].trace.arrival_step <= step:
                queued.append(pending.pop(0))
            if not queued and not active:
                step = pending[0].trace.arrival_step
                continue

            events: list[MemoryOpEvent] = []
            preempts_this_step = 0
            dispatch_base = prev_compute_start

            def dispatch(request_id: str, kind: str, calls_before: int) -> MemoryOpEvent:
                nonlocal mem_clock
                calls = len(device.call_log) - calls_before
                start = max(mem_clock, dispatch_base)
                mem_clock = start + calls * config.mem_op_cost
                event = MemoryOpEvent(request_id, kind, calls, start, mem_clock)
                events.append(event)
                return event

            # Capacity extensions for running requests go on the memory lane
            # first; they were planned a step ahead and must not queue behind
            # backfill admissions.
            extend_events: list[MemoryOpEvent] = []
            for req in sorted(active.values(), key=lambda r: r.priority):
                if req.state is not RequestState.DECODING or req.id not in active:
                    continue
                target = req.token_count + 1
                while True:
                    calls_before = len(device.call_log)
                    try:
                        allocator.ensure_capacity(req.id, target)
                        extend_events.append(dispatch(req.id, "extend", calls_before))
                        break
                    except DeviceOutOfMemory as oom:
                        try:
                            victim = preempt_victim(req)
                        except NothingToPreempt as exc:
                            # Alone and still out of memory: no schedule can
                            # finish this trace on this device.
                            raise TraceInfeasible(str(exc)) from oom
                        calls_before = len(device.call_log)
                        allocator.release(victim.id)
                        dispatch(victim.id, "release", calls_before)
                        victim.state = RequestState.QUEUED
                        victim.tokens = []
                        victim.token_count = 0
                        victim.generated = 0
                        del active[victim.id]
                        device.set_active_requests(len(active))
                        queued.append(victim)
                        preempts_this_step += 1
                        report.preemption_count += 1
                        if victim is req:
                            break
                if req.id not in active:
                    continue

            # Admissions backfill free batch slots in priority order; a step
            # that just preempted is under memory pressure and admits nothing.
            # New requests prefill in the step they are admitted.
            if preempts_this_step == 0:
                admitted_before = len(report.admissions)
                for req in sorted(queued, key=lambda r: r.priority):
                    if len(active) >= config.max_batch:
                        break
                    if not conv_ready(req):
                        continue
                    if req.effective is None:
                        req.effective = self._effective_tokens(req, conv_history)
                    if not allocator.can_admit(len(req.effective)):
                        continue
                    try:
                        device.set_active_requests(len(active) + 1)
                    except DeviceOutOfMemory:
                        continue
                    conv = req.trace.conversation
                    try_prefix = conv is not None and conv in recorded_convs
                    calls_before = len(device.call_log)
                    try:
                        stats = allocator.admit(req.id, req.effective, try_prefix)
                    except DeviceOutOfMemory:
                        device.set_active_requests(len(active))
                        continue
                    dispatch(req.id, "admit", calls_before)
                    calls_before = len(device.call_log)
                    reserve_chunks = 0
                    if hasattr(allocator, "prefill_reserve"):
                        reserve_chunks = allocator.prefill_reserve(
                            req.id, len(req.effective)
                        )
                        dispatch(req.id, "reserve", calls_before)
                    req.state = RequestState.PREFILLING
                    req.tokens = list(req.effective)
                    req.token_count = 0
                    req.generated = 0
                    req.admit = stats
                    active[req.id] = req
                    report.admissions.append(
                        {
                            "request": req.id,
                            "step": step,
                            "shared_tokens": stats.shared_tokens,
                            "chunks_created": stats.chunks_created,
                            "chunks_reused": stats.chunks_reused,
                            "chunks_acquired": stats.chunks_acquired,
                            "reserve_chunks": reserve_chunks,
                            "donor_space": stats.donor_space,
                            "identity_ok": stats.identity_ok,
                        }
                    )
                queued = [r for r in queued if r.state is RequestState.QUEUED]
                # Nothing running, nothing arriving, nothing admitted: the
                # head of the queue can never fit and no later step differs.
                if queued and not active and not pending and len(
                    report.admissions
                ) == admitted_before:
                    stuck = min(queued, key=lambda r: r.priority)
                    raise TraceInfeasible(
                        f"request {stuck.id} can never be admitted on this device"
                    )

            # Two lanes: admission work gates compute start; a step stalls only
            # when a running request's real extend finishes after that gate.
            gate = compute_clock
            for event in events:
                if event.kind in ("admit", "reserve"):
                    gate = max(gate, event.completed)
            extend_done = gate
            for event in extend_events:
                if event.calls:
                    extend_done = max(extend_done, event.completed)
            compute_start = max(gate, extend_done)
            stall = extend_done > gate

            batch = sorted(active.values(), key=lambda r: r.priority)
            prefill_tokens = sum(
                len(r.tokens) - (r.admit.shared_tokens if r.admit else 0)
                for r in batch
                if r.state is RequestState.PREFILLING
            )
            cost = (
                config.prefill_cost_per_token * prefill_tokens
                + config.decode_cost_per_request * len(batch)
            )
            compute_end = compute_start + cost if batch else compute_start
            prev_compute_start = compute_start
            compute_clock = compute_end

            # Token progress, then finishes (freed slots refill next step).
            finished: list[LiveRequest] = []
            for req in batch:
                if req.state is RequestState.PREFILLING:
                    allocator.mark_prefilled(req.id, len(req.tokens))
                    req.token_count = len(req.tokens)
                    req.state = RequestState.DECODING
                else:
                    token = output_token(
                        config.seed, req.id, req.generated, self.config.vocab_size
                    )
                    allocator.append_token(req.id, token)
                    req.tokens.append(token)
                    req.token_count += 1
                    req.generated += 1
                if req.generated >= req.trace.output_len:
                    finished.append(req)
            for req in finished:
                conv = req.trace.conversation
                recorded = allocator.finish(req.id, record=conv is not None)
                if conv is not None:
                    if recorded:
                        recorded_convs.add(conv)
                    conv_history[conv] = list(req.tokens)
                    conv_line[conv].remove(req.trace.seq)
                req.state = RequestState.RELEASED
                del active[req.id]
                report.generated[req.id] = req.generated
            device.set_active_requests(len(active))

            kv = allocator.kv_stats()
            breakdown: MemoryBreakdown = snapshot(kv, device, config)
            stats = device.stats()
            report.rows.append(
                StepRow(
                    step=step,
                    created_bytes=stats.created_bytes,
                    mapped_bytes=stats.mapped_page_count * config.chunk_size_bytes,
                    used_bytes=kv.kv_used,
                    reserved_virtual_bytes=stats.reserved_virtual_bytes,
                    free_bytes=stats.free_bytes,
                    active_requests=len(active),
                    stall=int(stall),
                    preemptions=preempts_this_step,
                    kv_allocated=kv.kv_allocated,
                    reserved=kv.reserved,
                    fragmentation=kv.fragmentation,
                    pinned=kv.pinned,
                    retained=kv.retained,
                    activation=device.activation_bytes,
                    live_tokens=sum(r.token_count for r in active.values()),
                )
            )
            report.steps.append(
                EngineStep(
                    index=step,
                    batch=[r.id for r in batch],
                    compute_start=compute_start,
                    compute_end=compute_end,
                    stall=stall,
                    events=events,
                )
            )
            report.stall_count += int(stall)
            step += 1

        report.reclaim = allocator.shutdown()
        report.final_created_bytes = device.created_bytes
        if hasattr(allocator, "extra_summary"):
            report.extra = allocator.extra_summary()
        return report


def run_trace(
    requests: list[TraceRequest],
    config: SimConfig,
    allocator: str = "vtensor",
) -> SimulationReport:
    engine = ServingEngine(config, requests, allocator=allocator)
    return engine.run()
