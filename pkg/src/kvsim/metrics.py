"""Memory accounting: per-step breakdowns and run-level summaries.

The breakdown partitions device capacity with no double counting:

    capacity = weights + activation + kv_used + reserved + fragmentation + free

kv_used is physical (a chunk shared by several requests counts once), reserved
is intentional headroom (lookahead chunks, prefix-pinned chunks, and the lazy
free list), and fragmentation is whatever allocated KV bytes remain.
"""

from __future__ import annotations

from dataclasses import dataclass

from .config import ModelGeometry, SimConfig
from .device import VirtualMemoryDevice
from .ops import VTensorOps
from .scheduler import VTensorScheduler


def bytes_per_token(geometry: ModelGeometry) -> int:
    return geometry.bytes_per_token


@dataclass(frozen=True)
class KvStats:
    """Allocator-side numbers feeding a MemoryBreakdown."""

    kv_allocated: int
    kv_used: int
    reserved: int
    pinned: int = 0
    retained: int = 0
    lookahead: int = 0

    @property
    def fragmentation(self) -> int:
        return self.kv_allocated - self.kv_used - self.reserved


@dataclass(frozen=True)
class MemoryBreakdown:
    weights: int
    activation: int
    kv_used: int
    kv_allocated: int
    reserved: int
    fragmentation: int
    free: int
    pinned: int = 0
    retained: int = 0

    def total(self) -> int:
        return (
            self.weights
            + self.activation
            + self.kv_used
            + self.reserved
            + self.fragmentation
            + self.free
        )

    def check(self, capacity: int) -> None:
        for name in ("weights", "activation", "kv_used", "reserved", "fragmentation", "free"):
            value = getattr(self, name)
            if value < 0:
                raise AssertionError(f"negative breakdown component {name}={value}")
        if self.total() != capacity:
            raise AssertionError(
                f"breakdown sums to {self.total()}, capacity is {capacity}"
            )


def snapshot(kv: KvStats, device: VirtualMemoryDevice, config: SimConfig) -> MemoryBreakdown:
    breakdown = MemoryBreakdown(
        weights=config.weights_bytes,
        activation=device.activation_bytes,
        kv_used=kv.kv_used,
        kv_allocated=kv.kv_allocated,
        reserved=kv.reserved,
        fragmentation=kv.fragmentation,
        free=device.free_bytes,
        pinned=kv.pinned,
        retained=kv.retained,
    )
    breakdown.check(config.capacity_bytes)
    return breakdown


def vtensor_kv_stats(scheduler: VTensorScheduler, ops: VTensorOps) -> KvStats:
    """Chunk classes (request-mapped, record-only, free) from pool counters."""
    config = ops.config
    chunk = config.chunk_size_bytes
    bpt = config.bytes_per_token
    tpc = config.tokens_per_chunk
    pool = ops.pool

    used_tokens = pool.used_tokens
    request_chunks = pool.n_request
    pinned_chunks = pool.n_pinned
    free_chunks = pool.n_free

    lookahead_tokens = 0
    for rid in sorted(scheduler.mem):
        rm = scheduler.mem[rid]
        slack = rm.provisioned_tokens - rm.vt.token_count
        lookahead_tokens += min(max(slack, 0), config.lookahead_chunks * tpc)

    kv_allocated = (request_chunks + pinned_chunks + free_chunks) * chunk
    kv_used = used_tokens * bpt
    pinned = pinned_chunks * chunk
    retained = free_chunks * chunk
    lookahead = min(lookahead_tokens * bpt, request_chunks * chunk - kv_used)
    reserved = retained + pinned + lookahead
    return KvStats(
        kv_allocated=kv_allocated,
        kv_used=kv_used,
        reserved=reserved,
        pinned=pinned,
        retained=retained,
        lookahead=lookahead,
    )


def flexibility_summary(rows: list, capacity: int) -> dict:
    """Aggregate free share, KV peak, stall rate and preemptions over a run."""
    if not rows:
        return {
            "mean_free_fraction": 0.0,
            "peak_kv_allocated": 0,
            "stall_rate": 0.0,
            "preemption_count": 0,
        }
    return {
        "mean_free_fraction": sum(r.free_bytes for r in rows) / (capacity * len(rows)),
        "peak_kv_allocated": max(r.kv_allocated for r in rows),
        "stall_rate": sum(r.stall for r in rows) / len(rows),
        "preemption_count": sum(r.preemptions for r in rows),
    }


def native_fragmentation_ratio(live_tokens: int, live_requests: int, max_seq_len: int) -> float:
    """Exact padding-waste ratio for the whole-sequence allocator."""
    if live_requests == 0:
        return 0.0
    return 1.0 - live_tokens / (live_requests * max_seq_len)
