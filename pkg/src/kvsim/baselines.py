"""Baseline allocators run against the same device and engine as vtensor.

Both speak the engine's allocator interface (admit / ensure_capacity /
append_token / finish / release / kv_stats) and route their physical footprint
through the shared device so created_bytes and free_bytes mean the same thing
in every report.
"""

from __future__ import annotations

from .config import SimConfig
from .device import DeviceOutOfMemory, PhysicalHandle, VirtualMemoryDevice
from .metrics import KvStats, native_fragmentation_ratio
from .scheduler import AdmitStats, ExceedsMaxSeqLen


class NativeAllocator:
    """One contiguous max_seq_len region per request, freed eagerly.

    Simple and fragmentation-prone: every request pays for max_seq_len tokens
    regardless of its actual length.
    """

    name = "native"

    def __init__(self, device: VirtualMemoryDevice, config: SimConfig) -> None:
        self.device = device
        self.config = config
        region_bytes = config.max_seq_len * config.bytes_per_token
        self.region_chunks = -(-region_bytes // config.chunk_size_bytes)
        self.regions: dict[str, list[PhysicalHandle]] = {}
        self.tokens: dict[str, int] = {}

    def startup(self) -> None:
        pass

    def can_admit(self, prompt_len: int) -> bool:
        free_chunks = self.device.free_bytes // self.config.chunk_size_bytes
        return free_chunks >= self.region_chunks

    def admit(
        self, request_id: str, tokens: list[int], try_prefix: bool = False
    ) -> AdmitStats:
        handles: list[PhysicalHandle] = []
        try:
            for _ in range(self.region_chunks):
                handles.append(self.device.create_chunk())
        except DeviceOutOfMemory:
            for handle in handles:
                self.device.destroy_chunk(handle)
            raise
        self.regions[request_id] = handles
        self.tokens[request_id] = 0
        return AdmitStats(chunks_created=len(handles))

    def ensure_capacity(self, request_id: str, target_tokens: int) -> None:
        if target_tokens > self.config.max_seq_len:
            raise ExceedsMaxSeqLen(f"target {target_tokens} exceeds region")

    def mark_prefilled(self, request_id: str, prompt_len: int) -> None:
        self.tokens[request_id] = prompt_len

    def append_token(self, request_id: str, token: int) -> None:
        self.tokens[request_id] += 1

    def finish(self, request_id: str, record: bool = False) -> bool:
        self.release(request_id)
        return False

    def release(self, request_id: str) -> None:
        handles = self.regions.pop(request_id, None)
        if handles is None:
            return
        self.tokens.pop(request_id, None)
        for handle in handles:
            self.device.destroy_chunk(handle)

    def shutdown(self) -> dict:
        for request_id in sorted(self.regions):
            self.release(request_id)
        return {}

    def live_tokens(self) -> int:
        return sum(self.tokens.values())

    def fragmentation_ratio(self) -> float:
        return native_fragmentation_ratio(
            self.live_tokens(), len(self.regions), self.config.max_seq_len
        )

    def kv_stats(self) -> KvStats:
        chunk = self.config.chunk_size_bytes
        allocated = sum(len(h) for h in self.regions.values()) * chunk
        used = self.live_tokens() * self.config.bytes_per_token
        return KvStats(kv_allocated=allocated, kv_used=used, reserved=0)

    def extra_summary(self) -> dict:
        return {"region_chunks": self.region_chunks}


class PagedAllocator:
    """Block-table allocator over a pool claimed whole at startup.

    The pool takes every byte left after weights and activation headroom and
    never shrinks; requests draw fixed-size blocks from its free list.
    """

    name = "paged"

    def __init__(self, device: VirtualMemoryDevice, config: SimConfig) -> None:
        self.device = device
        self.config = config
        self.block_bytes = config.block_size_tokens * config.bytes_per_token
        self.pool_handles: list[PhysicalHandle] = []
        self.pool_bytes = 0
        self.num_blocks = 0
        self.free_blocks = 0
        self.blocks: dict[str, int] = {}
        self.tokens: dict[str, int] = {}

    def startup(self) -> None:
        headroom = self.config.activation_bytes_per_request * self.config.max_batch
        claimable = self.device.free_bytes - headroom
        n_chunks = max(claimable, 0) // self.config.chunk_size_bytes
        for _ in range(n_chunks):
            self.pool_handles.append(self.device.create_chunk())
        self.pool_bytes = n_chunks * self.config.chunk_size_bytes
        self.num_blocks = self.pool_bytes // self.block_bytes
        self.free_blocks = self.num_blocks

    def _blocks_for(self, tokens: int) -> int:
        return -(-tokens // self.config.block_size_tokens)

    def can_admit(self, prompt_len: int) -> bool:
        return self._blocks_for(max(prompt_len, 1)) <= self.free_blocks

    def admit(
        self, request_id: str, tokens: list[int], try_prefix: bool = False
    ) -> AdmitStats:
        need = self._blocks_for(max(len(tokens), 1))
        if need > self.free_blocks:
            raise DeviceOutOfMemory(f"pool has {self.free_blocks} blocks, need {need}")
        self.free_blocks -= need
        self.blocks[request_id] = need
        self.tokens[request_id] = 0
        return AdmitStats()

    def ensure_capacity(self, request_id: str, target_tokens: int) -> None:
        if target_tokens > self.config.max_seq_len:
            raise ExceedsMaxSeqLen(f"target {target_tokens} exceeds max_seq_len")
        need = self._blocks_for(target_tokens) - self.blocks[request_id]
        if need <= 0:
            return
        if need > self.free_blocks:
            raise DeviceOutOfMemory(f"pool has {self.free_blocks} blocks, need {need}")
        self.free_blocks -= need
        self.blocks[request_id] += need

    def mark_prefilled(self, request_id: str, prompt_len: int) -> None:
        self.tokens[request_id] = prompt_len

    def append_token(self, request_id: str, token: int) -> None:
        self.tokens[request_id] += 1

    def finish(self, request_id: str, record: bool = False) -> bool:
        self.release(request_id)
        return False

    def release(self, request_id: str) -> None:
        held = self.blocks.pop(request_id, None)
        if held is None:
            return
        self.tokens.pop(request_id, None)
        self.free_blocks += held

    def shutdown(self) -> dict:
        for request_id in sorted(self.blocks):
            self.release(request_id)
        for handle in self.pool_handles:
            self.device.destroy_chunk(handle)
        destroyed = len(self.pool_handles)
        self.pool_handles = []
        return {"pool_chunks_destroyed": destroyed}

    def kv_stats(self) -> KvStats:
        in_use = (self.num_blocks - self.free_blocks) * self.block_bytes
        used = sum(self.tokens.values()) * self.config.bytes_per_token
        return KvStats(
            kv_allocated=self.pool_bytes,
            kv_used=used,
            reserved=self.pool_bytes - in_use,
        )

    def extra_summary(self) -> dict:
        return {"pool_bytes": self.pool_bytes, "num_blocks": self.num_blocks}
