"""Allocation, mapping and prefix-cache operations over device plus pool.

This layer owns the policy that makes the design work:

* physical and virtual allocation are decoupled: acquiring a space never
  creates chunks, and p_alloc is the only path that can raise created bytes;
* deallocation is lazy: unmapping parks chunks in the free list and spaces in
  the available set, and only empty_memory or explicit frees hand memory back
  to the device;
* finished sequences can be pushed into the prefix tree, which pins their
  chunks (via the retained space) until the record is displaced or evicted.

Each public op appends a journal entry bracketing the device calls it issued,
so tests and the check command can audit which op created or destroyed what.
"""

from __future__ import annotations

from dataclasses import dataclass, field

from .config import SimConfig
from .device import DeviceOutOfMemory, PhysicalHandle, VirtualMemoryDevice
from .pool import (
    ChunkState,
    PoolStateError,
    SpaceState,
    TensorPool,
    VirtualSpace,
    VirtualTensor,
)


class CapacityExceeded(Exception):
    """A map request would run past the space's unmapped suffix."""


@dataclass(frozen=True)
class OpRecord:
    """Journal entry: one public op and its slice of the device call log."""

    name: str
    call_start: int
    call_end: int
    detail: dict


@dataclass
class ReclaimReport:
    chunks_destroyed: int = 0
    spaces_released: int = 0
    chunk_bytes: int = 0
    virtual_bytes: int = 0
    records_evicted: int = 0


@dataclass
class _Section:
    ops: "VTensorOps"
    name: str
    detail: dict = field(default_factory=dict)

    def __enter__(self) -> "_Section":
        self.start = len(self.ops.device.call_log)
        return self

    def __exit__(self, exc_type, exc, tb) -> None:
        self.ops.journal.append(
            OpRecord(self.name, self.start, len(self.ops.device.call_log), dict(self.detail))
        )


class VTensorOps:
    """The op surface used by the request-level scheduler and the fuzzers."""

    def __init__(self, device: VirtualMemoryDevice, pool: TensorPool, config: SimConfig) -> None:
        self.device = device
        self.pool = pool
        self.config = config
        self.journal: list[OpRecord] = []

    # -- allocation ----------------------------------------------------------

    def p_alloc(self, n: int) -> list[PhysicalHandle]:
        """Acquire n chunks: reuse free ones first, create the rest.

        All-or-nothing: if creation runs out of device memory, created chunks
        are destroyed, reused ones go back to the free list, and the device
        error propagates.
        """
        if n < 0:
            raise ValueError("cannot allocate a negative chunk count")
        with _Section(self, "p_alloc") as section:
            reused = self.pool.take_free(n)
            created: list[PhysicalHandle] = []
            try:
                while len(reused) + len(created) < n:
                    handle = self.device.create_chunk()
                    self.pool.add_entry(handle)
                    created.append(handle)
            except DeviceOutOfMemory:
                for handle in created:
                    self.pool.put_free(handle)
                    self.pool.drop_entry(handle)
                    self.device.destroy_chunk(handle)
                for handle in reused:
                    self.pool.put_free(handle)
                section.detail.update(requested=n, failed=True)
                raise
            section.detail.update(
                requested=n, reused=len(reused), created=len(created)
            )
            return reused + created

    def v_alloc(self, size_tokens: int) -> VirtualSpace:
        """Acquire a virtual space; recycles before reserving, never creates chunks."""
        if size_tokens != self.config.max_seq_len:
            raise ValueError(
                f"all spaces are sized to max_seq_len={self.config.max_seq_len}, "
                f"got {size_tokens}"
            )
        pages = self.config.pages_per_space
        with _Section(self, "v_alloc") as section:
            space = self.pool.acquire_space(pages)
            if space is not None:
                section.detail.update(reused=True, space=space.space_id)
                return space
            rng = self.device.reserve_address(pages * self.config.chunk_size_bytes)
            space = VirtualSpace(rng, state=SpaceState.IN_USE)
            self.pool.add_space(space)
            section.detail.update(reused=False, space=space.space_id)
            return space

    def map_chunks(self, space: VirtualSpace, handles: list[PhysicalHandle]) -> None:
        """Append chunks to the space's unmapped suffix, in order."""
        if space.mapped_pages + len(handles) > space.page_count:
            raise CapacityExceeded(
                f"{len(handles)} chunks do not fit: {space.mapped_pages} of "
                f"{space.page_count} pages already mapped"
            )
        with _Section(self, "map", {"space": space.space_id, "chunks": len(handles)}):
            for handle in handles:
                page = space.mapped_pages
                self.device.map_page(space.rng, page, handle)
                self.pool.incref(handle, space.space_id)
                space.page_table[page] = handle
                space.mapped_pages += 1

    # -- deallocation --------------------------------------------------------

    def unmap_space(self, space: VirtualSpace) -> None:
        """Unmap everything and return the space to the available set.

        Lazy: chunks whose last reference drops park in the free list; nothing
        is destroyed. No-op on already-available spaces (double release) and on
        recorded spaces, whose mappings belong to the prefix tree.
        """
        if space.state is SpaceState.AVAILABLE or space.recorded:
            self.journal.append(
                OpRecord(
                    "unmap_space",
                    len(self.device.call_log),
                    len(self.device.call_log),
                    {"space": space.space_id, "noop": True},
                )
            )
            return
        with _Section(self, "unmap_space", {"space": space.space_id}):
            self._unmap_tail(space, 0)
            self.pool.return_space(space)

    def _unmap_tail(self, space: VirtualSpace, keep_pages: int) -> None:
        for page in range(space.mapped_pages - 1, keep_pages - 1, -1):
            handle = space.page_table[page]
            assert handle is not None
            self.device.unmap_page(space.rng, page)
            self.pool.decref(handle, space.space_id)
            space.page_table[page] = None
        space.mapped_pages = min(space.mapped_pages, keep_pages)

    def v_free(self, space: VirtualSpace) -> None:
        """Release an available space's address range back to the device."""
        if space.state is not SpaceState.AVAILABLE:
            raise PoolStateError("v_free requires an available space")
        with _Section(self, "v_free", {"space": space.space_id}):
            self.pool.drop_space(space)
            self.device.release_address(space.rng)

    def p_free(self, handle: PhysicalHandle) -> None:
        """Destroy a free chunk, returning its bytes to the device."""
        entry = self.pool.entries.get(handle.id)
        if entry is None or entry.state is not ChunkState.FREE:
            raise PoolStateError("p_free requires a free chunk")
        with _Section(self, "p_free", {"chunk": handle.id}):
            self.pool.drop_entry(handle)
            self.device.destroy_chunk(handle)

    def empty_memory(self, evict_prefix: bool = False) -> ReclaimReport:
        """Destroy all free chunks and release all available spaces.

        Prefix-pinned chunks and recorded spaces are spared unless
        evict_prefix is set, which unpins every record first.
        """
        report = ReclaimReport()
        with _Section(self, "empty_memory", {"evict_prefix": evict_prefix}) as section:
            if evict_prefix:
                for node, vt in self.pool.tree.records():
                    self.pool.tree.remove(node)
                    self._unpin(vt)
                    report.records_evicted += 1
            for handle in self.pool.free_handles():
                self.pool.drop_entry(handle)
                self.device.destroy_chunk(handle)
                report.chunks_destroyed += 1
            for space in self.pool.available_spaces():
                self.pool.drop_space(space)
                self.device.release_address(space.rng)
                report.spaces_released += 1
                report.virtual_bytes += space.rng.length_bytes
            report.chunk_bytes = report.chunks_destroyed * self.config.chunk_size_bytes
            section.detail.update(
                chunks=report.chunks_destroyed, spaces=report.spaces_released
            )
        return report

    # -- prefix cache --------------------------------------------------------

    def r_push(self, vt: VirtualTensor) -> bool:
        """Record vt's chunk-aligned prefix in the tree, pinning its chunks.

        The tensor's space is retained by the record: pages past the aligned
        prefix are unmapped, the rest stay mapped so the chunks keep a live
        referrer. Returns False when less than one full chunk is recorded.
        """
        tpc = self.config.tokens_per_chunk
        aligned = vt.token_count // tpc * tpc
        if aligned < tpc or vt.space.recorded:
            return False
        key = tuple(vt.tokens[:aligned])
        with _Section(self, "r_push", {"space": vt.space.space_id, "tokens": aligned}):
            self._unmap_tail(vt.space, aligned // tpc)
            vt.tokens = list(key)
            vt.token_count = aligned
            self.pool.set_space_recorded(vt.space, True)
            vt.space.owner = None
            displaced = self.pool.tree.insert(key, vt)
            for old in displaced:
                self._unpin(old)
            self._enforce_record_cap(keep=vt)
        return True

    def r_prefix_match(self, tokens: list[int]) -> tuple[VirtualTensor, int] | None:
        """Longest recorded chunk-aligned prefix of tokens, if any."""
        return self.pool.tree.match(tuple(tokens))

    def _unpin(self, vt: VirtualTensor) -> None:
        space = vt.space
        self.pool.set_space_recorded(space, False)
        if space.state is SpaceState.IN_USE:
            self._unmap_tail(space, 0)
            self.pool.return_space(space)

    def _enforce_record_cap(self, keep: VirtualTensor) -> None:
        cap = self.config.prefix_cache_max_chunks
        if cap is None:
            return
        tpc = self.config.tokens_per_chunk

        def full_len(node) -> int:
            n = 0
            while node is not None:
                n += len(node.key)
                node = node.parent
            return n

        def total() -> int:
            return sum(full_len(n) for n, _ in self.pool.tree.records()) // tpc

        while total() > cap:
            victims = [
                (node.last_touch, node)
                for node, vt in self.pool.tree.records()
                if vt is not keep
            ]
            if not victims:
                return
            _, node = min(victims, key=lambda item: item[0])
            vt = node.record
            assert vt is not None
            self.pool.tree.remove(node)
            self._unpin(vt)

    # -- derived stats -------------------------------------------------------

    def pinned_chunk_ids(self) -> set[int]:
        """Chunks whose every referrer is a recorded space."""
        pinned: set[int] = set()
        for entry in self.pool.iter_entries():
            if entry.state is ChunkState.ACTIVE and entry.referrers:
                if all(
                    self.pool.spaces[sid].recorded for sid in entry.referrers
                ):
                    pinned.add(entry.handle.id)
        return pinned
