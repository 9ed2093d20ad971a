"""Simulated GPU device exposing low-level virtual memory primitives.

The device models the driver-level split between virtual address space and
physical memory: reserving an address range costs nothing physical, creating a
chunk is the only operation that consumes device bytes, and mapping stitches
the two together at page granularity. Page size equals chunk size, so every
mapping is one page slot to one whole chunk.

Every primitive call is appended to an instrumented call log so higher layers
can prove properties like "this path never created physical memory".
"""

from __future__ import annotations

from dataclasses import dataclass, field


class DeviceError(Exception):
    """Base class for simulated driver failures."""


class InvalidSize(DeviceError):
    pass


class DeviceOutOfMemory(DeviceError):
    pass


class PageAlreadyMapped(DeviceError):
    pass


class PageNotMapped(DeviceError):
    pass


class StaleHandle(DeviceError):
    pass


class IndexOutOfRange(DeviceError):
    pass


class RangeStillMapped(DeviceError):
    pass


class UnknownRange(DeviceError):
    pass


class ChunkStillMapped(DeviceError):
    pass


@dataclass(frozen=True)
class VirtualRange:
    """A contiguous reserved span of virtual address space."""

    base: int
    length_bytes: int
    page_count: int


@dataclass
class PhysicalHandle:
    """Opaque handle to one physical chunk."""

    id: int
    map_count: int = 0


@dataclass(frozen=True)
class DeviceStats:
    created_bytes: int
    reserved_virtual_bytes: int
    mapped_page_count: int
    free_bytes: int


@dataclass(frozen=True)
class DeviceCall:
    """One entry of the instrumented call log."""

    seq: int
    op: str
    detail: str
    created_bytes_after: int


@dataclass
class DeviceConfig:
    capacity_bytes: int
    chunk_size_bytes: int
    page_size_bytes: int = 0
    weights_bytes: int = 0
    activation_bytes_per_request: int = 0

    def __post_init__(self) -> None:
        if self.page_size_bytes == 0:
            self.page_size_bytes = self.chunk_size_bytes
        if self.page_size_bytes != self.chunk_size_bytes:
            raise ValueError("page size must equal chunk size")
        if self.capacity_bytes <= 0 or self.chunk_size_bytes <= 0:
            raise ValueError("capacity and chunk size must be positive")
        if self.weights_bytes < 0 or self.weights_bytes > self.capacity_bytes:
            raise ValueError("weights must fit in capacity")


@dataclass
class _RangeState:
    rng: VirtualRange
    mappings: dict[int, int] = field(default_factory=dict)  # page index -> handle id


class VirtualMemoryDevice:
    """In-process stand-in for the GPU driver's VMM API.

    Address bases and handle ids are monotone ordinals and are never reused,
    so use-after-free is always detectable. Virtual address space is
    unbounded; only created chunks, model weights and per-request activation
    scratch count against capacity_bytes.
    """

    def __init__(self, config: DeviceConfig) -> None:
        self.config = config
        self._ranges: dict[int, _RangeState] = {}
        self._handles: dict[int, PhysicalHandle] = {}
        self._dead_handles: set[int] = set()
        self._dead_bases: set[int] = set()
        self._next_base = 0
        self._next_handle = 0
        self._mapped_pages = 0
        self._active_requests = 0
        self.call_log: list[DeviceCall] = []

    # -- accounting ----------------------------------------------------------

    @property
    def created_bytes(self) -> int:
        return len(self._handles) * self.config.chunk_size_bytes

    @property
    def reserved_virtual_bytes(self) -> int:
        return sum(st.rng.length_bytes for st in self._ranges.values())

    @property
    def activation_bytes(self) -> int:
        return self._active_requests * self.config.activation_bytes_per_request

    @property
    def free_bytes(self) -> int:
        return (
            self.config.capacity_bytes
            - self.config.weights_bytes
            - self.activation_bytes
            - self.created_bytes
        )

    @property
    def active_requests(self) -> int:
        return self._active_requests

    def set_active_requests(self, n: int) -> None:
        if n < 0:
            raise ValueError("active request count cannot be negative")
        delta = (n - self._active_requests) * self.config.activation_bytes_per_request
        if delta > self.free_bytes:
            raise DeviceOutOfMemory(
                f"activation scratch for {n} requests exceeds free memory"
            )
        self._active_requests = n

    def stats(self) -> DeviceStats:
        return DeviceStats(
            created_bytes=self.created_bytes,
            reserved_virtual_bytes=self.reserved_virtual_bytes,
            mapped_page_count=self._mapped_pages,
            free_bytes=self.free_bytes,
        )

    def _log(self, op: str, detail: str) -> None:
        self.call_log.append(
            DeviceCall(len(self.call_log), op, detail, self.created_bytes)
        )

    # -- primitives ----------------------------------------------------------

    def reserve_address(self, size_bytes: int) -> VirtualRange:
        """Reserve a contiguous virtual range. Costs no physical memory."""
        page = self.config.page_size_bytes
        if size_bytes <= 0 or size_bytes % page != 0:
            raise InvalidSize(
                f"reserve size must be a positive multiple of {page}, got {size_bytes}"
            )
        pages = size_bytes // page
        rng = VirtualRange(base=self._next_base, length_bytes=size_bytes, page_count=pages)
        # Advance by page_count so distinct ranges occupy disjoint ordinal intervals.
        self._next_base += pages
        self._ranges[rng.base] = _RangeState(rng)
        self._log("reserve_address", f"base={rng.base} pages={pages}")
        return rng

    def create_chunk(self) -> PhysicalHandle:
        """Create one physical chunk. The only call that consumes device bytes."""
        if self.free_bytes < self.config.chunk_size_bytes:
            raise DeviceOutOfMemory(
                f"need {self.config.chunk_size_bytes} bytes, {self.free_bytes} free"
            )
        handle = PhysicalHandle(id=self._next_handle)
        self._next_handle += 1
        self._handles[handle.id] = handle
        self._log("create_chunk", f"handle={handle.id}")
        return handle

    def map_page(self, rng: VirtualRange, page_index: int, handle: PhysicalHandle) -> None:
        state = self._ranges.get(rng.base)
        if state is None:
            raise UnknownRange(f"range base {rng.base} is not reserved")
        if not 0 <= page_index < rng.page_count:
            raise IndexOutOfRange(
                f"page {page_index} outside range of {rng.page_count} pages"
            )
        if handle.id not in self._handles:
            raise StaleHandle(f"handle {handle.id} was destroyed or never created")
        if page_index in state.mappings:
            raise PageAlreadyMapped(f"page {page_index} of base {rng.base} is mapped")
        state.mappings[page_index] = handle.id
        handle.map_count += 1
        self._mapped_pages += 1
        self._log("map_page", f"base={rng.base} page={page_index} handle={handle.id}")

    def unmap_page(self, rng: VirtualRange, page_index: int) -> PhysicalHandle:
        state = self._ranges.get(rng.base)
        if state is None:
            raise UnknownRange(f"range base {rng.base} is not reserved")
        if page_index not in state.mappings:
            raise PageNotMapped(f"page {page_index} of base {rng.base} is not mapped")
        handle = self._handles[state.mappings.pop(page_index)]
        handle.map_count -= 1
        self._mapped_pages -= 1
        self._log("unmap_page", f"base={rng.base} page={page_index} handle={handle.id}")
        return handle

    def release_address(self, rng: VirtualRange) -> None:
        state = self._ranges.get(rng.base)
        if state is None:
            raise UnknownRange(f"range base {rng.base} is not reserved")
        if state.mappings:
            raise RangeStillMapped(
                f"range base {rng.base} still has {len(state.mappings)} mapped pages"
            )
        del self._ranges[rng.base]
        self._dead_bases.add(rng.base)
        self._log("release_address", f"base={rng.base}")

    def destroy_chunk(self, handle: PhysicalHandle) -> None:
        if handle.id not in self._handles:
            raise StaleHandle(f"handle {handle.id} was destroyed or never created")
        if handle.map_count != 0:
            raise ChunkStillMapped(
                f"handle {handle.id} still mapped {handle.map_count} times"
            )
        del self._handles[handle.id]
        self._dead_handles.add(handle.id)
        self._log("destroy_chunk", f"handle={handle.id}")

    # -- inspection ----------------------------------------------------------

    def resolve(self, rng: VirtualRange, page_index: int) -> PhysicalHandle:
        """Translate one page of a range to the chunk behind it."""
        state = self._ranges.get(rng.base)
        if state is None:
            raise UnknownRange(f"range base {rng.base} is not reserved")
        if not 0 <= page_index < rng.page_count:
            raise IndexOutOfRange(
                f"page {page_index} outside range of {rng.page_count} pages"
            )
        if page_index not in state.mappings:
            raise PageNotMapped(f"page {page_index} of base {rng.base} is not mapped")
        return self._handles[state.mappings[page_index]]

    def live_handles(self) -> list[PhysicalHandle]:
        return [self._handles[i] for i in sorted(self._handles)]

    def live_ranges(self) -> list[VirtualRange]:
        return [self._ranges[b].rng for b in sorted(self._ranges)]

    def mapped_pages_of(self, rng: VirtualRange) -> dict[int, int]:
        state = self._ranges.get(rng.base)
        if state is None:
            raise UnknownRange(f"range base {rng.base} is not reserved")
        return dict(state.mappings)
