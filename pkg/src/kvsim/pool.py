"""Bookkeeping pools layered over the device: spaces, chunk entries, prefix tree.

The pool tracks three structures:

* a set of virtual spaces (reserved ranges plus page tables), recycled
  between requests so address reservation happens once per space;
* a set of physical entries, one per created chunk, carrying a reference
  count and the identities of the spaces that map the chunk;
* a radix tree over chunk-aligned token sequences, recording finished
  sequences whose KV chunks can be borrowed by later requests.

Nothing in this module talks to the device; callers move pages and chunks and
tell the pool what happened.
"""

from __future__ import annotations

import enum
import itertools
from dataclasses import dataclass, field

from .device import PhysicalHandle, VirtualRange


class UnknownReferrer(Exception):
    """A space tried to drop a reference it never held."""


class PoolStateError(Exception):
    """An entry or space was in the wrong state for the requested transition."""


class SpaceState(enum.Enum):
    AVAILABLE = "available"
    IN_USE = "in_use"


class ChunkState(enum.Enum):
    FREE = "free"
    ACTIVE = "active"


@dataclass
class VirtualSpace:
    """A reserved virtual range plus its page table.

    Mapped slots always form a prefix of the table: KV appends never leave
    holes. ``recorded`` marks spaces retained by a prefix-tree record; such
    spaces belong to the tree, not to any request.
    """

    rng: VirtualRange
    page_table: list[PhysicalHandle | None] = field(default_factory=list)
    mapped_pages: int = 0
    state: SpaceState = SpaceState.AVAILABLE
    owner: str | None = None
    recorded: bool = False

    def __post_init__(self) -> None:
        if not self.page_table:
            self.page_table = [None] * self.rng.page_count

    @property
    def space_id(self) -> int:
        return self.rng.base

    @property
    def page_count(self) -> int:
        return self.rng.page_count


@dataclass
class PhysicalEntry:
    """Pool-side record of one chunk: state, referrers, stored-token count."""

    handle: PhysicalHandle
    state: ChunkState = ChunkState.ACTIVE
    referrers: set[int] = field(default_factory=set)
    tokens_stored: int = 0
    cls: str = "request"  # accounting class: request | pinned | free

    @property
    def ref_count(self) -> int:
        return len(self.referrers)


@dataclass
class VirtualTensor:
    """A tensor view: one space, the token sequence it holds, progress counters.

    token_count is the number of leading tokens whose KV has actually been
    written; tokens may run ahead of it (prompt text known before prefill).
    """

    space: VirtualSpace
    tokens: list[int]
    token_count: int = 0
    capacity_tokens: int = 0
    owner: str | None = None


class RadixNode:
    """One edge-labelled node; key length is always a multiple of the chunk."""

    __slots__ = ("key", "children", "record", "last_touch", "parent")

    def __init__(self, key: tuple[int, ...], parent: "RadixNode | None" = None) -> None:
        self.key = key
        self.children: dict[tuple[int, ...], RadixNode] = {}
        self.record: VirtualTensor | None = None
        self.last_touch = 0
        self.parent = parent


class PrefixTree:
    """Radix tree over chunk-aligned token sequences.

    Children are keyed by their first chunk (tokens_per_chunk ids), so sibling
    keys never share a first chunk and descent is deterministic. Matching
    compares whole chunks; partial-chunk agreement does not count.
    """

    def __init__(self, tokens_per_chunk: int) -> None:
        if tokens_per_chunk < 1:
            raise ValueError("tokens_per_chunk must be >= 1")
        self.tpc = tokens_per_chunk
        self.root = RadixNode(())
        self._clock = itertools.count(1)

    def _first_chunk(self, key: tuple[int, ...]) -> tuple[int, ...]:
        return key[: self.tpc]

    def _chunk_match(self, a: tuple[int, ...], b: tuple[int, ...]) -> int:
        """Number of whole equal leading chunks, in tokens."""
        limit = min(len(a), len(b)) // self.tpc * self.tpc
        matched = 0
        for i in range(0, limit, self.tpc):
            if a[i : i + self.tpc] != b[i : i + self.tpc]:
                break
            matched = i + self.tpc
        return matched

    def insert(self, key: tuple[int, ...], vt: VirtualTensor) -> list[VirtualTensor]:
        """Insert a record; returns records displaced by last-writer-wins."""
        if len(key) == 0 or len(key) % self.tpc != 0:
            raise ValueError("record key must be a nonzero multiple of the chunk")
        node = self.root
        rest = key
        displaced: list[VirtualTensor] = []
        while True:
            child = node.children.get(self._first_chunk(rest))
            if child is None:
                leaf = RadixNode(rest, parent=node)
                leaf.record = vt
                leaf.last_touch = next(self._clock)
                node.children[self._first_chunk(rest)] = leaf
                return displaced
            matched = self._chunk_match(child.key, rest)
            if matched < len(child.key):
                # Diverged inside the edge: split at the last shared chunk.
                upper = RadixNode(child.key[:matched], parent=node)
                node.children[self._first_chunk(rest)] = upper
                child.key = child.key[matched:]
                child.parent = upper
                upper.children[self._first_chunk(child.key)] = child
                node = upper
            else:
                node = child
            rest = rest[matched:]
            if not rest:
                if node.record is not None and node.record is not vt:
                    displaced.append(node.record)
                node.record = vt
                node.last_touch = next(self._clock)
                return displaced

    def match(self, tokens: tuple[int, ...]) -> tuple[VirtualTensor, int] | None:
        """Longest chunk-aligned recorded prefix of tokens, or None.

        Returns a record whose sequence shares the matched prefix with the
        query; when the walk stops between records, the representative is the
        shallowest deterministic record below the stop point.
        """
        node = self.root
        matched = 0
        while True:
            rest = tokens[matched:]
            child = node.children.get(self._first_chunk(rest))
            if child is None:
                break
            m = self._chunk_match(child.key, rest)
            matched += m
            if m < len(child.key):
                node = child
                break
            node = child
        if matched == 0 or node is self.root:
            return None
        rep = self._representative(node)
        if rep is None:
            return None
        rep_node, vt = rep
        rep_node.last_touch = next(self._clock)
        return vt, matched

    def _representative(self, node: RadixNode) -> tuple[RadixNode, VirtualTensor] | None:
        while node.record is None:
            if not node.children:
                return None
            node = node.children[min(node.children)]
        return node, node.record

    def remove(self, node: RadixNode) -> None:
        """Drop a node's record, pruning structural nodes left childless."""
        node.record = None
        while (
            node is not self.root
            and node.record is None
            and not node.children
            and node.parent is not None
        ):
            parent = node.parent
            del parent.children[self._first_chunk(node.key)]
            node = parent

    def records(self) -> list[tuple[RadixNode, VirtualTensor]]:
        out: list[tuple[RadixNode, VirtualTensor]] = []
        stack = [self.root]
        while stack:
            node = stack.pop()
            if node.record is not None:
                out.append((node, node.record))
            for key in sorted(node.children):
                stack.append(node.children[key])
        return out

    def recorded_sequences(self) -> list[tuple[int, ...]]:
        out: list[tuple[int, ...]] = []

        def walk(node: RadixNode, prefix: tuple[int, ...]) -> None:
            full = prefix + node.key
            if node.record is not None:
                out.append(full)
            for key in sorted(node.children):
                walk(node.children[key], full)

        walk(self.root, ())
        return out


class TensorPool:
    """The two ordered sets (spaces, chunk entries) plus the prefix tree."""

    def __init__(self, tokens_per_chunk: int) -> None:
        self.tokens_per_chunk = tokens_per_chunk
        self.spaces: dict[int, VirtualSpace] = {}
        self.entries: dict[int, PhysicalEntry] = {}
        self._available: set[int] = set()
        self._free: set[int] = set()
        self.tree = PrefixTree(tokens_per_chunk)
        # Incremental chunk-class accounting; kept in sync by every mutator so
        # per-step snapshots cost O(1) instead of a full scan.
        self.n_request = 0
        self.n_pinned = 0
        self.n_free = 0
        self.used_tokens = 0

    # -- class accounting ----------------------------------------------------

    def _classify(self, entry: PhysicalEntry) -> str:
        if entry.state is ChunkState.FREE:
            return "free"
        if entry.referrers and all(self._referrer_recorded(sid) for sid in entry.referrers):
            return "pinned"
        return "request"

    def _referrer_recorded(self, space_id: int) -> bool:
        space = self.spaces.get(space_id)
        return space is not None and space.recorded

    def _apply_class(self, entry: PhysicalEntry, new_cls: str) -> None:
        if entry.cls == new_cls:
            return
        if entry.cls == "free":
            self.n_free -= 1
        elif entry.cls == "pinned":
            self.n_pinned -= 1
        else:
            self.n_request -= 1
            self.used_tokens -= entry.tokens_stored
        if new_cls == "free":
            self.n_free += 1
        elif new_cls == "pinned":
            self.n_pinned += 1
        else:
            self.n_request += 1
            self.used_tokens += entry.tokens_stored
        entry.cls = new_cls

    def _reclass(self, entry: PhysicalEntry) -> None:
        self._apply_class(entry, self._classify(entry))

    def set_space_recorded(self, space: VirtualSpace, recorded: bool) -> None:
        """Flip the record flag and reclassify every chunk the space maps."""
        space.recorded = recorded
        for page in range(space.mapped_pages):
            handle = space.page_table[page]
            if handle is not None:
                self._reclass(self.entries[handle.id])

    # -- virtual spaces ------------------------------------------------------

    def add_space(self, space: VirtualSpace) -> None:
        self.spaces[space.space_id] = space
        if space.state is SpaceState.AVAILABLE:
            self._available.add(space.space_id)

    def acquire_space(self, min_pages: int) -> VirtualSpace | None:
        """Lowest-base available space with at least min_pages, marked in use."""
        for sid in sorted(self._available):
            space = self.spaces[sid]
            if space.page_count >= min_pages:
                self._available.discard(sid)
                space.state = SpaceState.IN_USE
                return space
        return None

    def return_space(self, space: VirtualSpace) -> None:
        if space.mapped_pages != 0:
            raise PoolStateError("cannot return a space with mapped pages")
        space.state = SpaceState.AVAILABLE
        space.owner = None
        space.recorded = False
        self._available.add(space.space_id)

    def drop_space(self, space: VirtualSpace) -> None:
        if space.state is not SpaceState.AVAILABLE:
            raise PoolStateError("only available spaces can be dropped")
        self._available.discard(space.space_id)
        del self.spaces[space.space_id]

    def available_spaces(self) -> list[VirtualSpace]:
        return [self.spaces[sid] for sid in sorted(self._available)]

    def iter_spaces(self) -> list[VirtualSpace]:
        return [self.spaces[sid] for sid in sorted(self.spaces)]

    # -- physical entries ----------------------------------------------------

    def add_entry(self, handle: PhysicalHandle) -> PhysicalEntry:
        entry = PhysicalEntry(handle)
        self.entries[handle.id] = entry
        self.n_request += 1
        return entry

    def take_free(self, n: int) -> list[PhysicalHandle]:
        """Up to n free chunks, lowest handle id first, marked active."""
        taken: list[PhysicalHandle] = []
        for hid in sorted(self._free):
            if len(taken) == n:
                break
            entry = self.entries[hid]
            self._free.discard(hid)
            entry.state = ChunkState.ACTIVE
            self._reclass(entry)
            taken.append(entry.handle)
        return taken

    def put_free(self, handle: PhysicalHandle) -> None:
        entry = self.entries[handle.id]
        if entry.referrers:
            raise PoolStateError("cannot free a referenced chunk")
        entry.state = ChunkState.FREE
        self._reclass(entry)
        entry.tokens_stored = 0
        self._free.add(handle.id)

    def incref(self, handle: PhysicalHandle, space_id: int) -> None:
        entry = self.entries[handle.id]
        if space_id in entry.referrers:
            raise PoolStateError(
                f"space {space_id} already references chunk {handle.id}"
            )
        entry.referrers.add(space_id)
        entry.state = ChunkState.ACTIVE
        self._free.discard(handle.id)
        self._reclass(entry)

    def decref(self, handle: PhysicalHandle, space_id: int) -> None:
        entry = self.entries[handle.id]
        if space_id not in entry.referrers:
            raise UnknownReferrer(
                f"space {space_id} does not reference chunk {handle.id}"
            )
        entry.referrers.discard(space_id)
        if not entry.referrers:
            # Lazy deallocation: the chunk parks in the free list, not destroyed.
            entry.state = ChunkState.FREE
            self._reclass(entry)
            entry.tokens_stored = 0
            self._free.add(handle.id)
        else:
            self._reclass(entry)

    def note_stored(self, handle: PhysicalHandle, tokens: int) -> None:
        entry = self.entries[handle.id]
        if tokens > entry.tokens_stored:
            if entry.cls == "request":
                self.used_tokens += tokens - entry.tokens_stored
            entry.tokens_stored = tokens

    def drop_entry(self, handle: PhysicalHandle) -> None:
        entry = self.entries[handle.id]
        if entry.state is not ChunkState.FREE:
            raise PoolStateError("only free chunks can be dropped")
        self._free.discard(handle.id)
        self.n_free -= 1
        del self.entries[handle.id]

    def free_handles(self) -> list[PhysicalHandle]:
        return [self.entries[hid].handle for hid in sorted(self._free)]

    def free_count(self) -> int:
        return len(self._free)

    def iter_entries(self) -> list[PhysicalEntry]:
        return [self.entries[hid] for hid in sorted(self.entries)]
