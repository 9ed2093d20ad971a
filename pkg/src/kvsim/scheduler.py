"""Request-level memory actions: create, extend, prefix record/match, release.

One instance manages the tensors of all in-flight requests. Capacity grows in
whole chunks and only forward (appends), shrinkage happens only through
release or record, and a prefix-cache hit maps the donor's chunk handles into
the new request's space instead of copying anything.
"""

from __future__ import annotations

from dataclasses import dataclass

from .config import SimConfig
from .device import DeviceOutOfMemory
from .ops import VTensorOps
from .pool import VirtualTensor


class ExceedsMaxSeqLen(Exception):
    pass


@dataclass
class AdmitStats:
    """How a request's memory came to be: sharing and chunk acquisition."""

    shared_tokens: int = 0
    chunks_reused: int = 0
    chunks_created: int = 0
    donor_space: int | None = None
    identity_ok: bool = True

    @property
    def chunks_acquired(self) -> int:
        return self.chunks_reused + self.chunks_created


@dataclass
class RequestMem:
    request_id: str
    vt: VirtualTensor
    shared_prefix_tokens: int = 0

    @property
    def provisioned_tokens(self) -> int:
        return self.vt.space.mapped_pages * self._tpc

    _tpc: int = 32


class VTensorScheduler:
    def __init__(self, ops: VTensorOps) -> None:
        self.ops = ops
        self.config: SimConfig = ops.config
        self.mem: dict[str, RequestMem] = {}

    def _journal_len(self) -> int:
        return len(self.ops.journal)

    def _alloc_counts(self, since: int) -> tuple[int, int]:
        reused = created = 0
        for record in self.ops.journal[since:]:
            if record.name == "p_alloc" and not record.detail.get("failed"):
                reused += record.detail.get("reused", 0)
                created += record.detail.get("created", 0)
        return reused, created

    # -- create / match ------------------------------------------------------

    def create(self, request_id: str, tokens: list[int]) -> tuple[RequestMem, AdmitStats]:
        """Fresh tensor covering max(prompt, initial_alloc_tokens) tokens."""
        if request_id in self.mem:
            raise ValueError(f"request {request_id} already has memory")
        if len(tokens) > self.config.max_seq_len:
            raise ExceedsMaxSeqLen(
                f"prompt of {len(tokens)} tokens exceeds max_seq_len "
                f"{self.config.max_seq_len}"
            )
        tpc = self.config.tokens_per_chunk
        target = max(len(tokens), self.config.initial_alloc_tokens)
        chunks = -(-target // tpc)
        mark = self._journal_len()
        space = self.ops.v_alloc(self.config.max_seq_len)
        try:
            handles = self.ops.p_alloc(chunks)
        except DeviceOutOfMemory:
            self.ops.unmap_space(space)
            raise
        self.ops.map_chunks(space, handles)
        space.owner = request_id
        vt = VirtualTensor(
            space=space,
            tokens=list(tokens),
            token_count=0,
            capacity_tokens=space.page_count * tpc,
            owner=request_id,
        )
        rm = RequestMem(request_id, vt)
        rm._tpc = tpc
        self.mem[request_id] = rm
        reused, created = self._alloc_counts(mark)
        return rm, AdmitStats(chunks_reused=reused, chunks_created=created)

    def prefix_match(
        self, request_id: str, tokens: list[int]
    ) -> tuple[RequestMem, AdmitStats] | None:
        """Borrow a recorded prefix if one matches; None means use create.

        On a hit the donor's leading chunks are mapped (same handles, no
        copies) into a fresh space, then the rest of the prompt is provisioned
        as in create.
        """
        if request_id in self.mem:
            raise ValueError(f"request {request_id} already has memory")
        if len(tokens) > self.config.max_seq_len:
            raise ExceedsMaxSeqLen(
                f"prompt of {len(tokens)} tokens exceeds max_seq_len "
                f"{self.config.max_seq_len}"
            )
        hit = self.ops.r_prefix_match(tokens)
        if hit is None:
            return None
        donor, matched = hit
        tpc = self.config.tokens_per_chunk
        shared_pages = matched // tpc
        mark = self._journal_len()
        space = self.ops.v_alloc(self.config.max_seq_len)
        shared_handles = [donor.space.page_table[p] for p in range(shared_pages)]
        try:
            self.ops.map_chunks(space, shared_handles)
            deficit = -(-len(tokens) // tpc) - shared_pages
            if deficit > 0:
                handles = self.ops.p_alloc(deficit)
                self.ops.map_chunks(space, handles)
        except DeviceOutOfMemory:
            self.ops.unmap_space(space)
            raise
        space.owner = request_id
        vt = VirtualTensor(
            space=space,
            tokens=list(tokens),
            token_count=0,
            capacity_tokens=space.page_count * tpc,
            owner=request_id,
        )
        rm = RequestMem(request_id, vt, shared_prefix_tokens=matched)
        rm._tpc = tpc
        self.mem[request_id] = rm
        # Shared KV is already materialized; progress starts at the boundary.
        self._advance_stored(rm, matched)
        vt.token_count = matched
        reused, created = self._alloc_counts(mark)
        identity = all(
            space.page_table[p] is donor.space.page_table[p] for p in range(shared_pages)
        )
        return rm, AdmitStats(
            shared_tokens=matched,
            chunks_reused=reused,
            chunks_created=created,
            donor_space=donor.space.space_id,
            identity_ok=identity,
        )

    # -- growth --------------------------------------------------------------

    def extend(self, request_id: str, target_tokens: int) -> int:
        """Grow capacity to cover target_tokens; returns chunks added."""
        rm = self.mem[request_id]
        if target_tokens > self.config.max_seq_len:
            raise ExceedsMaxSeqLen(
                f"extend to {target_tokens} exceeds max_seq_len "
                f"{self.config.max_seq_len}"
            )
        tpc = self.config.tokens_per_chunk
        deficit = -(-target_tokens // tpc) - rm.vt.space.mapped_pages
        if deficit <= 0:
            return 0
        handles = self.ops.p_alloc(deficit)
        self.ops.map_chunks(rm.vt.space, handles)
        return deficit

    def mark_prefilled(self, request_id: str) -> None:
        """Prompt KV is now written; advance progress to the full prompt."""
        rm = self.mem[request_id]
        count = len(rm.vt.tokens)
        self._advance_stored(rm, count)
        rm.vt.token_count = count

    def append_token(self, request_id: str, token: int) -> None:
        rm = self.mem[request_id]
        rm.vt.tokens.append(token)
        rm.vt.token_count += 1
        self._advance_stored(rm, rm.vt.token_count)

    def _advance_stored(self, rm: RequestMem, token_count: int) -> None:
        tpc = self.config.tokens_per_chunk
        if token_count <= 0:
            return
        last_page = (token_count - 1) // tpc
        first_page = max(0, (rm.vt.token_count - 1) // tpc) if rm.vt.token_count else 0
        for page in range(first_page, last_page + 1):
            handle = rm.vt.space.page_table[page]
            if handle is None:
                raise RuntimeError("token progress ran past mapped capacity")
            self.ops.pool.note_stored(handle, min(tpc, token_count - page * tpc))

    # -- teardown ------------------------------------------------------------

    def prefix_record(self, request_id: str) -> bool:
        """Record the finished sequence for reuse; consumes the request's memory.

        Returns False when less than one chunk is recordable, in which case
        the memory is still held and the caller should release instead.
        """
        rm = self.mem.get(request_id)
        if rm is None:
            return False
        if not self.ops.r_push(rm.vt):
            return False
        del self.mem[request_id]
        return True

    def release(self, request_id: str) -> None:
        """Unmap and recycle; lazy, so nothing is destroyed. Idempotent."""
        rm = self.mem.pop(request_id, None)
        if rm is None:
            return
        self.ops.unmap_space(rm.vt.space)

    def release_all(self) -> None:
        for request_id in sorted(self.mem):
            self.release(request_id)

    # -- queries -------------------------------------------------------------

    def provisioned_tokens(self, request_id: str) -> int:
        return self.mem[request_id].provisioned_tokens

    def lookahead_target(self, token_count: int) -> int:
        return token_count + self.config.lookahead_chunks * self.config.tokens_per_chunk
