"""Compound allocation ops: reuse-first p_alloc, lazy unmap, record pinning."""

import pytest

from kvsim import (
    CapacityExceeded,
    ChunkState,
    DeviceOutOfMemory,
    PoolStateError,
    SpaceState,
    VirtualTensor,
)
from kvsim.verify import check_all, check_journal, tiny_config


def chunks_of(device):
    return device.created_bytes // device.config.chunk_size_bytes


def make_stack(cfg):
    from kvsim import DeviceConfig, TensorPool, VTensorOps, VirtualMemoryDevice

    device = VirtualMemoryDevice(
        DeviceConfig(
            capacity_bytes=cfg.capacity_bytes, chunk_size_bytes=cfg.chunk_size_bytes
        )
    )
    pool = TensorPool(cfg.tokens_per_chunk)
    return device, pool, VTensorOps(device, pool, cfg)


def mapped_tensor(ops, cfg, tokens):
    """Space sized max_seq_len, mapped just enough for the given tokens."""
    space = ops.v_alloc(cfg.max_seq_len)
    need = -(-len(tokens) // cfg.tokens_per_chunk)
    ops.map_chunks(space, ops.p_alloc(need))
    vt = VirtualTensor(
        space=space,
        tokens=list(tokens),
        token_count=len(tokens),
        capacity_tokens=need * cfg.tokens_per_chunk,
    )
    for page in range(need):
        stored = min(cfg.tokens_per_chunk, len(tokens) - page * cfg.tokens_per_chunk)
        ops.pool.note_stored(space.page_table[page], stored)
    return vt


def test_p_alloc_creates_then_reuses(stack):
    device, pool, ops = stack
    first = ops.p_alloc(3)
    assert chunks_of(device) == 3
    for h in first:
        pool.incref(h, 1)
    for h in first:
        pool.decref(h, 1)  # all three park in the free list
    second = ops.p_alloc(2)
    assert chunks_of(device) == 3, "free chunks satisfy the request, no creation"
    assert {h.id for h in second} <= {h.id for h in first}
    third = ops.p_alloc(2)
    assert chunks_of(device) == 4, "one reused, one created"
    assert len(third) == 2


def test_p_alloc_rollback_is_all_or_nothing():
    cfg = tiny_config(capacity_bytes=8 * 128)  # 8 chunks total
    device, pool, ops = make_stack(cfg)
    space = ops.v_alloc(cfg.max_seq_len)
    ops.map_chunks(space, ops.p_alloc(6))
    scratch = ops.v_alloc(cfg.max_seq_len)
    ops.map_chunks(scratch, ops.p_alloc(1))
    ops.unmap_space(scratch)  # one free chunk; one chunk of device headroom
    before = chunks_of(device)
    free_before = [h.id for h in pool.free_handles()]
    with pytest.raises(DeviceOutOfMemory):
        ops.p_alloc(3)  # 1 reusable + 1 creatable, third must fail
    assert chunks_of(device) == before
    assert [h.id for h in pool.free_handles()] == free_before
    # The pool is still coherent after the unwind.
    assert check_all(ops) == []


def test_v_alloc_fixed_size_contract(cfg, stack):
    _, _, ops = stack
    with pytest.raises(ValueError):
        ops.v_alloc(cfg.max_seq_len - 1)
    space = ops.v_alloc(cfg.max_seq_len)
    assert space.page_count == cfg.max_seq_len // cfg.tokens_per_chunk


def test_v_alloc_recycles_before_reserving(cfg, stack):
    device, _, ops = stack
    a = ops.v_alloc(cfg.max_seq_len)
    ops.unmap_space(a)
    b = ops.v_alloc(cfg.max_seq_len)
    assert b is a, "released space is recycled"
    assert len(device.live_ranges()) == 1
    c = ops.v_alloc(cfg.max_seq_len)
    assert c is not a
    assert len(device.live_ranges()) == 2


def test_v_alloc_never_creates_chunks(cfg, stack):
    device, _, ops = stack
    for _ in range(5):
        ops.v_alloc(cfg.max_seq_len)
    assert device.created_bytes == 0
    assert check_journal(ops) == []


def test_map_chunks_appends_suffix_only(cfg, stack):
    _, _, ops = stack
    space = ops.v_alloc(cfg.max_seq_len)
    ops.map_chunks(space, ops.p_alloc(2))
    assert space.mapped_pages == 2
    assert [h is not None for h in space.page_table[:2]] == [True, True]
    too_many = ops.p_alloc(space.page_count - 1)
    with pytest.raises(CapacityExceeded):
        ops.map_chunks(space, too_many)


def test_unmap_space_is_lazy(cfg, stack):
    device, pool, ops = stack
    space = ops.v_alloc(cfg.max_seq_len)
    handles = ops.p_alloc(3)
    ops.map_chunks(space, handles)
    created = chunks_of(device)
    ops.unmap_space(space)
    assert chunks_of(device) == created, "nothing destroyed on unmap"
    assert pool.free_count() == 3
    assert space.state is SpaceState.AVAILABLE
    assert space.mapped_pages == 0
    for h in handles:
        assert pool.entries[h.id].state is ChunkState.FREE
    # Double release is a recorded no-op.
    journal_len = len(ops.journal)
    ops.unmap_space(space)
    assert ops.journal[journal_len].detail.get("noop") is True
    assert check_journal(ops) == []


def test_v_free_and_p_free_preconditions(cfg, stack):
    device, pool, ops = stack
    space = ops.v_alloc(cfg.max_seq_len)
    handle = ops.p_alloc(1)[0]
    ops.map_chunks(space, [handle])
    with pytest.raises(PoolStateError):
        ops.v_free(space)  # still in use
    with pytest.raises(PoolStateError):
        ops.p_free(handle)  # still referenced
    ops.unmap_space(space)
    ops.p_free(handle)
    assert chunks_of(device) == 0
    ops.v_free(space)
    assert device.live_ranges() == []


def test_empty_memory_reclaims_free_and_available(cfg, stack):
    device, pool, ops = stack
    keep_space = ops.v_alloc(cfg.max_seq_len)
    keep = ops.p_alloc(2)
    ops.map_chunks(keep_space, keep)
    drop_space = ops.v_alloc(cfg.max_seq_len)
    ops.map_chunks(drop_space, ops.p_alloc(3))
    ops.unmap_space(drop_space)

    report = ops.empty_memory()
    assert report.chunks_destroyed == 3
    assert report.spaces_released == 1
    assert report.chunk_bytes == 3 * cfg.chunk_size_bytes
    assert chunks_of(device) == 2, "in-use chunks survive"
    assert pool.free_count() == 0
    assert len(device.live_ranges()) == 1
    assert check_all(ops) == []


def test_empty_memory_spares_records_by_default(cfg, stack):
    device, pool, ops = stack
    vt = mapped_tensor(ops, cfg, [1, 2, 3, 4, 5, 6, 7, 8])
    assert ops.r_push(vt)
    report = ops.empty_memory()
    assert report.chunks_destroyed == 0
    assert report.records_evicted == 0
    assert chunks_of(device) == 2
    assert ops.r_prefix_match([1, 2, 3, 4]) is not None

    report = ops.empty_memory(evict_prefix=True)
    assert report.records_evicted == 1
    assert chunks_of(device) == 0
    assert ops.r_prefix_match([1, 2, 3, 4]) is None
    assert check_all(ops) == []


def test_r_push_trims_tail_and_pins(cfg, stack):
    device, pool, ops = stack
    # Ten tokens: two full chunks plus a two-token tail.
    vt = mapped_tensor(ops, cfg, [1, 2, 3, 4, 5, 6, 7, 8, 9, 10])
    assert vt.space.mapped_pages == 3
    assert ops.r_push(vt)
    assert vt.token_count == 8
    assert vt.tokens == [1, 2, 3, 4, 5, 6, 7, 8]
    assert vt.space.mapped_pages == 2, "tail page unmapped"
    assert vt.space.recorded
    assert pool.free_count() == 1
    assert pool.n_pinned == 2
    got = ops.r_prefix_match([1, 2, 3, 4, 5, 6, 7, 8, 11, 12])
    assert got is not None and got[1] == 8
    assert check_all(ops) == []


def test_r_push_rejects_sub_chunk_and_double_push(cfg, stack):
    _, _, ops = stack
    short = mapped_tensor(ops, cfg, [1, 2, 3])
    assert not ops.r_push(short), "less than one chunk is not recordable"
    ok = mapped_tensor(ops, cfg, [1, 2, 3, 4])
    assert ops.r_push(ok)
    assert not ops.r_push(ok), "a recorded space cannot be pushed again"


def test_r_push_replacement_unpins_displaced(cfg, stack):
    device, pool, ops = stack
    first = mapped_tensor(ops, cfg, [1, 2, 3, 4])
    second = mapped_tensor(ops, cfg, [1, 2, 3, 4])
    assert ops.r_push(first)
    assert ops.r_push(second)
    assert len(pool.tree.records()) == 1
    assert pool.tree.match((1, 2, 3, 4))[0] is second
    assert not first.space.recorded
    assert first.space.state is SpaceState.AVAILABLE
    # The first copy's chunk lost its last referrer and parked free.
    assert pool.free_count() == 1
    assert pool.n_pinned == 1
    assert check_all(ops) == []


def test_unmap_space_noops_on_recorded_space(cfg, stack):
    _, pool, ops = stack
    vt = mapped_tensor(ops, cfg, [5, 6, 7, 8])
    assert ops.r_push(vt)
    ops.unmap_space(vt.space)  # request releasing after record: no effect
    assert vt.space.recorded
    assert vt.space.mapped_pages == 1
    assert pool.n_pinned == 1


def test_record_cap_evicts_least_recently_used():
    cfg = tiny_config(prefix_cache_max_chunks=4)
    device, pool, ops = make_stack(cfg)

    a = mapped_tensor(ops, cfg, [1, 1, 1, 1, 1, 1, 1, 1])  # 2 chunks
    b = mapped_tensor(ops, cfg, [2, 2, 2, 2, 2, 2, 2, 2])  # 2 chunks
    c = mapped_tensor(ops, cfg, [3, 3, 3, 3])  # 1 chunk
    assert ops.r_push(a)
    assert ops.r_push(b)
    ops.r_prefix_match([1, 1, 1, 1])  # touch a, so b is the LRU victim
    assert ops.r_push(c)
    seqs = pool.tree.recorded_sequences()
    assert (1, 1, 1, 1, 1, 1, 1, 1) in seqs
    assert (3, 3, 3, 3) in seqs
    assert (2, 2, 2, 2, 2, 2, 2, 2) not in seqs
    assert not b.space.recorded
    assert check_all(ops) == []


def test_journal_sections_cover_all_device_calls(cfg, stack):
    device, pool, ops = stack
    vt = mapped_tensor(ops, cfg, list(range(12)))
    ops.r_push(vt)
    other = ops.v_alloc(cfg.max_seq_len)
    ops.map_chunks(other, ops.p_alloc(2))
    ops.unmap_space(other)
    ops.empty_memory(evict_prefix=True)
    assert check_journal(ops) == []
    assert check_all(ops) == []
