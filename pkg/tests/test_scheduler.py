"""Request-level memory actions: create, extend, prefix reuse, record, release."""

import pytest

from kvsim import (
    DeviceConfig,
    DeviceOutOfMemory,
    ExceedsMaxSeqLen,
    SimConfig,
    SpaceState,
    TensorPool,
    VirtualMemoryDevice,
    VTensorOps,
    VTensorScheduler,
)
from kvsim.verify import check_all, tiny_config


def full_size_sched():
    """Headline geometry: 64 KiB/token, 2 MiB chunks, 32 tokens per chunk."""
    cfg = SimConfig()
    device = VirtualMemoryDevice(
        DeviceConfig(
            capacity_bytes=cfg.capacity_bytes,
            chunk_size_bytes=cfg.chunk_size_bytes,
            weights_bytes=cfg.weights_bytes,
        )
    )
    ops = VTensorOps(device, TensorPool(cfg.tokens_per_chunk), cfg)
    return cfg, VTensorScheduler(ops)


def toks(n, offset=0):
    return [(offset + i) % 8 for i in range(n)]


def test_create_provisions_prompt_chunks(cfg, sched):
    rm, stats = sched.create("r1", toks(13))
    # 13 tokens over 4-token chunks is 4 pages; initial_alloc floor is 8 tokens.
    assert rm.provisioned_tokens == 16
    assert stats.chunks_acquired == 4
    assert stats.shared_tokens == 0
    assert rm.vt.token_count == 0, "prompt text known, KV not yet written"


def test_create_applies_initial_alloc_floor(cfg, sched):
    rm, stats = sched.create("r1", toks(2))
    # initial_alloc_tokens=8 rounds tiny prompts up to two chunks.
    assert rm.provisioned_tokens == 8
    assert stats.chunks_acquired == 2


def test_create_rejects_oversized_prompt(cfg, sched):
    with pytest.raises(ExceedsMaxSeqLen):
        sched.create("r1", toks(cfg.max_seq_len + 1))


def test_create_rolls_back_space_on_oom():
    cfg = tiny_config(capacity_bytes=2 * 128)  # room for 2 chunks only
    device = VirtualMemoryDevice(
        DeviceConfig(capacity_bytes=cfg.capacity_bytes, chunk_size_bytes=cfg.chunk_size_bytes)
    )
    ops = VTensorOps(device, TensorPool(cfg.tokens_per_chunk), cfg)
    sched = VTensorScheduler(ops)
    with pytest.raises(DeviceOutOfMemory):
        sched.create("r1", toks(20))  # needs 5 chunks
    assert "r1" not in sched.mem
    assert device.created_bytes == 0
    # The reserved space is recycled, not leaked.
    assert len(ops.pool.available_spaces()) == 1
    sched.create("r2", toks(4))
    assert sched.mem["r2"].vt.space.state is SpaceState.IN_USE


def test_extend_grows_to_target(cfg, sched):
    sched.create("r1", toks(4))
    rm = sched.mem["r1"]
    assert sched.extend("r1", 17) == 3  # 8 -> 20 tokens is 3 new chunks
    assert rm.provisioned_tokens == 20
    assert sched.extend("r1", 12) == 0, "already covered"
    with pytest.raises(ExceedsMaxSeqLen):
        sched.extend("r1", cfg.max_seq_len + 1)


def test_token_progress_tracks_stored(cfg, sched):
    _, pool = sched.ops, sched.ops.pool
    sched.create("r1", toks(6))
    sched.mark_prefilled("r1")
    rm = sched.mem["r1"]
    assert rm.vt.token_count == 6
    table = rm.vt.space.page_table
    assert pool.entries[table[0].id].tokens_stored == 4
    assert pool.entries[table[1].id].tokens_stored == 2
    sched.extend("r1", 7)
    sched.append_token("r1", 5)
    assert rm.vt.token_count == 7
    assert pool.entries[table[1].id].tokens_stored == 3
    assert rm.vt.tokens[-1] == 5


def test_prefix_match_maps_donor_chunks_by_identity(cfg, sched):
    shared = toks(8)
    sched.create("a", shared + toks(4, offset=3))
    sched.mark_prefilled("a")
    donor_table = list(sched.mem["a"].vt.space.page_table)
    assert sched.prefix_record("a")

    hit = sched.prefix_match("b", shared + toks(4, offset=5))
    assert hit is not None
    rm, stats = hit
    assert stats.shared_tokens == 8
    assert stats.identity_ok
    assert stats.donor_space is not None
    for page in range(2):
        assert rm.vt.space.page_table[page] is donor_table[page]
    # Suffix still needed its own chunk.
    assert stats.chunks_acquired == 1
    assert rm.vt.token_count == 8, "shared KV is already written"
    assert rm.provisioned_tokens == 12
    assert check_all(sched.ops) == []


def test_prefix_match_misses_without_shared_chunk(cfg, sched):
    sched.create("a", toks(8))
    sched.mark_prefilled("a")
    sched.prefix_record("a")
    assert sched.prefix_match("b", toks(8, offset=5)) is None
    assert sched.prefix_match("c", toks(3)) is None, "sub-chunk overlap is no hit"


def test_prefix_record_trims_to_chunk_boundary():
    cfg, sched = full_size_sched()
    sched.create("r1", toks(3990))
    sched.mark_prefilled("r1")
    space = sched.mem["r1"].vt.space
    assert space.mapped_pages == 125  # ceil(3990/32)
    assert sched.prefix_record("r1")
    assert "r1" not in sched.mem, "record consumed the request's memory"
    assert space.recorded
    assert space.mapped_pages == 124, "partial tail chunk dropped"
    seqs = sched.ops.pool.tree.recorded_sequences()
    assert len(seqs) == 1 and len(seqs[0]) == 3968  # floor(3990/32)*32


def test_prefix_record_keeps_exact_multiple():
    cfg, sched = full_size_sched()
    sched.create("r1", toks(4000))
    sched.mark_prefilled("r1")
    assert sched.prefix_record("r1")
    seqs = sched.ops.pool.tree.recorded_sequences()
    assert len(seqs[0]) == 4000  # 4000 is already 125 whole chunks


def test_prefix_record_declines_sub_chunk(cfg, sched):
    sched.create("r1", toks(3))
    sched.mark_prefilled("r1")
    assert not sched.prefix_record("r1")
    assert "r1" in sched.mem, "caller still owns the memory and must release"
    sched.release("r1")
    assert "r1" not in sched.mem


def test_release_is_lazy_and_idempotent(cfg, sched):
    device = sched.ops.device
    sched.create("r1", toks(10))
    created = device.created_bytes
    sched.release("r1")
    assert device.created_bytes == created
    assert sched.ops.pool.free_count() == 3
    sched.release("r1")  # second release is a no-op
    assert "r1" not in sched.mem


def test_release_all_clears_every_request(cfg, sched):
    for i in range(4):
        sched.create(f"r{i}", toks(4 + i))
    sched.release_all()
    assert sched.mem == {}
    assert check_all(sched.ops) == []


def test_lookahead_target(cfg, sched):
    assert sched.lookahead_target(10) == 10 + cfg.lookahead_chunks * cfg.tokens_per_chunk
