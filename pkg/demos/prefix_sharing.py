#!/usr/bin/env python3
"""Copy-free prefix sharing: later requests map the recorded chunks directly.

A finished request can push its sequence into the prefix store. A new request
whose prompt starts with a recorded sequence gets the matching chunks mapped
into its own address range; the only new chunks it pays for cover its tail.
"""

from kvsim import (
    DeviceConfig,
    TensorPool,
    VirtualMemoryDevice,
    VTensorOps,
    VTensorScheduler,
)
from kvsim.verify import tiny_config


def banner(text):
    print()
    print(f"---- {text} ----")


def main():
    cfg = tiny_config()
    device = VirtualMemoryDevice(DeviceConfig(
        capacity_bytes=cfg.capacity_bytes,
        chunk_size_bytes=cfg.chunk_size_bytes,
        weights_bytes=cfg.weights_bytes,
    ))
    ops = VTensorOps(device, TensorPool(cfg.tokens_per_chunk), cfg)
    sched = VTensorScheduler(ops)
    tpc = cfg.tokens_per_chunk
    print(f"tiny geometry: {tpc} tokens per chunk")

    banner("serve a request and record its sequence")
    system_prompt = [3, 1, 4, 1, 5, 9, 2, 6, 5, 3, 5, 8]  # 12 tokens = 3 chunks
    sched.create("first", system_prompt)
    sched.mark_prefilled("first")
    print(f"first request: {len(system_prompt)} prompt tokens, "
          f"{device.created_bytes // cfg.chunk_size_bytes} chunks created")
    pushed = sched.prefix_record("first")
    print(f"recorded on finish: {pushed} "
          f"(store now pins {ops.pool.n_pinned} chunks)")

    banner("a follow-up prompt that extends the recorded one")
    query = system_prompt + [9, 7, 9, 3]  # same 12 tokens plus a fresh chunk
    calls_before = len(device.call_log)
    hit = sched.prefix_match("second", query)
    assert hit is not None
    _, stats = hit
    creates = sum(1 for c in device.call_log[calls_before:] if c.op == "create_chunk")
    print(f"shared tokens:        {stats.shared_tokens}")
    print(f"chunks acquired:      {stats.chunks_acquired} "
          f"(created {stats.chunks_created}, reused {stats.chunks_reused})")
    print(f"device create calls:  {creates}  <- only the tail chunk")
    print(f"identity check:       {stats.identity_ok}")

    banner("the shared pages are the donor's own chunks")
    donor_pages = device.mapped_pages_of(sched.mem["second"].vt.space.rng)
    print("second request's page table (page -> chunk id):", donor_pages)
    record = ops.pool.tree.recorded_sequences()
    print(f"recorded sequences in the store: {len(record)} "
          f"(length {len(record[0])})")

    banner("a diverging prompt shares only the common chunks")
    diverges = system_prompt[:8] + [7, 7, 7, 7, 7, 7]  # first 2 chunks match
    hit = sched.prefix_match("third", diverges)
    assert hit is not None
    _, stats = hit
    print(f"shared tokens: {stats.shared_tokens} (2 aligned chunks), "
          f"acquired {stats.chunks_acquired} for the rest")

    banner("sub-chunk overlap is not shareable")
    miss = sched.prefix_match("fourth", system_prompt[:3] + [9, 9, 9, 9, 9])
    print(f"prompt overlapping 3 tokens (< {tpc} per chunk): match -> {miss}")


if __name__ == "__main__":
    main()
