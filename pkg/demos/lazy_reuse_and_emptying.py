#!/usr/bin/env python3
"""Lazy deallocation at the request level: release keeps chunks for reuse.

Finishing a request unmaps its pages but destroys nothing; the chunks sit in a
free pool and the next request picks them up without touching the device.
Only an explicit memory-emptying call gives bytes back.
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


def show(ops, label):
    device, pool = ops.device, ops.pool
    chunk = ops.config.chunk_size_bytes
    print(f"{label:<38s} created={device.created_bytes // chunk:>3d} chunks  "
          f"free_pool={pool.free_count():>3d}  "
          f"device_calls={len(device.call_log):>4d}")


def main():
    cfg = tiny_config()
    device = VirtualMemoryDevice(DeviceConfig(
        capacity_bytes=cfg.capacity_bytes,
        chunk_size_bytes=cfg.chunk_size_bytes,
        weights_bytes=cfg.weights_bytes,
    ))
    ops = VTensorOps(device, TensorPool(cfg.tokens_per_chunk), cfg)
    sched = VTensorScheduler(ops)
    print(f"tiny geometry: {cfg.chunk_size_bytes} B chunks, "
          f"{cfg.tokens_per_chunk} tokens per chunk, max_seq {cfg.max_seq_len}")

    banner("admit four requests")
    for i in range(4):
        sched.create(f"r{i}", list(range(24)))  # 24 tokens => 6 chunks each
        sched.mark_prefilled(f"r{i}")
    show(ops, "4 requests x 24 tokens")

    banner("finishing releases lazily")
    calls_before = len(device.call_log)
    for i in range(4):
        sched.release(f"r{i}")
    show(ops, "all 4 released")
    unmaps = sum(1 for c in device.call_log[calls_before:] if c.op == "unmap_page")
    destroys = sum(1 for c in device.call_log[calls_before:] if c.op == "destroy_chunk")
    print(f"release issued {unmaps} unmap calls and {destroys} destroy calls")

    banner("new requests reuse the free pool")
    calls_before = len(device.call_log)
    for i in range(4, 8):
        sched.create(f"r{i}", list(range(24)))
        sched.mark_prefilled(f"r{i}")
    creates = sum(1 for c in device.call_log[calls_before:] if c.op == "create_chunk")
    show(ops, "4 fresh requests admitted")
    print(f"admissions created {creates} chunks: everything came from the pool")

    banner("emptying is the only way bytes go back")
    for i in range(4, 8):
        sched.release(f"r{i}")
    show(ops, "released again")
    report = ops.empty_memory()
    show(ops, "after empty_memory")
    print(f"reclaimed {report.chunks_destroyed} chunks "
          f"({report.chunk_bytes} B) and {report.spaces_released} address ranges")


if __name__ == "__main__":
    main()
