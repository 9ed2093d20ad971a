#!/usr/bin/env python3
"""Walk the device primitives by hand: reserve, create, map, unmap, destroy.

The one rule to watch: reserving virtual address space is free and unbounded,
while physical bytes move only when chunks are created or destroyed. Mapping
and unmapping just edit page tables.
"""

from kvsim import DeviceConfig, VirtualMemoryDevice

KIB = 1024


def banner(text):
    print()
    print(f"---- {text} ----")


def show(device, label):
    s = device.stats()
    print(f"{label:<34s} created={s.created_bytes:>6d}B  "
          f"reserved_virtual={s.reserved_virtual_bytes:>6d}B  "
          f"free={s.free_bytes:>6d}B")


def main():
    device = VirtualMemoryDevice(
        DeviceConfig(capacity_bytes=4 * KIB, chunk_size_bytes=256, weights_bytes=1 * KIB)
    )
    print("device: 4 KiB capacity, 256 B chunks, 1 KiB pre-loaded weights")
    show(device, "at rest")

    banner("address reservation is free")
    rng = device.reserve_address(64 * 256)  # 16 KiB virtual on a 4 KiB device
    show(device, "after reserving 64 pages")
    print("a 16 KiB reservation on a 4 KiB device is fine: no bytes are backing it")

    banner("creating chunks is the only real cost")
    chunks = [device.create_chunk() for _ in range(4)]
    show(device, "after creating 4 chunks")

    banner("mapping edits page tables, not budgets")
    for page, handle in enumerate(chunks):
        device.map_page(rng, page, handle)
    show(device, "after mapping 4 pages")
    print("mapped pages:", device.mapped_pages_of(rng))
    print("map_count of chunk 0:", chunks[0].map_count)

    banner("one chunk can appear in many ranges (hard links)")
    other = device.reserve_address(8 * 256)
    device.map_page(other, 0, chunks[0])
    print("chunk 0 map_count is now:", chunks[0].map_count)
    device.unmap_page(other, 0)
    device.release_address(other)

    banner("unmapping never destroys")
    for page in range(4):
        device.unmap_page(rng, page)
    show(device, "after unmapping everything")
    print("created bytes unchanged: the 4 chunks are still alive and reusable")

    banner("the call log tells the whole story")
    for call in device.call_log:
        print(f"  #{call.seq:<3d} {call.op:<16s} created_after={call.created_bytes_after}")

    banner("cleanup")
    device.release_address(rng)
    for handle in chunks:
        device.destroy_chunk(handle)
    show(device, "after destroying chunks")


if __name__ == "__main__":
    main()
