"""Independent invariant checkers, brute-force oracles, and fuzz drivers.

Everything here recomputes state from first principles rather than trusting
the pool's own bookkeeping, so the checks stay meaningful when the pool is
wrong. The op-log executor replays a small JSONL language against a fresh
stack and reports violations; raw_* ops bypass the pool on purpose to fault
the bookkeeping and prove the scanner notices.
"""

from __future__ import annotations

import json
import random
from dataclasses import dataclass, field

from .config import SimConfig
from .device import (
    DeviceConfig,
    DeviceError,
    DeviceOutOfMemory,
    VirtualMemoryDevice,
)
from .ops import VTensorOps
from .pool import ChunkState, PrefixTree, SpaceState, TensorPool, VirtualTensor
from .scheduler import VTensorScheduler

# Device ops each journal section may legally issue. p_alloc may destroy only
# on its own rollback path; nothing else touches created_bytes.
SECTION_ALLOWED = {
    "p_alloc": {"create_chunk", "destroy_chunk"},
    "v_alloc": {"reserve_address"},
    "map": {"map_page"},
    "unmap_space": {"unmap_page"},
    "v_free": {"release_address"},
    "p_free": {"destroy_chunk"},
    "r_push": {"unmap_page"},
    "empty_memory": {"unmap_page", "destroy_chunk", "release_address"},
}
CREATE_SECTIONS = {"p_alloc"}
DESTROY_SECTIONS = {"p_alloc", "p_free", "empty_memory"}


def check_device(device: VirtualMemoryDevice) -> list[str]:
    """Device-internal conservation: map counts agree from all three views."""
    problems: list[str] = []
    stats = device.stats()
    by_range = sum(len(device.mapped_pages_of(r)) for r in device.live_ranges())
    by_handle = sum(h.map_count for h in device.live_handles())
    if not (by_range == by_handle == stats.mapped_page_count):
        problems.append(
            f"mapped pages disagree: ranges={by_range} handles={by_handle} "
            f"counter={stats.mapped_page_count}"
        )
    if stats.free_bytes < 0:
        problems.append(f"free_bytes negative: {stats.free_bytes}")
    if stats.created_bytes % device.config.chunk_size_bytes:
        problems.append(f"created_bytes {stats.created_bytes} not chunk-aligned")
    return problems


def check_refcounts(pool: TensorPool, device: VirtualMemoryDevice) -> list[str]:
    """ref_count == |referrers| == map_count for every chunk; Free iff zero.

    Also recomputes the pool's incremental class counters from scratch.
    """
    problems: list[str] = []
    n_free = n_pinned = n_request = used = 0
    for entry in pool.iter_entries():
        hid = entry.handle.id
        refs = len(entry.referrers)
        if entry.ref_count != refs:
            problems.append(f"chunk {hid}: ref_count {entry.ref_count} != {refs}")
        if entry.handle.map_count != refs:
            problems.append(
                f"chunk {hid}: map_count {entry.handle.map_count} != "
                f"{refs} referrers"
            )
        if (entry.state is ChunkState.FREE) != (refs == 0):
            problems.append(
                f"chunk {hid}: state {entry.state.value} with {refs} referrers"
            )
        for sid in entry.referrers:
            space = pool.spaces.get(sid)
            if space is None:
                problems.append(f"chunk {hid}: referrer {sid} is not a known space")
            elif not any(h is entry.handle for h in space.page_table if h is not None):
                problems.append(f"chunk {hid}: referrer {sid} does not map it")
        if entry.state is ChunkState.FREE:
            expected = "free"
        elif entry.referrers and all(
            pool.spaces[sid].recorded
            for sid in entry.referrers
            if sid in pool.spaces
        ):
            expected = "pinned"
        else:
            expected = "request"
        if entry.cls != expected:
            problems.append(f"chunk {hid}: class {entry.cls}, expected {expected}")
        if expected == "free":
            n_free += 1
        elif expected == "pinned":
            n_pinned += 1
        else:
            n_request += 1
            used += entry.tokens_stored
        if not 0 <= entry.tokens_stored <= pool.tokens_per_chunk:
            problems.append(f"chunk {hid}: tokens_stored {entry.tokens_stored}")
    counters = (pool.n_free, pool.n_pinned, pool.n_request, pool.used_tokens)
    if counters != (n_free, n_pinned, n_request, used):
        problems.append(
            f"class counters {counters} != scan "
            f"{(n_free, n_pinned, n_request, used)}"
        )
    return problems


def check_spaces(pool: TensorPool, device: VirtualMemoryDevice) -> list[str]:
    """Page tables are prefixes and agree with the device's own mappings."""
    problems: list[str] = []
    live_bases = {r.base for r in device.live_ranges()}
    total_refs = sum(len(e.referrers) for e in pool.iter_entries())
    total_mapped = 0
    for space in pool.iter_spaces():
        sid = space.space_id
        if sid not in live_bases:
            problems.append(f"space {sid}: range not live on device")
            continue
        for page, handle in enumerate(space.page_table):
            if (handle is None) != (page >= space.mapped_pages):
                problems.append(f"space {sid}: page table is not a prefix at {page}")
                break
        device_view = device.mapped_pages_of(space.rng)
        pool_view = {
            page: space.page_table[page].id for page in range(space.mapped_pages)
        }
        if device_view != pool_view:
            problems.append(f"space {sid}: page table disagrees with device")
        if space.state is SpaceState.AVAILABLE and space.mapped_pages:
            problems.append(f"space {sid}: available but maps pages")
        if space.state is SpaceState.AVAILABLE and space.recorded:
            problems.append(f"space {sid}: available but flagged recorded")
        total_mapped += space.mapped_pages
    if total_refs != total_mapped:
        problems.append(
            f"referrer total {total_refs} != mapped page total {total_mapped}"
        )
    return problems


def check_tree(pool: TensorPool) -> list[str]:
    """Every record owns a distinct recorded space; keys match the tokens."""
    problems: list[str] = []
    seen_spaces: set[int] = set()
    for node, vt in pool.tree.records():
        sid = vt.space.space_id
        if sid in seen_spaces:
            problems.append(f"space {sid} backs two records")
        seen_spaces.add(sid)
        if not vt.space.recorded:
            problems.append(f"record space {sid} lost its recorded flag")
        if vt.token_count % pool.tokens_per_chunk:
            problems.append(f"record on space {sid} is not chunk-aligned")
        key: list[int] = []
        walk = node
        while walk is not None and walk.key:
            key[:0] = walk.key
            walk = walk.parent
        if tuple(key) != tuple(vt.tokens[: vt.token_count]):
            problems.append(f"record key mismatch on space {sid}")
    recorded_spaces = {
        s.space_id for s in pool.iter_spaces() if s.recorded
    }
    if recorded_spaces != seen_spaces:
        problems.append(
            f"recorded spaces {sorted(recorded_spaces)} != record-owned "
            f"{sorted(seen_spaces)}"
        )
    return problems


def check_journal(ops: VTensorOps) -> list[str]:
    """Reservation never creates chunks; unmapping never destroys them.

    Walks every journal section against the device call log and pins each
    create/destroy to a section that is allowed to issue it.
    """
    problems: list[str] = []
    log = ops.device.call_log
    owner: list[str | None] = [None] * len(log)
    for record in ops.journal:
        allowed = SECTION_ALLOWED.get(record.name)
        for i in range(record.call_start, record.call_end):
            owner[i] = record.name
            if allowed is not None and log[i].op not in allowed:
                problems.append(
                    f"{record.name} section issued {log[i].op} (call #{log[i].seq})"
                )
    for i, call in enumerate(log):
        if call.op == "create_chunk" and owner[i] not in CREATE_SECTIONS:
            problems.append(
                f"create_chunk outside p_alloc (call #{call.seq}, "
                f"section {owner[i]})"
            )
        if call.op == "destroy_chunk" and owner[i] not in DESTROY_SECTIONS:
            problems.append(
                f"destroy_chunk in section {owner[i]} (call #{call.seq})"
            )
    return problems


def check_all(ops: VTensorOps) -> list[str]:
    return (
        check_device(ops.device)
        + check_refcounts(ops.pool, ops.device)
        + check_spaces(ops.pool, ops.device)
        + check_tree(ops.pool)
        + check_journal(ops)
    )


def brute_force_match(
    recorded: list[tuple[int, ...]], query: list[int] | tuple[int, ...], tpc: int
) -> int:
    """Longest chunk-aligned shared prefix over all recorded sequences."""
    best = 0
    for seq in recorded:
        n = 0
        limit = min(len(seq), len(query))
        while n < limit and seq[n] == query[n]:
            n += 1
        best = max(best, (n // tpc) * tpc)
    return best


# -- radix-tree fuzz ---------------------------------------------------------


@dataclass
class _Stub:
    """Stands in for a tensor in tree-only fuzzing; the tree reads tokens."""

    tokens: list[int]
    token_count: int = 0
    space: object = None

    def __post_init__(self) -> None:
        self.token_count = len(self.tokens)


def fuzz_tree(
    seed: int,
    workloads: int = 200,
    tpc: int = 32,
    alphabet: int = 8,
    max_len: int = 512,
) -> list[str]:
    """Random insert/remove/match workloads against the brute-force oracle."""
    problems: list[str] = []
    rng = random.Random(seed)
    for w in range(workloads):
        tree = PrefixTree(tpc)
        model: dict[tuple[int, ...], _Stub] = {}
        for _ in range(rng.randint(1, 10)):
            action = rng.random()
            if action < 0.55 or not model:
                length = rng.randint(0, max_len)
                if model and rng.random() < 0.5:
                    # Branch off an existing sequence to force splits.
                    base = list(rng.choice(list(model)))
                    cut = rng.randint(0, len(base))
                    tail = [rng.randrange(alphabet) for _ in range(length)]
                    tokens = base[:cut] + tail
                else:
                    tokens = [rng.randrange(alphabet) for _ in range(length)]
                aligned = (len(tokens) // tpc) * tpc
                if aligned == 0:
                    continue
                stub = _Stub(tokens[:aligned])
                key = tuple(stub.tokens)
                displaced = tree.insert(key, stub)
                expect_displaced = [model[key]] if key in model else []
                if displaced != expect_displaced:
                    problems.append(
                        f"workload {w}: displaced {len(displaced)} records, "
                        f"expected {len(expect_displaced)}"
                    )
                model[key] = stub
            elif action < 0.7 and model:
                key = rng.choice(list(model))
                victim = model.pop(key)
                for node, vt in tree.records():
                    if vt is victim:
                        tree.remove(node)
                        break
                else:
                    problems.append(f"workload {w}: record to remove not found")
            else:
                if model and rng.random() < 0.7:
                    base = list(rng.choice(list(model)))
                    cut = rng.randint(0, len(base))
                    extra = [rng.randrange(alphabet) for _ in range(rng.randint(0, 40))]
                    query = base[:cut] + extra
                else:
                    query = [rng.randrange(alphabet) for _ in range(rng.randint(0, max_len))]
                got = tree.match(tuple(query))
                want = brute_force_match(list(model), query, tpc)
                got_len = got[1] if got is not None else 0
                if got_len != want:
                    problems.append(
                        f"workload {w}: match returned {got_len}, oracle {want} "
                        f"(query len {len(query)})"
                    )
                if got is not None and want == 0:
                    problems.append(f"workload {w}: match hit where oracle found none")
        if tree.recorded_sequences() and not model:
            problems.append(f"workload {w}: tree kept records after removals")
        if sorted(tree.recorded_sequences()) != sorted(model):
            problems.append(f"workload {w}: recorded sequences diverge from model")
        if problems:
            break
    return problems


# -- full-stack fuzz ---------------------------------------------------------


def tiny_config(**overrides) -> SimConfig:
    """Small geometry so thousands of fuzz steps stay cheap."""
    from .config import ModelGeometry

    base = dict(
        capacity_bytes=64 * 1024,
        chunk_size_bytes=128,
        weights_bytes=0,
        geometry=ModelGeometry(layers=1, kv_heads=1, head_dim=8, elem_bytes=2),
        max_seq_len=64,
        initial_alloc_tokens=8,
        lookahead_chunks=1,
        prefix_cache_max_chunks=overrides.pop("prefix_cache_max_chunks", 24),
    )
    base.update(overrides)
    return SimConfig(**base)


@dataclass
class FuzzResult:
    steps: int
    actions: dict[str, int] = field(default_factory=dict)
    problems: list[str] = field(default_factory=list)
    # The fuzzed stack, kept alive so callers can scan its call log/journal.
    ops: VTensorOps | None = None

    @property
    def ok(self) -> bool:
        return not self.problems


def fuzz_ops(
    seed: int,
    steps: int = 1000,
    config: SimConfig | None = None,
    check_every: int = 100,
    refcount_every: int = 0,
    alphabet: int = 8,
) -> FuzzResult:
    """Drive random request lifecycles and scan every invariant as we go.

    check_every runs the full five-scanner battery; refcount_every (when
    nonzero) additionally runs just the refcount/hard-link scan, cheap enough
    to afford after every single step.
    """
    config = config or tiny_config()
    device = VirtualMemoryDevice(
        DeviceConfig(
            capacity_bytes=config.capacity_bytes,
            chunk_size_bytes=config.chunk_size_bytes,
            weights_bytes=config.weights_bytes,
        )
    )
    pool = TensorPool(config.tokens_per_chunk)
    ops = VTensorOps(device, pool, config)
    sched = VTensorScheduler(ops)
    rng = random.Random(seed)
    result = FuzzResult(steps=steps, ops=ops)
    active: list[str] = []
    serial = 0
    tpc = config.tokens_per_chunk

    def bump(name: str) -> None:
        result.actions[name] = result.actions.get(name, 0) + 1

    def release_one() -> None:
        if active:
            victim = active.pop(rng.randrange(len(active)))
            sched.release(victim)

    for step in range(steps):
        roll = rng.random()
        try:
            if roll < 0.35:
                bump("create")
                serial += 1
                rid = f"r{serial}"
                length = rng.randint(1, config.max_seq_len - 2 * tpc)
                tokens = [rng.randrange(alphabet) for _ in range(length)]
                hit = None
                if rng.random() < 0.6:
                    hit = sched.prefix_match(rid, tokens)
                if hit is None:
                    sched.create(rid, tokens)
                sched.mark_prefilled(rid)
                active.append(rid)
            elif roll < 0.6 and active:
                bump("append")
                rid = rng.choice(active)
                for _ in range(rng.randint(1, tpc + 1)):
                    rm = sched.mem[rid]
                    if rm.vt.token_count + 1 > config.max_seq_len:
                        break
                    sched.extend(rid, rm.vt.token_count + 1)
                    sched.append_token(rid, rng.randrange(alphabet))
            elif roll < 0.72 and active:
                bump("record")
                rid = active.pop(rng.randrange(len(active)))
                if not sched.prefix_record(rid):
                    sched.release(rid)
            elif roll < 0.85 and active:
                bump("release")
                release_one()
            elif roll < 0.93:
                bump("match_probe")
                recorded = pool.tree.recorded_sequences()
                if recorded and rng.random() < 0.7:
                    base = list(rng.choice(recorded))
                    cut = rng.randint(0, len(base))
                    query = base[:cut] + [
                        rng.randrange(alphabet) for _ in range(rng.randint(0, 8))
                    ]
                else:
                    query = [rng.randrange(alphabet) for _ in range(rng.randint(0, 64))]
                got = ops.r_prefix_match(query)
                want = brute_force_match(recorded, query, tpc)
                got_len = got[1] if got is not None else 0
                if got_len != want:
                    result.problems.append(
                        f"step {step}: prefix match {got_len} != oracle {want}"
                    )
            else:
                bump("empty")
                ops.empty_memory(evict_prefix=rng.random() < 0.5)
        except DeviceOutOfMemory:
            bump("oom")
            if active:
                release_one()
            else:
                ops.empty_memory(evict_prefix=True)
        if refcount_every and (step + 1) % refcount_every == 0:
            found = check_refcounts(pool, device)
            if found:
                result.problems.extend(f"step {step}: {p}" for p in found)
                return result
        if (step + 1) % check_every == 0:
            found = check_all(ops)
            if found:
                result.problems.extend(f"step {step}: {p}" for p in found)
                return result
    for rid in list(active):
        sched.release(rid)
    result.problems.extend(check_all(ops))
    return result


# -- op-log executor ---------------------------------------------------------


def run_op_log(lines: list[str], config: SimConfig | None = None) -> list[str]:
    """Replay a JSONL op log; returns violations (empty means clean).

    Handles and spaces are addressed by creation index. raw_map/raw_unmap go
    straight to the device, skipping pool bookkeeping, so a log can inject
    faults and exercise the scanner.
    """
    config = config or tiny_config()
    device = VirtualMemoryDevice(
        DeviceConfig(
            capacity_bytes=config.capacity_bytes,
            chunk_size_bytes=config.chunk_size_bytes,
            weights_bytes=config.weights_bytes,
        )
    )
    pool = TensorPool(config.tokens_per_chunk)
    ops = VTensorOps(device, pool, config)
    problems: list[str] = []
    handles: list = []
    tensors: list[VirtualTensor] = []
    tpc = config.tokens_per_chunk

    for lineno, raw in enumerate(lines, start=1):
        raw = raw.strip()
        if not raw or raw.startswith("#"):
            continue
        try:
            entry = json.loads(raw)
            op = entry["op"]
        except (ValueError, KeyError) as exc:
            problems.append(f"line {lineno}: unreadable op ({exc})")
            continue
        try:
            if op == "p_alloc":
                handles.extend(ops.p_alloc(int(entry.get("n", 1))))
            elif op == "v_alloc":
                space = ops.v_alloc(config.max_seq_len)
                tensors.append(
                    VirtualTensor(
                        space=space,
                        tokens=[],
                        capacity_tokens=config.max_seq_len,
                    )
                )
            elif op == "map":
                vt = tensors[entry["space"]]
                ops.map_chunks(vt.space, [handles[i] for i in entry["chunks"]])
                vt.capacity_tokens = vt.space.mapped_pages * tpc
            elif op == "write":
                vt = tensors[entry["space"]]
                vt.tokens = list(entry["tokens"])
                vt.token_count = len(vt.tokens)
                for page in range(vt.token_count // tpc):
                    pool.note_stored(vt.space.page_table[page], tpc)
                rem = vt.token_count % tpc
                if rem:
                    pool.note_stored(vt.space.page_table[vt.token_count // tpc], rem)
            elif op == "unmap":
                ops.unmap_space(tensors[entry["space"]].space)
            elif op == "v_free":
                ops.v_free(tensors[entry["space"]].space)
            elif op == "p_free":
                ops.p_free(handles[entry["chunk"]])
            elif op == "push":
                ops.r_push(tensors[entry["space"]])
            elif op == "match":
                got = ops.r_prefix_match(list(entry["tokens"]))
                got_len = got[1] if got is not None else 0
                want = brute_force_match(
                    pool.tree.recorded_sequences(), entry["tokens"], tpc
                )
                if got_len != want:
                    problems.append(
                        f"line {lineno}: match {got_len} != oracle {want}"
                    )
                if "expect" in entry and got_len != entry["expect"]:
                    problems.append(
                        f"line {lineno}: match {got_len} != expected {entry['expect']}"
                    )
            elif op == "empty":
                ops.empty_memory(evict_prefix=bool(entry.get("evict_prefix", False)))
            elif op == "raw_map":
                vt = tensors[entry["space"]]
                device.map_page(vt.space.rng, entry["page"], handles[entry["chunk"]])
            elif op == "raw_unmap":
                vt = tensors[entry["space"]]
                device.unmap_page(vt.space.rng, entry["page"])
            elif op == "check":
                problems.extend(
                    f"line {lineno}: {p}" for p in check_all(ops)
                )
            else:
                problems.append(f"line {lineno}: unknown op {op!r}")
        except DeviceError as exc:
            problems.append(f"line {lineno}: {type(exc).__name__}: {exc}")
        except (IndexError, KeyError, TypeError, AttributeError) as exc:
            problems.append(f"line {lineno}: bad reference ({exc!r})")
    problems.extend(f"final: {p}" for p in check_all(ops))
    return problems
