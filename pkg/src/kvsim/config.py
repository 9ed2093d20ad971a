"""Configuration for the simulated device, model geometry, and serving engine."""

from __future__ import annotations

import re
from dataclasses import dataclass, field, fields

KIB = 1024
MIB = 1024 * KIB
GIB = 1024 * MIB

_SIZE_RE = re.compile(r"^\s*(\d+(?:\.\d+)?)\s*(KiB|MiB|GiB|B)?\s*$", re.IGNORECASE)
_SUFFIX = {"b": 1, "kib": KIB, "mib": MIB, "gib": GIB}


def parse_size(value: int | str) -> int:
    """Parse a byte count, accepting KiB/MiB/GiB suffixes ("80GiB" -> bytes)."""
    if isinstance(value, int):
        return value
    m = _SIZE_RE.match(value)
    if m is None:
        raise ValueError(f"unparseable size: {value!r}")
    number, suffix = m.groups()
    scale = _SUFFIX[(suffix or "B").lower()]
    result = float(number) * scale
    if result != int(result):
        raise ValueError(f"size is not a whole number of bytes: {value!r}")
    return int(result)


def format_size(n: int) -> str:
    for scale, suffix in ((GIB, "GiB"), (MIB, "MiB"), (KIB, "KiB")):
        if n >= scale and n % scale == 0:
            return f"{n // scale}{suffix}"
    return f"{n}B"


@dataclass
class ModelGeometry:
    """KV-cache shape of the served model, enough to price one token."""

    layers: int = 32
    kv_heads: int = 4
    head_dim: int = 128
    elem_bytes: int = 2

    @property
    def bytes_per_token(self) -> int:
        # K and V, per layer, per head.
        return 2 * self.layers * self.kv_heads * self.head_dim * self.elem_bytes


@dataclass
class SimConfig:
    """All knobs for a run: device shape, model geometry, scheduler policy, costs."""

    capacity_bytes: int = 80 * GIB
    chunk_size_bytes: int = 2 * MIB
    weights_bytes: int = 12 * GIB
    activation_bytes_per_request: int = 0

    geometry: ModelGeometry = field(default_factory=ModelGeometry)

    max_seq_len: int = 4096
    initial_alloc_tokens: int = 256
    lookahead_chunks: int = 1
    max_batch: int = 8
    block_size_tokens: int = 16  # paged baseline only
    prefix_cache_max_chunks: int | None = None
    evict_prefix_on_empty: bool = False

    prefill_cost_per_token: float = 1.0
    decode_cost_per_request: float = 16.0
    mem_op_cost: float = 1.0

    seed: int = 0
    vocab_size: int = 32000

    def __post_init__(self) -> None:
        self.validate()

    @property
    def bytes_per_token(self) -> int:
        return self.geometry.bytes_per_token

    @property
    def tokens_per_chunk(self) -> int:
        return self.chunk_size_bytes // self.bytes_per_token

    @property
    def pages_per_space(self) -> int:
        tpc = self.tokens_per_chunk
        return -(-self.max_seq_len // tpc)

    def validate(self) -> None:
        if self.chunk_size_bytes <= 0 or self.capacity_bytes <= 0:
            raise ValueError("capacity and chunk size must be positive")
        if self.weights_bytes < 0 or self.weights_bytes > self.capacity_bytes:
            raise ValueError("weights must fit on the device")
        bpt = self.geometry.bytes_per_token
        if bpt <= 0:
            raise ValueError("bytes per token must be positive")
        if self.chunk_size_bytes % bpt != 0:
            raise ValueError(
                f"chunk size {self.chunk_size_bytes} is not a multiple of "
                f"bytes_per_token {bpt}"
            )
        if self.max_seq_len <= 0:
            raise ValueError("max_seq_len must be positive")
        if self.initial_alloc_tokens < 0 or self.initial_alloc_tokens > self.max_seq_len:
            raise ValueError("initial_alloc_tokens must be in [0, max_seq_len]")
        if self.lookahead_chunks < 1:
            raise ValueError("lookahead_chunks must be >= 1")
        if self.block_size_tokens <= 0:
            raise ValueError("block_size_tokens must be positive")
        if self.max_batch < 1:
            raise ValueError("max_batch must be >= 1")

    def replace(self, **overrides) -> "SimConfig":
        values = {f.name: getattr(self, f.name) for f in fields(self)}
        values.update(overrides)
        return SimConfig(**values)
