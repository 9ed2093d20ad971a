"""Workload traces: the JSONL format, deterministic generators, token streams.

A trace line is one request:

    {"id": ..., "arrival_step": ..., "conversation": ...,
     "prompt_len": ..., "prompt_tokens": [...], "output_len": ...}

conversation and prompt_tokens are optional. When prompt_tokens is omitted the
engine synthesizes them from seeded streams, so the same (trace, seed) pair
always produces the same run.
"""

from __future__ import annotations

import json
import random
import zlib
from dataclasses import dataclass, field
from pathlib import Path


class TraceFormatError(Exception):
    pass


@dataclass
class TraceRequest:
    id: str
    arrival_step: int
    prompt_len: int
    output_len: int
    conversation: str | None = None
    prompt_tokens: list[int] | None = None
    seq: int = field(default=0, compare=False)

    def to_json(self) -> dict:
        out: dict = {
            "id": self.id,
            "arrival_step": self.arrival_step,
            "prompt_len": self.prompt_len,
            "output_len": self.output_len,
        }
        if self.conversation is not None:
            out["conversation"] = self.conversation
        if self.prompt_tokens is not None:
            out["prompt_tokens"] = self.prompt_tokens
        return out


def derive_seed(seed: int, *labels) -> int:
    text = ":".join([str(seed), *map(str, labels)])
    return zlib.crc32(text.encode("utf-8"))


def token_stream(seed: int, *labels, n: int, vocab: int = 32000) -> list[int]:
    """n token ids, fully determined by (seed, labels)."""
    rng = random.Random(derive_seed(seed, *labels))
    return [rng.randrange(vocab) for _ in range(n)]


def output_token(seed: int, request_id: str, index: int, vocab: int = 32000) -> int:
    """The index-th generated token of a request; stable across restarts."""
    return random.Random(derive_seed(seed, request_id, "out", index)).randrange(vocab)


def load_trace(path: str | Path) -> list[TraceRequest]:
    requests: list[TraceRequest] = []
    seen_ids: set[str] = set()
    with open(path, "r", encoding="utf-8") as f:
        for lineno, line in enumerate(f, start=1):
            line = line.strip()
            if not line:
                continue
            try:
                raw = json.loads(line)
            except json.JSONDecodeError as e:
                raise TraceFormatError(f"{path}:{lineno}: invalid JSON ({e.msg})") from e
            if not isinstance(raw, dict):
                raise TraceFormatError(f"{path}:{lineno}: expected an object")
            for key in ("id", "arrival_step", "prompt_len", "output_len"):
                if key not in raw:
                    raise TraceFormatError(f"{path}:{lineno}: missing field {key!r}")
            rid = str(raw["id"])
            if rid in seen_ids:
                raise TraceFormatError(f"{path}:{lineno}: duplicate request id {rid!r}")
            seen_ids.add(rid)
            for key in ("arrival_step", "prompt_len", "output_len"):
                if not isinstance(raw[key], int) or raw[key] < 0:
                    raise TraceFormatError(
                        f"{path}:{lineno}: {key} must be a nonnegative integer"
                    )
            tokens = raw.get("prompt_tokens")
            if tokens is not None:
                if not isinstance(tokens, list) or any(
                    not isinstance(t, int) for t in tokens
                ):
                    raise TraceFormatError(
                        f"{path}:{lineno}: prompt_tokens must be a list of integers"
                    )
                if len(tokens) != raw["prompt_len"]:
                    raise TraceFormatError(
                        f"{path}:{lineno}: prompt_tokens length {len(tokens)} "
                        f"!= prompt_len {raw['prompt_len']}"
                    )
            conversation = raw.get("conversation")
            requests.append(
                TraceRequest(
                    id=rid,
                    arrival_step=raw["arrival_step"],
                    prompt_len=raw["prompt_len"],
                    output_len=raw["output_len"],
                    conversation=None if conversation is None else str(conversation),
                    prompt_tokens=tokens,
                    seq=len(requests),
                )
            )
    return requests


def dump_trace(requests: list[TraceRequest], path: str | Path) -> None:
    with open(path, "w", encoding="utf-8") as f:
        for req in requests:
            f.write(json.dumps(req.to_json(), sort_keys=True) + "\n")


SCENARIOS = ("single_gen", "multi_turn", "prefix_share")


def generate_trace(
    scenario: str,
    seed: int = 0,
    requests: int = 8,
    conversations: int = 4,
    turns: int = 2,
    arrival_gap: int = 0,
    vocab: int = 32000,
) -> list[TraceRequest]:
    """Deterministic workload for one of the three serving scenarios."""
    if scenario == "single_gen":
        return _single_gen(seed, requests, arrival_gap, vocab)
    if scenario == "multi_turn":
        return _multi_turn(seed, conversations, turns, arrival_gap)
    if scenario == "prefix_share":
        return _prefix_share(seed, requests, vocab)
    raise ValueError(f"unknown scenario {scenario!r}; choose from {SCENARIOS}")


def _single_gen(seed: int, requests: int, arrival_gap: int, vocab: int) -> list[TraceRequest]:
    """Long-document generation: big prompts, long outputs, no reuse."""
    rng = random.Random(derive_seed(seed, "single_gen"))
    out: list[TraceRequest] = []
    for i in range(requests):
        out.append(
            TraceRequest(
                id=f"sg{i:03d}",
                arrival_step=i * arrival_gap,
                prompt_len=rng.randint(6000, 8000),
                output_len=rng.randint(2000, 4000),
                seq=i,
            )
        )
    return out


def _multi_turn(seed: int, conversations: int, turns: int, arrival_gap: int) -> list[TraceRequest]:
    """Chat: every turn adds a 2K prompt and a 2K reply on top of history."""
    out: list[TraceRequest] = []
    for c in range(conversations):
        for t in range(turns):
            out.append(
                TraceRequest(
                    id=f"mt{c:02d}t{t}",
                    arrival_step=c * arrival_gap,
                    conversation=f"conv{c:02d}",
                    prompt_len=2000,
                    output_len=2000,
                    seq=len(out),
                )
            )
    return out


def _prefix_share(seed: int, requests: int, vocab: int) -> list[TraceRequest]:
    """Shared 12K system prefix, 4K distinct tails, 10 output tokens each."""
    prefix = token_stream(seed, "shared_prefix", n=12000, vocab=vocab)
    out: list[TraceRequest] = []
    for i in range(requests):
        suffix = token_stream(seed, f"ps{i:03d}", "suffix", n=4000, vocab=vocab)
        tokens = prefix + suffix
        out.append(
            TraceRequest(
                id=f"ps{i:03d}",
                arrival_step=0,
                conversation="shared",
                prompt_len=len(tokens),
                output_len=10,
                prompt_tokens=tokens,
                seq=i,
            )
        )
    return out
