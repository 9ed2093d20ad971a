"""Command-line front end: trace replay, trace generation, invariant checks."""

from __future__ import annotations

import argparse
import json
import os
import sys
from pathlib import Path

from .config import SimConfig, ModelGeometry, format_size, parse_size
from .engine import ALLOCATORS, TraceInfeasible, run_trace
from .trace import SCENARIOS, TraceFormatError, dump_trace, generate_trace, load_trace
from .verify import fuzz_ops, fuzz_tree, run_op_log

ENV_PREFIX = "KVSIM_"

# friendly name -> (SimConfig field, coercion)
_SIZE = "size"
_INT = "int"
_FLOAT = "float"
_BOOL = "bool"
SETTINGS = {
    "capacity": ("capacity_bytes", _SIZE),
    "chunk": ("chunk_size_bytes", _SIZE),
    "weights": ("weights_bytes", _SIZE),
    "activation": ("activation_bytes_per_request", _SIZE),
    "max_seq": ("max_seq_len", _INT),
    "initial_alloc": ("initial_alloc_tokens", _INT),
    "lookahead": ("lookahead_chunks", _INT),
    "max_batch": ("max_batch", _INT),
    "block_size": ("block_size_tokens", _INT),
    "prefix_cache_chunks": ("prefix_cache_max_chunks", _INT),
    "evict_prefix": ("evict_prefix_on_empty", _BOOL),
    "seed": ("seed", _INT),
    "vocab": ("vocab_size", _INT),
    "prefill_cost": ("prefill_cost_per_token", _FLOAT),
    "decode_cost": ("decode_cost_per_request", _FLOAT),
    "mem_op_cost": ("mem_op_cost", _FLOAT),
}


def _coerce(kind: str, value):
    if kind == _SIZE:
        return parse_size(value) if isinstance(value, str) else int(value)
    if kind == _INT:
        return int(value)
    if kind == _FLOAT:
        return float(value)
    if kind == _BOOL:
        if isinstance(value, str):
            return value.strip().lower() in ("1", "true", "yes", "on")
        return bool(value)
    raise ValueError(kind)


def build_config(args: argparse.Namespace) -> SimConfig:
    """Layer settings: defaults, then config file, then env, then flags."""
    values: dict = {}
    config_path = getattr(args, "config", None)
    if config_path:
        with open(config_path) as fh:
            data = json.load(fh)
        geometry = data.pop("geometry", None)
        if geometry is not None:
            values["geometry"] = ModelGeometry(**geometry)
        for name, raw in data.items():
            if name not in SETTINGS:
                raise SystemExit(f"config file: unknown setting {name!r}")
            field_name, kind = SETTINGS[name]
            values[field_name] = _coerce(kind, raw)
    for name, (field_name, kind) in SETTINGS.items():
        raw = os.environ.get(ENV_PREFIX + name.upper())
        if raw is not None:
            values[field_name] = _coerce(kind, raw)
    for name, (field_name, kind) in SETTINGS.items():
        raw = getattr(args, name, None)
        if raw is not None:
            values[field_name] = _coerce(kind, raw)
    return SimConfig(**values)


def _add_config_flags(parser: argparse.ArgumentParser) -> None:
    parser.add_argument("--config", help="JSON config file (lowest-precedence layer)")
    parser.add_argument("--capacity", help="device capacity, e.g. 80GiB")
    parser.add_argument("--chunk", help="chunk/page size, e.g. 2MiB")
    parser.add_argument("--weights", help="model weight footprint, e.g. 12GiB")
    parser.add_argument("--activation", help="activation bytes per active request")
    parser.add_argument("--max-seq", dest="max_seq", help="max sequence length in tokens")
    parser.add_argument("--initial-alloc", dest="initial_alloc", help="tokens provisioned at admit")
    parser.add_argument("--lookahead", help="chunks of decode headroom")
    parser.add_argument("--max-batch", dest="max_batch", help="batch size cap")
    parser.add_argument("--block-size", dest="block_size", help="paged-baseline block tokens")
    parser.add_argument(
        "--prefix-cache-chunks",
        dest="prefix_cache_chunks",
        help="cap on chunks pinned by prefix records",
    )
    parser.add_argument(
        "--evict-prefix",
        dest="evict_prefix",
        action="store_const",
        const="true",
        help="evict prefix records when emptying memory",
    )
    parser.add_argument("--seed", help="simulation seed")


def cmd_replay(args: argparse.Namespace) -> int:
    config = build_config(args)
    try:
        requests = load_trace(args.trace)
    except TraceFormatError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except OSError as exc:
        print(f"error: cannot read trace: {exc}", file=sys.stderr)
        return 2
    names = list(ALLOCATORS) if args.allocator == "all" else [args.allocator]
    out_dir = Path(args.out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    summaries = []
    for name in names:
        try:
            report = run_trace(requests, config, allocator=name)
        except TraceInfeasible as exc:
            print(f"error: trace infeasible under {name}: {exc}", file=sys.stderr)
            return 1
        csv_path = out_dir / f"report_{name}.csv"
        csv_path.write_text(report.to_csv())
        summary = report.summary()
        json_path = out_dir / f"summary_{name}.json"
        json_path.write_text(json.dumps(summary, indent=2, sort_keys=True) + "\n")
        summaries.append(summary)
        flex = summary["flexibility"]
        print(
            f"{name}: {summary['steps']} steps, "
            f"{summary['requests_finished']} finished, "
            f"stalls={summary['stall_count']}, "
            f"preemptions={summary['preemption_count']}, "
            f"peak_kv={format_size(flex['peak_kv_allocated'])}, "
            f"mean_free={flex['mean_free_fraction']:.3f}"
        )
        print(f"  wrote {csv_path} and {json_path}")
    if len(summaries) > 1:
        print()
        header = f"{'allocator':<10} {'peak_kv':>12} {'mean_free':>10} {'stalls':>7} {'preempt':>8} {'steps':>7}"
        print(header)
        print("-" * len(header))
        for summary in summaries:
            flex = summary["flexibility"]
            print(
                f"{summary['allocator']:<10} "
                f"{format_size(flex['peak_kv_allocated']):>12} "
                f"{flex['mean_free_fraction']:>10.3f} "
                f"{summary['stall_count']:>7} "
                f"{summary['preemption_count']:>8} "
                f"{summary['steps']:>7}"
            )
    return 0


def cmd_gen_trace(args: argparse.Namespace) -> int:
    requests = generate_trace(
        args.scenario,
        seed=args.seed,
        requests=args.requests,
        conversations=args.conversations,
        turns=args.turns,
        arrival_gap=args.arrival_gap,
    )
    if args.out == "-":
        for req in requests:
            sys.stdout.write(json.dumps(req.to_json(), sort_keys=True) + "\n")
    else:
        dump_trace(requests, args.out)
        print(f"wrote {len(requests)} requests to {args.out}")
    return 0


def cmd_check(args: argparse.Namespace) -> int:
    problems: list[str] = []
    ran = False
    if args.log:
        ran = True
        try:
            lines = Path(args.log).read_text().splitlines()
        except OSError as exc:
            print(f"error: cannot read log: {exc}", file=sys.stderr)
            return 2
        problems.extend(run_op_log(lines))
    if args.fuzz:
        ran = True
        result = fuzz_ops(args.seed, steps=args.fuzz)
        problems.extend(result.problems)
        actions = ", ".join(f"{k}={v}" for k, v in sorted(result.actions.items()))
        print(f"fuzz: {result.steps} steps ({actions})")
    if args.tree_fuzz:
        ran = True
        problems.extend(fuzz_tree(args.seed, workloads=args.tree_fuzz))
        print(f"tree fuzz: {args.tree_fuzz} workloads")
    if not ran:
        print("error: nothing to check; pass --log, --fuzz, or --tree-fuzz", file=sys.stderr)
        return 2
    if problems:
        for line in problems:
            print(f"VIOLATION: {line}")
        return 1
    print("ok")
    return 0


def make_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="kvsim",
        description="Chunked KV-cache memory simulator and allocator testbed.",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    replay = sub.add_parser("replay", help="replay a trace and write reports")
    replay.add_argument("--trace", required=True, help="JSONL trace file")
    replay.add_argument(
        "--allocator",
        default="vtensor",
        choices=list(ALLOCATORS) + ["all"],
    )
    replay.add_argument("--out-dir", default=".", help="directory for CSV/JSON reports")
    _add_config_flags(replay)
    replay.set_defaults(func=cmd_replay)

    gen = sub.add_parser("gen-trace", help="emit a deterministic workload trace")
    gen.add_argument("--scenario", required=True, choices=SCENARIOS)
    gen.add_argument("--seed", type=int, default=0)
    gen.add_argument("--out", default="-", help="output path, - for stdout")
    gen.add_argument("--requests", type=int, default=8)
    gen.add_argument("--conversations", type=int, default=4)
    gen.add_argument("--turns", type=int, default=2)
    gen.add_argument("--arrival-gap", type=int, default=0)
    gen.set_defaults(func=cmd_gen_trace)

    check = sub.add_parser("check", help="run invariant oracles")
    check.add_argument("--log", help="JSONL op log to replay")
    check.add_argument("--fuzz", type=int, default=0, help="random lifecycle steps")
    check.add_argument("--tree-fuzz", type=int, default=0, help="radix oracle workloads")
    check.add_argument("--seed", type=int, default=0)
    check.set_defaults(func=cmd_check)

    return parser


def main(argv: list[str] | None = None) -> int:
    parser = make_parser()
    args = parser.parse_args(argv)
    return args.func(args)


if __name__ == "__main__":
    sys.exit(main())
