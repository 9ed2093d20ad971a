"""CLI surface: replay, gen-trace, check, and config layering."""

import json

import pytest

from kvsim import TraceRequest, dump_trace, load_trace
from kvsim.cli import build_config, main, make_parser

TINY_GEOMETRY = {"layers": 1, "kv_heads": 1, "head_dim": 8, "elem_bytes": 2}


@pytest.fixture
def tiny_cfg_file(tmp_path):
    path = tmp_path / "tiny.json"
    path.write_text(json.dumps({
        "capacity": "64KiB",
        "chunk": "128B",
        "weights": 0,
        "max_seq": 64,
        "initial_alloc": 8,
        "geometry": TINY_GEOMETRY,
    }))
    return path


@pytest.fixture
def tiny_trace_file(tmp_path):
    path = tmp_path / "trace.jsonl"
    dump_trace(
        [
            TraceRequest(id="a", arrival_step=0, prompt_len=8, output_len=2, seq=0),
            TraceRequest(id="b", arrival_step=0, prompt_len=8, output_len=2, seq=1),
        ],
        path,
    )
    return path


class TestGenTrace:
    def test_writes_file(self, tmp_path):
        out = tmp_path / "mt.jsonl"
        rc = main([
            "gen-trace", "--scenario", "multi_turn", "--out", str(out),
            "--conversations", "2", "--turns", "2",
        ])
        assert rc == 0
        assert len(load_trace(out)) == 4

    def test_stdout_jsonl(self, capsys):
        rc = main(["gen-trace", "--scenario", "single_gen", "--requests", "2"])
        assert rc == 0
        lines = capsys.readouterr().out.strip().splitlines()
        assert len(lines) == 2
        assert json.loads(lines[0])["id"] == "sg000"


class TestReplay:
    def test_writes_csv_and_summary(self, tmp_path, tiny_cfg_file, tiny_trace_file):
        out_dir = tmp_path / "out"
        rc = main([
            "replay", "--trace", str(tiny_trace_file),
            "--config", str(tiny_cfg_file), "--out-dir", str(out_dir),
        ])
        assert rc == 0
        csv_text = (out_dir / "report_vtensor.csv").read_text()
        assert csv_text.startswith("step,created_bytes,")
        summary = json.loads((out_dir / "summary_vtensor.json").read_text())
        assert summary["allocator"] == "vtensor"
        assert summary["requests_finished"] == 2
        assert summary["max_seq_len"] == 64

    def test_all_allocators(self, tmp_path, tiny_cfg_file, tiny_trace_file, capsys):
        out_dir = tmp_path / "out"
        rc = main([
            "replay", "--trace", str(tiny_trace_file), "--allocator", "all",
            "--config", str(tiny_cfg_file), "--out-dir", str(out_dir),
        ])
        assert rc == 0
        for name in ("native", "paged", "vtensor"):
            assert (out_dir / f"report_{name}.csv").exists()
            assert (out_dir / f"summary_{name}.json").exists()
        out = capsys.readouterr().out
        assert "allocator" in out and "mean_free" in out

    def test_malformed_trace_names_line(self, tmp_path, capsys):
        bad = tmp_path / "bad.jsonl"
        bad.write_text(
            '{"id": "a", "arrival_step": 0, "prompt_len": 1, "output_len": 1}\n'
            "{broken\n"
        )
        rc = main(["replay", "--trace", str(bad)])
        assert rc == 2
        assert ":2:" in capsys.readouterr().err

    def test_missing_trace_file(self, tmp_path, capsys):
        rc = main(["replay", "--trace", str(tmp_path / "nope.jsonl")])
        assert rc == 2
        assert "cannot read trace" in capsys.readouterr().err

    def test_infeasible_trace(self, tmp_path, tiny_cfg_file, capsys):
        trace = tmp_path / "big.jsonl"
        dump_trace(
            [TraceRequest(id="big", arrival_step=0, prompt_len=60, output_len=8)],
            trace,
        )
        rc = main([
            "replay", "--trace", str(trace), "--config", str(tiny_cfg_file),
        ])
        assert rc == 1
        assert "infeasible" in capsys.readouterr().err


class TestCheck:
    def test_clean_log(self, tmp_path, capsys):
        log = tmp_path / "ops.jsonl"
        log.write_text("\n".join([
            '{"op": "p_alloc", "n": 2}',
            '{"op": "v_alloc"}',
            '{"op": "map", "space": 0, "chunks": [0, 1]}',
            '{"op": "write", "space": 0, "tokens": [1, 2, 3, 4, 5, 6]}',
            '{"op": "check"}',
        ]) + "\n")
        rc = main(["check", "--log", str(log)])
        assert rc == 0
        assert "ok" in capsys.readouterr().out

    def test_injected_fault_is_reported(self, tmp_path, capsys):
        # raw_map bypasses pool bookkeeping; the scanner must notice the
        # device mapping that no referrer accounts for.
        log = tmp_path / "ops.jsonl"
        log.write_text("\n".join([
            '{"op": "p_alloc", "n": 1}',
            '{"op": "v_alloc"}',
            '{"op": "raw_map", "space": 0, "page": 0, "chunk": 0}',
        ]) + "\n")
        rc = main(["check", "--log", str(log)])
        assert rc == 1
        assert "VIOLATION" in capsys.readouterr().out

    def test_small_fuzz_budgets(self, capsys):
        rc = main(["check", "--fuzz", "60", "--tree-fuzz", "5", "--seed", "1"])
        assert rc == 0
        out = capsys.readouterr().out
        assert "fuzz: 60 steps" in out
        assert "ok" in out

    def test_nothing_to_do(self, capsys):
        rc = main(["check"])
        assert rc == 2
        assert "nothing to check" in capsys.readouterr().err


class TestConfigLayering:
    def parse(self, *extra):
        return make_parser().parse_args(["replay", "--trace", "x.jsonl", *extra])

    def test_defaults(self):
        cfg = build_config(self.parse())
        assert cfg.capacity_bytes == 80 * 1024**3
        assert cfg.max_seq_len == 4096

    def test_file_then_env_then_flag(self, tmp_path, monkeypatch):
        cfg_file = tmp_path / "c.json"
        cfg_file.write_text(json.dumps({"max_seq": 16, "initial_alloc": 8}))
        assert build_config(self.parse("--config", str(cfg_file))).max_seq_len == 16
        monkeypatch.setenv("KVSIM_MAX_SEQ", "32")
        assert build_config(self.parse("--config", str(cfg_file))).max_seq_len == 32
        args = self.parse("--config", str(cfg_file), "--max-seq", "64")
        assert build_config(args).max_seq_len == 64

    def test_size_suffixes_on_flags(self):
        cfg = build_config(self.parse(
            "--capacity", "1GiB", "--chunk", "2MiB", "--weights", "512MiB",
        ))
        assert cfg.capacity_bytes == 1024**3
        assert cfg.chunk_size_bytes == 2 * 1024**2
        assert cfg.weights_bytes == 512 * 1024**2

    def test_geometry_from_file(self, tiny_cfg_file):
        cfg = build_config(self.parse("--config", str(tiny_cfg_file)))
        assert cfg.bytes_per_token == 32
        assert cfg.tokens_per_chunk == 4

    def test_evict_prefix_flag(self):
        assert build_config(self.parse()).evict_prefix_on_empty is False
        cfg = build_config(self.parse("--evict-prefix"))
        assert cfg.evict_prefix_on_empty is True

    def test_unknown_file_setting_rejected(self, tmp_path):
        cfg_file = tmp_path / "c.json"
        cfg_file.write_text(json.dumps({"page_size": 4096}))
        with pytest.raises(SystemExit, match="unknown setting"):
            build_config(self.parse("--config", str(cfg_file)))
