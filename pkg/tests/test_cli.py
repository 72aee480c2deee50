import csv
import io
import json

import numpy as np
import pytest

from ragged_attn import cli
from ragged_attn.core import RaggedQKV, TileConfig, load_tensor
from ragged_attn.pipeline import forward_ragged, load_weights
from ragged_attn.pruning import PruneSpec
from ragged_attn.ragged import inject_fault, ragged_attention_forward

TABLE1_TRITON = [0.041, 0.040, 0.052, 0.041, 0.105, 0.041, 0.042, 0.207, 0.065, 0.040]
FAST = ["--warmup", "0", "--iters", "1"]


def run(capsys, *argv):
    code = cli.main(list(argv))
    out = capsys.readouterr()
    return code, out.out, out.err


def small_check_config(tmp_path):
    path = tmp_path / "check.json"
    path.write_text(json.dumps({"check": {"seeds": 2, "oracle_cases": 5, "batch_size": 4}}))
    return str(path)


def test_check_defaults_pass(capsys):
    code, out, _ = run(capsys, "check")
    assert code == 0
    assert "Max |d|" in out and "Mean |d|" in out and "Preds Match" in out
    for method in ("threshold_l2", "random", "random (jitter"):
        assert method in out
    assert "100% ok" in out


def test_check_detects_broken_kernel(capsys, tmp_path):
    with inject_fault("skip_normalize"):
        code, out, _ = run(capsys, "check", "--config", small_check_config(tmp_path))
    assert code == 1
    assert "FAILED" in out and "seed" in out and "ratio" in out


def _rows(path):
    with open(path) as fh:
        return list(csv.DictReader(fh))


def test_bench_grid_writes_24_rows(capsys, tmp_path):
    code, out, _ = run(capsys, "bench", "--grid", "bs=4,16,32,64", "ratio=0,0.5,0.8", "backend=ragged,padded",
                       "--out", str(tmp_path), *FAST)
    assert code == 0
    rows = _rows(tmp_path / "kernel.csv")
    assert len(rows) == 24
    assert list(rows[0]) == cli.bench.CSV_COLUMNS
    assert "kernel sweep" in out


def test_bench_include_pack_and_svg(capsys, tmp_path):
    code, _, _ = run(capsys, "bench", "--bs", "2", "--ratio", "0.5", "--backend", "ragged", "--include-pack",
                     "--format", "csv,svg", "--out", str(tmp_path), *FAST)
    assert code == 0
    assert _rows(tmp_path / "kernel.csv")[0]["include_pack"] == "1"
    assert (tmp_path / "kernel.svg").read_bytes().lstrip().startswith(b"<?xml")


def test_bench_op_counter_deterministic(capsys, tmp_path):
    counts = []
    for name in ("a", "b"):
        run(capsys, "bench", "--bs", "2,4", "--ratio", "0,0.8", "--backend", "ragged", "--tile-m", "8",
            "--tile-n", "8", "--seed", "3", "--out", str(tmp_path / name), *FAST)
        counts.append([r["op_counter"] for r in _rows(tmp_path / name / "kernel.csv")])
    assert counts[0] == counts[1]


def test_bench_pipeline_mode(capsys, tmp_path):
    code, out, _ = run(capsys, "bench", "--mode", "pipeline", "--bs", "2", "--ratio", "0,0.5",
                       "--backend", "ragged,padded,naive", "--out", str(tmp_path), *FAST)
    assert code == 0
    rows = _rows(tmp_path / "pipeline.csv")
    assert len(rows) == 4 and all(float(r["images_per_s"]) > 0 for r in rows)


def _write_records(path, means, backend="triton"):
    path.write_text("backend,mean_ms\n" + "".join(f"{backend},{m}\n" for m in means))
    return str(path)


def test_analyze_published_triton_column(capsys, tmp_path):
    code, out, _ = run(capsys, "analyze", _write_records(tmp_path / "t.csv", TABLE1_TRITON))
    assert code == 0
    assert "floor 0.04 ms" in out
    line = next(l for l in out.splitlines() if "0.105" in l)
    assert line.rstrip().endswith("38%")


def test_analyze_paper_data_flag_and_output(capsys, tmp_path):
    path = _write_records(tmp_path / "t.csv", TABLE1_TRITON)
    code, _, _ = run(capsys, "analyze", "--paper-data", path, "--out", str(tmp_path / "o"))
    assert code == 0
    rows = _rows(tmp_path / "o" / "overhead.csv")
    assert float(rows[4]["overhead_pct"]) == pytest.approx(100 * 0.040 / 0.105, rel=1e-5)


def test_analyze_single_row(capsys, tmp_path):
    code, out, _ = run(capsys, "analyze", _write_records(tmp_path / "one.csv", [0.3]))
    assert code == 0 and "100%" in out


def test_analyze_builtin_table(capsys):
    code, out, _ = run(capsys, "analyze", "--published-a100")
    assert code == 0
    assert "fa2_varlen       floor 0.062 ms" in out
    assert "triton_ragged    floor 0.04 ms" in out


def test_analyze_errors(capsys, tmp_path):
    bad = tmp_path / "bad.csv"
    bad.write_text("backend,mean_ms\nragged,x\n")
    code, _, err = run(capsys, "analyze", str(bad))
    assert code == 2 and "line 2, column mean_ms" in err
    code, _, err = run(capsys, "analyze", str(tmp_path / "missing.csv"))
    assert code == 3
    code, _, _ = run(capsys, "analyze")
    assert code == 2


def test_help_lists_every_flag(capsys):
    code, out, _ = run(capsys, "bench", "--help")
    assert code == 0
    for flag in ["--config", "--preset", "--ratio", "--bs", "--backend", "--warmup", "--iters", "--reps",
                 "--workers", "--tile-m", "--tile-n", "--seed", "--out", "--format", "--include-pack",
                 "--floor", "--paper-data"]:
        assert flag in out, flag
    assert "RAGGED_ATTN_WORKERS" in out


def test_usage_errors(capsys, tmp_path):
    assert run(capsys, "bench", "--backend", "flash")[0] == 2
    assert run(capsys, "bench", "--format", "png")[0] == 2
    assert run(capsys, "frobnicate")[0] == 2
    cfg = tmp_path / "c.json"
    cfg.write_text(json.dumps({"seed": 1, "colour": "red"}))
    code, _, err = run(capsys, "check", "--config", str(cfg))
    assert code == 2 and "colour" in err
    cfg.write_text(json.dumps({"grid": {"batch_sizes": [2], "speed": 9}}))
    assert run(capsys, "check", "--config", str(cfg))[0] == 2
    cfg.write_text("{not json")
    assert run(capsys, "check", "--config", str(cfg))[0] == 2


def test_flags_override_config(tmp_path, monkeypatch):
    cfg_path = tmp_path / "c.json"
    cfg_path.write_text(json.dumps({"seed": 4, "preset": "deit_tiny", "grid": {"batch_sizes": [8], "ratios": [0.3]},
                                    "tiles": {"block_m": 16, "block_n": 16, "block_d": 64}}))
    args = cli.build_parser().parse_args(["bench", "--config", str(cfg_path), "--seed", "9", "--bs", "1,2",
                                          "--tile-n", "32"])
    cfg = cli.resolve_config(args)
    assert cfg.seed == 9 and cfg.preset == "deit_tiny"
    assert cfg.grid.batch_sizes == [1, 2] and cfg.grid.ratios == [0.3]
    assert cfg.tiles == TileConfig(16, 32, 64)


def test_workers_default_from_env(monkeypatch):
    monkeypatch.setenv("RAGGED_ATTN_WORKERS", "3")
    cfg = cli.resolve_config(cli.build_parser().parse_args(["bench"]))
    assert cfg.grid.workers == [3]


def test_run_config_json_round_trip():
    cfg = cli.RunConfig(seed=5, prune=PruneSpec("random", 0.5, 2))
    back = cli.RunConfig.from_dict(json.loads(json.dumps(cfg.to_dict())))
    assert back == cfg


def test_gen_fixtures(capsys, tmp_path):
    code, _, _ = run(capsys, "gen-fixtures", "--out", str(tmp_path), "--bs", "3", "--ratio", "0.5", "--seed", "2")
    assert code == 0
    meta = json.loads((tmp_path / "manifest.json").read_text())
    for name in meta["files"]:
        assert (tmp_path / name).exists()
    cu = load_tensor(tmp_path / "cu_seqlens.rgi")
    qkv = RaggedQKV(*(load_tensor(tmp_path / f"{n}.rgt") for n in "qkv"), cu)
    assert np.array_equal(ragged_attention_forward(qkv), load_tensor(tmp_path / "attn_out.rgt"))
    cfg = cli.RunConfig().model_config()
    weights = load_weights(tmp_path / "weights.bin", cfg)
    logits, mask = forward_ragged(cfg, weights, load_tensor(tmp_path / "input.rgt"), PruneSpec(**meta["prune"]))
    assert np.array_equal(logits, load_tensor(tmp_path / "logits.rgt"))
    assert np.array_equal(mask.mask, load_tensor(tmp_path / "keep_mask.rgi").astype(bool))
