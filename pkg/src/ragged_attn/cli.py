"""Command-line entry point: check, bench, analyze, gen-fixtures."""

from __future__ import annotations

import argparse
import dataclasses
import json
import logging
import os
import sys
from dataclasses import dataclass, field
from importlib import resources
from pathlib import Path

import numpy as np

from . import bench
from .core import DTYPE, ModelConfig, RaggedQKV, TileConfig, make_config, save_tensor
from .packing import compute_pack_plan, pack_rows
from .pipeline import forward_padded, forward_ragged, init_weights, save_weights
from .pruning import PruneSpec
from .ragged import default_workers, ragged_attention_forward
from .reference import naive_attention

log = logging.getLogger("ragged_attn")

EXIT_OK, EXIT_TOLERANCE, EXIT_USAGE, EXIT_IO = 0, 1, 2, 3

ORACLE_TOL = 1e-5
LOGIT_TOL = 1e-4


class ConfigError(ValueError):
    pass


def _strict(cls, data: dict, where: str):
    if not isinstance(data, dict):
        raise ConfigError(f"{where}: expected an object")
    names = {f.name for f in dataclasses.fields(cls)}
    unknown = set(data) - names
    if unknown:
        raise ConfigError(f"{where}: unknown key(s) {sorted(unknown)}")
    return cls(**data)


@dataclass
class GridSpec:
    batch_sizes: list = field(default_factory=lambda: [4, 16, 32, 64])
    ratios: list = field(default_factory=lambda: [0.0, 0.5, 0.8])
    backends: list = field(default_factory=lambda: ["ragged", "padded_masked"])
    workers: list = field(default_factory=lambda: [default_workers()])


@dataclass
class TimingSpec:
    warmup: int = bench.DEFAULT_WARMUP
    iters: int = bench.DEFAULT_ITERS
    reps: int = 1


@dataclass
class CheckSpec:
    seeds: int = 20
    ratios: list = field(default_factory=lambda: [0.25, 0.5, 0.8])
    batch_size: int = 8
    oracle_cases: int = 50
    jitter: float = 0.2


@dataclass
class RunConfig:
    preset: str = "desk"
    model: dict | None = None
    prune: PruneSpec = field(default_factory=PruneSpec)
    tiles: TileConfig = field(default_factory=lambda: TileConfig(64, 64, 64))
    grid: GridSpec = field(default_factory=GridSpec)
    timing: TimingSpec = field(default_factory=TimingSpec)
    check: CheckSpec = field(default_factory=CheckSpec)
    mode: str = "kernel"
    seed: int = 0
    out: str = "bench_out"
    formats: list = field(default_factory=lambda: ["csv"])
    include_pack: bool = False
    floor: str = "min"
    paper_data: str | None = None

    @classmethod
    def from_dict(cls, data: dict) -> "RunConfig":
        if not isinstance(data, dict):
            raise ConfigError("config: expected a JSON object")
        nested = {"prune": PruneSpec, "tiles": TileConfig, "grid": GridSpec, "timing": TimingSpec, "check": CheckSpec}
        kwargs = {}
        names = {f.name for f in dataclasses.fields(cls)}
        for key, value in data.items():
            if key not in names:
                raise ConfigError(f"config: unknown key {key!r}")
            kwargs[key] = _strict(nested[key], value, f"config.{key}") if key in nested else value
        try:
            cfg = cls(**kwargs)
            cfg.model_config()
        except (TypeError, ValueError) as exc:
            raise ConfigError(f"config: {exc}") from None
        return cfg

    def to_dict(self) -> dict:
        out = dataclasses.asdict(self)
        out["prune"] = self.prune.to_dict()
        return out

    def model_config(self) -> ModelConfig:
        if self.model is not None:
            return _strict(ModelConfig, self.model, "config.model")
        return make_config(self.preset)


# ---------------------------------------------------------------------------
# argument parsing


def _floats(text):
    return [float(x) for x in text.split(",") if x]


def _ints(text):
    return [int(x) for x in text.split(",") if x]


def _names(text):
    return [x for x in text.split(",") if x]


def _common_flags() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(add_help=False)
    g = p.add_argument_group("run configuration (flags override --config)")
    g.add_argument("--config", metavar="PATH", help="JSON run config; unknown keys are rejected")
    g.add_argument("--preset", help="model preset: desk, deit_tiny, deit_small, deit_base")
    g.add_argument("--ratio", type=_floats, help="comma list of prune ratios")
    g.add_argument("--bs", type=_ints, help="comma list of batch sizes")
    g.add_argument("--backend", type=_names, help="comma list: ragged, padded (padded_masked), naive")
    g.add_argument("--method", help="pruning method: threshold_l2, topk_l2, random")
    g.add_argument("--warmup", type=int, help="untimed warmup calls per cell (default 10)")
    g.add_argument("--iters", type=int, help="timed calls per cell and repetition (default 500)")
    g.add_argument("--reps", type=int, help="repetitions; cell order is reshuffled each time")
    g.add_argument("--workers", type=_ints, help="comma list of kernel worker counts (env RAGGED_ATTN_WORKERS)")
    g.add_argument("--tile-m", type=int, help="query tile rows B_M")
    g.add_argument("--tile-n", type=int, help="key/value tile rows B_N")
    g.add_argument("--seed", type=int, help="random seed")
    g.add_argument("--out", metavar="DIR", help="output directory")
    g.add_argument("--format", type=_names, help="report formats: csv, svg (comma list)")
    g.add_argument("--include-pack", action="store_true", default=None,
                   help="time pack-plan construction and packing too")
    g.add_argument("--floor", choices=["min", "regress"], help="dispatch floor estimator")
    g.add_argument("--paper-data", metavar="CSV", help="externally measured latencies to decompose")
    g.add_argument("--mode", choices=["kernel", "pipeline", "both"], help="bench: what to sweep")
    g.add_argument("--grid", nargs="+", metavar="KEY=V1,V2",
                   help="grid shorthand, keys bs, ratio, backend, workers")
    g.add_argument("-v", "--verbose", action="store_true", help="debug logging")
    return p


def build_parser() -> argparse.ArgumentParser:
    common = _common_flags()
    parser = argparse.ArgumentParser(
        prog="ragged-attn",
        description="Ragged attention for token-pruned transformers: equivalence checks, sweeps, overhead analysis.",
    )
    sub = parser.add_subparsers(dest="command", required=True)
    sub.add_parser("check", parents=[common], help="oracle and padded/ragged equivalence suites")
    sub.add_parser("bench", parents=[common], help="kernel and/or pipeline latency sweeps")
    a = sub.add_parser("analyze", parents=[common], help="dispatch-floor decomposition of a bench CSV")
    a.add_argument("records", nargs="?", help="CSV in the bench schema (or use --paper-data)")
    a.add_argument("--published-a100", action="store_true",
                   help="use the bundled A100 latency table")
    sub.add_parser("gen-fixtures", parents=[common], help="write RGT1/RGI1 fixtures for cross-checking")
    return parser


def _apply_grid(cfg: RunConfig, items):
    keys = {"bs": ("batch_sizes", _ints), "ratio": ("ratios", _floats),
            "backend": ("backends", _names), "workers": ("workers", _ints)}
    for item in items:
        key, sep, value = item.partition("=")
        if not sep or key not in keys:
            raise ConfigError(f"--grid: expected one of {sorted(keys)}=v1,v2, got {item!r}")
        attr, conv = keys[key]
        setattr(cfg.grid, attr, conv(value))


def resolve_config(args) -> RunConfig:
    if args.config:
        try:
            with open(args.config) as fh:
                cfg = RunConfig.from_dict(json.load(fh))
        except json.JSONDecodeError as exc:
            raise ConfigError(f"{args.config}: {exc}") from None
    else:
        cfg = RunConfig()
    if args.preset:
        cfg.preset, cfg.model = args.preset, None
    if args.grid:
        _apply_grid(cfg, args.grid)
    if args.bs:
        cfg.grid.batch_sizes = args.bs
    if args.ratio:
        cfg.grid.ratios = args.ratio
        cfg.check.ratios = args.ratio
    if args.backend:
        cfg.grid.backends = args.backend
    if args.workers:
        cfg.grid.workers = args.workers
    for name in ("warmup", "iters", "reps"):
        if getattr(args, name) is not None:
            setattr(cfg.timing, name, getattr(args, name))
    if args.tile_m or args.tile_n:
        cfg.tiles = TileConfig(args.tile_m or cfg.tiles.block_m, args.tile_n or cfg.tiles.block_n, cfg.tiles.block_d)
    if args.method:
        cfg.prune = dataclasses.replace(cfg.prune, method=args.method)
    for name in ("seed", "out", "floor", "paper_data", "mode", "include_pack"):
        if getattr(args, name) is not None:
            setattr(cfg, name, getattr(args, name))
    if args.format:
        cfg.formats = args.format
    bad = set(cfg.formats) - {"csv", "svg"}
    if bad:
        raise ConfigError(f"unknown format(s) {sorted(bad)}")
    cfg.grid.backends = [bench.canonical_backend(b) for b in cfg.grid.backends]
    cfg.model_config()
    return cfg


# ---------------------------------------------------------------------------
# subcommands


def _oracle_suite(cfg: RunConfig, out):
    rng = np.random.default_rng(cfg.seed)
    worst, failures = 0.0, []
    for case in range(cfg.check.oracle_cases):
        B = int(rng.integers(1, 9))
        H = int(rng.choice([1, 4]))
        d = int(rng.choice([8, 16, 64]))
        tiles = TileConfig(int(rng.choice([8, 16, 32, 64])), int(rng.choice([8, 16, 32, 64])), 64)
        lengths = rng.integers(1, 65, size=B)
        cu = np.concatenate([[0], np.cumsum(lengths)])
        q, k, v = (rng.standard_normal((cu[-1], H, d)).astype(DTYPE) for _ in range(3))
        got = ragged_attention_forward(RaggedQKV(q, k, v, cu), tiles)
        err = 0.0
        for i in range(B):
            s, e = cu[i], cu[i + 1]
            for h in range(H):
                err = max(err, float(np.abs(got[s:e, h] - naive_attention(q[s:e, h], k[s:e, h], v[s:e, h])).max()))
        worst = max(worst, err)
        if err > ORACLE_TOL:
            failures.append(f"oracle case {case} (seed {cfg.seed}, B={B}, H={H}, d={d}, tiles {tiles.label()}): "
                            f"max |delta| {err:.3g} > {ORACLE_TOL:g}")
    print(f"ragged kernel vs naive oracle: {cfg.check.oracle_cases} cases, max |delta| = {worst:.3g}", file=out)
    return failures


def _equivalence_suite(cfg: RunConfig, out):
    config = cfg.model_config()
    methods = [
        ("threshold_l2", PruneSpec("threshold_l2")),
        ("random", PruneSpec("random")),
        (f"random (jitter {cfg.check.jitter:g})", PruneSpec("random", jitter=cfg.check.jitter)),
    ]
    failures = []
    print(f"\n{'Pruning method':<24}{'Max |d|':>10}{'Mean |d|':>10}{'Preds Match':>13}", file=out)
    for label, base in methods:
        worst, total, count, agree, images = 0.0, 0.0, 0, 0, 0
        for seed in range(cfg.seed, cfg.seed + cfg.check.seeds):
            weights = init_weights(config, seed)
            x = np.random.default_rng(seed).standard_normal(
                (cfg.check.batch_size, config.seq_len, config.embed_dim)).astype(DTYPE)
            for ratio in cfg.check.ratios:
                spec = dataclasses.replace(base, ratio=ratio, seed=seed)
                a, mask_a = forward_padded(config, weights, x, spec)
                b, mask_b = forward_ragged(config, weights, x, spec, cfg.tiles)
                diff = np.abs(a - b)
                err = float(diff.max())
                match = a.argmax(axis=1) == b.argmax(axis=1)
                worst = max(worst, err)
                total += float(diff.sum())
                count += diff.size
                agree += int(match.sum())
                images += match.size
                where = f"{label}, seed {seed}, ratio {ratio}, preset {cfg.preset}"
                if not np.array_equal(mask_a.mask, mask_b.mask):
                    failures.append(f"{where}: keep masks differ")
                if err > LOGIT_TOL:
                    failures.append(f"{where}: max |logit delta| {err:.3g} > {LOGIT_TOL:g}")
                if not match.all():
                    failures.append(f"{where}: {int((~match).sum())} prediction(s) differ")
        rate = agree / images
        print(f"{label:<24}{worst:>10.2e}{total / count:>10.2e}{rate:>12.0%}{' ok' if rate == 1 else ' FAIL'}", file=out)
    return failures


def cmd_check(cfg: RunConfig, out=None) -> int:
    out = out or sys.stdout
    failures = _oracle_suite(cfg, out) + _equivalence_suite(cfg, out)
    if failures:
        print("\nFAILED:", file=out)
        for f in failures:
            print(f"  {f}", file=out)
        return EXIT_TOLERANCE
    print("\nall tolerances met", file=out)
    return EXIT_OK


def _write_reports(records, report, cfg: RunConfig, stem: str, out):
    outdir = Path(cfg.out)
    outdir.mkdir(parents=True, exist_ok=True)
    written = []
    for fmt in cfg.formats:
        path = outdir / f"{stem}.{fmt}"
        path.write_bytes(bench.emit_report(records, report, fmt))
        written.append(str(path))
    print(f"wrote {', '.join(written)}", file=out)


def cmd_bench(cfg: RunConfig, out=None) -> int:
    out = out or sys.stdout
    config = cfg.model_config()
    modes = ["kernel", "pipeline"] if cfg.mode == "both" else [cfg.mode]
    g, t = cfg.grid, cfg.timing
    status = EXIT_OK
    for mode in modes:
        try:
            if mode == "kernel":
                records = bench.sweep_kernel(g.batch_sizes, g.ratios, g.backends, config, cfg.tiles, cfg.seed,
                                             g.workers, t.warmup, t.iters, t.reps, cfg.include_pack)
            else:
                backends = [b for b in g.backends if b in bench.PIPELINE_BACKENDS]
                records = bench.sweep_pipeline(g.batch_sizes, g.ratios, backends, config, cfg.prune, cfg.seed,
                                               cfg.tiles, g.workers, None, t.warmup, t.iters, t.reps,
                                               cfg.include_pack)
        except MemoryError as exc:
            log.warning("%s sweep aborted: %s", mode, exc)
            status = EXIT_IO
            continue
        report = bench.decompose_overhead(records, cfg.floor)
        print(f"\n{mode} sweep ({config.seq_len} tokens/image, tiles {cfg.tiles.label()}):", file=out)
        print(bench.format_table(report.records), file=out)
        _write_reports(records, report, cfg, mode, out)
    return status


def _load_records(args, cfg: RunConfig):
    if getattr(args, "published_a100", False):
        text = resources.files("ragged_attn").joinpath("data/a100_published_latency.csv").read_text()
        return bench.parse_csv(text), "bundled A100 table"
    path = args.records or cfg.paper_data
    if not path:
        raise ConfigError("analyze needs a CSV path, --paper-data or --published-a100")
    with open(path, "rb") as fh:
        return bench.parse_csv(fh.read()), path


def cmd_analyze(args, cfg: RunConfig, out=None) -> int:
    out = out or sys.stdout
    records, source = _load_records(args, cfg)
    report = bench.decompose_overhead(records, cfg.floor)
    print(f"overhead decomposition of {source} (floor = {report.mode})", file=out)
    for backend, floor in report.floors_ms.items():
        extra = f", slope {report.slopes[backend]:.3g} ms/tile-pair" if backend in report.slopes else ""
        print(f"  {backend:<16} floor {floor:.4g} ms{extra}", file=out)
    print(f"\n{'backend':<16}{'BS':>5}{'prune':>8}{'total ms':>10}{'overhead':>10}", file=out)
    for r in report.records:
        ratio = "" if np.isnan(r.prune_ratio) else f"{r.prune_ratio:.0%}"
        print(f"{r.backend:<16}{r.batch_size:>5}{ratio:>8}{r.mean_ms:>10.4g}{r.overhead_pct:>9.0f}%", file=out)
    if args.out:
        _write_reports(report.records, report, dataclasses.replace(cfg, formats=["csv"]), "overhead", out)
    return EXIT_OK


def cmd_gen_fixtures(cfg: RunConfig, out=None) -> int:
    """Random ragged q/k/v plus expected outputs, and a pipeline case with weights."""
    out = out or sys.stdout
    config = cfg.model_config()
    rng = np.random.default_rng(cfg.seed)
    outdir = Path(cfg.out)
    outdir.mkdir(parents=True, exist_ok=True)
    lengths = rng.integers(1, 65, size=max(cfg.grid.batch_sizes[0], 1))
    cu = np.concatenate([[0], np.cumsum(lengths)]).astype(np.int64)
    shape = (int(cu[-1]), config.heads, config.head_dim)
    q, k, v = (rng.standard_normal(shape).astype(DTYPE) for _ in range(3))
    attn = ragged_attention_forward(RaggedQKV(q, k, v, cu), cfg.tiles)
    files = {"q.rgt": q, "k.rgt": k, "v.rgt": v, "cu_seqlens.rgi": cu, "attn_out.rgt": attn}

    B = cfg.grid.batch_sizes[0]
    ratio = cfg.grid.ratios[-1]
    spec = dataclasses.replace(cfg.prune, ratio=ratio, seed=cfg.seed)
    weights = init_weights(config, cfg.seed)
    x = rng.standard_normal((B, config.seq_len, config.embed_dim)).astype(DTYPE)
    logits, mask = forward_ragged(config, weights, x, spec, cfg.tiles)
    files.update({"input.rgt": x, "keep_mask.rgi": mask.mask.astype(np.int64), "logits.rgt": logits})
    for name, arr in files.items():
        save_tensor(outdir / name, arr)
    save_weights(outdir / "weights.bin", weights)
    meta = {"model": config.to_dict(), "prune": spec.to_dict(), "tiles": dataclasses.asdict(cfg.tiles),
            "seed": cfg.seed, "files": sorted(files) + ["weights.bin"]}
    (outdir / "manifest.json").write_text(json.dumps(meta, indent=2))
    print(f"wrote {len(files) + 2} files to {outdir}", file=out)
    return EXIT_OK


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        cfg = resolve_config(args)
        if args.command == "check":
            return cmd_check(cfg)
        if args.command == "bench":
            return cmd_bench(cfg)
        if args.command == "analyze":
            return cmd_analyze(args, cfg)
        return cmd_gen_fixtures(cfg)
    except bench.CsvFormatError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (ConfigError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except OSError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_IO


if __name__ == "__main__":
    sys.exit(main())
