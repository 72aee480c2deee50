"""Timing harness, kernel/pipeline sweeps, overhead decomposition, reports."""

from __future__ import annotations

import csv
import io
import itertools
import logging
import math
import random
import time
from dataclasses import dataclass, field, fields, replace

import numpy as np

from .core import DTYPE, KeepMask, ModelConfig, RaggedQKV, TileConfig
from .packing import compute_pack_plan, pack_rows
from .pipeline import (
    ViTWeights, dense_prefix, init_weights, padded_suffix, ragged_suffix,
)
from .pruning import PruneSpec, kept_tokens, make_mask, random_mask
from .ragged import KernelCounter, expected_tile_pairs, ragged_attention_forward
from .reference import naive_attention, padded_masked_attention

log = logging.getLogger(__name__)

DEFAULT_WARMUP = 10
DEFAULT_ITERS = 500
BACKENDS = ("ragged", "padded_masked", "naive")
PIPELINE_BACKENDS = ("ragged", "padded_masked")
ALIASES = {"padded": "padded_masked"}

CSV_COLUMNS = [
    "backend", "batch_size", "prune_ratio", "tokens_per_image", "total_tokens",
    "mean_ms", "p50_ms", "min_ms", "stddev_ms", "images_per_s", "op_counter", "overhead_pct",
]


def canonical_backend(name: str) -> str:
    name = ALIASES.get(name, name)
    if name not in BACKENDS:
        raise ValueError(f"unknown backend {name!r}; expected one of {BACKENDS}")
    return name


@dataclass(frozen=True)
class TimingStats:
    samples_ms: np.ndarray

    @property
    def mean_ms(self) -> float:
        return float(self.samples_ms.mean())

    @property
    def p50_ms(self) -> float:
        return float(np.median(self.samples_ms))

    @property
    def min_ms(self) -> float:
        return float(self.samples_ms.min())

    @property
    def stddev_ms(self) -> float:
        return float(self.samples_ms.std())


def time_op(op, warmup: int = DEFAULT_WARMUP, iters: int = DEFAULT_ITERS, sync=None) -> TimingStats:
    """Run ``op`` ``warmup`` times untimed, then time ``iters`` calls one by one.

    ``sync`` is called on each result inside the timed region so that any
    deferred work is finished before the clock stops.
    """
    if warmup < 0 or iters < 1:
        raise ValueError("need warmup >= 0 and iters >= 1")
    for _ in range(warmup):
        out = op()
        if sync is not None:
            sync(out)
    samples = np.empty(iters)
    clock = time.perf_counter_ns
    for i in range(iters):
        t0 = clock()
        out = op()
        if sync is not None:
            sync(out)
        samples[i] = clock() - t0
    return TimingStats(samples / 1e6)


@dataclass
class TimingRecord:
    backend: str
    batch_size: int
    prune_ratio: float
    tokens_per_image: int | None = None
    total_tokens: int | None = None
    warmup_iters: int | None = None
    timed_iters: int | None = None
    mean_ms: float | None = None
    p50_ms: float | None = None
    min_ms: float | None = None
    stddev_ms: float | None = None
    worker_count: int | None = None
    tile_config: str | None = None
    op_counter: int | None = None
    images_per_s: float | None = None
    overhead_pct: float | None = None
    include_pack: bool = False
    skipped: str | None = None

    def fill_stats(self, stats: TimingStats):
        self.mean_ms, self.p50_ms = stats.mean_ms, stats.p50_ms
        self.min_ms, self.stddev_ms = stats.min_ms, stats.stddev_ms
        self.timed_iters = stats.samples_ms.size


# ---------------------------------------------------------------------------
# sweeps


def _cell_inputs(config: ModelConfig, batch: int, ratio: float, seed: int):
    rng = np.random.default_rng(seed)
    shape = (batch, config.seq_len, config.heads, config.head_dim)
    q, k, v = (rng.standard_normal(shape).astype(DTYPE) for _ in range(3))
    mask = random_mask(batch, config.seq_len, ratio, seed)
    return q, k, v, mask


def _kernel_thunk(backend, q, k, v, mask: KeepMask, tiles, workers, include_pack):
    plan = compute_pack_plan(mask)
    B, S, H, d = q.shape

    if backend == "ragged":
        if include_pack:
            def run():
                p = compute_pack_plan(mask)
                qkv = RaggedQKV(pack_rows(q, p), pack_rows(k, p), pack_rows(v, p), p.cu_seqlens)
                return ragged_attention_forward(qkv, tiles, workers)
        else:
            qkv = RaggedQKV(pack_rows(q, plan), pack_rows(k, plan), pack_rows(v, plan), plan.cu_seqlens)

            def run():
                return ragged_attention_forward(qkv, tiles, workers)
        counter = KernelCounter()
        qkv_c = RaggedQKV(pack_rows(q, plan), pack_rows(k, plan), pack_rows(v, plan), plan.cu_seqlens)
        ragged_attention_forward(qkv_c, tiles, workers, counter=counter)
        return run, counter.tile_pairs

    if backend == "padded_masked":
        valid = mask.mask
        return (lambda: padded_masked_attention(q, k, v, valid)), expected_tile_pairs([S] * B, H, tiles)

    segments = [np.flatnonzero(mask.mask[i]) for i in range(B)]

    def run():
        return [naive_attention(q[i, idx, h], k[i, idx, h], v[i, idx, h])
                for i, idx in enumerate(segments) for h in range(H)]
    return run, expected_tile_pairs(plan.lengths, H, tiles)


def _grid(batch_sizes, ratios, backends, workers):
    backends = [canonical_backend(b) for b in backends]
    cells = list(itertools.product(batch_sizes, ratios, backends, workers))
    if not cells:
        raise ValueError("sweep grid is empty")
    return cells


def _measure(cells, make_thunk, reps, warmup, iters, seed):
    """Time every cell ``reps`` times, shuffling cell order on every repetition."""
    samples = {cell: [] for cell in cells}
    thunks = {}
    records = {}
    for cell in cells:
        try:
            thunks[cell], records[cell] = make_thunk(cell)
        except MemoryError:
            log.warning("cell %s skipped: out of memory", cell)
            b, r, backend, w = cell
            records[cell] = TimingRecord(backend, b, r, worker_count=w, skipped="out of memory")
    order = [c for c in cells if c in thunks]
    shuffler = random.Random(seed)
    for _ in range(reps):
        shuffler.shuffle(order)
        for cell in order:
            try:
                samples[cell].append(time_op(thunks[cell], warmup, iters).samples_ms)
            except MemoryError:
                records[cell].skipped = "out of memory"
                thunks.pop(cell)
                order.remove(cell)
    out = []
    for cell in cells:
        rec = records[cell]
        if rec.skipped is None and samples[cell]:
            rec.fill_stats(TimingStats(np.concatenate(samples[cell])))
            rec.warmup_iters = warmup
            if rec.mean_ms:
                rec.images_per_s = rec.batch_size / (rec.mean_ms / 1e3)
        out.append(rec)
    return out


def sweep_kernel(batch_sizes, ratios, backends, config: ModelConfig, tiles: TileConfig = TileConfig(),
                 seed: int = 0, workers=(1,), warmup: int = DEFAULT_WARMUP, iters: int = DEFAULT_ITERS,
                 reps: int = 1, include_pack: bool = False) -> list[TimingRecord]:
    """Isolated attention latency for every (batch size, ratio, backend, workers) cell.

    Inputs depend only on (seed, batch size, ratio), so every backend in a
    cell sees identical tensors and masks.
    """
    cells = _grid(batch_sizes, ratios, backends, workers)

    def make(cell):
        b, r, backend, w = cell
        q, k, v, mask = _cell_inputs(config, b, r, seed)
        thunk, ops = _kernel_thunk(backend, q, k, v, mask, tiles, w, include_pack)
        kept = kept_tokens(config.seq_len, r)
        rec = TimingRecord(backend, b, r, tokens_per_image=kept, total_tokens=b * kept, worker_count=w,
                           tile_config=tiles.label(), op_counter=int(ops), include_pack=include_pack)
        return thunk, rec

    return _measure(cells, make, reps, warmup, iters, seed)


def sweep_pipeline(batch_sizes, ratios, backends, config: ModelConfig, spec: PruneSpec = PruneSpec(),
                   seed: int = 0, tiles: TileConfig = TileConfig(), workers=(1,), weights: ViTWeights | None = None,
                   warmup: int = DEFAULT_WARMUP, iters: int = DEFAULT_ITERS, reps: int = 1,
                   include_pack: bool = True) -> list[TimingRecord]:
    """End-to-end latency and images/s of the post-prune pipeline.

    The dense prefix is identical for both backends and is computed once
    outside the timed region; what is timed is the prune decision onward.
    ``include_pack=False`` additionally hoists pack-plan construction out.
    """
    weights = init_weights(config, seed) if weights is None else weights
    cells = _grid(batch_sizes, ratios, backends, workers)
    for c in cells:
        if c[2] not in PIPELINE_BACKENDS:
            raise ValueError(f"backend {c[2]!r} has no pipeline implementation")
    prefix_cache = {}

    def make(cell):
        b, r, backend, w = cell
        if b not in prefix_cache:
            rng = np.random.default_rng(seed)
            x = rng.standard_normal((b, config.seq_len, config.embed_dim)).astype(DTYPE)
            prefix_cache[b] = dense_prefix(config, weights, x)
        feats = prefix_cache[b]
        cell_spec = replace(spec, ratio=r)
        mask = make_mask(cell_spec, feats)
        plan = compute_pack_plan(mask)
        counter = None
        if backend == "padded_masked":
            def run():
                return padded_suffix(config, weights, feats, make_mask(cell_spec, feats))
            ops = expected_tile_pairs([config.seq_len] * b, config.heads, tiles) * (config.depth - config.prune_layer + 1)
        else:
            if include_pack:
                def run():
                    p = compute_pack_plan(make_mask(cell_spec, feats))
                    return ragged_suffix(config, weights, feats, p, tiles, w)
            else:
                def run():
                    return ragged_suffix(config, weights, feats, plan, tiles, w)
            counter = KernelCounter()
            ragged_suffix(config, weights, feats, plan, tiles, w, counter)
            ops = counter.tile_pairs
        kept = int(mask.kept_counts.max())
        rec = TimingRecord(backend, b, r, tokens_per_image=kept, total_tokens=int(mask.kept_counts.sum()),
                           worker_count=w, tile_config=tiles.label(), op_counter=int(ops),
                           include_pack=include_pack)
        return run, rec

    return _measure(cells, make, reps, warmup, iters, seed)


# ---------------------------------------------------------------------------
# overhead decomposition


@dataclass
class OverheadReport:
    floors_ms: dict
    records: list
    mode: str = "min"
    slopes: dict = field(default_factory=dict)

    def overhead_pct(self, record: TimingRecord) -> float:
        return record.overhead_pct


def decompose_overhead(records, mode: str = "min") -> OverheadReport:
    """Split each latency into a per-backend floor plus residual compute.

    In ``min`` mode the floor is the smallest mean latency the backend
    showed anywhere in the sweep. ``regress`` fits
    ``mean_ms = floor + slope * op_counter`` by least squares instead.
    Returns copies of the records with ``overhead_pct`` filled in.
    """
    usable = [r for r in records if r.skipped is None and r.mean_ms is not None]
    groups = {}
    for r in usable:
        groups.setdefault(r.backend, []).append(r)
    if not groups:
        raise ValueError("no timed records to decompose")
    floors, slopes = {}, {}
    for backend, recs in groups.items():
        means = np.array([r.mean_ms for r in recs], dtype=float)
        if mode == "min":
            floors[backend] = float(means.min())
        elif mode == "regress":
            ops = np.array([r.op_counter or 0 for r in recs], dtype=float)
            if len(recs) < 2 or np.ptp(ops) == 0:
                floors[backend] = float(means.min())
                slopes[backend] = 0.0
            else:
                slope, intercept = np.polyfit(ops, means, 1)
                floors[backend] = float(min(max(intercept, np.finfo(float).tiny), means.min()))
                slopes[backend] = float(slope)
        else:
            raise ValueError(f"unknown floor mode {mode!r}")
        if floors[backend] <= 0:
            raise ValueError(f"backend {backend!r} has a non-positive floor")
    out = []
    for r in records:
        r = replace(r)
        if r.skipped is None and r.mean_ms is not None:
            r.overhead_pct = min(100.0, 100.0 * floors[r.backend] / r.mean_ms)
        out.append(r)
    return OverheadReport(floors, out, mode, slopes)


# ---------------------------------------------------------------------------
# reports


def _cell(value) -> str:
    if value is None:
        return ""
    if isinstance(value, bool):
        return "1" if value else "0"
    if isinstance(value, float):
        return "" if math.isnan(value) else f"{value:.6g}"
    return str(value)


def emit_csv(records, report: OverheadReport | None = None, include_pack_column: bool | None = None) -> bytes:
    if not records:
        raise ValueError("no records to report")
    if report is not None:
        records = report.records
    if include_pack_column is None:
        include_pack_column = any(r.include_pack for r in records)
    columns = CSV_COLUMNS + (["include_pack"] if include_pack_column else [])
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(columns)
    for r in records:
        writer.writerow([_cell(getattr(r, c)) for c in columns])
    return buf.getvalue().encode()


_INT_FIELDS = {"batch_size", "tokens_per_image", "total_tokens", "op_counter"}


class CsvFormatError(ValueError):
    pass


def parse_csv(data: bytes | str) -> list[TimingRecord]:
    """Read records in the bench CSV schema; only ``backend`` and ``mean_ms`` are required."""
    text = data.decode() if isinstance(data, bytes) else data
    reader = csv.DictReader(io.StringIO(text))
    if reader.fieldnames is None:
        raise CsvFormatError("line 1: empty CSV")
    missing = {"backend", "mean_ms"} - set(reader.fieldnames)
    if missing:
        raise CsvFormatError(f"line 1: missing column(s) {sorted(missing)}")
    unknown = set(reader.fieldnames) - set(CSV_COLUMNS) - {"include_pack"}
    if unknown:
        raise CsvFormatError(f"line 1: unknown column(s) {sorted(unknown)}")
    records = []
    for lineno, row in enumerate(reader, start=2):
        values = {}
        for col, raw in row.items():
            if col is None:
                raise CsvFormatError(f"line {lineno}: more cells than header columns")
            raw = (raw or "").strip()
            if col == "backend":
                if not raw:
                    raise CsvFormatError(f"line {lineno}, column backend: empty")
                values[col] = raw
            elif col == "include_pack":
                values[col] = raw == "1"
            elif raw:
                try:
                    values[col] = int(raw) if col in _INT_FIELDS else float(raw)
                except ValueError:
                    raise CsvFormatError(f"line {lineno}, column {col}: cannot parse {raw!r}") from None
        if "mean_ms" not in values:
            raise CsvFormatError(f"line {lineno}, column mean_ms: empty")
        if values["mean_ms"] <= 0:
            raise CsvFormatError(f"line {lineno}, column mean_ms: must be positive")
        values.setdefault("batch_size", 0)
        values.setdefault("prune_ratio", float("nan"))
        records.append(TimingRecord(**values))
    if not records:
        raise CsvFormatError("no data rows")
    return records


def emit_svg(records, title: str = "Attention latency") -> bytes:
    """Latency vs batch size, one line per (backend, ratio). Self-contained SVG."""
    import matplotlib
    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    series = {}
    for r in records:
        if r.skipped is None and r.mean_ms is not None:
            series.setdefault((r.backend, r.prune_ratio), []).append((r.batch_size, r.p50_ms or r.mean_ms))
    if not series:
        raise ValueError("no timed records to plot")
    plt.rcParams["svg.hashsalt"] = "ragged-attn"
    fig, ax = plt.subplots(figsize=(6.4, 4.0))
    for (backend, ratio), pts in sorted(series.items()):
        pts.sort()
        ax.plot([p[0] for p in pts], [p[1] for p in pts], marker="o",
                linestyle="--" if backend != "ragged" else "-", label=f"{backend} @ {ratio:.0%}")
    ax.set_xlabel("batch size")
    ax.set_ylabel("latency (ms)")
    ax.set_title(title)
    ax.legend(fontsize=7)
    fig.tight_layout()
    buf = io.BytesIO()
    fig.savefig(buf, format="svg", metadata={"Date": None})
    plt.close(fig)
    return buf.getvalue()


def emit_report(records, report: OverheadReport | None = None, format: str = "csv") -> bytes:
    if format == "csv":
        return emit_csv(records, report)
    if format == "svg":
        return emit_svg(report.records if report is not None else records)
    raise ValueError(f"unknown report format {format!r}")


def format_table(records) -> str:
    head = f"{'backend':<14}{'BS':>5}{'prune':>7}{'tok/img':>9}{'p50 ms':>10}{'mean ms':>10}{'img/s':>10}{'ovh %':>7}"
    lines = [head, "-" * len(head)]
    for r in records:
        if r.skipped:
            lines.append(f"{r.backend:<14}{r.batch_size:>5}{r.prune_ratio:>7.0%}  skipped: {r.skipped}")
            continue

        def num(v, spec):
            return format(v, spec) if v is not None else ""
        lines.append(
            f"{r.backend:<14}{r.batch_size:>5}{r.prune_ratio:>7.0%}{num(r.tokens_per_image, '>9')}"
            f"{num(r.p50_ms, '>10.3f')}{num(r.mean_ms, '>10.3f')}{num(r.images_per_s, '>10.0f')}"
            f"{num(r.overhead_pct, '>7.0f')}"
        )
    return "\n".join(lines)
