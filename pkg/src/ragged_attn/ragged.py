"""Tiled online-softmax attention over a packed ragged batch.

One logical program runs per (image, head) pair. Program ``pid`` handles
head ``pid % H`` of image ``pid // H`` and walks query tiles of
``block_m`` rows against key/value tiles of ``block_n`` rows, keeping a
running max, denominator and rescaled output accumulator per query row.
Programs write disjoint row ranges, so they can run in any order.

The two small matrix products per tile go through BLAS; the softmax
bookkeeping between them is compiled numba code.
"""

from __future__ import annotations

import contextlib
import math
import os
from dataclasses import dataclass, field

import numba
import numpy as np
from numba import njit, prange

from .core import DTYPE, RaggedQKV, TileConfig

if "NUMBA_THREADING_LAYER" not in os.environ:
    # TBB in this image is too old; numba would warn on every first parallel launch
    numba.config.THREADING_LAYER = "omp"

_FAULTS: set[str] = set()
KNOWN_FAULTS = {"skip_normalize"}


@contextlib.contextmanager
def inject_fault(name: str):
    """Test hook: deliberately break the kernel while the context is active."""
    if name not in KNOWN_FAULTS:
        raise ValueError(f"unknown fault {name!r}")
    _FAULTS.add(name)
    try:
        yield
    finally:
        _FAULTS.discard(name)


@dataclass
class OnlineSoftmaxState:
    m: np.ndarray  # running row max, [rows]
    l: np.ndarray  # running denominator, [rows]
    o: np.ndarray  # unnormalized output, [rows, d]

    @classmethod
    def initial(cls, rows: int, head_dim: int) -> "OnlineSoftmaxState":
        return cls(
            m=np.full(rows, -np.inf, dtype=DTYPE),
            l=np.zeros(rows, dtype=DTYPE),
            o=np.zeros((rows, head_dim), dtype=DTYPE),
        )

    def finalize(self) -> np.ndarray:
        return self.o / self.l[:, None]


@dataclass
class KernelCounter:
    """Work done by the last kernel call(s). Read it outside timed regions."""

    tile_pairs: int = 0
    macs: int = 0
    programs: int = 0

    def reset(self):
        self.tile_pairs = self.macs = self.programs = 0


@dataclass(frozen=True)
class ProgramId:
    pid: int
    heads: int

    @property
    def head(self) -> int:
        return self.pid % self.heads

    @property
    def image(self) -> int:
        return self.pid // self.heads


# ---------------------------------------------------------------------------
# compiled kernels


# float32 exp for arguments <= 0: Cody-Waite range reduction, a degree-6
# polynomial and an exponent built from integer bits. Unlike a libm call it
# vectorizes, and it stays within ~1e-7 relative of the exact value.
_LOG2E = np.float32(1.4426950408889634)
_LN2_HI = np.float32(0.693359375)
_LN2_LO = np.float32(-2.12194440e-4)
_EXP_FLOOR = np.float32(-87.0)
_C0 = np.float32(1.9875691500e-4)
_C1 = np.float32(1.3981999507e-3)
_C2 = np.float32(8.3334519073e-3)
_C3 = np.float32(4.1665795894e-2)
_C4 = np.float32(1.6666665459e-1)
_C5 = np.float32(5.0000001201e-1)


@njit(cache=True)
def _exp_shifted(row, shift, cols, bits):
    # row[c] <- exp(row[c] - shift); anything below the f32 normal range becomes 0
    for c in range(cols):
        x = row[c] - shift
        live = x >= _EXP_FLOOR
        x = max(x, _EXP_FLOOR)
        k = math.floor(x * _LOG2E + np.float32(0.5))
        r = x - k * _LN2_HI - k * _LN2_LO
        p = (((((_C0 * r + _C1) * r + _C2) * r + _C3) * r + _C4) * r + _C5) * r * r + r + np.float32(1.0)
        bits[c] = (np.int32(k) + np.int32(127)) << 23
        row[c] = p if live else np.float32(0.0)
    scale = bits[:cols].view(np.float32)
    for c in range(cols):
        row[c] *= scale[c]


@njit(cache=True)
def _update_tile(m, l, o, scores, v_tile, bits):
    # scores is a scaled [rows, cols] tile (possibly -inf masked) and is
    # overwritten with unnormalized probabilities; v_tile is [cols, d]
    rows, cols = scores.shape
    for r in range(rows):
        prow = scores[r]
        m_new = m[r]
        for c in range(cols):
            if prow[c] > m_new:
                m_new = prow[c]
        if m_new == -np.inf:
            prow[:] = 0.0  # nothing visible yet; contributes nothing
            continue
        alpha = np.float32(np.exp(m[r] - m_new))
        _exp_shifted(prow, m_new, cols, bits)
        row_sum = np.float32(0.0)
        for c in range(cols):
            row_sum += prow[c]
        o[r] *= alpha
        l[r] = alpha * l[r] + row_sum
        m[r] = m_new
    o[:rows] += np.dot(scores, v_tile)


@njit(cache=True)
def _program(pid, q, k, v, cu, block_m, block_n, out, normalize):
    # q, k, v are head-major [H, T, d] so every tile is a contiguous slab;
    # out stays token-major [T, H, d]
    heads = q.shape[0]
    d = q.shape[2]
    h = pid % heads
    i = pid // heads
    s = cu[i]
    n = cu[i + 1] - s
    scale = np.float32(1.0 / math.sqrt(d))
    m = np.empty(block_m, dtype=np.float32)
    l = np.empty(block_m, dtype=np.float32)
    o = np.empty((block_m, d), dtype=np.float32)
    bits = np.empty(block_n, dtype=np.int32)
    tile_pairs = 0
    macs = 0
    for m0 in range(0, n, block_m):
        rows = min(block_m, n - m0)
        m[:] = -np.inf
        l[:] = 0.0
        o[:, :] = 0.0
        q_tile = q[h, s + m0:s + m0 + rows]
        for j0 in range(0, n, block_n):
            cols = min(block_n, n - j0)
            scores = np.dot(q_tile, k[h, s + j0:s + j0 + cols].T)
            scores *= scale
            _update_tile(m, l, o, scores, v[h, s + j0:s + j0 + cols], bits)
            tile_pairs += 1
            macs += 2 * rows * cols * d
        for r in range(rows):
            for x in range(d):
                if normalize:
                    out[s + m0 + r, h, x] = o[r, x] / l[r]
                else:
                    out[s + m0 + r, h, x] = o[r, x]
    return tile_pairs, macs


@njit(cache=True)
def _run_serial(q, k, v, cu, block_m, block_n, out, normalize, work):
    for pid in range(work.shape[0]):
        tp, mac = _program(pid, q, k, v, cu, block_m, block_n, out, normalize)
        work[pid, 0] = tp
        work[pid, 1] = mac


@njit(cache=True, parallel=True)
def _run_parallel(q, k, v, cu, block_m, block_n, out, normalize, work):
    for pid in prange(work.shape[0]):
        tp, mac = _program(pid, q, k, v, cu, block_m, block_n, out, normalize)
        work[pid, 0] = tp
        work[pid, 1] = mac


# ---------------------------------------------------------------------------
# public API


def default_workers() -> int:
    return int(os.environ.get("RAGGED_ATTN_WORKERS", "1"))


def _check_tiles(tiles: TileConfig, head_dim: int):
    if tiles.block_d < head_dim:
        raise NotImplementedError(
            f"feature tiling (block_d={tiles.block_d} < head_dim={head_dim}) is not implemented"
        )


def online_softmax_update(state: OnlineSoftmaxState, scores, v_tile) -> OnlineSoftmaxState:
    """Fold one already-scaled score tile and its value rows into ``state``."""
    scores = np.ascontiguousarray(scores, dtype=DTYPE)
    v_tile = np.ascontiguousarray(v_tile, dtype=DTYPE)
    rows, cols = scores.shape
    if state.m.shape != (rows,) or v_tile.shape != (cols, state.o.shape[1]):
        raise ValueError("score tile, value tile and state shapes disagree")
    new = OnlineSoftmaxState(state.m.astype(DTYPE), state.l.astype(DTYPE), state.o.astype(DTYPE))
    _update_tile(new.m, new.l, new.o, scores.copy(), v_tile, np.empty(cols, dtype=np.int32))
    return new


def _kernel_args(qkv: RaggedQKV):
    qh = np.ascontiguousarray(qkv.q.transpose(1, 0, 2))
    kh = np.ascontiguousarray(qkv.k.transpose(1, 0, 2))
    vh = np.ascontiguousarray(qkv.v.transpose(1, 0, 2))
    return qh, kh, vh, qkv.cu_seqlens


def attention_program(pid, qkv: RaggedQKV, tiles: TileConfig, out: np.ndarray, counter=None) -> None:
    """Run a single program, writing its (image, head) rows into ``out``."""
    if isinstance(pid, ProgramId):
        pid = pid.pid
    B, H = qkv.batch_size, qkv.shape[1]
    if not 0 <= pid < B * H:
        raise IndexError(f"program id {pid} outside [0, {B * H})")
    if out.shape != qkv.shape or out.dtype != DTYPE:
        raise ValueError("output buffer must be float32 with the q/k/v shape")
    _check_tiles(tiles, qkv.shape[2])
    q, k, v, cu = _kernel_args(qkv)
    tp, mac = _program(pid, q, k, v, cu, tiles.block_m, tiles.block_n, out,
                       "skip_normalize" not in _FAULTS)
    if counter is not None:
        counter.tile_pairs += tp
        counter.macs += mac
        counter.programs += 1


def ragged_attention_forward(qkv: RaggedQKV, tiles: TileConfig = TileConfig(), workers: int | None = None,
                             counter: KernelCounter | None = None) -> np.ndarray:
    """Bidirectional attention for every (image, head) of a packed batch.

    Returns a [T, H, d] float32 array. ``workers`` > 1 fans the B*H
    programs out over numba threads; results are identical to the serial
    run because programs own disjoint output rows.
    """
    _check_tiles(tiles, qkv.shape[2])
    workers = default_workers() if workers is None else workers
    if workers < 1:
        raise ValueError("workers must be >= 1")
    B, H = qkv.batch_size, qkv.shape[1]
    out = np.zeros(qkv.shape, dtype=DTYPE)
    work = np.zeros((B * H, 2), dtype=np.int64)
    q, k, v, cu = _kernel_args(qkv)
    normalize = "skip_normalize" not in _FAULTS
    if workers == 1:
        _run_serial(q, k, v, cu, tiles.block_m, tiles.block_n, out, normalize, work)
    else:
        previous = numba.get_num_threads()
        numba.set_num_threads(min(workers, numba.config.NUMBA_NUM_THREADS))
        try:
            _run_parallel(q, k, v, cu, tiles.block_m, tiles.block_n, out, normalize, work)
        finally:
            numba.set_num_threads(previous)
    if counter is not None:
        counter.tile_pairs += int(work[:, 0].sum())
        counter.macs += int(work[:, 1].sum())
        counter.programs += B * H
    return out


def expected_tile_pairs(lengths, heads: int, tiles: TileConfig) -> int:
    """Closed-form tile-pair count: sum_i H * ceil(n_i / B_M) * ceil(n_i / B_N)."""
    lengths = np.asarray(lengths, dtype=np.int64)
    return int(heads * np.sum(-(-lengths // tiles.block_m) * -(-lengths // tiles.block_n)))
