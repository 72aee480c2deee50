"""Dense <-> ragged conversion driven by a keep mask."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .core import DTYPE, DenseBatch, KeepMask, RaggedBatch, check_cu_seqlens


@dataclass(frozen=True)
class PackPlan:
    cu_seqlens: np.ndarray  # [B + 1]
    src_indices: np.ndarray  # [T], flat image * S + position
    batch_size: int
    seq_len: int

    @property
    def total_kept(self) -> int:
        return int(self.cu_seqlens[-1])

    @property
    def lengths(self) -> np.ndarray:
        return np.diff(self.cu_seqlens)

    @property
    def cls_rows(self) -> np.ndarray:
        """Packed row of each image's CLS token."""
        return self.cu_seqlens[:-1]


def compute_pack_plan(mask: KeepMask | np.ndarray) -> PackPlan:
    if not isinstance(mask, KeepMask):
        mask = KeepMask(mask)
    m = mask.mask
    B, S = m.shape
    counts = m.sum(axis=1)
    if (counts < 1).any():
        raise ValueError(f"image {int(np.flatnonzero(counts < 1)[0])} keeps no tokens")
    cu = np.zeros(B + 1, dtype=np.int64)
    np.cumsum(counts, out=cu[1:])
    # row-major flatnonzero keeps images contiguous and positions ascending
    src = np.flatnonzero(m.ravel()).astype(np.int64)
    check_cu_seqlens(cu, src.size)
    return PackPlan(cu, src, B, S)


def _check_plan(plan: PackPlan, B: int, S: int):
    if (plan.batch_size, plan.seq_len) != (B, S):
        raise ValueError(
            f"pack plan built for [{plan.batch_size}, {plan.seq_len}] but batch is [{B}, {S}]"
        )


def pack_rows(data: np.ndarray, plan: PackPlan) -> np.ndarray:
    """Gather kept rows of any [B, S, ...] array into [T, ...]."""
    _check_plan(plan, data.shape[0], data.shape[1])
    flat = data.reshape((data.shape[0] * data.shape[1],) + data.shape[2:])
    return flat[plan.src_indices]


def pack(dense: DenseBatch, plan: PackPlan) -> RaggedBatch:
    return RaggedBatch(pack_rows(dense.data, plan), plan.cu_seqlens)


def unpack_rows(packed: np.ndarray, plan: PackPlan, fill: float = 0.0) -> np.ndarray:
    """Scatter [T, ...] rows back to [B, S, ...]; dropped positions get ``fill``."""
    if packed.shape[0] != plan.total_kept:
        raise ValueError(f"packed has {packed.shape[0]} rows, plan expects {plan.total_kept}")
    trailing = packed.shape[1:]
    out = np.full((plan.batch_size * plan.seq_len,) + trailing, fill, dtype=DTYPE)
    out[plan.src_indices] = packed
    return out.reshape((plan.batch_size, plan.seq_len) + trailing)


def unpack(ragged: RaggedBatch, plan: PackPlan, B: int, S: int, fill: float = 0.0) -> DenseBatch:
    _check_plan(plan, B, S)
    if not np.array_equal(ragged.cu_seqlens, plan.cu_seqlens):
        raise ValueError("ragged batch offsets do not match the pack plan")
    return DenseBatch(unpack_rows(ragged.packed, plan, fill))
