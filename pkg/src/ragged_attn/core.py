"""Shared containers, model presets and the ragged-batch data model."""

from __future__ import annotations

import struct
from dataclasses import dataclass, field

import numpy as np

DTYPE = np.float32


class RaggedLayoutError(ValueError):
    """Raised when a cu_seqlens vector violates the ragged layout."""


@dataclass(frozen=True)
class ModelConfig:
    depth: int
    heads: int
    head_dim: int
    seq_len: int
    prune_layer: int
    num_classes: int = 1000
    mlp_hidden: int = 0

    def __post_init__(self):
        if self.mlp_hidden == 0:
            object.__setattr__(self, "mlp_hidden", 4 * self.embed_dim)
        if min(self.depth, self.heads, self.head_dim, self.num_classes, self.mlp_hidden) < 1:
            raise ValueError(f"non-positive dimension in {self}")
        if self.seq_len < 1:
            raise ValueError("seq_len must be >= 1 (position 0 is CLS)")
        if not 1 <= self.prune_layer <= self.depth + 1:
            raise ValueError(f"prune_layer must be in [1, {self.depth + 1}], got {self.prune_layer}")

    @property
    def embed_dim(self) -> int:
        return self.heads * self.head_dim

    def to_dict(self) -> dict:
        return {
            "depth": self.depth,
            "heads": self.heads,
            "head_dim": self.head_dim,
            "seq_len": self.seq_len,
            "prune_layer": self.prune_layer,
            "num_classes": self.num_classes,
            "mlp_hidden": self.mlp_hidden,
        }


PRESETS = {
    "deit_tiny": dict(depth=12, heads=3, head_dim=64, seq_len=197, prune_layer=5),
    "deit_small": dict(depth=12, heads=6, head_dim=64, seq_len=197, prune_layer=5),
    "deit_base": dict(depth=12, heads=12, head_dim=64, seq_len=197, prune_layer=5),
    "desk": dict(depth=6, heads=4, head_dim=16, seq_len=33, prune_layer=3, num_classes=10),
}


def make_config(preset: str) -> ModelConfig:
    try:
        return ModelConfig(**PRESETS[preset])
    except KeyError:
        raise ValueError(f"unknown preset {preset!r}; known: {sorted(PRESETS)}") from None


@dataclass(frozen=True)
class TileConfig:
    block_m: int = 64
    block_n: int = 64
    block_d: int = 64

    def __post_init__(self):
        if min(self.block_m, self.block_n, self.block_d) < 1:
            raise ValueError(f"tile sizes must be positive: {self}")

    def label(self) -> str:
        return f"{self.block_m}x{self.block_n}x{self.block_d}"


def _frozen(a: np.ndarray) -> np.ndarray:
    # read-only view; the caller's array keeps its own flags
    view = np.ascontiguousarray(a).view()
    view.flags.writeable = False
    return view


def validate_cu_seqlens(cu, total: int) -> str | None:
    """Return None when ``cu`` is a valid offset vector for ``total`` rows.

    Otherwise return a description of the first violated condition.
    """
    cu = np.asarray(cu)
    if cu.ndim != 1 or cu.size < 1:
        return "cu_seqlens must be a non-empty 1-D vector"
    if cu[0] != 0:
        return f"cu_seqlens[0] = {cu[0]}, expected 0"
    for i in range(1, cu.size):
        if cu[i] < cu[i - 1]:
            return f"cu_seqlens not non-decreasing at index {i} ({cu[i - 1]} > {cu[i]})"
    if cu[-1] != total:
        return f"cu_seqlens[{cu.size - 1}] = {cu[-1]}, expected T_total = {total}"
    return None


def check_cu_seqlens(cu, total: int) -> None:
    problem = validate_cu_seqlens(cu, total)
    if problem is not None:
        raise RaggedLayoutError(problem)


@dataclass(frozen=True)
class DenseBatch:
    data: np.ndarray  # [B, S, D]

    def __post_init__(self):
        data = np.asarray(self.data, dtype=DTYPE)
        if data.ndim != 3:
            raise ValueError(f"dense batch must be [B, S, D], got shape {data.shape}")
        if not np.isfinite(data).all():
            raise ValueError("dense batch contains non-finite values")
        object.__setattr__(self, "data", _frozen(data))

    @property
    def shape(self):
        return self.data.shape


@dataclass(frozen=True)
class RaggedBatch:
    packed: np.ndarray  # [T, D]
    cu_seqlens: np.ndarray  # [B + 1]

    def __post_init__(self):
        packed = np.asarray(self.packed, dtype=DTYPE)
        cu = np.asarray(self.cu_seqlens, dtype=np.int64)
        if packed.ndim != 2:
            raise ValueError(f"packed must be [T, D], got shape {packed.shape}")
        check_cu_seqlens(cu, packed.shape[0])
        object.__setattr__(self, "packed", _frozen(packed))
        object.__setattr__(self, "cu_seqlens", _frozen(cu))

    @property
    def batch_size(self) -> int:
        return self.cu_seqlens.size - 1

    @property
    def lengths(self) -> np.ndarray:
        return np.diff(self.cu_seqlens)

    def segment(self, i: int) -> np.ndarray:
        return self.packed[self.cu_seqlens[i]:self.cu_seqlens[i + 1]]


@dataclass(frozen=True)
class RaggedQKV:
    q: np.ndarray  # [T, H, d]
    k: np.ndarray
    v: np.ndarray
    cu_seqlens: np.ndarray

    def __post_init__(self):
        arrays = [np.asarray(a, dtype=DTYPE) for a in (self.q, self.k, self.v)]
        if arrays[0].ndim != 3 or any(a.shape != arrays[0].shape for a in arrays):
            raise ValueError("q, k, v must share one [T, H, d] shape")
        for a in arrays:
            if not np.isfinite(a).all():
                raise ValueError("q/k/v contain non-finite values")
        cu = np.asarray(self.cu_seqlens, dtype=np.int64)
        check_cu_seqlens(cu, arrays[0].shape[0])
        for name, a in zip("qkv", arrays):
            object.__setattr__(self, name, _frozen(a))
        object.__setattr__(self, "cu_seqlens", _frozen(cu))

    @property
    def shape(self):
        return self.q.shape

    @property
    def batch_size(self) -> int:
        return self.cu_seqlens.size - 1

    @property
    def lengths(self) -> np.ndarray:
        return np.diff(self.cu_seqlens)


@dataclass(frozen=True)
class KeepMask:
    mask: np.ndarray  # bool [B, S]

    def __post_init__(self):
        mask = np.asarray(self.mask, dtype=bool)
        if mask.ndim != 2 or mask.shape[1] < 1:
            raise ValueError(f"keep mask must be [B, S], got shape {mask.shape}")
        if mask.shape[0] and not mask[:, 0].all():
            bad = int(np.flatnonzero(~mask[:, 0])[0])
            raise ValueError(f"CLS token dropped for image {bad}")
        object.__setattr__(self, "mask", _frozen(mask))

    @property
    def kept_counts(self) -> np.ndarray:
        return self.mask.sum(axis=1)

    @classmethod
    def full(cls, batch: int, seq_len: int) -> "KeepMask":
        return cls(np.ones((batch, seq_len), dtype=bool))


# ---------------------------------------------------------------------------
# RGT1 / RGI1 binary tensor files

_TENSOR_MAGIC = b"RGT1"
_INT_MAGIC = b"RGI1"


def encode_tensor(a: np.ndarray) -> bytes:
    a = np.asarray(a)
    if a.dtype.kind in "iub":
        magic, payload = _INT_MAGIC, a.astype("<i8")
    else:
        magic, payload = _TENSOR_MAGIC, a.astype("<f4")
    head = magic + struct.pack("<I", a.ndim) + struct.pack(f"<{a.ndim}Q", *a.shape)
    return head + np.ascontiguousarray(payload).tobytes()


def decode_tensor(buf: bytes, offset: int = 0) -> tuple[np.ndarray, int]:
    """Decode one tensor starting at ``offset``; return it with the end offset."""
    magic = bytes(buf[offset:offset + 4])
    if magic == _TENSOR_MAGIC:
        dtype = np.dtype("<f4")
    elif magic == _INT_MAGIC:
        dtype = np.dtype("<i8")
    else:
        raise ValueError(f"bad tensor magic {magic!r}")
    if len(buf) < offset + 8:
        raise ValueError("truncated tensor header")
    (rank,) = struct.unpack_from("<I", buf, offset + 4)
    pos = offset + 8
    if len(buf) < pos + 8 * rank:
        raise ValueError("truncated tensor header")
    dims = struct.unpack_from(f"<{rank}Q", buf, pos)
    pos += 8 * rank
    count = int(np.prod(dims, dtype=np.int64))
    end = pos + count * dtype.itemsize
    if len(buf) < end:
        raise ValueError(f"payload truncated: need {end - pos} bytes, have {len(buf) - pos}")
    arr = np.frombuffer(buf, dtype=dtype, count=count, offset=pos).reshape(dims)
    return arr.astype(np.float32 if dtype.kind == "f" else np.int64), end


def save_tensor(path, a: np.ndarray) -> None:
    with open(path, "wb") as fh:
        fh.write(encode_tensor(a))


def load_tensor(path) -> np.ndarray:
    with open(path, "rb") as fh:
        buf = fh.read()
    arr, end = decode_tensor(buf)
    if end != len(buf):
        raise ValueError(f"{path}: {len(buf) - end} trailing bytes")
    return arr
