"""Ground-truth attention: a naive quadratic oracle and the padded-masked baseline."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .core import DTYPE, KeepMask

# Masked scores are replaced by this instead of -inf so a row never computes (-inf) - (-inf).
MASK_VALUE = np.finfo(np.float32).min


@dataclass(frozen=True)
class AttentionMask:
    valid: np.ndarray  # bool [B, S]; False marks padding

    def __post_init__(self):
        valid = np.asarray(self.valid, dtype=bool)
        if valid.ndim != 2:
            raise ValueError(f"attention mask must be [B, S], got shape {valid.shape}")
        empty = ~valid.any(axis=1)
        if empty.any():
            raise ValueError(f"image {int(np.flatnonzero(empty)[0])} has no valid tokens")
        object.__setattr__(self, "valid", valid)


def _as_valid(mask) -> np.ndarray:
    if isinstance(mask, AttentionMask):
        return mask.valid
    if isinstance(mask, KeepMask):
        return AttentionMask(mask.mask).valid
    return AttentionMask(mask).valid


def naive_attention(q: np.ndarray, k: np.ndarray, v: np.ndarray) -> np.ndarray:
    """softmax(q k^T / sqrt(d)) v with the full n x n score matrix materialized."""
    q, k, v = (np.asarray(a, dtype=DTYPE) for a in (q, k, v))
    if q.ndim != 2 or q.shape != k.shape or k.shape[0] != v.shape[0]:
        raise ValueError(f"expected matching [n, d] inputs, got {q.shape}, {k.shape}, {v.shape}")
    if q.shape[0] == 0:
        raise ValueError("naive_attention needs at least one token")
    if not (np.isfinite(q).all() and np.isfinite(k).all() and np.isfinite(v).all()):
        raise ValueError("non-finite attention input")
    scores = (q @ k.T) / DTYPE(np.sqrt(q.shape[1]))
    scores -= scores.max(axis=1, keepdims=True)
    p = np.exp(scores)
    p /= p.sum(axis=1, keepdims=True)
    return p @ v


def padded_masked_attention(q, k, v, mask=None) -> np.ndarray:
    """Dense attention over [B, S, H, d] inputs with padding masked out.

    Keys at invalid positions get ``MASK_VALUE`` scores; rows for invalid
    queries come back as exact zeros.
    """
    q, k, v = (np.asarray(a, dtype=DTYPE) for a in (q, k, v))
    if q.ndim != 4 or q.shape != k.shape or q.shape != v.shape:
        raise ValueError(f"expected matching [B, S, H, d] inputs, got {q.shape}, {k.shape}, {v.shape}")
    B, S, H, d = q.shape
    qh, kh, vh = (a.transpose(0, 2, 1, 3) for a in (q, k, v))  # [B, H, S, d]
    scores = qh @ kh.transpose(0, 1, 3, 2)
    scores /= DTYPE(np.sqrt(d))
    if mask is not None:
        valid = _as_valid(mask)
        if valid.shape != (B, S):
            raise ValueError(f"mask shape {valid.shape} does not match batch ({B}, {S})")
        scores = np.where(valid[:, None, None, :], scores, MASK_VALUE)
    scores -= scores.max(axis=-1, keepdims=True)
    p = np.exp(scores)
    p /= p.sum(axis=-1, keepdims=True)
    out = (p @ vh).transpose(0, 2, 1, 3)
    if mask is not None:
        out = out * valid[:, :, None, None]
    return np.ascontiguousarray(out, dtype=DTYPE)
