"""Keep-mask generators.

Threshold-l2 pruning ranks tokens by feature norm and keeps a fixed
number per image, so every image in a batch ends up with the same
length. ``random`` draws a uniform subset of the same size and stands in
for learned pruners when only the workload shape matters.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .core import DTYPE, DenseBatch, KeepMask

METHODS = ("threshold_l2", "topk_l2", "random")


@dataclass(frozen=True)
class PruneSpec:
    method: str = "threshold_l2"
    ratio: float = 0.0
    seed: int = 0
    jitter: float = 0.0  # random method only: per-image ratio spread

    def __post_init__(self):
        if self.method not in METHODS:
            raise ValueError(f"unknown pruning method {self.method!r}; expected one of {METHODS}")
        check_ratio(self.ratio)
        if self.jitter < 0:
            raise ValueError("jitter must be >= 0")

    def to_dict(self) -> dict:
        d = {"method": self.method, "ratio": self.ratio, "seed": self.seed}
        if self.jitter:
            d["jitter"] = self.jitter
        return d


def check_ratio(ratio: float):
    if not 0.0 <= ratio < 1.0:
        raise ValueError(f"prune ratio must be in [0, 1), got {ratio}")


def kept_tokens(seq_len: int, ratio: float) -> int:
    """Tokens per image after pruning: CLS plus ceil((1 - ratio) * (S - 1))."""
    check_ratio(ratio)
    # round first so 0.19999999999999996 * 196 does not ceil past 39.2's intended value
    return 1 + math.ceil(round((1.0 - ratio) * (seq_len - 1), 9))


def l2_scores(features: DenseBatch | np.ndarray) -> np.ndarray:
    data = features.data if isinstance(features, DenseBatch) else np.asarray(features, dtype=DTYPE)
    scores = np.sqrt(np.einsum("bsd,bsd->bs", data, data, dtype=DTYPE))
    scores[:, 0] = np.inf
    return scores


def topk_ratio_mask(scores: np.ndarray, ratio: float) -> KeepMask:
    scores = np.array(scores, dtype=np.float64)
    B, S = scores.shape
    k = kept_tokens(S, ratio)
    scores[:, 0] = np.inf
    # stable sort on negated scores: higher score first, ties to the lower position
    order = np.argsort(-scores, axis=1, kind="stable")[:, :k]
    mask = np.zeros((B, S), dtype=bool)
    np.put_along_axis(mask, order, True, axis=1)
    return KeepMask(mask)


def random_mask(batch: int, seq_len: int, ratio: float, seed: int, jitter: float = 0.0) -> KeepMask:
    """Keep CLS plus a uniform random subset of the other tokens.

    With ``jitter`` > 0 each image draws its own ratio from
    ``ratio +- jitter`` (clipped to [0, 1)), giving heterogeneous lengths.
    """
    check_ratio(ratio)
    rng = np.random.default_rng(seed)
    mask = np.zeros((batch, seq_len), dtype=bool)
    mask[:, 0] = True
    for i in range(batch):
        r = ratio
        if jitter:
            r = float(np.clip(ratio + rng.uniform(-jitter, jitter), 0.0, 0.999))
        k = kept_tokens(seq_len, r) - 1
        mask[i, 1 + rng.permutation(seq_len - 1)[:k]] = True
    return KeepMask(mask)


def make_mask(spec: PruneSpec, features: DenseBatch | np.ndarray) -> KeepMask:
    data = features.data if isinstance(features, DenseBatch) else features
    B, S = data.shape[:2]
    if spec.ratio == 0.0:
        return KeepMask.full(B, S)
    if spec.method == "random":
        return random_mask(B, S, spec.ratio, spec.seed, spec.jitter)
    return topk_ratio_mask(l2_scores(data), spec.ratio)
