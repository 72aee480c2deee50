import math

import numpy as np
import pytest

from ragged_attn.core import DenseBatch
from ragged_attn.pruning import (
    PruneSpec, kept_tokens, l2_scores, make_mask, random_mask, topk_ratio_mask,
)


def test_zero_and_one_hot_scores():
    s = l2_scores(DenseBatch(np.zeros((2, 4, 3))))
    assert np.isinf(s[:, 0]).all() and (s[:, 1:] == 0).all()
    onehot = np.zeros((1, 3, 3))
    onehot[0, np.arange(3), np.arange(3)] = 1
    assert l2_scores(onehot)[0, 1:].tolist() == [1.0, 1.0]


def test_scores_match_scalar_loop():
    rng = np.random.default_rng(3)
    x = rng.standard_normal((3, 6, 5)).astype(np.float32)
    s = l2_scores(DenseBatch(x))
    for i in range(3):
        for p in range(1, 6):
            ref = math.sqrt(sum(float(c) ** 2 for c in x[i, p]))
            assert abs(s[i, p] - ref) <= 1e-6


@pytest.mark.parametrize("S,ratio,k", [(197, 0.8, 41), (197, 0.5, 99), (197, 0.0, 197), (33, 0.9, 5), (33, 0.999, 2)])
def test_kept_token_formula(S, ratio, k):
    assert kept_tokens(S, ratio) == k


def test_topk_examples():
    rng = np.random.default_rng(0)
    scores = rng.random((3, 197))
    assert topk_ratio_mask(scores, 0.0).mask.all()
    m = topk_ratio_mask(scores, 0.8)
    assert m.kept_counts.tolist() == [41, 41, 41]
    assert topk_ratio_mask(scores, 0.5).kept_counts.tolist() == [99, 99, 99]


def test_topk_keeps_highest_and_breaks_ties_low():
    scores = np.array([[np.inf, 1.0, 5.0, 5.0, 5.0, 0.0]])
    m = topk_ratio_mask(scores, 0.6)  # keep 1 + ceil(0.4 * 5) = 3
    assert m.mask.tolist() == [[True, False, True, True, False, False]]


def test_topk_scale_invariant():
    rng = np.random.default_rng(1)
    s = rng.random((4, 33))
    s[:, 0] = np.inf
    assert np.array_equal(topk_ratio_mask(s, 0.7).mask, topk_ratio_mask(s * 13.5, 0.7).mask)


def test_ratio_bounds():
    with pytest.raises(ValueError):
        kept_tokens(10, 1.0)
    with pytest.raises(ValueError):
        PruneSpec(ratio=-0.1)
    with pytest.raises(ValueError):
        PruneSpec(method="evit")


def test_random_mask_contract():
    assert random_mask(3, 10, 0.0, 0).mask.all()
    a, b = random_mask(4, 33, 0.5, 7), random_mask(4, 33, 0.5, 7)
    assert np.array_equal(a.mask, b.mask)
    assert a.kept_counts.tolist() == [17] * 4
    assert not np.array_equal(a.mask, random_mask(4, 33, 0.5, 8).mask)


def test_random_mask_is_uniform():
    freq = np.zeros(32)
    for seed in range(1000):
        freq += random_mask(1, 33, 0.5, seed).mask[0, 1:]
    freq /= 1000
    assert np.abs(freq - 0.5).max() <= 0.05


def test_jitter_gives_heterogeneous_lengths():
    m = random_mask(16, 33, 0.5, 0, jitter=0.3)
    assert len(set(m.kept_counts.tolist())) > 1
    assert m.mask[:, 0].all()


@pytest.mark.parametrize("method", ["threshold_l2", "topk_l2", "random"])
@pytest.mark.parametrize("ratio", [0.0, 0.25, 0.5, 0.8, 0.95])
def test_generated_masks_satisfy_invariants(method, ratio):
    x = np.random.default_rng(2).standard_normal((5, 33, 8)).astype(np.float32)
    m = make_mask(PruneSpec(method, ratio, seed=4), x)
    assert m.mask[:, 0].all()
    assert (m.kept_counts == kept_tokens(33, ratio)).all()
