#!/usr/bin/env python3
# A small ViT run three ways: unpruned, pruned with padding + masks, and
# pruned with packed ragged attention. The last two must agree.

import numpy as np

from ragged_attn.core import make_config
from ragged_attn.pipeline import (
    count_flops, forward_dense, forward_padded, forward_ragged, init_weights, theoretical_speedup,
)
from ragged_attn.pruning import PruneSpec

cfg = make_config("desk")
weights = init_weights(cfg, seed=0)
rng = np.random.default_rng(1)
batch = rng.standard_normal((8, cfg.seq_len, cfg.embed_dim)).astype(np.float32)

dense = forward_dense(cfg, weights, batch)
for ratio in (0.0, 0.5, 0.9):
    spec = PruneSpec("threshold_l2", ratio)
    padded, mask = forward_padded(cfg, weights, batch, spec)
    ragged, _ = forward_ragged(cfg, weights, batch, spec)
    print(f"ratio {ratio}: keep {mask.kept_counts[0]}/{cfg.seq_len}, "
          f"max |padded - ragged| {np.abs(padded - ragged).max():.1e}, "
          f"same argmax {np.array_equal(padded.argmax(1), ragged.argmax(1))}")
    if ratio == 0.0:
        print(f"  ratio 0 vs unpruned: {np.abs(ragged - dense).max():.1e}")

# what pruning should buy in arithmetic, before any kernel overhead
base = make_config("deit_base")
for ratio in (0.5, 0.7, 0.9):
    print(f"deit_base ratio {ratio}: ideal speedup {theoretical_speedup(base, ratio):.2f}x")
print(count_flops(base, 197, 20))
