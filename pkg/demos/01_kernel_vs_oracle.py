#!/usr/bin/env python3
# Ragged attention on three images of different lengths, checked against
# plain softmax attention run one image at a time.

import numpy as np

from ragged_attn.core import RaggedQKV, TileConfig
from ragged_attn.ragged import KernelCounter, expected_tile_pairs, ragged_attention_forward
from ragged_attn.reference import naive_attention

rng = np.random.default_rng(7)
lengths = [5, 17, 40]  # tokens kept per image
heads, head_dim = 2, 16

# offsets into the packed token axis: [0, 5, 22, 62]
cu = np.concatenate([[0], np.cumsum(lengths)])
T = cu[-1]
q, k, v = (rng.standard_normal((T, heads, head_dim)).astype(np.float32) for _ in range(3))
qkv = RaggedQKV(q, k, v, cu)

tiles = TileConfig(16, 16, 16)
counter = KernelCounter()
out = ragged_attention_forward(qkv, tiles, counter=counter)
print("packed output", out.shape)

# the oracle never sees another image's tokens, so any cross-talk shows up here
worst = 0.0
for i in range(len(lengths)):
    rows = slice(cu[i], cu[i + 1])
    for h in range(heads):
        ref = naive_attention(q[rows, h], k[rows, h], v[rows, h])
        worst = max(worst, float(np.abs(out[rows, h] - ref).max()))
print(f"max |ragged - oracle| = {worst:.2e}")

# work scales with each image's own n^2, not with the longest image
print("tile pairs", counter.tile_pairs, "closed form", expected_tile_pairs(lengths, heads, tiles))
print("padded would need", heads * len(lengths) * (-(-max(lengths) // 16)) ** 2)
