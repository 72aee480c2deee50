#!/usr/bin/env python3
# Token pruning produces a keep mask per image. Packing gathers the kept rows
# into one dense buffer; unpacking scatters them back.

import numpy as np

from ragged_attn.core import DenseBatch
from ragged_attn.packing import compute_pack_plan, pack, unpack
from ragged_attn.pruning import PruneSpec, kept_tokens, make_mask, random_mask

rng = np.random.default_rng(0)
B, S, D = 4, 12, 8
x = DenseBatch(rng.standard_normal((B, S, D)).astype(np.float32))

# largest-norm tokens survive; position 0 (CLS) always does
mask = make_mask(PruneSpec("topk_l2", 0.5), x)
print("keep per image", mask.kept_counts, "formula", kept_tokens(S, 0.5))
print(mask.mask.astype(int))

plan = compute_pack_plan(mask)
ragged = pack(x, plan)
print("cu_seqlens", plan.cu_seqlens, "packed", ragged.packed.shape)

# dropped slots come back as the fill value, kept ones are bit-identical
back = unpack(ragged, plan, B, S, fill=0.0)
assert np.array_equal(back.data[mask.mask], x.data[mask.mask])
assert not back.data[~mask.mask].any()
print("round trip exact")

# random masks with jitter give each image a different length
jittered = random_mask(B, S, 0.5, seed=3, jitter=0.3)
print("jittered lengths", compute_pack_plan(jittered).lengths)
