#!/usr/bin/env python3
# Time the ragged kernel and the padded baseline over a few prune ratios,
# then split each time into a fixed floor and the compute above it.

import sys

from ragged_attn.bench import decompose_overhead, emit_csv, format_table, sweep_kernel
from ragged_attn.core import make_config

cfg = make_config("desk")
records = sweep_kernel([32], [0.0, 0.5, 0.7, 0.9], ["ragged", "padded_masked"], cfg,
                       warmup=5, iters=50, reps=3)

report = decompose_overhead(records, mode="min")
print(format_table(report.records))
print("floor per backend (ms):", report.floors_ms)

# the padded path pays for every slot, so its time hardly moves with ratio;
# the ragged one shrinks roughly with the square of the kept fraction
sys.stdout.write(emit_csv(report.records).decode())
