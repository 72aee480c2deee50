import json
import struct

import numpy as np
import pytest

from ragged_attn.core import ModelConfig, TileConfig, make_config
from ragged_attn.packing import compute_pack_plan, pack_rows
from ragged_attn.pipeline import (
    CostModel, count_flops, dense_prefix, forward_dense, forward_padded, forward_ragged, init_weights,
    layer_norm, load_weights, mlp, padded_suffix, ragged_suffix, save_weights, theoretical_speedup,
)
from ragged_attn.pruning import PruneSpec, kept_tokens


@pytest.fixture(scope="module")
def weights(desk):
    return init_weights(desk, seed=0)


def batch(config, B, seed):
    rng = np.random.default_rng(seed)
    return rng.standard_normal((B, config.seq_len, config.embed_dim)).astype(np.float32)


def test_init_weights_contract(desk):
    a, b, c = init_weights(desk, 1), init_weights(desk, 1), init_weights(desk, 2)
    for (name, x), (_, y), (_, z) in zip(a.named_tensors(), b.named_tensors(), c.named_tensors()):
        assert np.array_equal(x, y), name
        if name.endswith("scale"):
            assert (x == 1).all()
        elif x.ndim == 1:
            assert (x == 0).all()
        else:
            assert not np.array_equal(x, z)
            assert 0.015 < x.std() < 0.025
    assert len(a.blocks) == desk.depth


def test_ratio_zero_padded_equals_dense(desk, weights):
    x = batch(desk, 4, 0)
    logits, mask = forward_padded(desk, weights, x, PruneSpec(ratio=0.0))
    assert mask.mask.all()
    assert np.abs(logits - forward_dense(desk, weights, x)).max() <= 1e-6


def test_padded_smoke(desk, weights):
    logits, mask = forward_padded(desk, weights, batch(desk, 4, 1), PruneSpec(ratio=0.5))
    assert logits.shape == (4, desk.num_classes) and np.isfinite(logits).all()
    assert (mask.kept_counts == kept_tokens(desk.seq_len, 0.5)).all()


def test_dropped_tokens_do_not_leak(desk, weights):
    x = batch(desk, 3, 2)
    feats = dense_prefix(desk, weights, x)
    _, mask = forward_padded(desk, weights, x, PruneSpec(ratio=0.5))
    poked = feats.copy()
    poked[~mask.mask] += 100.0 * np.random.default_rng(0).standard_normal(poked[~mask.mask].shape)
    assert np.array_equal(padded_suffix(desk, weights, feats, mask), padded_suffix(desk, weights, poked, mask))
    plan = compute_pack_plan(mask)
    assert np.array_equal(ragged_suffix(desk, weights, feats, plan), ragged_suffix(desk, weights, poked, plan))


def test_ratio_zero_backends_agree(desk, weights):
    x = batch(desk, 4, 3)
    a, _ = forward_padded(desk, weights, x)
    b, _ = forward_ragged(desk, weights, x)
    assert np.abs(a - b).max() <= 1e-5


@pytest.mark.parametrize("method", ["threshold_l2", "random"])
@pytest.mark.parametrize("ratio", [0.25, 0.5, 0.8])
def test_backends_agree(desk, weights, method, ratio):
    x = batch(desk, 6, 4)
    spec = PruneSpec(method, ratio, seed=3)
    a, ma = forward_padded(desk, weights, x, spec)
    b, mb = forward_ragged(desk, weights, x, spec, TileConfig(16, 8, 64))
    assert np.array_equal(ma.mask, mb.mask)
    assert np.abs(a - b).max() <= 1e-4
    assert np.array_equal(a.argmax(1), b.argmax(1))


def test_heterogeneous_lengths_agree(desk, weights):
    x = batch(desk, 8, 5)
    spec = PruneSpec("random", 0.5, seed=1, jitter=0.4)
    a, mask = forward_padded(desk, weights, x, spec)
    b, _ = forward_ragged(desk, weights, x, spec)
    assert len(set(mask.kept_counts.tolist())) > 1
    assert np.abs(a - b).max() <= 1e-4


def test_single_image_heavy_pruning(desk, weights):
    logits, mask = forward_ragged(desk, weights, batch(desk, 1, 6), PruneSpec(ratio=0.9))
    assert mask.kept_counts[0] >= 2 and np.isfinite(logits).all()


def test_never_prune():
    cfg = ModelConfig(depth=2, heads=2, head_dim=4, seq_len=5, prune_layer=3, num_classes=3)
    w = init_weights(cfg, 0)
    x = batch(cfg, 2, 0)
    a, mask = forward_ragged(cfg, w, x, PruneSpec(ratio=0.8))
    assert mask.mask.all()
    assert np.abs(a - forward_dense(cfg, w, x)).max() <= 1e-6


def test_input_shape_checked(desk, weights):
    with pytest.raises(ValueError, match="does not match"):
        forward_padded(desk, weights, np.zeros((1, 5, desk.embed_dim), np.float32))


def test_rowwise_ops_commute_with_packing(desk, weights):
    x = batch(desk, 4, 7)
    _, mask = forward_padded(desk, weights, x, PruneSpec(ratio=0.5))
    plan = compute_pack_plan(mask)
    blk = weights.blocks[0]

    def f(t):
        return mlp(layer_norm(t, blk.norm2_scale, blk.norm2_shift), blk)
    assert np.abs(f(pack_rows(x, plan)) - pack_rows(f(x), plan)).max() <= 1e-6


def test_weights_round_trip(tmp_path, desk, weights):
    path = tmp_path / "w.bin"
    save_weights(path, weights)
    back = load_weights(path, desk)
    for (n1, a), (n2, b) in zip(weights.named_tensors(), back.named_tensors()):
        assert n1 == n2 and np.array_equal(a, b)
    raw = path.read_bytes()
    (n,) = struct.unpack_from("<I", raw)
    manifest = json.loads(raw[4:4 + n])
    assert manifest["tensors"][0] == {"name": "blocks.0.norm1_scale", "shape": [64], "offset": 0}
    assert raw[4 + n:8 + n] == b"RGT1"
    with pytest.raises(ValueError):
        load_weights(path, make_config("deit_tiny"))


def test_count_flops_attention_ratio():
    cfg = make_config("deit_base")
    k = kept_tokens(197, 0.8)
    pruned = count_flops(cfg, 197, k)["post"]["attn_matmul"]
    full = count_flops(cfg, 197, 197)["post"]["attn_matmul"]
    assert pruned / full == pytest.approx((k / 197) ** 2, rel=1e-15)
    assert abs(pruned / full - 0.04) < 0.005


def test_count_flops_conservation():
    cfg = make_config("deit_base")
    split = count_flops(cfg, 197, 197)
    whole = count_flops(cfg, 197, 197, prune_layer=1)
    assert split["total"] == whole["total"]
    assert split["pre"]["mlp"] + split["post"]["mlp"] == cfg.depth * 4 * 197 * 768 * 3072


def test_count_flops_desk_closed_form(desk):
    k = kept_tokens(desk.seq_len, 0.5)
    f = count_flops(desk, desk.seq_len, k)
    per_layer = 4 * desk.embed_dim
    assert f["post"]["attn_matmul"] == 4 * per_layer * k * k
    assert f["post"]["mlp"] / count_flops(desk, desk.seq_len, desk.seq_len)["post"]["mlp"] == k / desk.seq_len


def test_count_flops_rejects_empty():
    with pytest.raises(ValueError):
        count_flops(make_config("desk"), 0, 1)


def test_theoretical_speedup_limits():
    base = make_config("deit_base")
    assert theoretical_speedup(base, 0.0) == 1.0
    linear = ModelConfig(depth=4, heads=1, head_dim=8, seq_len=10001, prune_layer=1)
    assert theoretical_speedup(linear, 0.5, CostModel(1.0, 0.0)) == pytest.approx(2.0, rel=1e-3)
    assert 2.0 <= theoretical_speedup(base, 0.9) <= 3.0


def test_theoretical_speedup_monotone():
    for name in ("deit_tiny", "deit_base", "desk"):
        cfg = make_config(name)
        values = [theoretical_speedup(cfg, r) for r in np.linspace(0, 0.99, 100)]
        assert all(b >= a for a, b in zip(values, values[1:]))


def test_cost_model_validation():
    with pytest.raises(ValueError):
        CostModel(0.0, 1.0)
    c = CostModel.from_config(make_config("deit_base"))
    assert c.linear > 0 and c.quadratic > 0
