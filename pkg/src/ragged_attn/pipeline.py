"""Miniature pre-norm ViT forward pass with padded and ragged backends.

Both backends share the dense prefix (blocks before the prune point).
After the prune point the padded backend keeps the [B, S, D] layout and
masks attention; the ragged backend packs the surviving rows once and
runs the remaining blocks on the packed buffer, reading each image's CLS
token at row ``cu_seqlens[i]``.
"""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass, fields

import numpy as np

from .core import DTYPE, DenseBatch, KeepMask, ModelConfig, RaggedQKV, TileConfig, decode_tensor, encode_tensor
from .packing import PackPlan, compute_pack_plan, pack_rows
from .pruning import PruneSpec, check_ratio, kept_tokens, make_mask
from .ragged import ragged_attention_forward
from .reference import padded_masked_attention

LN_EPS = 1e-6


@dataclass(frozen=True)
class BlockWeights:
    norm1_scale: np.ndarray
    norm1_shift: np.ndarray
    qkv_w: np.ndarray  # [D, 3D]
    qkv_b: np.ndarray
    proj_w: np.ndarray  # [D, D]
    proj_b: np.ndarray
    norm2_scale: np.ndarray
    norm2_shift: np.ndarray
    mlp_in_w: np.ndarray  # [D, hidden]
    mlp_in_b: np.ndarray
    mlp_out_w: np.ndarray  # [hidden, D]
    mlp_out_b: np.ndarray


@dataclass(frozen=True)
class ViTWeights:
    blocks: tuple
    norm_scale: np.ndarray
    norm_shift: np.ndarray
    head_w: np.ndarray  # [D, classes]
    head_b: np.ndarray

    def named_tensors(self):
        for i, blk in enumerate(self.blocks):
            for f in fields(BlockWeights):
                yield f"blocks.{i}.{f.name}", getattr(blk, f.name)
        for name in ("norm_scale", "norm_shift", "head_w", "head_b"):
            yield name, getattr(self, name)

    def check(self, config: ModelConfig):
        if len(self.blocks) != config.depth:
            raise ValueError(f"{len(self.blocks)} blocks for a depth-{config.depth} config")
        expected = _shapes(config)
        for name, t in self.named_tensors():
            if t.shape != expected[name]:
                raise ValueError(f"{name}: shape {t.shape}, expected {expected[name]}")
            if not np.isfinite(t).all():
                raise ValueError(f"{name} has non-finite entries")


def _shapes(config: ModelConfig) -> dict:
    D, hid = config.embed_dim, config.mlp_hidden
    block = dict(
        norm1_scale=(D,), norm1_shift=(D,), qkv_w=(D, 3 * D), qkv_b=(3 * D,),
        proj_w=(D, D), proj_b=(D,), norm2_scale=(D,), norm2_shift=(D,),
        mlp_in_w=(D, hid), mlp_in_b=(hid,), mlp_out_w=(hid, D), mlp_out_b=(D,),
    )
    shapes = {f"blocks.{i}.{k}": v for i in range(config.depth) for k, v in block.items()}
    shapes.update(norm_scale=(D,), norm_shift=(D,), head_w=(D, config.num_classes), head_b=(config.num_classes,))
    return shapes


def init_weights(config: ModelConfig, seed: int = 0) -> ViTWeights:
    rng = np.random.default_rng(seed)
    made = {}
    for name, shape in _shapes(config).items():
        leaf = name.rsplit(".", 1)[-1]
        if leaf.endswith("scale"):
            made[name] = np.ones(shape, dtype=DTYPE)
        elif len(shape) == 1:
            made[name] = np.zeros(shape, dtype=DTYPE)
        else:
            made[name] = (0.02 * rng.standard_normal(shape)).astype(DTYPE)
    return _assemble(config, made)


def _assemble(config: ModelConfig, tensors: dict) -> ViTWeights:
    missing = set(_shapes(config)) - set(tensors)
    if missing:
        raise ValueError(f"{len(missing)} tensor(s) missing for this config, e.g. {sorted(missing)[0]}")
    blocks = tuple(
        BlockWeights(**{f.name: tensors[f"blocks.{i}.{f.name}"] for f in fields(BlockWeights)})
        for i in range(config.depth)
    )
    w = ViTWeights(blocks, tensors["norm_scale"], tensors["norm_shift"], tensors["head_w"], tensors["head_b"])
    w.check(config)
    return w


def save_weights(path, weights: ViTWeights) -> None:
    """Write a u32-length JSON manifest followed by one flat RGT1 tensor."""
    manifest, chunks, offset = [], [], 0
    for name, t in weights.named_tensors():
        manifest.append({"name": name, "shape": list(t.shape), "offset": offset})
        chunks.append(t.ravel())
        offset += t.size
    head = json.dumps({"format": "ragged-attn-weights", "tensors": manifest}).encode()
    with open(path, "wb") as fh:
        fh.write(struct.pack("<I", len(head)) + head)
        fh.write(encode_tensor(np.concatenate(chunks).astype(DTYPE)))


def load_weights(path, config: ModelConfig) -> ViTWeights:
    with open(path, "rb") as fh:
        buf = fh.read()
    (n,) = struct.unpack_from("<I", buf, 0)
    manifest = json.loads(buf[4:4 + n])
    flat, _ = decode_tensor(buf, 4 + n)
    tensors = {}
    for entry in manifest["tensors"]:
        size = int(np.prod(entry["shape"], dtype=np.int64))
        tensors[entry["name"]] = flat[entry["offset"]:entry["offset"] + size].reshape(entry["shape"])
    return _assemble(config, tensors)


# ---------------------------------------------------------------------------
# row-wise ops (layout independent)


def layer_norm(x, scale, shift):
    mu = x.mean(axis=-1, keepdims=True)
    xc = x - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    return xc / np.sqrt(var + DTYPE(LN_EPS)) * scale + shift


_GELU_C = DTYPE(np.sqrt(2.0 / np.pi))


def gelu(x):
    # tanh form: numpy's SIMD tanh costs the same for every input, unlike erf
    return DTYPE(0.5) * x * (DTYPE(1.0) + np.tanh(_GELU_C * (x + DTYPE(0.044715) * x * x * x)))


def mlp(x, blk: BlockWeights):
    h = gelu(x @ blk.mlp_in_w + blk.mlp_in_b)
    return h @ blk.mlp_out_w + blk.mlp_out_b


def _mlp_residual(x, blk):
    return x + mlp(layer_norm(x, blk.norm2_scale, blk.norm2_shift), blk)


# ---------------------------------------------------------------------------
# blocks


def dense_block(x, blk: BlockWeights, config: ModelConfig, valid=None):
    """One block over [B, S, D]; ``valid`` masks attention and zeroes dropped rows."""
    B, S, D = x.shape
    h = layer_norm(x, blk.norm1_scale, blk.norm1_shift)
    qkv = (h @ blk.qkv_w + blk.qkv_b).reshape(B, S, 3, config.heads, config.head_dim)
    attn = padded_masked_attention(qkv[:, :, 0], qkv[:, :, 1], qkv[:, :, 2], valid)
    x = x + attn.reshape(B, S, D) @ blk.proj_w + blk.proj_b
    if valid is not None:
        x = x * valid[:, :, None]
    x = _mlp_residual(x, blk)
    if valid is not None:
        x = x * valid[:, :, None]
    return x


def ragged_block(x, cu_seqlens, blk: BlockWeights, config: ModelConfig,
                 tiles: TileConfig = TileConfig(), workers=None, counter=None):
    """One block over a packed [T, D] buffer."""
    T, D = x.shape
    h = layer_norm(x, blk.norm1_scale, blk.norm1_shift)
    qkv = (h @ blk.qkv_w + blk.qkv_b).reshape(T, 3, config.heads, config.head_dim)
    packed = RaggedQKV(qkv[:, 0], qkv[:, 1], qkv[:, 2], cu_seqlens)
    attn = ragged_attention_forward(packed, tiles, workers=workers, counter=counter)
    x = x + attn.reshape(T, D) @ blk.proj_w + blk.proj_b
    return _mlp_residual(x, blk)


def classify(cls_rows, weights: ViTWeights):
    return layer_norm(cls_rows, weights.norm_scale, weights.norm_shift) @ weights.head_w + weights.head_b


def _input(config: ModelConfig, batch) -> np.ndarray:
    data = batch.data if isinstance(batch, DenseBatch) else np.asarray(batch, dtype=DTYPE)
    if data.ndim != 3 or data.shape[1:] != (config.seq_len, config.embed_dim):
        raise ValueError(
            f"input shape {data.shape} does not match [B, {config.seq_len}, {config.embed_dim}]"
        )
    return data


def dense_prefix(config: ModelConfig, weights: ViTWeights, batch) -> np.ndarray:
    """Features entering the prune layer (output of block prune_layer - 1)."""
    x = _input(config, batch)
    for blk in weights.blocks[:config.prune_layer - 1]:
        x = dense_block(x, blk, config)
    return x


def padded_suffix(config, weights, features, mask: KeepMask) -> np.ndarray:
    valid = mask.mask
    x = features * valid[:, :, None]
    for blk in weights.blocks[config.prune_layer - 1:]:
        x = dense_block(x, blk, config, valid)
    return classify(x[:, 0], weights)


def ragged_suffix(config, weights, features, plan: PackPlan, tiles: TileConfig = TileConfig(),
                  workers=None, counter=None) -> np.ndarray:
    x = pack_rows(features, plan)
    for blk in weights.blocks[config.prune_layer - 1:]:
        x = ragged_block(x, plan.cu_seqlens, blk, config, tiles, workers, counter)
    return classify(x[plan.cls_rows], weights)


def forward_dense(config, weights, batch) -> np.ndarray:
    """Unpruned, mask-free forward; the reference for ratio-0 checks."""
    x = _input(config, batch)
    for blk in weights.blocks:
        x = dense_block(x, blk, config)
    return classify(x[:, 0], weights)


def _prune_point(config, weights, batch, spec):
    x = dense_prefix(config, weights, batch)
    if config.prune_layer > config.depth:
        return x, KeepMask.full(x.shape[0], x.shape[1])
    return x, make_mask(spec, x)


def forward_padded(config, weights, batch, spec: PruneSpec = PruneSpec()):
    x, mask = _prune_point(config, weights, batch, spec)
    return padded_suffix(config, weights, x, mask), mask


def forward_ragged(config, weights, batch, spec: PruneSpec = PruneSpec(), tiles: TileConfig = TileConfig(),
                   workers=None, counter=None):
    x, mask = _prune_point(config, weights, batch, spec)
    plan = compute_pack_plan(mask)
    return ragged_suffix(config, weights, x, plan, tiles, workers, counter), mask


# ---------------------------------------------------------------------------
# cost accounting


def _layer_flops(config: ModelConfig, n: int) -> dict:
    D = config.embed_dim
    return {
        "attn_matmul": 4 * n * n * D,  # q k^T and p v, all heads
        "projections": 8 * n * D * D,  # qkv (3 D^2) + output (D^2), 2 flops per MAC
        "mlp": 4 * n * D * config.mlp_hidden,
    }


def count_flops(config: ModelConfig, tokens_per_image: int, pruned_tokens: int, prune_layer: int | None = None) -> dict:
    """Per-image flops split into ``pre`` / ``post`` prune point and ``total``."""
    if tokens_per_image < 1 or pruned_tokens < 1:
        raise ValueError("token counts must be >= 1")
    prune_layer = config.prune_layer if prune_layer is None else prune_layer
    n_pre = prune_layer - 1
    n_post = config.depth - n_pre
    pre = {k: n_pre * v for k, v in _layer_flops(config, tokens_per_image).items()}
    post = {k: n_post * v for k, v in _layer_flops(config, pruned_tokens).items()}
    return {"pre": pre, "post": post, "total": {k: pre[k] + post[k] for k in pre}}


@dataclass(frozen=True)
class CostModel:
    """Per-layer cost = linear * n + quadratic * n^2, in flops per image."""

    linear: float
    quadratic: float

    def __post_init__(self):
        if self.linear <= 0 or self.quadratic < 0:
            raise ValueError(f"invalid cost coefficients {self}")

    @classmethod
    def from_config(cls, config: ModelConfig) -> "CostModel":
        D = config.embed_dim
        return cls(linear=8 * D * D + 4 * D * config.mlp_hidden, quadratic=4 * D)

    def layer_cost(self, n: int) -> float:
        return self.linear * n + self.quadratic * n * n


def theoretical_speedup(config: ModelConfig, ratio: float, cost: CostModel | None = None) -> float:
    check_ratio(ratio)
    cost = CostModel.from_config(config) if cost is None else cost
    S = config.seq_len
    n_pre = config.prune_layer - 1
    n_post = config.depth - n_pre
    k = kept_tokens(S, ratio) if n_post else S
    full = config.depth * cost.layer_cost(S)
    pruned = n_pre * cost.layer_cost(S) + n_post * cost.layer_cost(k)
    return full / pruned
