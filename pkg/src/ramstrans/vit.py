"""Patch tokenizer and pre-norm transformer encoder that records attention."""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .tensor import (
    Tensor,
    broadcast_to,
    concat,
    dropout,
    gelu,
    index,
    layer_norm,
    linear,
    matmul,
    mul,
    softmax_rows,
    swapaxes,
)

Params = dict[str, Tensor]

LN_EPS = 1e-6


@dataclass(frozen=True)
class ModelConfig:
    image_size: int = 32
    patch_size: int = 8
    embed_dim: int = 32
    layers: int = 2
    heads: int = 2
    ffn_mult: float = 4.0
    num_classes: int = 3
    num_cls_tokens: int = 2
    dropout: float = 0.0

    def __post_init__(self):
        if self.patch_size < 1 or self.image_size % self.patch_size:
            raise ValueError(
                f"image size {self.image_size} not divisible by patch size {self.patch_size}"
            )
        if self.heads < 1 or self.embed_dim % self.heads:
            raise ValueError(f"embed dim {self.embed_dim} not divisible by {self.heads} heads")
        if self.num_cls_tokens not in (1, 2):
            raise ValueError("num_cls_tokens must be 1 (scale-shared) or 2 (scale-wise)")
        if self.num_classes < 1 or self.layers < 0:
            raise ValueError("num_classes must be >= 1 and layers >= 0")
        if not 0.0 <= self.dropout < 1.0:
            raise ValueError("dropout must lie in [0, 1)")

    @property
    def grid(self) -> int:
        return self.image_size // self.patch_size

    @property
    def num_patches(self) -> int:
        return self.grid**2

    @property
    def seq_len(self) -> int:
        return self.num_cls_tokens + self.num_patches

    @property
    def head_dim(self) -> int:
        return self.embed_dim // self.heads

    @property
    def ffn_dim(self) -> int:
        return int(round(self.ffn_mult * self.embed_dim))


@dataclass
class TokenSequence:
    """Token matrix (B, c + N, C); CLS tokens occupy indices 0..c-1."""

    tokens: Tensor
    num_cls: int

    def __post_init__(self):
        if self.tokens.ndim != 3:
            raise ValueError(f"tokens must be (B, T, C), got {self.tokens.shape}")

    @property
    def length(self) -> int:
        return self.tokens.shape[1]


@dataclass
class AttentionStack:
    """Post-softmax attention of every layer, shape (B, L, K, T, T)."""

    weights: np.ndarray = field(repr=False)

    @property
    def layers(self) -> int:
        return self.weights.shape[1]

    def for_image(self, i: int) -> np.ndarray:
        return self.weights[i]


# ---------------------------------------------------------------- parameters
def _uniform(rng, fan_in, shape, dtype):
    bound = 1.0 / math.sqrt(fan_in)
    return Tensor(rng.uniform(-bound, bound, size=shape).astype(dtype), requires_grad=True)


def _gauss(rng, shape, dtype, std=0.02):
    return Tensor(rng.normal(0.0, std, size=shape).astype(dtype), requires_grad=True)


def _ones(shape, dtype):
    return Tensor(np.ones(shape, dtype=dtype), requires_grad=True)


def _zeros(shape, dtype):
    return Tensor(np.zeros(shape, dtype=dtype), requires_grad=True)


def init_params(cfg: ModelConfig, seed: int | np.random.Generator = 0, dtype=np.float32) -> Params:
    """Fresh parameters keyed by stable checkpoint names.

    CLS tokens and position embeddings are N(0, 0.02^2); every linear layer
    uses U(-1/sqrt(fan_in), 1/sqrt(fan_in)) for weight and bias.
    """
    rng = seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)
    c, p, d, f = cfg.embed_dim, cfg.patch_size, cfg.embed_dim, cfg.ffn_dim
    patch_dim = p * p * 3
    params: Params = {
        "patch_embed.weight": _uniform(rng, patch_dim, (patch_dim, d), dtype),
        "patch_embed.bias": _uniform(rng, patch_dim, (d,), dtype),
        "cls_token": _gauss(rng, (cfg.num_cls_tokens, d), dtype),
        "pos_embed": _gauss(rng, (cfg.seq_len, d), dtype),
    }
    for i in range(cfg.layers):
        pre = f"block{i}"
        params[f"{pre}.ln1.weight"] = _ones((c,), dtype)
        params[f"{pre}.ln1.bias"] = _zeros((c,), dtype)
        for name in ("q", "k", "v", "o"):
            params[f"{pre}.msa.{name}.weight"] = _uniform(rng, c, (c, c), dtype)
            params[f"{pre}.msa.{name}.bias"] = _uniform(rng, c, (c,), dtype)
        params[f"{pre}.ln2.weight"] = _ones((c,), dtype)
        params[f"{pre}.ln2.bias"] = _zeros((c,), dtype)
        params[f"{pre}.ffn.fc1.weight"] = _uniform(rng, c, (c, f), dtype)
        params[f"{pre}.ffn.fc1.bias"] = _uniform(rng, c, (f,), dtype)
        params[f"{pre}.ffn.fc2.weight"] = _uniform(rng, f, (f, c), dtype)
        params[f"{pre}.ffn.fc2.bias"] = _uniform(rng, f, (c,), dtype)
    params["norm.weight"] = _ones((c,), dtype)
    params["norm.bias"] = _zeros((c,), dtype)
    params["head.weight"] = _uniform(rng, c, (c, cfg.num_classes), dtype)
    params["head.bias"] = _uniform(rng, c, (cfg.num_classes,), dtype)
    return params


def block_params(params: Params, i: int) -> Params:
    pre = f"block{i}."
    return {k[len(pre) :]: v for k, v in params.items() if k.startswith(pre)}


# ---------------------------------------------------------------- tokenization
def patchify(images: np.ndarray, patch: int) -> np.ndarray:
    """(B, H, W, 3) -> (B, N, P*P*3), patches in row-major grid order."""
    b, h, w, ch = images.shape
    if h % patch or w % patch:
        raise ValueError(f"resolution {h}x{w} not divisible by patch size {patch}")
    gh, gw = h // patch, w // patch
    x = images.reshape(b, gh, patch, gw, patch, ch).transpose(0, 1, 3, 2, 4, 5)
    return x.reshape(b, gh * gw, patch * patch * ch)


def tokenize(images, cfg: ModelConfig, params: Params) -> TokenSequence:
    """Linear patch projection, CLS tokens prepended, position embedding added."""
    imgs = images.data if isinstance(images, Tensor) else np.asarray(images)
    if imgs.ndim == 3:
        imgs = imgs[None]
    if imgs.shape[1] != cfg.image_size or imgs.shape[2] != cfg.image_size:
        raise ValueError(f"expected {cfg.image_size}x{cfg.image_size} images, got {imgs.shape[1:3]}")
    dtype = params["patch_embed.weight"].dtype
    # pixels in [0, 1] are centred to [-1, 1] before projection
    pixels = imgs.astype(dtype, copy=False) * dtype.type(2.0) - dtype.type(1.0)
    patches = Tensor(patchify(pixels, cfg.patch_size))
    x_patch = linear(patches, params["patch_embed.weight"], params["patch_embed.bias"])
    return build_sequence(x_patch, params["cls_token"], params["pos_embed"])


def build_sequence(patch_tokens: Tensor, cls_token: Tensor, pos_embed: Tensor) -> TokenSequence:
    """``[cls_1 || ... || cls_c || x_patch] + x_pos``."""
    b, n, d = patch_tokens.shape
    c = cls_token.shape[0]
    if pos_embed.shape != (c + n, d):
        raise ValueError(f"position embedding {pos_embed.shape} does not match {(c + n, d)}")
    cls = broadcast_to(cls_token.reshape(1, c, d), (b, c, d))
    return TokenSequence(concat([cls, patch_tokens], axis=1) + pos_embed, c)


# ---------------------------------------------------------------- encoder
def msa(x: Tensor, lp: Params, heads: int, rng=None, p_drop=0.0) -> tuple[Tensor, Tensor]:
    """Multi-head self-attention on (B, T, C); returns output and (B, K, T, T) weights."""
    b, t, c = x.shape
    if c % heads:
        raise ValueError(f"C={c} not divisible by K={heads}")
    dh = c // heads

    def split(name):
        y = linear(x, lp[f"msa.{name}.weight"], lp[f"msa.{name}.bias"])
        return y.reshape(b, t, heads, dh).transpose(0, 2, 1, 3)

    q, k, v = split("q"), split("k"), split("v")
    scores = mul(matmul(q, swapaxes(k, -1, -2)), 1.0 / math.sqrt(dh))
    attn = softmax_rows(scores)
    ctx = matmul(dropout(attn, p_drop, rng), v).transpose(0, 2, 1, 3).reshape(b, t, c)
    return linear(ctx, lp["msa.o.weight"], lp["msa.o.bias"]), attn


def ffn(x: Tensor, lp: Params) -> Tensor:
    h = gelu(linear(x, lp["ffn.fc1.weight"], lp["ffn.fc1.bias"]))
    return linear(h, lp["ffn.fc2.weight"], lp["ffn.fc2.bias"])


def encoder_block(seq: TokenSequence, lp: Params, heads: int, rng=None, p_drop=0.0):
    x = seq.tokens
    a, attn = msa(layer_norm(x, lp["ln1.weight"], lp["ln1.bias"], LN_EPS), lp, heads, rng, p_drop)
    y = x + dropout(a, p_drop, rng)
    out = y + dropout(ffn(layer_norm(y, lp["ln2.weight"], lp["ln2.bias"], LN_EPS), lp), p_drop, rng)
    return TokenSequence(out, seq.num_cls), attn


def forward_backbone(seq: TokenSequence, params: Params, cfg: ModelConfig, rng=None):
    """Run all blocks, then the final layer norm; returns (sequence, AttentionStack)."""
    b, t, _ = seq.tokens.shape
    p_drop = cfg.dropout if rng is not None else 0.0
    maps = []
    for i in range(cfg.layers):
        seq, attn = encoder_block(seq, block_params(params, i), cfg.heads, rng, p_drop)
        maps.append(attn.data)
    final = layer_norm(seq.tokens, params["norm.weight"], params["norm.bias"], LN_EPS)
    if maps:
        weights = np.stack(maps, axis=1)
    else:
        weights = np.zeros((b, 0, cfg.heads, t, t), dtype=seq.tokens.dtype)
    return TokenSequence(final, seq.num_cls), AttentionStack(weights)


def classify(final: TokenSequence, params: Params, cls_index: int) -> Tensor:
    """Shared FC head on one CLS token's final embedding -> (B, num_classes)."""
    if not 0 <= cls_index < final.num_cls:
        raise IndexError(f"cls index {cls_index} out of range for {final.num_cls} CLS tokens")
    cls = index(final.tokens, (slice(None), cls_index))
    return linear(cls, params["head.weight"], params["head.bias"])
