"""Desk-scale vision transformer with soft-MoE blocks and dispatch tracing.

Pre-norm blocks: the first sub-block is always multi-head self-attention with
a plain residual; the second is either a dense MLP with a plain residual or,
for configured blocks, a soft-MoE layer whose skip variant is applied inside
the layer.  There is no class token: classification is a final layer norm,
token mean-pool, and a linear head, so the token count stays a perfect square
for the guidance grid.  Every forward records the dispatch weights of every
moe block.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from . import tensor as T
from .softmoe import LAYERSCALE_VARIANTS, SoftMoELayer, trunc_normal
from .tensor import ShapeError, Tensor


@dataclass(frozen=True)
class ModelConfig:
    image_side: int = 32
    patch_side: int = 4
    channels: int = 3
    dim: int = 64
    depth: int = 4
    heads: int = 4
    moe_blocks: tuple = (3, 4)
    experts: int = 8
    slots: int = 1
    mlp_expansion: int = 4
    layerscale: tuple = ((4, "vector"),)
    classes: int = 4

    def __post_init__(self):
        object.__setattr__(self, "moe_blocks", tuple(int(b) for b in self.moe_blocks))
        object.__setattr__(self, "layerscale",
                           tuple((int(b), str(v)) for b, v in self.layerscale))
        if self.image_side % self.patch_side != 0:
            raise ValueError(
                f"image_side {self.image_side} not divisible by patch_side {self.patch_side}")
        if self.dim % self.heads != 0:
            raise ValueError(f"dim {self.dim} not divisible by heads {self.heads}")
        if self.depth < 1 or self.classes < 1:
            raise ValueError("depth and classes must be >= 1")
        if self.experts < 1 or self.slots < 1:
            raise ValueError("experts and slots must be >= 1")
        for b in self.moe_blocks:
            if not 1 <= b <= self.depth:
                raise ValueError(f"moe block {b} outside 1..{self.depth}")
        seen = set()
        for b, variant in self.layerscale:
            if b in seen:
                raise ValueError(f"duplicate layerscale entry for block {b}")
            seen.add(b)
            if b not in self.moe_blocks:
                raise ValueError(f"layerscale block {b} is not a moe block {self.moe_blocks}")
            if variant not in LAYERSCALE_VARIANTS:
                raise ValueError(f"unknown layerscale variant {variant!r}")

    @property
    def grid_side(self) -> int:
        return self.image_side // self.patch_side

    @property
    def tokens(self) -> int:
        return self.grid_side ** 2

    @property
    def patch_dim(self) -> int:
        return self.channels * self.patch_side ** 2

    def layerscale_for(self, block: int) -> str:
        for b, variant in self.layerscale:
            if b == block:
                return variant
        return "identity"

    def to_dict(self) -> dict:
        return {
            "image_side": self.image_side, "patch_side": self.patch_side,
            "channels": self.channels, "dim": self.dim, "depth": self.depth,
            "heads": self.heads, "moe_blocks": list(self.moe_blocks),
            "experts": self.experts, "slots": self.slots,
            "mlp_expansion": self.mlp_expansion,
            "layerscale": [list(p) for p in self.layerscale],
            "classes": self.classes,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        d = dict(d)
        d["moe_blocks"] = tuple(d.get("moe_blocks", ()))
        d["layerscale"] = tuple(tuple(p) for p in d.get("layerscale", ()))
        return cls(**d)


def tiny_config(layerscale_variant: str = "vector") -> ModelConfig:
    """Smallest end-to-end model used by the gradient checker."""
    ls = () if layerscale_variant == "identity" else ((2, layerscale_variant),)
    return ModelConfig(image_side=8, patch_side=4, channels=3, dim=8, depth=2, heads=2,
                       moe_blocks=(2,), experts=2, slots=1, mlp_expansion=2,
                       layerscale=ls, classes=2)


@dataclass
class ForwardTrace:
    logits: Tensor
    dispatch: dict = field(default_factory=dict)


class _LayerNorm:
    def __init__(self, dim, dtype):
        self.gain = Tensor(np.ones(dim, dtype=dtype), requires_grad=True)
        self.bias = Tensor(np.zeros(dim, dtype=dtype), requires_grad=True)

    def __call__(self, x):
        return T.layer_norm(x) * self.gain + self.bias

    def params(self, prefix):
        return [(f"{prefix}.gain", self.gain, False), (f"{prefix}.bias", self.bias, False)]


class Attention:
    """Multi-head self-attention over (B, m, d) tokens."""

    def __init__(self, dim, heads, rng, dtype):
        self.heads = heads
        self.head_dim = dim // heads
        self.scale = 1.0 / math.sqrt(self.head_dim)
        for name in ("wq", "wk", "wv", "wo"):
            setattr(self, name, Tensor(trunc_normal(rng, (dim, dim), dtype=dtype), requires_grad=True))
        for name in ("bq", "bk", "bv", "bo"):
            setattr(self, name, Tensor(np.zeros(dim, dtype=dtype), requires_grad=True))

    def _split(self, t, b, m):
        return T.transpose(T.reshape(t, (b, m, self.heads, self.head_dim)), (0, 2, 1, 3))

    def __call__(self, x):
        if x.ndim != 3:
            raise ShapeError(f"attention expects (B, m, d), got {tuple(x.shape)}")
        b, m, d = x.shape
        q = self._split(T.matmul(x, self.wq) + self.bq, b, m)
        k = self._split(T.matmul(x, self.wk) + self.bk, b, m)
        v = self._split(T.matmul(x, self.wv) + self.bv, b, m)
        att = T.softmax(T.mul_scalar(T.matmul(q, T.swap_last(k)), self.scale), axis=-1)
        out = T.reshape(T.transpose(T.matmul(att, v), (0, 2, 1, 3)), (b, m, d))
        return T.matmul(out, self.wo) + self.bo

    def params(self, prefix):
        out = []
        for name in ("wq", "wk", "wv", "wo"):
            out.append((f"{prefix}.{name}", getattr(self, name), True))
        for name in ("bq", "bk", "bv", "bo"):
            out.append((f"{prefix}.{name}", getattr(self, name), False))
        return out


class Mlp:
    def __init__(self, dim, hidden, rng, dtype):
        self.w1 = Tensor(trunc_normal(rng, (dim, hidden), dtype=dtype), requires_grad=True)
        self.b1 = Tensor(np.zeros(hidden, dtype=dtype), requires_grad=True)
        self.w2 = Tensor(trunc_normal(rng, (hidden, dim), dtype=dtype), requires_grad=True)
        self.b2 = Tensor(np.zeros(dim, dtype=dtype), requires_grad=True)

    def __call__(self, x):
        return T.matmul(T.gelu(T.matmul(x, self.w1) + self.b1), self.w2) + self.b2

    def params(self, prefix):
        return [
            (f"{prefix}.w1", self.w1, True), (f"{prefix}.b1", self.b1, False),
            (f"{prefix}.w2", self.w2, True), (f"{prefix}.b2", self.b2, False),
        ]


class Block:
    """One transformer block; ``index`` is 1-based to match config notation."""

    def __init__(self, index, cfg: ModelConfig, rng, dtype):
        self.index = index
        self.is_moe = index in cfg.moe_blocks
        self.ln1 = _LayerNorm(cfg.dim, dtype)
        self.attn = Attention(cfg.dim, cfg.heads, rng, dtype)
        self.ln2 = _LayerNorm(cfg.dim, dtype)
        if self.is_moe:
            self.moe = SoftMoELayer(cfg.dim, cfg.experts, cfg.slots, rng,
                                    hidden_expansion=cfg.mlp_expansion,
                                    layer_scale=cfg.layerscale_for(index), dtype=dtype)
        else:
            self.mlp = Mlp(cfg.dim, cfg.mlp_expansion * cfg.dim, rng, dtype)

    def __call__(self, x):
        h = T.add(x, self.attn(self.ln1(x)))
        if self.is_moe:
            y, dispatch = self.moe(self.ln2(h))
            return y, dispatch
        return T.add(h, self.mlp(self.ln2(h))), None

    def params(self):
        prefix = f"block{self.index}"
        out = self.ln1.params(f"{prefix}.ln1") + self.attn.params(f"{prefix}.attn")
        out += self.ln2.params(f"{prefix}.ln2")
        if self.is_moe:
            out += self.moe.params(f"{prefix}.moe")
        else:
            out += self.mlp.params(f"{prefix}.mlp")
        return out


class VisionTransformer:
    def __init__(self, cfg: ModelConfig, seed: int = 0, dtype=np.float32):
        self.cfg = cfg
        self.dtype = np.dtype(dtype)
        rng = np.random.Generator(np.random.PCG64(np.random.SeedSequence([seed, 0x6D6F65])))
        d = cfg.dim
        self.proj = Tensor(trunc_normal(rng, (cfg.patch_dim, d), dtype=dtype), requires_grad=True)
        self.proj_bias = Tensor(np.zeros(d, dtype=dtype), requires_grad=True)
        self.pos = Tensor(trunc_normal(rng, (cfg.tokens, d), dtype=dtype), requires_grad=True)
        self.blocks = [Block(i, cfg, rng, dtype) for i in range(1, cfg.depth + 1)]
        self.final_ln = _LayerNorm(d, dtype)
        self.head_w = Tensor(trunc_normal(rng, (d, cfg.classes), dtype=dtype), requires_grad=True)
        self.head_b = Tensor(np.zeros(cfg.classes, dtype=dtype), requires_grad=True)

    def patchify(self, images: np.ndarray) -> np.ndarray:
        """(B, C, H, W) images -> (B, m, patch_dim) rows in row-major patch
        order, top-left patch first; within a patch the layout is channel,
        then pixel row, then pixel column."""
        images = np.asarray(images)
        if images.ndim == 3:
            images = images[None]
        cfg = self.cfg
        b, c, h, w = images.shape
        if c != cfg.channels or h != cfg.image_side or w != cfg.image_side:
            raise ShapeError(
                f"expected images of shape (B, {cfg.channels}, {cfg.image_side}, "
                f"{cfg.image_side}), got {images.shape}")
        g, p = cfg.grid_side, cfg.patch_side
        patches = images.reshape(b, c, g, p, g, p).transpose(0, 2, 4, 1, 3, 5)
        return np.ascontiguousarray(patches.reshape(b, cfg.tokens, cfg.patch_dim),
                                    dtype=self.dtype)

    def forward(self, images: np.ndarray = None, patches: np.ndarray = None) -> ForwardTrace:
        if patches is None:
            patches = self.patchify(images)
        x = T.matmul(Tensor(patches), self.proj) + self.proj_bias + self.pos
        dispatch = {}
        for block in self.blocks:
            x, d = block(x)
            if d is not None:
                dispatch[block.index] = d
        pooled = T.tmean(self.final_ln(x), axis=-2)
        logits = T.matmul(pooled, self.head_w) + self.head_b
        return ForwardTrace(logits=logits, dispatch=dispatch)

    __call__ = forward

    def _params_with_decay(self):
        out = [
            ("patch.proj", self.proj, True),
            ("patch.bias", self.proj_bias, False),
            ("patch.pos", self.pos, False),
        ]
        for block in self.blocks:
            out.extend(block.params())
        out += self.final_ln.params("final_ln")
        out += [("head.w", self.head_w, True), ("head.b", self.head_b, False)]
        return out

    def named_params(self):
        return [(name, t) for name, t, _ in self._params_with_decay()]

    def no_decay_names(self):
        return {name for name, _, decay in self._params_with_decay() if not decay}

    def param_arrays(self) -> dict:
        return {name: t.data for name, t in self.named_params()}

    def load_param_arrays(self, arrays: dict):
        for name, t in self.named_params():
            if name not in arrays:
                raise KeyError(f"missing parameter '{name}'")
            src = arrays[name]
            if src.shape != t.data.shape:
                raise ValueError(f"parameter '{name}': shape {src.shape} != {t.data.shape}")
            t.data = np.ascontiguousarray(src, dtype=self.dtype)
            t.grad = None


def cross_entropy(logits: Tensor, labels) -> Tensor:
    """Mean negative log softmax probability of the true labels."""
    labels = np.asarray(labels)
    if logits.ndim != 2 or labels.shape != (logits.shape[0],):
        raise ShapeError(f"cross_entropy: logits {tuple(logits.shape)} vs labels {labels.shape}")
    classes = logits.shape[1]
    if labels.min() < 0 or labels.max() >= classes:
        raise ValueError(f"label out of range [0, {classes}): {labels}")
    # constant shift keeps exp() in range without touching the gradient
    shift = Tensor(logits.data.max(axis=-1, keepdims=True))
    z = T.sub(logits, shift)
    lse = T.log(T.tsum(T.exp(z), axis=-1))
    onehot = np.zeros(logits.shape, dtype=logits.dtype)
    onehot[np.arange(labels.shape[0]), labels] = 1
    picked = T.tsum(z * Tensor(onehot), axis=-1)
    return T.tmean(T.sub(lse, picked), axis=0)


def top1_accuracy(logits: Tensor, labels) -> float:
    pred = np.argmax(logits.data, axis=-1)
    return float((pred == np.asarray(labels)).mean())
