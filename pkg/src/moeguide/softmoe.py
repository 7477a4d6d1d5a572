"""Soft mixture-of-experts layer: continuous dispatch/combine routing over
learned slots, per-expert MLPs, and a configurable skip-connection gain.

Routing uses a single logit matrix ``x @ phi`` (tokens x slots).  Dispatch
weights are the softmax over the token axis (each slot's column sums to 1);
combine weights are the softmax over the slot axis (each token's row sums
to 1).  Slot inputs are ``D^T x``; expert outputs are mixed back per token
with ``C``.  The skip path can be an identity, a zero-initialized learnable
scalar or per-channel vector gain, a scalar gain over an extra linear map,
or removed entirely.
"""

from __future__ import annotations

import numpy as np

from . import tensor as T
from .tensor import ShapeError, Tensor

LAYERSCALE_VARIANTS = ("identity", "scalar", "vector", "scalar_linear", "no_skip")


def trunc_normal(rng, shape, std=0.02, dtype=np.float32):
    """Normal(0, std) with draws outside +-2 std resampled."""
    out = rng.normal(0.0, std, size=shape)
    bad = np.abs(out) > 2.0 * std
    while bad.any():
        out[bad] = rng.normal(0.0, std, size=int(bad.sum()))
        bad = np.abs(out) > 2.0 * std
    return np.ascontiguousarray(out, dtype=dtype)


def routing_logits(x: Tensor, phi: Tensor) -> Tensor:
    """Token-slot logits x @ phi, shared by dispatch and combine weights."""
    if x.ndim < 2 or x.shape[-2] == 0:
        raise ShapeError(f"routing: need at least one token, got shape {tuple(x.shape)}")
    if phi.shape[-1] == 0:
        raise ShapeError("routing: zero slots (N*p = 0)")
    return T.matmul(x, phi)


def compute_dispatch_weights(x: Tensor, phi: Tensor) -> Tensor:
    """Column-stochastic dispatch weights: softmax of x @ phi over tokens."""
    return T.softmax(routing_logits(x, phi), axis=-2)


def compute_combine_weights(x: Tensor, phi: Tensor) -> Tensor:
    """Row-stochastic combine weights: softmax of x @ phi over slots."""
    return T.softmax(routing_logits(x, phi), axis=-1)


class ExpertMlp:
    """Two-layer GELU perceptron applied row-wise to slot vectors."""

    def __init__(self, dim, hidden, rng, dtype=np.float32):
        self.w1 = Tensor(trunc_normal(rng, (dim, hidden), dtype=dtype), requires_grad=True)
        self.b1 = Tensor(np.zeros(hidden, dtype=dtype), requires_grad=True)
        self.w2 = Tensor(trunc_normal(rng, (hidden, dim), dtype=dtype), requires_grad=True)
        self.b2 = Tensor(np.zeros(dim, dtype=dtype), requires_grad=True)

    def __call__(self, slots: Tensor) -> Tensor:
        h = T.gelu(T.matmul(slots, self.w1) + self.b1)
        return T.matmul(h, self.w2) + self.b2

    def params(self, prefix):
        return [
            (f"{prefix}.w1", self.w1, True),
            (f"{prefix}.b1", self.b1, False),
            (f"{prefix}.w2", self.w2, True),
            (f"{prefix}.b2", self.b2, False),
        ]


class LayerScale:
    """Skip-connection modulation.  ``scalar`` and ``vector`` gains start at
    exactly zero, so at initialization the layer output equals the combine
    output alone."""

    def __init__(self, variant, dim, rng=None, dtype=np.float32):
        if variant not in LAYERSCALE_VARIANTS:
            raise ValueError(f"unknown LayerScale variant {variant!r}; choose from {LAYERSCALE_VARIANTS}")
        self.variant = variant
        self.gamma = None
        self.w = None
        self.b = None
        if variant == "scalar":
            self.gamma = Tensor(np.zeros((), dtype=dtype), requires_grad=True)
        elif variant == "vector":
            self.gamma = Tensor(np.zeros(dim, dtype=dtype), requires_grad=True)
        elif variant == "scalar_linear":
            self.gamma = Tensor(np.zeros((), dtype=dtype), requires_grad=True)
            bound = 1.0 / np.sqrt(dim)
            self.w = Tensor(rng.uniform(-bound, bound, (dim, dim)).astype(dtype), requires_grad=True)
            self.b = Tensor(np.zeros(dim, dtype=dtype), requires_grad=True)

    def apply(self, r: Tensor, x: Tensor) -> Tensor:
        if self.variant == "identity":
            return r + x
        if self.variant == "scalar":
            return r + self.gamma * x
        if self.variant == "vector":
            return r + self.gamma * x
        if self.variant == "scalar_linear":
            return r + self.gamma * (T.matmul(x, self.w) + self.b)
        return r  # no_skip

    def params(self, prefix):
        out = []
        if self.gamma is not None:
            out.append((f"{prefix}.gamma", self.gamma, False))
        if self.w is not None:
            out.append((f"{prefix}.w", self.w, True))
            out.append((f"{prefix}.b", self.b, False))
        return out


def expert_mlp_forward(expert: ExpertMlp, slots: Tensor) -> Tensor:
    """Apply one expert's MLP row-wise to its slot matrix."""
    return expert(slots)


def soft_moe_forward(x: Tensor, phi: Tensor, experts, layer_scale: LayerScale):
    """Full soft-MoE pass.

    Returns ``(y, dispatch)`` where ``y`` is the token output after the
    configured skip variant and ``dispatch`` is the column-stochastic weight
    matrix kept for guidance losses and visualization.
    """
    n_experts = len(experts)
    n_slots = phi.shape[-1]
    if n_experts == 0 or n_slots % n_experts != 0:
        raise ShapeError(f"soft_moe: {n_slots} slot columns do not split over {n_experts} experts")
    slots_per_expert = n_slots // n_experts

    logits = routing_logits(x, phi)
    dispatch = T.softmax(logits, axis=-2)
    combine = T.softmax(logits, axis=-1)

    slot_inputs = T.matmul(T.swap_last(dispatch), x)
    slot_outputs = [
        experts[i](slot_inputs[..., i * slots_per_expert:(i + 1) * slots_per_expert, :])
        for i in range(n_experts)
    ]
    mixed = T.matmul(combine, T.concat(slot_outputs, axis=-2))
    return layer_scale.apply(mixed, x), dispatch


class SoftMoELayer:
    def __init__(self, dim, num_experts, slots_per_expert, rng,
                 hidden_expansion=4, layer_scale="identity", dtype=np.float32):
        if num_experts < 1 or slots_per_expert < 1:
            raise ValueError("need num_experts >= 1 and slots_per_expert >= 1")
        self.num_experts = num_experts
        self.slots_per_expert = slots_per_expert
        self.phi = Tensor(trunc_normal(rng, (dim, num_experts * slots_per_expert), dtype=dtype),
                          requires_grad=True)
        self.experts = [
            ExpertMlp(dim, hidden_expansion * dim, rng, dtype=dtype) for _ in range(num_experts)
        ]
        self.layer_scale = LayerScale(layer_scale, dim, rng=rng, dtype=dtype)

    def forward(self, x: Tensor):
        return soft_moe_forward(x, self.phi, self.experts, self.layer_scale)

    __call__ = forward

    def params(self, prefix):
        out = [(f"{prefix}.phi", self.phi, True)]
        for i, e in enumerate(self.experts):
            out.extend(e.params(f"{prefix}.expert{i}"))
        out.extend(self.layer_scale.params(f"{prefix}.skip"))
        return out
