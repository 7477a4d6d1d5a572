"""Foreground-alignment auxiliary loss on dispatch maps.

Pipeline per sample and target layer: average the dispatch weights over all
slots into a per-token map W (sums to 1 over tokens), binarize W against its
mean (which is exactly 1/m) into an attention mask B, resample the pixel-level
foreground prior onto the token grid, then score

    p = sum(W * (B and M)) / (sum(W * (B or M)) + eps),   loss = -log(p + eps).

B and the two combined masks are constants; gradient reaches the model only
through W.  Samples whose resampled prior is empty are filtered out, and a
batch with no valid sample contributes an exact zero.  ``background`` polarity
scores against the complemented prior.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .tensor import NonFiniteError, Tensor

POLARITIES = ("foreground", "background")


@dataclass(frozen=True)
class GuidanceConfig:
    """Placement and weighting of the alignment loss.

    ``targets`` lists (moe block index, polarity) pairs; the per-layer losses
    are averaged with equal weight.
    """

    enabled: bool = False
    lam: float = 0.01
    eps: float = 1e-6
    targets: tuple = ((4, "foreground"),)

    def __post_init__(self):
        if self.lam < 0:
            raise ValueError(f"guidance lambda must be >= 0, got {self.lam}")
        if self.eps <= 0:
            raise ValueError(f"guidance epsilon must be > 0, got {self.eps}")
        object.__setattr__(self, "targets", tuple((int(b), str(p)) for b, p in self.targets))
        for _, polarity in self.targets:
            if polarity not in POLARITIES:
                raise ValueError(f"unknown mask polarity {polarity!r}; choose from {POLARITIES}")

    @property
    def active(self) -> bool:
        return self.enabled and self.lam > 0 and bool(self.targets)


def grid_side(m: int) -> int:
    side = math.isqrt(m)
    if side * side != m:
        raise ValueError(f"token count {m} is not a perfect square")
    return side


def average_dispatch(dispatch: Tensor) -> Tensor:
    """Per-token mean of dispatch weights over all slots (last axis).

    The result sums to 1 over the token axis because every slot column of the
    dispatch matrix sums to 1.  The token count must be a perfect square so
    the map can live on the patch grid.
    """
    grid_side(dispatch.shape[-2])
    return T.tmean(dispatch, axis=-1)


def binarize_by_mean(avg) -> np.ndarray:
    """Threshold the averaged dispatch map at its own mean; >= maps to 1.

    Operates on values only (no gradient); the mean of a valid map is exactly
    1/m, so at least one entry is always 1.
    """
    arr = avg.data if isinstance(avg, Tensor) else np.asarray(avg)
    thr = arr.mean(axis=-1, keepdims=True)
    return (arr >= thr).astype(np.uint8)


def resample_mask(mask: np.ndarray, side: int) -> np.ndarray:
    """Resample a binary H x W pixel mask onto the token grid.

    A grid cell is foreground iff any source pixel with positive area overlap
    is foreground (area-average pooling followed by != 0).  Returns a flat
    vector of length side**2 in row-major token order.
    """
    mask = np.asarray(mask)
    if mask.ndim != 2:
        raise ValueError(f"pixel mask must be 2-d, got shape {mask.shape}")
    h, w = mask.shape
    if h < side or w < side:
        raise ValueError(f"pixel mask {h}x{w} is smaller than the {side}x{side} token grid")
    binary = (mask != 0)
    if h % side == 0 and w % side == 0:
        blocks = binary.reshape(side, h // side, side, w // side)
        grid = blocks.any(axis=(1, 3))
    else:
        grid = np.zeros((side, side), dtype=bool)
        for r in range(side):
            r0, r1 = (r * h) // side, -((-(r + 1) * h) // side)
            for c in range(side):
                c0, c1 = (c * w) // side, -((-(c + 1) * w) // side)
                grid[r, c] = binary[r0:r1, c0:c1].any()
    return grid.reshape(-1).astype(np.uint8)


def resample_masks(masks: np.ndarray, side: int) -> np.ndarray:
    """Batch version of :func:`resample_mask`: (B, H, W) -> (B, side**2)."""
    masks = np.asarray(masks)
    h, w = masks.shape[-2:]
    if h < side or w < side:
        raise ValueError(f"pixel masks {h}x{w} are smaller than the {side}x{side} token grid")
    if h % side == 0 and w % side == 0:
        blocks = (masks != 0).reshape(masks.shape[0], side, h // side, side, w // side)
        return blocks.any(axis=(2, 4)).reshape(masks.shape[0], -1).astype(np.uint8)
    return np.stack([resample_mask(m, side) for m in masks])


def alignment_score(avg: Tensor, attention_mask: np.ndarray, grid_mask: np.ndarray,
                    eps: float = 1e-6) -> Tensor:
    """Importance alignment score p for one sample.

    ``avg`` is the per-token dispatch average (gradient-carrying); the
    attention mask and the resampled prior are binary constants.  The caller
    must have filtered empty priors already.
    """
    b = np.asarray(attention_mask) != 0
    m = np.asarray(grid_mask) != 0
    if not m.any():
        raise ValueError("alignment_score: empty token-grid mask; filter such samples upstream")
    inter = Tensor((b & m).astype(avg.dtype))
    union = Tensor((b | m).astype(avg.dtype))
    num = T.tsum(avg * inter, axis=-1)
    den = T.add_scalar(T.tsum(avg * union, axis=-1), eps)
    return T.div(num, den)


def aux_loss(dispatch: dict, masks: np.ndarray, cfg: GuidanceConfig) -> Tensor:
    """Alignment loss for a batch, averaged over valid samples and layers.

    ``dispatch`` maps moe block index -> dispatch tensor of shape (B, m, S);
    ``masks`` are the pixel-level foreground priors, shape (B, H, W).  Samples
    with an empty resampled prior (or, under background polarity, an empty
    complement) are excluded; with no valid sample the result is an exact,
    gradient-free zero.
    """
    masks = np.asarray(masks)
    if masks.ndim != 3:
        raise ValueError(f"expected masks of shape (B, H, W), got {masks.shape}")
    batch = masks.shape[0]

    layer_losses = []
    dtype = None
    for layer, polarity in cfg.targets:
        if layer not in dispatch:
            raise ValueError(f"no dispatch recorded for moe block {layer}; have {sorted(dispatch)}")
        d = dispatch[layer]
        if d.ndim != 3 or d.shape[0] != batch:
            raise ValueError(
                f"dispatch for block {layer} has shape {tuple(d.shape)}, "
                f"incompatible with batch of {batch} masks")
        dtype = d.dtype
        side = grid_side(d.shape[-2])

        avg = average_dispatch(d)                       # (B, m), in-graph
        attention = binarize_by_mean(avg)               # constants from here on
        fg = resample_masks(masks, side)
        prior = fg if polarity == "foreground" else (1 - fg)
        valid = fg.any(axis=-1) & prior.any(axis=-1)
        if not valid.any():
            continue

        inter = (attention & prior).astype(dtype.type)
        union = (attention | prior).astype(dtype.type)
        num = T.tsum(avg * Tensor(inter), axis=-1)
        den = T.add_scalar(T.tsum(avg * Tensor(union), axis=-1), cfg.eps)
        score = T.div(num, den)
        per_sample = T.mul_scalar(T.log(T.add_scalar(score, cfg.eps)), -1.0)
        picked = per_sample * Tensor(valid.astype(dtype.type))
        layer_losses.append(T.mul_scalar(T.tsum(picked), 1.0 / int(valid.sum())))

    if not layer_losses:
        return Tensor(np.zeros((), dtype=dtype if dtype is not None else np.float64))
    total = layer_losses[0]
    for extra in layer_losses[1:]:
        total = T.add(total, extra)
    return T.mul_scalar(total, 1.0 / len(cfg.targets))


def total_loss(loss_cls: Tensor, loss_aux: Tensor, lam: float) -> Tensor:
    """Combined objective ``loss_cls + lam * loss_aux``.

    Raises before the optimizer can consume a poisoned value; with ``lam`` of
    zero the classification loss is returned untouched.
    """
    if not np.isfinite(loss_cls.data).all():
        raise NonFiniteError("classification loss is non-finite")
    if not np.isfinite(loss_aux.data).all():
        raise NonFiniteError("auxiliary alignment loss is non-finite")
    if lam == 0:
        return loss_cls
    return T.add(loss_cls, T.mul_scalar(loss_aux, lam))


def dispatch_iou(trace, masks: np.ndarray, layer: int):
    """Unweighted IoU between the binarized dispatch map and the foreground
    prior at one moe block, averaged over samples with nonempty priors.

    ``trace`` is any object with a ``dispatch`` dict.  Returns NaN when no
    sample in the batch has a nonempty prior.
    """
    if layer not in trace.dispatch:
        raise ValueError(f"layer {layer} not recorded; available: {sorted(trace.dispatch)}")
    d = trace.dispatch[layer].data
    side = grid_side(d.shape[-2])
    avg = d.mean(axis=-1)
    attention = (avg >= avg.mean(axis=-1, keepdims=True))
    prior = resample_masks(np.asarray(masks), side).astype(bool)
    valid = prior.any(axis=-1)
    if not valid.any():
        return float("nan")
    inter = (attention & prior).sum(axis=-1)
    union = (attention | prior).sum(axis=-1)
    return float((inter[valid] / union[valid]).mean())
