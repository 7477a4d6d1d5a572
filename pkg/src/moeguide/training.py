"""Training harness: AdamW with linear warmup + cosine decay, guidance-loss
wiring, per-epoch metrics, and resumable checkpoints.

Determinism contract: given identical configs and seeds, two runs produce
bit-identical metric histories, and resuming from a saved epoch reproduces
the uninterrupted run exactly.  Shuffling depends only on (seed, epoch).
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from . import tensor as T
from .checkpoint import CheckpointError, load_checkpoint, save_checkpoint
from .data import ArrayDataset, epoch_permutation
from .guidance import GuidanceConfig, aux_loss, dispatch_iou, total_loss  # noqa: F401 (dispatch_iou re-exported)
from .model import VisionTransformer, cross_entropy
from .tensor import GRAPH, NonFiniteError, Tensor


@dataclass(frozen=True)
class TrainConfig:
    epochs: int = 30
    warmup_epochs: int = 3
    base_lr: float = 1e-3
    warmup_lr: float = 1e-6
    min_lr: float = 1e-5
    weight_decay: float = 0.05
    batch_size: int = 100
    seed: int = 0
    precision: int = 32
    guidance: GuidanceConfig = field(default_factory=GuidanceConfig)

    def __post_init__(self):
        if self.warmup_epochs > self.epochs:
            raise ValueError(f"warmup_epochs {self.warmup_epochs} > epochs {self.epochs}")
        if min(self.base_lr, self.warmup_lr, self.min_lr) <= 0:
            raise ValueError("learning rates must be > 0")
        if self.precision not in (32, 64):
            raise ValueError(f"precision must be 32 or 64, got {self.precision}")
        if self.batch_size < 1 or self.epochs < 1:
            raise ValueError("batch_size and epochs must be >= 1")

    @property
    def dtype(self):
        return np.float32 if self.precision == 32 else np.float64

    def to_dict(self) -> dict:
        return {
            "epochs": self.epochs, "warmup_epochs": self.warmup_epochs,
            "base_lr": self.base_lr, "warmup_lr": self.warmup_lr,
            "min_lr": self.min_lr, "weight_decay": self.weight_decay,
            "batch_size": self.batch_size, "seed": self.seed,
            "precision": self.precision,
            "guidance": {
                "enabled": self.guidance.enabled, "lambda": self.guidance.lam,
                "epsilon": self.guidance.eps,
                "targets": [list(t) for t in self.guidance.targets],
            },
        }

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        d = dict(d)
        g = d.pop("guidance", {})
        guidance = GuidanceConfig(
            enabled=g.get("enabled", False), lam=g.get("lambda", 0.01),
            eps=g.get("epsilon", 1e-6),
            targets=tuple(tuple(t) for t in g.get("targets", ())),
        )
        return cls(guidance=guidance, **d)


def lr_at(step: int, steps_per_epoch: int, cfg: TrainConfig) -> float:
    """Linear warmup to base_lr, then cosine decay ending exactly at min_lr
    on the last step of training."""
    warm = cfg.warmup_epochs * steps_per_epoch
    total = cfg.epochs * steps_per_epoch
    if step < warm:
        return cfg.warmup_lr + (cfg.base_lr - cfg.warmup_lr) * (step / warm)
    span = max(total - 1 - warm, 1)
    t = min((step - warm) / span, 1.0)
    return cfg.min_lr + 0.5 * (cfg.base_lr - cfg.min_lr) * (1.0 + math.cos(math.pi * t))


class AdamW:
    """Decoupled weight decay (applied before the moment update), bias-corrected
    moments; parameters in ``no_decay`` skip the decay term."""

    def __init__(self, named_params, no_decay=frozenset(),
                 beta1=0.9, beta2=0.999, eps=1e-8):
        self.named_params = list(named_params)
        self.no_decay = frozenset(no_decay)
        self.beta1, self.beta2, self.eps = beta1, beta2, eps
        self.step_count = 0
        self.m = {name: np.zeros_like(p.data) for name, p in self.named_params}
        self.v = {name: np.zeros_like(p.data) for name, p in self.named_params}

    def zero_grad(self):
        for _, p in self.named_params:
            p.grad = None

    def step(self, lr: float, weight_decay: float):
        for name, p in self.named_params:
            g = p.grad
            if g is not None and not np.isfinite(g).all():
                raise NonFiniteError(f"non-finite gradient for parameter '{name}'")
        self.step_count += 1
        t = self.step_count
        bc1 = 1.0 - self.beta1 ** t
        bc2 = 1.0 - self.beta2 ** t
        for name, p in self.named_params:
            g = p.grad if p.grad is not None else np.zeros_like(p.data)
            if weight_decay and name not in self.no_decay:
                p.data -= lr * weight_decay * p.data
            m = self.m[name]
            v = self.v[name]
            m *= self.beta1
            m += (1.0 - self.beta1) * g
            v *= self.beta2
            v += (1.0 - self.beta2) * (g * g)
            p.data -= lr * (m / bc1) / (np.sqrt(v / bc2) + self.eps)

    def state_arrays(self) -> dict:
        out = {}
        for name, _ in self.named_params:
            out[f"adam.m.{name}"] = self.m[name]
            out[f"adam.v.{name}"] = self.v[name]
        return out

    def load_state_arrays(self, arrays: dict, step_count: int):
        for name, p in self.named_params:
            for store, key in ((self.m, f"adam.m.{name}"), (self.v, f"adam.v.{name}")):
                if key not in arrays:
                    raise CheckpointError(f"missing optimizer state '{key}'")
                arr = arrays[key]
                if arr.shape != p.data.shape:
                    raise CheckpointError(f"optimizer state '{key}' has shape {arr.shape}")
                store[name] = np.ascontiguousarray(arr, dtype=p.data.dtype)
        self.step_count = int(step_count)


METRIC_BASE_COLUMNS = ("epoch", "split", "top1", "loss_cls", "loss_aux")


def metric_columns(moe_blocks) -> list:
    return list(METRIC_BASE_COLUMNS) + [f"iou_layer_{b}" for b in sorted(moe_blocks)]


def history_to_csv(history, moe_blocks) -> str:
    cols = metric_columns(moe_blocks)
    lines = [",".join(cols)]
    for row in history:
        cells = []
        for c in cols:
            v = row[c]
            cells.append(str(v) if isinstance(v, (str, int)) else repr(float(v)))
        lines.append(",".join(cells))
    return "\n".join(lines) + "\n"


def evaluate(model: VisionTransformer, dataset: ArrayDataset, cfg: TrainConfig,
             patches: np.ndarray = None) -> dict:
    """Full forward pass over a dataset: top-1, mean losses, per-layer IoU."""
    if patches is None:
        patches = model.patchify(dataset.images)
    n = len(dataset)
    bs = cfg.batch_size
    correct = 0
    cls_sum = 0.0
    aux_sum = 0.0
    iou_sum = {b: 0.0 for b in model.cfg.moe_blocks}
    iou_valid = {b: 0 for b in model.cfg.moe_blocks}
    with T.no_grad():
        for lo in range(0, n, bs):
            hi = min(lo + bs, n)
            trace = model.forward(patches=patches[lo:hi])
            labels = dataset.labels[lo:hi]
            correct += int((np.argmax(trace.logits.data, axis=-1) == labels).sum())
            cls_sum += float(cross_entropy(trace.logits, labels).data) * (hi - lo)
            if cfg.guidance.active:
                aux_sum += float(aux_loss(trace.dispatch, dataset.masks[lo:hi],
                                          cfg.guidance).data) * (hi - lo)
            for b in model.cfg.moe_blocks:
                s, v = _iou_counts(trace, dataset.masks[lo:hi], b)
                iou_sum[b] += s
                iou_valid[b] += v
    out = {
        "top1": correct / n,
        "loss_cls": cls_sum / n,
        "loss_aux": aux_sum / n,
    }
    for b in model.cfg.moe_blocks:
        out[f"iou_layer_{b}"] = (iou_sum[b] / iou_valid[b]) if iou_valid[b] else float("nan")
    return out


def _iou_counts(trace, masks, layer):
    """Per-sample IoU sum and valid-sample count, so means aggregate exactly
    across batches."""
    from .guidance import grid_side, resample_masks
    d = trace.dispatch[layer].data
    side = grid_side(d.shape[-2])
    avg = d.mean(axis=-1)
    attention = avg >= avg.mean(axis=-1, keepdims=True)
    prior = resample_masks(masks, side).astype(bool)
    valid = prior.any(axis=-1)
    if not valid.any():
        return 0.0, 0
    inter = (attention & prior).sum(axis=-1)[valid]
    union = (attention | prior).sum(axis=-1)[valid]
    return float((inter / union).sum()), int(valid.sum())


def train(model: VisionTransformer, train_set: ArrayDataset, val_set: ArrayDataset,
          cfg: TrainConfig, out_dir=None, save_every: int = 0, resume=None,
          log=None) -> list:
    """Run the optimization loop; returns the metric history (one train row
    and one val row per epoch).  ``resume`` is a checkpoint path."""
    if model.dtype != np.dtype(cfg.dtype):
        raise ValueError(f"model dtype {model.dtype} != configured precision {cfg.precision}")
    n = len(train_set)
    steps_per_epoch = -(-n // cfg.batch_size)
    params = model.named_params()
    opt = AdamW(params, no_decay=model.no_decay_names())
    rng = np.random.Generator(np.random.PCG64(np.random.SeedSequence([cfg.seed, 0x747261696E])))

    start_epoch = 0
    if resume is not None:
        ck = load_checkpoint(resume)
        if ck.model_config != model.cfg.to_dict():
            raise CheckpointError("checkpoint model config does not match the current model")
        model.load_param_arrays({k: v for k, v in ck.arrays.items() if not k.startswith("adam.")})
        opt.load_state_arrays(ck.arrays, ck.opt_step)
        rng.bit_generator.state = ck.rng_state
        start_epoch = ck.epoch

    train_patches = model.patchify(train_set.images)
    val_patches = model.patchify(val_set.images)
    guided = cfg.guidance.active
    history = []

    def save(path, epoch):
        arrays = dict(model.param_arrays())
        arrays.update(opt.state_arrays())
        save_checkpoint(path, model_config=model.cfg.to_dict(),
                        train_config=cfg.to_dict(), epoch=epoch,
                        opt_step=opt.step_count, rng_state=rng.bit_generator.state,
                        arrays=arrays)

    global_step = start_epoch * steps_per_epoch
    for epoch in range(start_epoch + 1, cfg.epochs + 1):
        perm = epoch_permutation(n, cfg.seed, epoch)
        cls_sum = aux_sum = 0.0
        correct = 0
        iou_inter = {b: 0.0 for b in model.cfg.moe_blocks}
        iou_valid = {b: 0 for b in model.cfg.moe_blocks}
        for lo in range(0, n, cfg.batch_size):
            idx = perm[lo:lo + cfg.batch_size]
            trace = model.forward(patches=train_patches[idx])
            labels = train_set.labels[idx]
            loss_cls = cross_entropy(trace.logits, labels)
            if guided:
                loss_aux = aux_loss(trace.dispatch, train_set.masks[idx], cfg.guidance)
            else:
                loss_aux = Tensor(np.zeros((), dtype=cfg.dtype))
            loss = total_loss(loss_cls, loss_aux, cfg.guidance.lam if guided else 0.0)

            correct += int((np.argmax(trace.logits.data, axis=-1) == labels).sum())
            cls_sum += float(loss_cls.data) * len(idx)
            aux_sum += float(loss_aux.data) * len(idx)
            for b in model.cfg.moe_blocks:
                s, v = _iou_counts(trace, train_set.masks[idx], b)
                iou_inter[b] += s
                iou_valid[b] += v

            T.backward(loss)
            opt.step(lr_at(global_step, steps_per_epoch, cfg), cfg.weight_decay)
            opt.zero_grad()
            GRAPH.reset()
            global_step += 1

        row = {"epoch": epoch, "split": "train", "top1": correct / n,
               "loss_cls": cls_sum / n, "loss_aux": aux_sum / n}
        for b in model.cfg.moe_blocks:
            row[f"iou_layer_{b}"] = (iou_inter[b] / iou_valid[b]) if iou_valid[b] else float("nan")
        history.append(row)

        val = evaluate(model, val_set, cfg, patches=val_patches)
        history.append({"epoch": epoch, "split": "val", **val})
        if log:
            log(f"epoch {epoch}/{cfg.epochs} "
                f"train_top1={row['top1']:.4f} val_top1={val['top1']:.4f} "
                f"loss_cls={val['loss_cls']:.4f} loss_aux={val['loss_aux']:.4f}")

        if out_dir is not None:
            if save_every and epoch % save_every == 0:
                save(f"{out_dir}/checkpoint_ep{epoch:04d}.ckpt", epoch)
            save(f"{out_dir}/checkpoint.ckpt", epoch)

    return history
