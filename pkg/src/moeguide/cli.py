"""Command-line surface: gen-data, train, eval, visualize, grad-check.

Exit codes: 0 success, 1 runtime failure, 2 usage or configuration error.
Every command overwrites its ``--out`` artifacts deterministically, so
re-running with identical inputs yields identical bytes.
"""

from __future__ import annotations

import argparse
import sys
from pathlib import Path

import numpy as np

from .checkpoint import CheckpointError, load_checkpoint
from .config import ConfigError, format_configs, load_config
from .data import SHAPE_CLASSES, gen_synthetic, load_dataset, make_sample
from .gradcheck import grad_check
from .guidance import GuidanceConfig, aux_loss, total_loss
from .model import ModelConfig, VisionTransformer, cross_entropy, tiny_config
from .netpbm import NetpbmError
from .softmoe import LAYERSCALE_VARIANTS
from .training import TrainConfig, evaluate, history_to_csv, train
from .visualize import export_dispatch_maps

GRADCHECK_BOUND = 2048  # refuse grad-check when tokens * dim * depth exceeds this


def _echo_config(out_dir, model_cfg, train_cfg):
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    (out / "config.txt").write_text(format_configs(model_cfg, train_cfg), encoding="utf-8")


def _check_data_compat(model_cfg: ModelConfig, dataset, what: str):
    n, c, h, w = dataset.images.shape
    if (c, h, w) != (model_cfg.channels, model_cfg.image_side, model_cfg.image_side):
        raise ConfigError(
            f"{what}: images are {(c, h, w)} but the model expects "
            f"({model_cfg.channels}, {model_cfg.image_side}, {model_cfg.image_side})")
    if dataset.labels.max() >= model_cfg.classes:
        raise ConfigError(
            f"{what}: label {int(dataset.labels.max())} out of range for "
            f"{model_cfg.classes} classes")


def cmd_gen_data(args) -> int:
    if args.n < 0:
        raise ConfigError(f"--n must be >= 0, got {args.n}")
    if not 1 <= args.classes <= len(SHAPE_CLASSES):
        raise ConfigError(
            f"--classes must be in 1..{len(SHAPE_CLASSES)} (shape families), got {args.classes}")
    if args.side < 8:
        raise ConfigError(f"--side must be >= 8, got {args.side}")
    counts = gen_synthetic(args.out, args.n, args.classes, args.seed,
                           image_side=args.side, val_n=args.val_n)
    for label in sorted(counts):
        print(f"class {label} ({SHAPE_CLASSES[label]}): {counts[label]} samples")
    print(f"wrote {args.n} train + {args.val_n} val samples to {args.out}")
    return 0


def _final_summary(history, moe_blocks) -> str:
    val_rows = [r for r in history if r["split"] == "val"]
    last = val_rows[-1]
    parts = [f"top1={last['top1']!r}"]
    for b in sorted(moe_blocks):
        parts.append(f"iou@{b}={last[f'iou_layer_{b}']!r}")
    return " ".join(parts)


def cmd_train(args) -> int:
    model_cfg, train_cfg = load_config(args.config, args.override)
    out = Path(args.out)
    _echo_config(out, model_cfg, train_cfg)
    train_set = load_dataset(args.data, split="train")
    try:
        val_set = load_dataset(args.data, split="val")
    except FileNotFoundError:
        val_set = train_set
    _check_data_compat(model_cfg, train_set, "train split")
    _check_data_compat(model_cfg, val_set, "val split")

    model = VisionTransformer(model_cfg, seed=train_cfg.seed, dtype=train_cfg.dtype)
    history = train(model, train_set, val_set, train_cfg, out_dir=str(out),
                    save_every=args.save_every, resume=args.resume,
                    log=lambda msg: print(msg, flush=True))
    (out / "metrics.csv").write_text(history_to_csv(history, model_cfg.moe_blocks),
                                     encoding="utf-8")
    print(_final_summary(history, model_cfg.moe_blocks))
    return 0


def cmd_eval(args) -> int:
    ck = load_checkpoint(args.checkpoint)
    model_cfg = ModelConfig.from_dict(ck.model_config)
    train_cfg = TrainConfig.from_dict(ck.train_config)
    if args.config is not None:
        file_model, file_train = load_config(args.config, args.override)
        if file_model != model_cfg:
            raise ConfigError("--config model section does not match the checkpoint")
        train_cfg = file_train
    elif args.override:
        from .config import build_configs, configs_to_kv, parse_override
        kv = configs_to_kv(model_cfg, train_cfg)
        for item in args.override:
            for key, value in parse_override(item).items():
                if key.startswith("model."):
                    raise ConfigError(
                        f"cannot override {key} at eval time; the model is fixed by the checkpoint")
                kv[key] = value
        _, train_cfg = build_configs(kv)
    dataset = load_dataset(args.data, split=args.split)
    _check_data_compat(model_cfg, dataset, f"{args.split or 'all'} split")

    model = VisionTransformer(model_cfg, seed=train_cfg.seed, dtype=train_cfg.dtype)
    model.load_param_arrays({k: v for k, v in ck.arrays.items() if not k.startswith("adam.")})
    out = Path(args.out)
    _echo_config(out, model_cfg, train_cfg)
    metrics = evaluate(model, dataset, train_cfg)
    row = {"epoch": ck.epoch, "split": args.split or "all", **metrics}
    (out / "metrics.csv").write_text(history_to_csv([row], model_cfg.moe_blocks),
                                     encoding="utf-8")
    parts = [f"top1={metrics['top1']!r}"]
    for b in sorted(model_cfg.moe_blocks):
        parts.append(f"iou@{b}={metrics[f'iou_layer_{b}']!r}")
    print(" ".join(parts))
    return 0


def cmd_visualize(args) -> int:
    ck = load_checkpoint(args.checkpoint)
    model_cfg = ModelConfig.from_dict(ck.model_config)
    if args.layer not in model_cfg.moe_blocks:
        raise ConfigError(
            f"layer {args.layer} is not a moe block; valid layers: {list(model_cfg.moe_blocks)}")
    dataset = load_dataset(args.data, split=args.split)
    _check_data_compat(model_cfg, dataset, f"{args.split or 'all'} split")

    # visualization runs in float64 for exact, reproducible CSV values
    model = VisionTransformer(model_cfg, seed=0, dtype=np.float64)
    model.load_param_arrays({k: v.astype(np.float64)
                             for k, v in ck.arrays.items() if not k.startswith("adam.")})
    count = min(args.samples, len(dataset))
    written = []
    from .tensor import no_grad
    with no_grad():
        trace = model.forward(images=dataset.images[:count])
    for i in range(count):
        written += export_dispatch_maps(
            args.out, i, args.layer, trace.dispatch[args.layer].data[i],
            model_cfg.experts, pixel_mask=dataset.masks[i])
    print(f"wrote {len(written)} files to {args.out}")
    return 0


def cmd_grad_check(args) -> int:
    if args.precision == 32:
        print("warning: tolerances are calibrated for 64-bit; --precision 32 is advisory only")
    if args.config is not None:
        model_cfg, _ = load_config(args.config, args.override)
    else:
        model_cfg = tiny_config()
    budget = model_cfg.tokens * model_cfg.dim * model_cfg.depth
    if budget > GRADCHECK_BOUND:
        print(f"refusing grad-check: tokens*dim*depth = {budget} exceeds bound {GRADCHECK_BOUND}",
              file=sys.stderr)
        return 2

    variants = list(LAYERSCALE_VARIANTS) if args.variant == "all" else [args.variant]
    dtype = np.float64 if args.precision == 64 else np.float32
    guidance = GuidanceConfig(enabled=True, lam=0.01,
                              targets=((model_cfg.moe_blocks[-1], "foreground"),))
    worst_overall = 0.0
    failed = False
    for variant in variants:
        ls = () if variant == "identity" else ((model_cfg.moe_blocks[-1], variant),)
        cfg = ModelConfig(**{**model_cfg.to_dict(),
                             "moe_blocks": model_cfg.moe_blocks,
                             "layerscale": ls})
        model = VisionTransformer(cfg, seed=args.seed, dtype=dtype)
        samples = [make_sample(args.seed, i, cfg.classes, cfg.image_side) for i in range(2)]
        images = np.stack([s.image for s in samples])
        masks = np.stack([s.mask for s in samples])
        labels = np.array([s.label for s in samples])
        patches = model.patchify(images)

        def loss_fn():
            trace = model.forward(patches=patches)
            l_cls = cross_entropy(trace.logits, labels)
            l_aux = aux_loss(trace.dispatch, masks, guidance)
            return total_loss(l_cls, l_aux, guidance.lam)

        report = grad_check(loss_fn, model.named_params(), rel_tol=args.rel_tol)
        print(f"-- layerscale variant: {variant}")
        print(report.summary())
        worst_overall = max(worst_overall, report.worst)
        failed = failed or not report.passed
    print(f"overall worst relative error: {worst_overall:.3e}")
    if failed:
        print("grad-check FAILED", file=sys.stderr)
        return 1
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="moeguide",
        description="Foreground-guided soft-MoE vision transformer toolkit")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen-data", help="generate the synthetic shapes dataset")
    p.add_argument("--out", required=True)
    p.add_argument("--n", type=int, required=True)
    p.add_argument("--classes", type=int, required=True)
    p.add_argument("--seed", type=int, required=True)
    p.add_argument("--side", type=int, default=32)
    p.add_argument("--val-n", type=int, default=0, dest="val_n")
    p.set_defaults(func=cmd_gen_data)

    p = sub.add_parser("train", help="train a model")
    p.add_argument("--config", default=None)
    p.add_argument("--data", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--resume", default=None)
    p.add_argument("--override", action="append", default=[], metavar="KEY=VALUE")
    p.add_argument("--save-every", type=int, default=0, dest="save_every")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="evaluate a checkpoint")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--config", default=None)
    p.add_argument("--data", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--split", default="val")
    p.add_argument("--override", action="append", default=[], metavar="KEY=VALUE")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("visualize", help="export dispatch heat maps")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--layer", type=int, required=True)
    p.add_argument("--samples", type=int, default=4)
    p.add_argument("--split", default="val")
    p.set_defaults(func=cmd_visualize)

    p = sub.add_parser("grad-check", help="finite-difference check of the full model")
    p.add_argument("--config", default=None)
    p.add_argument("--override", action="append", default=[], metavar="KEY=VALUE")
    p.add_argument("--variant", default="all",
                   choices=("all",) + LAYERSCALE_VARIANTS)
    p.add_argument("--precision", type=int, default=64, choices=(32, 64))
    p.add_argument("--rel-tol", type=float, default=1e-4, dest="rel_tol")
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(func=cmd_grad_check)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except (ConfigError, CheckpointError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except FileNotFoundError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except (NetpbmError, ValueError, OSError, FloatingPointError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
