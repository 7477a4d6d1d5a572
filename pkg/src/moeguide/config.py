"""Flat text configuration: ``section.key = value`` lines, ``#`` comments.

Every ModelConfig/TrainConfig/GuidanceConfig field is addressable; unknown
keys are rejected.  The same grammar is used for ``--override key=value``
flags, and the effective configuration is echoed back in canonical order.
"""

from __future__ import annotations

from .guidance import GuidanceConfig
from .model import ModelConfig
from .training import TrainConfig


class ConfigError(ValueError):
    pass


def _parse_bool(s: str) -> bool:
    low = s.strip().lower()
    if low in ("true", "1", "yes", "on"):
        return True
    if low in ("false", "0", "no", "off"):
        return False
    raise ConfigError(f"expected a boolean, got {s!r}")


def _parse_int_list(s: str):
    s = s.strip()
    if not s or s.lower() == "none":
        return ()
    return tuple(int(part) for part in s.split(","))


def _parse_pairs(s: str):
    """Comma list of ``block:tag`` pairs, or 'none'."""
    s = s.strip()
    if not s or s.lower() == "none":
        return ()
    out = []
    for part in s.split(","):
        if ":" not in part:
            raise ConfigError(f"expected block:tag, got {part!r}")
        block, tag = part.split(":", 1)
        out.append((int(block), tag.strip()))
    return tuple(out)


def _fmt_pairs(pairs) -> str:
    return ",".join(f"{b}:{t}" for b, t in pairs) if pairs else "none"


def _fmt_int_list(vals) -> str:
    return ",".join(str(v) for v in vals) if vals else "none"


# key -> (parse, format); order here is the canonical echo order
_SCHEMA = {
    "model.image_side": (int, str),
    "model.patch_side": (int, str),
    "model.channels": (int, str),
    "model.dim": (int, str),
    "model.depth": (int, str),
    "model.heads": (int, str),
    "model.moe_blocks": (_parse_int_list, _fmt_int_list),
    "model.experts": (int, str),
    "model.slots": (int, str),
    "model.mlp_expansion": (int, str),
    "model.layerscale": (_parse_pairs, _fmt_pairs),
    "model.classes": (int, str),
    "train.epochs": (int, str),
    "train.warmup_epochs": (int, str),
    "train.base_lr": (float, repr),
    "train.warmup_lr": (float, repr),
    "train.min_lr": (float, repr),
    "train.weight_decay": (float, repr),
    "train.batch_size": (int, str),
    "train.seed": (int, str),
    "train.precision": (int, str),
    "guidance.enabled": (_parse_bool, lambda b: "true" if b else "false"),
    "guidance.lambda": (float, repr),
    "guidance.epsilon": (float, repr),
    "guidance.targets": (_parse_pairs, _fmt_pairs),
}


def parse_config_text(text: str, kv: dict = None) -> dict:
    """Parse config lines into a key -> typed-value dict (on top of ``kv``)."""
    out = dict(kv) if kv else {}
    for ln, raw in enumerate(text.splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"line {ln}: expected 'key = value', got {raw!r}")
        key, value = (part.strip() for part in line.split("=", 1))
        out.update(parse_override(f"{key}={value}"))
    return out


def parse_override(item: str) -> dict:
    if "=" not in item:
        raise ConfigError(f"override must be key=value, got {item!r}")
    key, value = (part.strip() for part in item.split("=", 1))
    if key not in _SCHEMA:
        raise ConfigError(f"unknown config key {key!r}")
    parse, _ = _SCHEMA[key]
    try:
        return {key: parse(value)}
    except (ValueError, TypeError) as exc:
        raise ConfigError(f"bad value for {key}: {value!r} ({exc})") from None


def build_configs(kv: dict):
    """Typed key/value map -> (ModelConfig, TrainConfig)."""
    model_kwargs = {}
    train_kwargs = {}
    guidance_kwargs = {}
    rename = {"guidance.lambda": "lam", "guidance.epsilon": "eps"}
    for key, value in kv.items():
        if key not in _SCHEMA:
            raise ConfigError(f"unknown config key {key!r}")
        section, name = key.split(".", 1)
        if section == "model":
            model_kwargs[name] = value
        elif section == "train":
            train_kwargs[name] = value
        else:
            guidance_kwargs[rename.get(key, name)] = value
    try:
        model_cfg = ModelConfig(**model_kwargs)
        guidance = GuidanceConfig(**guidance_kwargs) if guidance_kwargs else GuidanceConfig()
        train_cfg = TrainConfig(guidance=guidance, **train_kwargs)
    except (ValueError, TypeError) as exc:
        raise ConfigError(str(exc)) from None
    return model_cfg, train_cfg


def load_config(path=None, overrides=()) -> tuple:
    kv = {}
    if path is not None:
        with open(path, "r", encoding="utf-8") as f:
            kv = parse_config_text(f.read())
    for item in overrides:
        kv.update(parse_override(item))
    return build_configs(kv)


def configs_to_kv(model_cfg: ModelConfig, train_cfg: TrainConfig) -> dict:
    """Invert :func:`build_configs` into the flat key space."""
    return {
        "model.image_side": model_cfg.image_side,
        "model.patch_side": model_cfg.patch_side,
        "model.channels": model_cfg.channels,
        "model.dim": model_cfg.dim,
        "model.depth": model_cfg.depth,
        "model.heads": model_cfg.heads,
        "model.moe_blocks": model_cfg.moe_blocks,
        "model.experts": model_cfg.experts,
        "model.slots": model_cfg.slots,
        "model.mlp_expansion": model_cfg.mlp_expansion,
        "model.layerscale": model_cfg.layerscale,
        "model.classes": model_cfg.classes,
        "train.epochs": train_cfg.epochs,
        "train.warmup_epochs": train_cfg.warmup_epochs,
        "train.base_lr": train_cfg.base_lr,
        "train.warmup_lr": train_cfg.warmup_lr,
        "train.min_lr": train_cfg.min_lr,
        "train.weight_decay": train_cfg.weight_decay,
        "train.batch_size": train_cfg.batch_size,
        "train.seed": train_cfg.seed,
        "train.precision": train_cfg.precision,
        "guidance.enabled": train_cfg.guidance.enabled,
        "guidance.lambda": train_cfg.guidance.lam,
        "guidance.epsilon": train_cfg.guidance.eps,
        "guidance.targets": train_cfg.guidance.targets,
    }


def format_configs(model_cfg: ModelConfig, train_cfg: TrainConfig) -> str:
    """Canonical text for the effective configuration."""
    values = configs_to_kv(model_cfg, train_cfg)
    lines = []
    for key, (_, fmt) in _SCHEMA.items():
        lines.append(f"{key} = {fmt(values[key])}")
    return "\n".join(lines) + "\n"
