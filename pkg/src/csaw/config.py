"""Flat dotted-key run configuration shared by the CLI, trainer and protocols."""

from __future__ import annotations

from pathlib import Path

import yaml


class ConfigError(ValueError):
    pass


# key: (default, type, help)
SCHEMA: dict[str, tuple] = {
    "backbone.name": ("standin", str, "frozen backbone: 'standin' or a CLIP checkpoint such as 'ViT-B/16'"),
    "backbone.seed": (0, int, "seed of the stand-in backbone weights"),
    "backbone.temperature": (None, float, "logit temperature; default is the backbone's own (stand-in: 0.01)"),
    "prompt.context_length": (4, int, "number of learnable context vectors M"),
    "prompt.init_text": ("a photo of a", str, "text whose token embeddings initialise the context"),
    "vat.reduction": (4, int, "bottleneck reduction of the attention-mask MLP"),
    "vat.tap_layers": (None, list, "1-based backbone blocks feeding the token generator; default evenly spaced"),
    "recon.seed_shape": (None, list, "(C, H, W) reshape of the embedding before up-convolution"),
    "recon.target": ("clean", str, "reconstruction target: 'clean' or 'jumbled'"),
    "loss.alpha": (0.5, float, "weight ratio between self-supervised and diversity terms, in [0, 1]"),
    "loss.lambda_bt": (5.1e-3, float, "off-diagonal weight of the Barlow Twins loss"),
    "loss.dm_mode": ("entropy", str, "diversity loss form: 'entropy' or 'min_prob'"),
    "jigsaw.grid": (4, int, "patches per image side; must divide 224"),
    "jigsaw.exclude_identity": (False, bool, "never draw the identity permutation"),
    "train.epochs": (50, int, "training epochs"),
    "train.lr": (2e-4, float, "SGD learning rate after warm-up"),
    "train.warmup_lr": (1e-7, float, "constant learning rate during warm-up"),
    "train.warmup_epochs": (1, int, "number of warm-up epochs"),
    "train.batch_size": (4, int, "training batch size"),
    "train.shots": (16, int, "labelled samples per class"),
    "train.momentum": (0.0, float, "SGD momentum"),
    "train.weight_decay": (0.0, float, "SGD weight decay"),
    "train.dtype": ("float32", str, "'float32' or 'float64'"),
    "eval.jumble": (False, bool, "evaluate on jumbled inputs with averaged prompts"),
    "eval.batch_size": (32, int, "evaluation batch size (style statistics are per batch)"),
}

CHOICES = {
    "recon.target": ("clean", "jumbled"),
    "loss.dm_mode": ("entropy", "min_prob"),
    "train.dtype": ("float32", "float64"),
}


def defaults() -> dict:
    return {k: v[0] for k, v in SCHEMA.items()}


def help_text() -> str:
    width = max(map(len, SCHEMA))
    return "\n".join(f"  {k:<{width}}  default={v[0]!r}  {v[2]}" for k, v in SCHEMA.items())


def _flatten(doc, prefix=""):
    out = {}
    for k, v in doc.items():
        key = f"{prefix}{k}"
        if isinstance(v, dict):
            out.update(_flatten(v, key + "."))
        else:
            out[key] = v
    return out


def _coerce(key, value):
    _, typ, _ = SCHEMA[key]
    if value is None:
        return None
    if typ is bool:
        if isinstance(value, str):
            low = value.strip().lower()
            if low in ("1", "true", "yes", "on"):
                return True
            if low in ("0", "false", "no", "off"):
                return False
            raise ConfigError(f"{key}: expected a boolean, got {value!r}")
        return bool(value)
    if typ is list:
        if isinstance(value, str):
            value = [v for v in value.replace("(", "").replace(")", "").split(",") if v.strip()]
        return [int(v) for v in value]
    try:
        return typ(value)
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"{key}: cannot read {value!r} as {typ.__name__}") from exc


def validate(cfg: dict) -> dict:
    unknown = sorted(set(cfg) - set(SCHEMA))
    if unknown:
        raise ConfigError(f"unknown config keys: {', '.join(unknown)}")
    for key, allowed in CHOICES.items():
        if cfg[key] not in allowed:
            raise ConfigError(f"{key} must be one of {allowed}, got {cfg[key]!r}")
    if not 0.0 <= cfg["loss.alpha"] <= 1.0:
        raise ConfigError(f"loss.alpha must lie in [0, 1], got {cfg['loss.alpha']}")
    if cfg["loss.lambda_bt"] <= 0:
        raise ConfigError("loss.lambda_bt must be positive")
    if cfg["jigsaw.grid"] < 1 or 224 % cfg["jigsaw.grid"]:
        raise ConfigError(f"jigsaw.grid must divide 224, got {cfg['jigsaw.grid']}")
    if not cfg["train.lr"] > cfg["train.warmup_lr"] > 0:
        raise ConfigError("need train.lr > train.warmup_lr > 0")
    if cfg["train.epochs"] < 1 or cfg["train.batch_size"] < 1 or cfg["train.shots"] < 1:
        raise ConfigError("train.epochs, train.batch_size and train.shots must be positive")
    if cfg["prompt.context_length"] < 1:
        raise ConfigError("prompt.context_length must be positive")
    if cfg["vat.tap_layers"] is not None and len(cfg["vat.tap_layers"]) != cfg["prompt.context_length"]:
        raise ConfigError("vat.tap_layers needs one entry per context vector")
    return cfg


def resolve(path=None, overrides: dict | None = None) -> dict:
    """Defaults <- YAML file (flat dotted keys or nested mappings) <- overrides."""
    cfg = defaults()
    layers = []
    if path is not None:
        try:
            doc = yaml.safe_load(Path(path).read_text()) or {}
        except (OSError, yaml.YAMLError) as exc:
            raise ConfigError(f"cannot read config {path}: {exc}") from exc
        if not isinstance(doc, dict):
            raise ConfigError(f"config {path} must be a key-value mapping")
        layers.append(_flatten(doc))
    if overrides:
        layers.append(dict(overrides))
    for layer in layers:
        unknown = sorted(set(layer) - set(SCHEMA))
        if unknown:
            raise ConfigError(f"unknown config keys: {', '.join(unknown)}")
        for k, v in layer.items():
            cfg[k] = _coerce(k, v)
    return validate(cfg)


def parse_assignments(items) -> dict:
    out = {}
    for item in items:
        if "=" not in item:
            raise ConfigError(f"expected key=value, got {item!r}")
        k, v = item.split("=", 1)
        out[k.strip()] = yaml.safe_load(v) if v.strip() else None
    return out
