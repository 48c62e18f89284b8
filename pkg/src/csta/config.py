"""Flat ``key = value`` run configuration.

One key per line, ``#`` starts a comment. Every key is optional; missing keys
take the defaults below. The resolved mapping (every key present) is what run
manifests record, and a manifest can be passed back wherever a config file is
accepted.
"""
from __future__ import annotations

import json
from typing import Any

from .data import AugmentConfig
from .model import ConvSpec, ModelConfig
from .train import TrainConfig

DEFAULTS: dict[str, Any] = {
    # model
    "frames": 30,
    "joints": 25,
    "interp_joints": 30,
    "conv1_channels": 32,
    "conv1_kernel": 3,
    "conv1_stride": 1,
    "conv1_padding": 1,
    "conv2_channels": 64,
    "conv2_kernel": 3,
    "conv2_stride": 2,
    "conv2_padding": 1,
    "conv3_channels": 64,
    "conv3_kernel": 3,
    "conv3_stride": 2,
    "conv3_padding": 1,
    "fc1_width": 256,
    "fc2_width": 128,
    "mode": "full",
    "use_attention": True,
    # training
    "optimizer": "adam",
    "lr": 1e-3,
    "momentum": 0.9,
    "beta1": 0.9,
    "beta2": 0.999,
    "eps": 1e-8,
    "weight_decay": 0.0,
    "batch_size": 16,
    "epochs": 200,
    "seed": 0,
    # augmentation
    "aug_n_sample": 4,
    "aug_n_crop": 4,
    "aug_crop_lo": 0.5,
    "aug_crop_hi": 1.0,
    "aug_center": False,
    # data
    "protocol": "",
}


class ConfigError(ValueError):
    pass


def _coerce(key: str, raw: Any) -> Any:
    default = DEFAULTS[key]
    if isinstance(default, bool):
        if isinstance(raw, bool):
            return raw
        text = str(raw).strip().lower()
        if text in ("true", "1", "yes", "on"):
            return True
        if text in ("false", "0", "no", "off"):
            return False
        raise ConfigError(f"{key}: expected a boolean, got {raw!r}")
    try:
        if isinstance(default, int):
            if isinstance(raw, float) and not raw.is_integer():
                raise ValueError
            return int(raw)
        if isinstance(default, float):
            return float(raw)
    except (TypeError, ValueError):
        raise ConfigError(f"{key}: expected {type(default).__name__}, got {raw!r}") from None
    return str(raw)


def parse_config_text(text: str) -> dict[str, Any]:
    """Parse a flat config document, or the ``config`` block of a run manifest."""
    stripped = text.lstrip()
    if stripped.startswith("{"):
        doc = json.loads(text)
        items = doc.get("config", doc)
        if not isinstance(items, dict):
            raise ConfigError("manifest 'config' must be an object")
        pairs = list(items.items())
    else:
        pairs = []
        for n, line in enumerate(text.splitlines(), start=1):
            line = line.split("#", 1)[0].strip()
            if not line:
                continue
            if "=" not in line:
                raise ConfigError(f"line {n}: expected 'key = value'")
            k, v = line.split("=", 1)
            pairs.append((k.strip(), v.strip()))
    out: dict[str, Any] = {}
    for k, v in pairs:
        if k not in DEFAULTS:
            raise ConfigError(f"unknown config key {k!r}")
        out[k] = _coerce(k, v)
    return out


def resolve(overrides: dict[str, Any] | None = None) -> dict[str, Any]:
    cfg = dict(DEFAULTS)
    for k, v in (overrides or {}).items():
        if k not in DEFAULTS:
            raise ConfigError(f"unknown config key {k!r}")
        cfg[k] = _coerce(k, v)
    return cfg


def load_config(path: str | None) -> dict[str, Any]:
    if not path:
        return resolve()
    with open(path, encoding="utf-8") as fh:
        return resolve(parse_config_text(fh.read()))


def format_config(cfg: dict[str, Any]) -> str:
    return "".join(f"{k} = {json.dumps(v) if isinstance(v, bool) else v}\n" for k, v in cfg.items())


def build_configs(cfg: dict[str, Any], num_classes: int) -> tuple[ModelConfig, TrainConfig]:
    try:
        model = ModelConfig(
            num_classes=num_classes,
            frames=cfg["frames"],
            joints=cfg["joints"],
            interp_joints=cfg["interp_joints"],
            convs=tuple(
                ConvSpec(cfg[f"conv{i}_channels"], cfg[f"conv{i}_kernel"], cfg[f"conv{i}_stride"], cfg[f"conv{i}_padding"])
                for i in (1, 2, 3)
            ),
            fc_widths=(cfg["fc1_width"], cfg["fc2_width"]),
            mode=cfg["mode"],
            use_attention=cfg["use_attention"],
        )
        trainer = TrainConfig(
            optimizer=cfg["optimizer"],
            lr=cfg["lr"],
            momentum=cfg["momentum"],
            betas=(cfg["beta1"], cfg["beta2"]),
            eps=cfg["eps"],
            weight_decay=cfg["weight_decay"],
            batch_size=cfg["batch_size"],
            epochs=cfg["epochs"],
            seed=cfg["seed"],
            augment=AugmentConfig(
                cfg["aug_n_sample"],
                cfg["aug_n_crop"],
                (cfg["aug_crop_lo"], cfg["aug_crop_hi"]),
                cfg["frames"],
                cfg["aug_center"],
            ),
        )
    except ValueError as exc:
        raise ConfigError(str(exc)) from None
    return model, trainer
