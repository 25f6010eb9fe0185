"""Flat ``key = value`` config files for the training CLI."""

from __future__ import annotations

import os
from pathlib import Path

from .train import TrainConfig

_OPTIONAL_TYPES = {"disc_lr": float, "probe_resolution": int}
_TRUE = {"true", "yes", "on", "1"}
_FALSE = {"false", "no", "off", "0"}

_HELP = {
    "lr": "Adam learning rate (generator)",
    "beta1": "Adam beta1",
    "beta2": "Adam beta2",
    "adam_eps": "Adam epsilon",
    "batch_size": "images per step",
    "steps_stage1": "steps at res_stage1 (low-resolution pretraining)",
    "steps_stage2": "steps at res_stage2 (full-resolution fine-tuning)",
    "res_stage1": "stage-1 resolution, multiple of 8",
    "res_stage2": "stage-2 resolution, multiple of 8",
    "seed": "seed for initialization, batch order and latent noise",
    "adversarial_enabled": "train the pixel-wise UNet discriminator",
    "disc_channels": "discriminator base width",
    "disc_lr": "discriminator learning rate (none = lr)",
    "checkpoint_every": "steps between checkpoints and probe PSNR",
    "precision": "f32 or f64",
    "probe_size": "number of probe images (first images of the dataset)",
    "probe_resolution": "probe evaluation resolution (none = res_stage2)",
    "log_grad_ratio": "log decoder-head gradient norms of recon and adversarial losses",
    "lambda_reg": "KL weight",
    "lambda_adv": "adversarial weight (constant mode)",
    "lambda_wavelet": "wavelet high-frequency Charbonnier weight",
    "lambda_gaussian": "Gaussian high-pass l1 weight",
    "adaptive_adv": "use the gradient-norm ratio adversarial weight",
    "delta": "stabilizer of the adaptive weight",
    "charbonnier_eps": "Charbonnier epsilon",
    "blur_kernel": "Gaussian blur kernel size (odd)",
    "blur_sigma": "Gaussian blur sigma",
    "adv_loss": "hinge or logistic",
    "latent_dim": "latent channels n_z",
    "size_preset": "encoder size: S, B, M, L or tiny",
    "encoder": "litevae, reference, dwt or dwt2",
    "use_1x1_conv": "1x1 convs around the latent",
    "share_extractor_weights": "one feature extractor for all wavelet levels",
    "extractor_smc": "SMC residual blocks inside the encoder UNets",
    "output_type": "image or wavelet",
    "decoder_preset": "micro, tiny or paper",
    "decoder_smc": "SMC residual blocks in the decoder",
    "decoder_attention": "mid-block attention in the decoder",
    "reference_preset": "reference encoder width: micro, tiny or paper",
    "image_channels": "input image channels",
    "dropout": "dropout rate inside residual blocks",
}


class ConfigError(ValueError):
    pass


def _coerce(key: str, text: str, default):
    low = text.strip().lower()
    if key in _OPTIONAL_TYPES:
        if low in ("none", "null", ""):
            return None
        kind = _OPTIONAL_TYPES[key]
    else:
        kind = type(default)
    try:
        if kind is bool:
            if low in _TRUE:
                return True
            if low in _FALSE:
                return False
            raise ValueError(f"expected a boolean, got {text!r}")
        if kind is int:
            return int(text)
        if kind is float:
            return float(text)
        return text.strip()
    except ValueError as exc:
        raise ConfigError(f"bad value for {key}: {exc}") from exc


def parse_config(text: str) -> TrainConfig:
    defaults = TrainConfig().to_flat()
    flat = {}
    for lineno, raw in enumerate(text.splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"line {lineno}: expected 'key = value', got {raw!r}")
        key, value = (s.strip() for s in line.split("=", 1))
        if key not in defaults:
            raise ConfigError(f"line {lineno}: unknown config key {key!r}")
        flat[key] = _coerce(key, value, defaults[key])
    try:
        return TrainConfig.from_flat(flat)
    except (ValueError, TypeError) as exc:
        raise ConfigError(str(exc)) from exc


def load_config(path: str | os.PathLike) -> TrainConfig:
    return parse_config(Path(path).read_text(encoding="utf-8"))


def dump_config(config: TrainConfig) -> str:
    lines = []
    for k, v in config.to_flat().items():
        v = "none" if v is None else (str(v).lower() if isinstance(v, bool) else v)
        lines.append(f"{k} = {v}")
    return "\n".join(lines) + "\n"


def help_config() -> str:
    lines = ["# key = default    description"]
    for k, v in TrainConfig().to_flat().items():
        v = "none" if v is None else (str(v).lower() if isinstance(v, bool) else v)
        lines.append(f"{k} = {v}    # {_HELP.get(k, '')}")
    return "\n".join(lines) + "\n"
