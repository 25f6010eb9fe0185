"""Autoencoder training losses and the adversarial weighting rule."""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass

from .tensor import Tensor, as_tensor
from .wavelet import gaussian_blur, normalized_dwt


@dataclass(frozen=True)
class LossWeights:
    lambda_reg: float = 1e-6
    lambda_adv: float = 0.1
    lambda_wavelet: float = 0.1
    lambda_gaussian: float = 0.1
    adaptive_adv: bool = False
    delta: float = 1e-4
    charbonnier_eps: float = 1e-3
    blur_kernel: int = 5
    blur_sigma: float = 1.0
    adv_loss: str = "hinge"

    def __post_init__(self):
        for name in ("lambda_reg", "lambda_adv", "lambda_wavelet", "lambda_gaussian", "delta", "charbonnier_eps",
                     "blur_sigma"):
            v = getattr(self, name)
            if not math.isfinite(v) or v < 0:
                raise ValueError(f"{name} must be finite and nonnegative, got {v}")
        if self.adv_loss not in ("hinge", "logistic"):
            raise ValueError(f"adv_loss must be 'hinge' or 'logistic', got {self.adv_loss!r}")

    def to_dict(self) -> dict:
        return asdict(self)


def recon_loss(x: Tensor, x_hat: Tensor) -> Tensor:
    """Mean absolute error."""
    return (as_tensor(x_hat) - as_tensor(x)).abs().mean()


def charbonnier(diff: Tensor, eps: float) -> Tensor:
    return (diff * diff + eps * eps).sqrt().mean()


def wavelet_hf_loss(x: Tensor, x_hat: Tensor, eps: float = 1e-3) -> Tensor:
    """Charbonnier distance between the normalized level-1 H, V, D bands of x and x_hat."""
    hx = normalized_dwt(as_tensor(x), 1).high
    hy = normalized_dwt(as_tensor(x_hat), 1).high
    return charbonnier(hy - hx, eps)


def gaussian_hf_loss(x: Tensor, x_hat: Tensor, kernel_size: int = 5, sigma: float = 1.0) -> Tensor:
    """l1 between the high-pass residuals x - blur(x) and x_hat - blur(x_hat)."""
    x, x_hat = as_tensor(x), as_tensor(x_hat)
    rx = x - gaussian_blur(x, kernel_size, sigma)
    ry = x_hat - gaussian_blur(x_hat, kernel_size, sigma)
    return (ry - rx).abs().mean()


def adversarial_losses(real_logits: Tensor, fake_logits: Tensor, kind: str = "hinge") -> tuple[Tensor, Tensor]:
    """Return (discriminator loss, generator loss) for ``hinge`` or ``logistic`` (non-saturating)."""
    real, fake = as_tensor(real_logits), as_tensor(fake_logits)
    if kind == "hinge":
        d = (1.0 - real).relu().mean() + (fake + 1.0).relu().mean()
        g = -fake.mean()
    elif kind == "logistic":
        d = (-real).softplus().mean() + fake.softplus().mean()
        g = (-fake).softplus().mean()
    else:
        raise ValueError(f"unknown adversarial loss {kind!r}")
    return d, g


def generator_adv_loss(fake_logits: Tensor, kind: str = "hinge") -> Tensor:
    fake = as_tensor(fake_logits)
    if kind == "hinge":
        return -fake.mean()
    if kind == "logistic":
        return (-fake).softplus().mean()
    raise ValueError(f"unknown adversarial loss {kind!r}")


ADAPTIVE_WEIGHT_MAX = 1e4


def adaptive_adv_weight(grad_recon_norm: float, grad_adv_norm: float, delta: float = 1e-4) -> float:
    """0.5 * ||grad L_recon|| / (||grad L_adv|| + delta), clamped to [0, 1e4]."""
    w = 0.5 * float(grad_recon_norm) / (float(grad_adv_norm) + delta)
    return min(max(w, 0.0), ADAPTIVE_WEIGHT_MAX)
