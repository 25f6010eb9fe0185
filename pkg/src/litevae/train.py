"""Training loop: two-stage resolution schedule, optional pixel-wise adversarial branch, checkpoints."""

from __future__ import annotations

import math
import os
from dataclasses import asdict, dataclass, field, fields, replace
from pathlib import Path

import numpy as np

from . import functional as F
from .checkpoint import Checkpoint, ShapeMismatchError, save_checkpoint, validate_shapes
from .data import preprocess_batch
from .losses import (
    LossWeights,
    adaptive_adv_weight,
    adversarial_losses,
    gaussian_hf_loss,
    generator_adv_loss,
    recon_loss,
    wavelet_hf_loss,
)
from .metrics import psnr
from .model import DOWNSAMPLE, LiteVAE, ModelConfig, latent_distribution
from .nn import Conv2d, Module
from .optim import Adam
from .tensor import Tensor, backward, concat, grad, no_grad, precision, tensor

PRECISIONS = ("f32", "f64")


class NonFiniteLossError(FloatingPointError):
    """A loss term became NaN or infinite; ``terms`` holds every term at the failing step."""

    def __init__(self, step: int, term: str, terms: dict[str, float]):
        self.step, self.term, self.terms = step, term, dict(terms)
        dump = ", ".join(f"{k}={v!r}" for k, v in terms.items())
        super().__init__(f"non-finite loss term {term!r} at step {step} ({dump})")


@dataclass(frozen=True)
class TrainConfig:
    lr: float = 1e-4
    beta1: float = 0.5
    beta2: float = 0.9
    adam_eps: float = 1e-8
    batch_size: int = 4
    steps_stage1: int = 0
    steps_stage2: int = 100
    res_stage1: int = 32
    res_stage2: int = 64
    seed: int = 0
    adversarial_enabled: bool = False
    disc_channels: int = 8
    disc_lr: float | None = None
    checkpoint_every: int = 100
    precision: str = "f32"
    probe_size: int = 8
    probe_resolution: int | None = None
    log_grad_ratio: bool = False
    loss: LossWeights = field(default_factory=LossWeights)
    model: ModelConfig = field(default_factory=lambda: ModelConfig(size_preset="tiny", decoder_preset="micro"))

    def __post_init__(self):
        if not (self.lr > 0 and math.isfinite(self.lr)):
            raise ValueError(f"lr must be positive, got {self.lr}")
        if self.disc_lr is not None and not self.disc_lr > 0:
            raise ValueError(f"disc_lr must be positive, got {self.disc_lr}")
        for name in ("beta1", "beta2"):
            if not 0.0 <= getattr(self, name) < 1.0:
                raise ValueError(f"{name} must lie in [0, 1), got {getattr(self, name)}")
        for name in ("res_stage1", "res_stage2"):
            r = getattr(self, name)
            if r <= 0 or r % DOWNSAMPLE:
                raise ValueError(f"{name} must be a positive multiple of {DOWNSAMPLE}, got {r}")
        if self.probe_resolution is not None and (self.probe_resolution <= 0 or self.probe_resolution % DOWNSAMPLE):
            raise ValueError(f"probe_resolution must be a positive multiple of {DOWNSAMPLE}")
        if self.batch_size < 1 or self.probe_size < 1 or self.checkpoint_every < 1 or self.disc_channels < 1:
            raise ValueError("batch_size, probe_size, checkpoint_every and disc_channels must be >= 1")
        if self.steps_stage1 < 0 or self.steps_stage2 < 0:
            raise ValueError("step counts must be nonnegative")
        if self.precision not in PRECISIONS:
            raise ValueError(f"precision must be one of {PRECISIONS}, got {self.precision!r}")

    @property
    def total_steps(self) -> int:
        return self.steps_stage1 + self.steps_stage2

    def resolution_at(self, step: int) -> int:
        return self.res_stage1 if step < self.steps_stage1 else self.res_stage2

    def to_flat(self) -> dict:
        out = {f.name: getattr(self, f.name) for f in fields(self) if f.name not in ("loss", "model")}
        out.update(self.loss.to_dict())
        out.update(self.model.to_dict())
        return out

    @classmethod
    def from_flat(cls, flat: dict) -> "TrainConfig":
        own = {f.name for f in fields(cls)} - {"loss", "model"}
        lw = {f.name for f in fields(LossWeights)}
        mc = {f.name for f in fields(ModelConfig)}
        unknown = sorted(set(flat) - own - lw - mc)
        if unknown:
            raise KeyError(f"unknown config keys: {', '.join(unknown)}")
        base = cls()
        loss = replace(base.loss, **{k: v for k, v in flat.items() if k in lw})
        model = replace(base.model, **{k: v for k, v in flat.items() if k in mc})
        return replace(base, loss=loss, model=model, **{k: v for k, v in flat.items() if k in own})


class UNetDiscriminator(Module):
    """Three-level conv UNet emitting one logit per pixel."""

    def __init__(self, in_channels: int = 3, channels: int = 8, rng: np.random.Generator | None = None):
        rng = rng if rng is not None else np.random.default_rng(0)
        c0, c1, c2 = channels, 2 * channels, 4 * channels
        self.conv_in = Conv2d(in_channels, c0, 3, rng=rng)
        self.down = [Conv2d(c0, c1, 3, stride=2, padding=1, rng=rng), Conv2d(c1, c2, 3, stride=2, padding=1, rng=rng)]
        self.up = [Conv2d(c1 + c0, c0, 3, rng=rng), Conv2d(c2 + c1, c1, 3, rng=rng)]
        self.conv_out = Conv2d(c0, 1, 1, rng=rng)

    def forward(self, x: Tensor) -> Tensor:
        if x.shape[-1] % 4 or x.shape[-2] % 4:
            raise ValueError(f"discriminator input extents must be multiples of 4, got {x.shape}")
        h0 = self.conv_in(x).silu()
        h1 = self.down[0](h0).silu()
        h2 = self.down[1](h1).silu()
        u1 = self.up[1](concat([F.upsample_nearest(h2, 2), h1], axis=1)).silu()
        u0 = self.up[0](concat([F.upsample_nearest(u1, 2), h0], axis=1)).silu()
        return self.conv_out(u0)


def tiny_unet_discriminator(image: Tensor, disc: UNetDiscriminator) -> Tensor:
    return disc(image)


def gradient_norms(l_recon: Tensor, l_adv: Tensor | None, param: Tensor) -> tuple[float, float, float]:
    """(|dL_recon/dW|, |dL_adv/dW|, ratio) at ``param``; ratio is inf when the adversarial norm is 0."""
    (gr,) = grad(l_recon, [param], retain_graph=True)
    nr = float(np.linalg.norm(gr))
    na = 0.0
    if l_adv is not None and l_adv.requires_grad:
        (ga,) = grad(l_adv, [param], retain_graph=True)
        na = float(np.linalg.norm(ga))
    ratio = nr / na if na > 0 else math.inf
    return nr, na, ratio


def gradient_ratio_probe(model: LiteVAE, batch, disc: UNetDiscriminator | None = None, kind: str = "hinge",
                         rng: np.random.Generator | None = None) -> tuple[float, float, float]:
    """Reconstruction and adversarial gradient norms at the decoder's final conv, and their ratio."""
    x = tensor(batch)
    out = model(x, sample=rng is not None, rng=rng)
    l_rec = recon_loss(x, out["sample"])
    l_adv = None
    if disc is not None:
        _, l_adv = adversarial_losses(disc(x), disc(out["sample"]), kind)
    return gradient_norms(l_rec, l_adv, model.last_layer())


@dataclass
class TrainResult:
    checkpoint: Checkpoint
    log: list[tuple[int, str, float]]
    model: LiteVAE
    disc: UNetDiscriminator | None = None


def format_log(entries) -> str:
    return "".join(f"{s}\t{k}\t{v!r}\n" for s, k, v in entries)


def parse_log(text: str) -> list[tuple[int, str, float]]:
    out = []
    for line in text.splitlines():
        s, k, v = line.split("\t")
        out.append((int(s), k, float(v)))
    return out


def build_model(config: TrainConfig) -> tuple[LiteVAE, UNetDiscriminator | None]:
    model = LiteVAE(config.model, seed=config.seed)
    disc = None
    if config.adversarial_enabled:
        disc = UNetDiscriminator(config.model.image_channels, config.disc_channels,
                                 rng=np.random.default_rng([config.seed, 1]))
    return model, disc


def _snapshot(config, step, model, disc, opt_g, opt_d) -> Checkpoint:
    tensors = {f"model.{k}": v for k, v in model.state_dict().items()}
    if disc is not None:
        tensors.update({f"disc.{k}": v for k, v in disc.state_dict().items()})
    tensors.update({k: v.copy() for k, v in opt_g.state_tensors("opt_g").items()})
    if opt_d is not None:
        tensors.update({k: v.copy() for k, v in opt_d.state_tensors("opt_d").items()})
    return Checkpoint(step=step, config=config.to_flat(), tensors=tensors)


def _restore(ckpt: Checkpoint, model, disc, opt_g, opt_d) -> None:
    validate_shapes(ckpt, {k: p.shape for k, p in model.named_parameters()}, "model")
    model.load_state_dict(ckpt.section("model"))
    if disc is not None:
        validate_shapes(ckpt, {k: p.shape for k, p in disc.named_parameters()}, "disc")
        disc.load_state_dict(ckpt.section("disc"))
    for opt, prefix in ((opt_g, "opt_g"), (opt_d, "opt_d")):
        if opt is None:
            continue
        for name, p in opt.params.items():
            for part in ("m", "v"):
                arr = ckpt.tensors.get(f"{prefix}.{part}.{name}")
                if arr is None or arr.shape != p.shape:
                    raise ShapeMismatchError(f"optimizer state {prefix}.{part}.{name} missing or mis-shaped")
        opt.load_state_tensors(prefix, ckpt.tensors)


def probe_psnr(model: LiteVAE, probe: np.ndarray) -> float:
    """PSNR on the [0, 1] pixel scale of the latent-mode reconstruction."""
    with no_grad():
        rec = model.reconstruct(tensor(probe)).data
    return psnr((probe + 1.0) / 2.0, (rec + 1.0) / 2.0)


def latent_std(model: LiteVAE, images: np.ndarray) -> float:
    """Global std of the latent means over ``images``, exported so downstream users can rescale latents."""
    with no_grad():
        raw = model.encode(tensor(images))
        z = latent_distribution(raw).mode() if model.config.stochastic else raw
    return float(np.std(z.data.astype(np.float64)))


def _check_finite(step: int, terms: dict[str, float]) -> None:
    for k, v in terms.items():
        if not math.isfinite(v):
            raise NonFiniteLossError(step, k, terms)


def train(config: TrainConfig, dataset: list[np.ndarray], *, probe: list[np.ndarray] | None = None,
          resume: Checkpoint | None = None, out_dir: str | os.PathLike | None = None,
          max_steps: int | None = None) -> TrainResult:
    """Run (or continue) training and return the final checkpoint and metrics log.

    ``probe`` defaults to the first ``probe_size`` dataset images. ``max_steps``
    stops early after that many global steps (used to split a run for resume checks).
    """
    if not dataset:
        raise ValueError("empty dataset")
    for i, im in enumerate(dataset):
        if min(im.shape[:2]) < max(config.res_stage1, config.res_stage2):
            raise ValueError(f"image {i} has shape {im.shape[:2]}, smaller than the training resolution")
    probe = list(dataset[: config.probe_size]) if probe is None else list(probe)
    out = Path(out_dir) if out_dir is not None else None

    with precision(config.precision):
        dtype = np.float32 if config.precision == "f32" else np.float64
        model, disc = build_model(config)
        w = config.loss
        opt_g = Adam(model.named_parameters(), config.lr, (config.beta1, config.beta2), config.adam_eps)
        opt_d = None
        if disc is not None:
            opt_d = Adam(disc.named_parameters(), config.disc_lr or config.lr, (config.beta1, config.beta2),
                         config.adam_eps)
        start = 0
        if resume is not None:
            _restore(resume, model, disc, opt_g, opt_d)
            start = resume.step
        end = config.total_steps if max_steps is None else min(max_steps, config.total_steps)
        log: list[tuple[int, str, float]] = []
        probe_res = config.probe_resolution or config.res_stage2
        probe_x = preprocess_batch(probe, probe_res, dtype)
        cache: dict[int, np.ndarray] = {}

        def images_at(res: int) -> np.ndarray:
            if res not in cache:
                cache[res] = preprocess_batch(dataset, res, dtype)
            return cache[res]

        def checkpoint_now(step: int) -> Checkpoint:
            ck = _snapshot(config, step, model, disc, opt_g, opt_d)
            if out is not None:
                save_checkpoint(out / f"step_{step:07d}.lvae", ck)
                (out / "metrics.tsv").write_text(format_log(log), encoding="utf-8")
            return ck

        if start < end and start == 0:
            log.append((0, "probe/psnr", probe_psnr(model, probe_x)))

        model.train()
        for step in range(start, end):
            res = config.resolution_at(step)
            data = images_at(res)
            rng = np.random.default_rng([config.seed, step])
            idx = rng.choice(len(data), size=config.batch_size, replace=len(data) < config.batch_size)
            x = tensor(data[idx])
            fwd = model(x, sample=True, rng=rng)
            x_hat = fwd["sample"]
            l1 = recon_loss(x, x_hat)
            l_wav = wavelet_hf_loss(x, x_hat, w.charbonnier_eps)
            l_gauss = gaussian_hf_loss(x, x_hat, w.blur_kernel, w.blur_sigma)
            l_kl = fwd["kl_reg"]
            total = l1 + w.lambda_wavelet * l_wav + w.lambda_gaussian * l_gauss + w.lambda_reg * l_kl
            terms = {"loss/l1": l1.item(), "loss/wavelet": l_wav.item(), "loss/gaussian": l_gauss.item(),
                     "loss/kl": l_kl.item()}
            if disc is not None:
                g_adv = generator_adv_loss(disc(x_hat), w.adv_loss)
                lam = w.lambda_adv
                if w.adaptive_adv or config.log_grad_ratio:
                    nr, na, ratio = gradient_norms(l1, g_adv, model.last_layer())
                    terms.update({"grad/recon_norm": nr, "grad/adv_norm": na})
                    if w.adaptive_adv:
                        lam = adaptive_adv_weight(nr, na, w.delta)
                total = total + lam * g_adv
                terms.update({"loss/adv_g": g_adv.item(), "lambda_adv": lam})
            terms["loss/total"] = total.item()
            _check_finite(step, terms)

            opt_g.zero_grad()
            if disc is not None:
                disc.zero_grad()
            backward(total)
            opt_g.step()

            if disc is not None:
                d_loss, _ = adversarial_losses(disc(x), disc(x_hat.detach()), w.adv_loss)
                terms["loss/adv_d"] = d_loss.item()
                _check_finite(step, terms)
                opt_d.zero_grad()
                backward(d_loss)
                opt_d.step()

            for k, v in terms.items():
                log.append((step, k, v))
            done = step + 1
            if done % config.checkpoint_every == 0 or done == config.total_steps:
                log.append((done, "probe/psnr", probe_psnr(model, probe_x)))
                if out is not None:
                    checkpoint_now(done)
        model.eval()
        final = _snapshot(config, max(start, end), model, disc, opt_g, opt_d)
        final.tensors["stats.latent_std"] = np.asarray(latent_std(model, probe_x), dtype=np.float64)
        if out is not None:
            save_checkpoint(out / "final.lvae", final)
            (out / "metrics.tsv").write_text(format_log(log), encoding="utf-8")
    return TrainResult(final, log, model, disc)


def load_model(ckpt: Checkpoint, dtype: str | None = None) -> tuple[LiteVAE, TrainConfig]:
    """Rebuild the model from a checkpoint's config snapshot, optionally in another precision."""
    cfg = TrainConfig.from_flat(ckpt.config)
    prec = dtype or cfg.precision
    with precision(prec):
        model = LiteVAE(cfg.model, seed=cfg.seed)
        validate_shapes(ckpt, {k: p.shape for k, p in model.named_parameters()}, "model")
        model.load_state_dict(ckpt.section("model"))
    model.eval()
    return model, cfg


def config_dict(config: TrainConfig) -> dict:
    return asdict(config)
