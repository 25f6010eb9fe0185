"""Central finite-difference checks of analytic gradients, and the suite run by ``analyze --gradcheck``."""

from __future__ import annotations

import time
from dataclasses import dataclass
from typing import Callable, Sequence

import numpy as np

from . import functional as F
from .losses import adversarial_losses, gaussian_hf_loss, recon_loss, wavelet_hf_loss
from .model import EncoderPreset, LiteVAEEncoder, latent_distribution
from .nn import SMC, Decoder, DecoderConfig, LiteVAEUNetBlock, Module, ResBlock, ResBlockWithSMC, UNetBlockConfig
from .tensor import Tensor, backward, no_grad, precision, tensor
from .wavelet import gaussian_blur, haar_analysis, haar_synthesis, space_to_depth

DEFAULT_TOL = 1e-5


def gradcheck(fn: Callable[[], Tensor], leaves: Sequence[Tensor], coords_per_leaf: int = 6,
              max_leaves: int | None = None, h: float = 1e-5, rng: np.random.Generator | None = None) -> float:
    """Max relative error between backprop and central differences for ``fn()``.

    ``fn`` closes over ``leaves`` and is re-evaluated with leaf data perturbed in
    place. The error is max|analytic - numeric| / max(max|numeric|, 1e-8) over a
    random subset of coordinates.
    """
    rng = rng or np.random.default_rng(0)
    leaves = list(leaves)
    for t in leaves:
        t.grad = None
        t.requires_grad = True
    loss = fn()
    backward(loss)
    if max_leaves is not None and len(leaves) > max_leaves:
        keep = [0] + sorted(rng.choice(np.arange(1, len(leaves)), size=max_leaves - 1, replace=False).tolist())
        leaves = [leaves[i] for i in keep]
    analytic, numeric = [], []
    with no_grad():
        for t in leaves:
            g = t.grad if t.grad is not None else np.zeros_like(t.data)
            flat = t.data.reshape(-1)
            idx = rng.choice(flat.size, size=min(coords_per_leaf, flat.size), replace=False)
            for i in idx:
                old = flat[i]
                flat[i] = old + h
                fp = fn().item()
                flat[i] = old - h
                fm = fn().item()
                flat[i] = old
                numeric.append((fp - fm) / (2 * h))
                analytic.append(g.reshape(-1)[i])
    a, n = np.array(analytic), np.array(numeric)
    return float(np.max(np.abs(a - n)) / max(np.max(np.abs(n)), 1e-8))


def _module_case(module: Module, x: np.ndarray, rng):
    xt = tensor(x, requires_grad=True)
    proj = tensor(rng.standard_normal(module(tensor(x)).shape))
    return (lambda: (module(xt) * proj).sum()), [xt] + module.parameters()


def _c_conv2d(rng):
    n, ci, co = rng.integers(1, 3), rng.integers(1, 4), rng.integers(1, 4)
    k, stride = int(rng.choice([1, 3])), int(rng.integers(1, 3))
    pad = int(rng.integers(0, 2))
    x = tensor(rng.standard_normal((n, ci, rng.integers(5, 9), rng.integers(5, 9))))
    w = tensor(rng.standard_normal((co, ci, k, k)))
    b = tensor(rng.standard_normal(co))
    proj = tensor(rng.standard_normal(F.conv2d(x, w, b, stride, pad).shape))
    return (lambda: (F.conv2d(x, w, b, stride, pad) * proj).sum()), [x, w, b]


def _c_group_norm(rng):
    groups = int(rng.choice([1, 2, 3]))
    c = groups * int(rng.integers(1, 4))
    x = tensor(rng.standard_normal((2, c, 4, 5)) * 2 + 0.5)
    gamma, beta = tensor(rng.standard_normal(c)), tensor(rng.standard_normal(c))
    proj = tensor(rng.standard_normal(x.shape))
    return (lambda: (F.group_norm(x, groups, gamma, beta) * proj).sum()), [x, gamma, beta]


def _c_smc(rng):
    ci, co = int(rng.integers(1, 4)), int(rng.integers(1, 4))
    layer = SMC(ci, co, 3, rng=rng)
    layer.scales.data[:] = rng.uniform(0.5, 2.0, ci)
    layer.gain.data[:] = rng.uniform(0.5, 2.0)
    layer.conv.bias.data[:] = rng.standard_normal(co)
    return _module_case(layer, rng.standard_normal((2, ci, 5, 5)), rng)


def _c_resblock_groupnorm(rng):
    ci, co = int(rng.choice([2, 4])), int(rng.choice([2, 4]))
    return _module_case(ResBlock(ci, co, norm_num_groups=2, rng=rng), rng.standard_normal((2, ci, 5, 5)), rng)


def _c_resblock_smc(rng):
    ci, co = int(rng.choice([2, 3])), int(rng.choice([2, 3]))
    return _module_case(ResBlockWithSMC(ci, co, rng=rng), rng.standard_normal((2, ci, 5, 5)), rng)


def _c_unet_block(rng):
    smc = bool(rng.integers(0, 2))
    cfg = UNetBlockConfig(3, 2, 4, (1, 2), 1, smc)
    return _module_case(LiteVAEUNetBlock(cfg, rng=rng), rng.standard_normal((1, 3, 4, 4)), rng)


def _c_decoder(rng):
    cfg = DecoderConfig(ch=4, ch_mult=(1, 2), num_res_blocks=1, use_smc=bool(rng.integers(0, 2)))
    return _module_case(Decoder(2, 3, cfg, rng=rng), rng.standard_normal((1, 2, 3, 3)), rng)


def _c_encoder(rng):
    enc = LiteVAEEncoder(2, EncoderPreset(4, (1,), 4, (1,), 1), image_channels=1, rng=rng)
    return _module_case(enc, rng.standard_normal((1, 1, 8, 8)), rng)


def _c_wavelet_ops(rng):
    x = tensor(rng.standard_normal((1, 2, 8, 8)))
    proj = tensor(rng.standard_normal((1, 8, 4, 4)))
    proj2 = tensor(rng.standard_normal((1, 2, 8, 8)))
    proj3 = tensor(rng.standard_normal((1, 2, 16, 16)))

    def fn():
        y = haar_analysis(x)
        return ((space_to_depth(gaussian_blur(x, 3, 0.8), 2) * proj).sum() + (haar_synthesis(y * y) * proj2).sum()
                + (F.upsample_nearest(x.silu(), 2) * proj3).sum())
    return fn, [x]


def _c_loss_recon(rng):
    x, y = tensor(rng.standard_normal((2, 3, 8, 8))), tensor(rng.standard_normal((2, 3, 8, 8)))
    return (lambda: recon_loss(x, y)), [x, y]


def _c_loss_wavelet(rng):
    x, y = tensor(rng.standard_normal((2, 3, 8, 8))), tensor(rng.standard_normal((2, 3, 8, 8)))
    eps = float(rng.uniform(1e-3, 1e-1))
    return (lambda: wavelet_hf_loss(x, y, eps)), [x, y]


def _c_loss_gaussian(rng):
    x, y = tensor(rng.standard_normal((2, 3, 8, 8))), tensor(rng.standard_normal((2, 3, 8, 8)))
    return (lambda: gaussian_hf_loss(x, y, 5, 1.0)), [x, y]


def _c_loss_kl(rng):
    raw = tensor(rng.standard_normal((2, 4, 3, 3)))
    return (lambda: latent_distribution(raw).kl()), [raw]


def _c_loss_adversarial(rng):
    real, fake = tensor(rng.standard_normal((2, 1, 4, 4)) * 2), tensor(rng.standard_normal((2, 1, 4, 4)) * 2)
    kind = ("hinge", "logistic")[int(rng.integers(0, 2))]

    def fn():
        d, g = adversarial_losses(real, fake, kind)
        return d + 0.37 * g
    return fn, [real, fake]


def _c_discriminator(rng):
    from .train import UNetDiscriminator

    return _module_case(UNetDiscriminator(3, 2, rng=rng), rng.standard_normal((1, 3, 8, 8)), rng)


CASES: dict[str, Callable] = {
    "conv2d": _c_conv2d,
    "group_norm": _c_group_norm,
    "smc": _c_smc,
    "resblock_groupnorm": _c_resblock_groupnorm,
    "resblock_smc": _c_resblock_smc,
    "unet_block": _c_unet_block,
    "decoder": _c_decoder,
    "encoder": _c_encoder,
    "wavelet_ops": _c_wavelet_ops,
    "loss_recon": _c_loss_recon,
    "loss_wavelet": _c_loss_wavelet,
    "loss_gaussian": _c_loss_gaussian,
    "loss_kl": _c_loss_kl,
    "loss_adversarial": _c_loss_adversarial,
    "discriminator": _c_discriminator,
}


@dataclass
class CaseResult:
    name: str
    instances: int
    max_rel_error: float
    seconds: float

    def passed(self, tol: float = DEFAULT_TOL) -> bool:
        return self.max_rel_error < tol


def run_suite(instances: int = 10, seed: int = 0, names: Sequence[str] | None = None,
              coords_per_leaf: int = 4, max_leaves: int = 12) -> list[CaseResult]:
    """Run every case ``instances`` times at f64."""
    results = []
    with precision("f64"):
        for name in names or CASES:
            start = time.perf_counter()
            worst = 0.0
            case_id = list(CASES).index(name)
            for i in range(instances):
                rng = np.random.default_rng([seed, case_id, i])
                fn, leaves = CASES[name](rng)
                worst = max(worst, gradcheck(fn, leaves, coords_per_leaf, max_leaves, rng=rng))
            results.append(CaseResult(name, instances, worst, time.perf_counter() - start))
    return results


def format_report(results: Sequence[CaseResult], tol: float = DEFAULT_TOL) -> str:
    lines = [f"{'case':<22}{'n':>4}{'max rel err':>14}{'time s':>9}  status"]
    for r in results:
        status = "PASS" if r.passed(tol) else "FAIL"
        lines.append(f"{r.name:<22}{r.instances:>4}{r.max_rel_error:>14.3e}{r.seconds:>9.2f}  {status}")
    return "\n".join(lines) + "\n"
