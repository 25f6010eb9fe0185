"""Parameterized layers: convolution, group norm, self-modulated convolution,
residual blocks, the feature-extraction UNet and the SD-style decoder.

Modules discover their parameters by walking instance attributes, so a
sub-module referenced twice (shared weights) is counted once.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Iterator, Sequence

import numpy as np

from . import functional as F
from .tensor import DimensionError, Tensor, concat, get_default_dtype, matmul, softmax


class Parameter(Tensor):
    def __init__(self, data):
        super().__init__(np.asarray(data, dtype=get_default_dtype()), requires_grad=True)


class Module:
    training = True

    def __call__(self, *args, **kwargs):
        return self.forward(*args, **kwargs)

    def forward(self, *args, **kwargs):  # pragma: no cover - abstract
        raise NotImplementedError

    def _children(self) -> Iterator[tuple[str, object]]:
        for name, value in vars(self).items():
            if isinstance(value, (Parameter, Module)):
                yield name, value
            elif isinstance(value, (list, tuple)):
                for i, v in enumerate(value):
                    if isinstance(v, (Parameter, Module)):
                        yield f"{name}.{i}", v

    def named_parameters(self, prefix: str = "", _seen: set | None = None) -> Iterator[tuple[str, Parameter]]:
        seen = set() if _seen is None else _seen
        for name, value in self._children():
            if id(value) in seen:
                continue
            seen.add(id(value))
            if isinstance(value, Parameter):
                yield prefix + name, value
            else:
                yield from value.named_parameters(prefix + name + ".", seen)

    def parameters(self) -> list[Parameter]:
        return [p for _, p in self.named_parameters()]

    def modules(self) -> Iterator["Module"]:
        yield self
        for _, value in self._children():
            if isinstance(value, Module):
                yield from value.modules()

    def num_params(self) -> int:
        return sum(p.size for p in self.parameters())

    def zero_grad(self) -> None:
        for p in self.parameters():
            p.grad = None

    def train(self, mode: bool = True) -> "Module":
        for m in self.modules():
            m.training = mode
        return self

    def eval(self) -> "Module":
        return self.train(False)

    def state_dict(self) -> dict[str, np.ndarray]:
        return {name: p.data.copy() for name, p in self.named_parameters()}

    def load_state_dict(self, state: dict[str, np.ndarray], strict: bool = True) -> None:
        params = dict(self.named_parameters())
        if strict:
            missing = sorted(set(params) - set(state))
            extra = sorted(set(state) - set(params))
            if missing or extra:
                raise KeyError(f"state mismatch: missing={missing[:5]} unexpected={extra[:5]}")
        for name, p in params.items():
            if name not in state:
                continue
            arr = np.asarray(state[name])
            if arr.shape != p.shape:
                raise DimensionError(f"{name}: expected shape {p.shape}, got {arr.shape}")
            p.data = arr.astype(p.dtype, copy=True)


def _normal(rng: np.random.Generator, shape, std: float) -> np.ndarray:
    return (rng.standard_normal(shape) * std).astype(get_default_dtype())


def norm_groups(channels: int, preferred: int = 32) -> int:
    """Largest group count <= preferred that divides ``channels``."""
    return math.gcd(channels, preferred)


class Conv2d(Module):
    def __init__(self, in_channels: int, out_channels: int, kernel_size: int = 3, stride: int = 1,
                 padding: int | None = None, bias: bool = True, rng: np.random.Generator | None = None):
        rng = rng if rng is not None else np.random.default_rng(0)
        fan_in = in_channels * kernel_size * kernel_size
        self.weight = Parameter(_normal(rng, (out_channels, in_channels, kernel_size, kernel_size), 1.0 / math.sqrt(fan_in)))
        self.bias = Parameter(np.zeros(out_channels)) if bias else None
        self.stride = stride
        self.padding = kernel_size // 2 if padding is None else padding

    def forward(self, x: Tensor) -> Tensor:
        return F.conv2d(x, self.weight, self.bias, self.stride, self.padding)


class GroupNorm(Module):
    def __init__(self, channels: int, groups: int = 32, eps: float = 1e-6):
        self.groups = norm_groups(channels, groups)
        self.eps = eps
        self.weight = Parameter(np.ones(channels))
        self.bias = Parameter(np.zeros(channels))

    def forward(self, x: Tensor) -> Tensor:
        return F.group_norm(x, self.groups, self.weight, self.bias, self.eps)


class Identity(Module):
    def forward(self, x):
        return x


class Dropout(Module):
    def __init__(self, p: float = 0.0, rng: np.random.Generator | None = None):
        self.p = p
        self.rng = rng

    def forward(self, x: Tensor) -> Tensor:
        return F.dropout(x, self.p, self.rng, self.training)


def smc_weight(weight: Tensor, scales: Tensor, eps: float) -> Tensor:
    """Self-modulated weight s_i * w / (||s * w||_out + eps), normalized per output channel.

    The norm runs over input channels and spatial taps of each output filter.
    """
    sw = weight * scales.reshape(1, -1, 1, 1)
    norm = (sw * sw).sum(axis=(1, 2, 3), keepdims=True).sqrt()
    return sw / (norm + eps)


class SMC(Module):
    """Convolution with learned per-input-channel scales and per-filter renormalization."""

    def __init__(self, in_channels: int, out_channels: int | None = None, kernel_size: int = 3,
                 stride: int = 1, padding: int | None = None, bias: bool = True, eps: float = 1e-8,
                 rng: np.random.Generator | None = None):
        out_channels = out_channels or in_channels
        self.conv = Conv2d(in_channels, out_channels, kernel_size, stride, padding, bias, rng)
        self.gain = Parameter(np.ones(1))
        self.scales = Parameter(np.ones(in_channels))
        self.eps = eps

    @property
    def weight(self) -> Parameter:
        return self.conv.weight

    def modulated_weight(self) -> Tensor:
        return smc_weight(self.conv.weight, self.scales, self.eps)

    def forward(self, x: Tensor) -> Tensor:
        out = F.conv2d(x, self.modulated_weight(), None, self.conv.stride, self.conv.padding)
        out = out * self.gain
        if self.conv.bias is not None:
            out = out + self.conv.bias.reshape(1, -1, 1, 1)
        return out


def _skip(in_channels: int, out_channels: int, use_conv: bool, rng) -> Module:
    if in_channels == out_channels:
        return Identity()
    return Conv2d(in_channels, out_channels, 3 if use_conv else 1, rng=rng)


class ResBlock(Module):
    """norm -> SiLU -> conv -> norm -> SiLU -> dropout -> conv, plus skip, divided by scale_factor."""

    def __init__(self, in_channels: int, out_channels: int | None = None, dropout: float = 0.0,
                 use_conv: bool = False, norm_num_groups: int = 32, scale_factor: float = 1.0,
                 rng: np.random.Generator | None = None):
        out_channels = out_channels or in_channels
        self.in_channels, self.out_channels = in_channels, out_channels
        self.norm_in = GroupNorm(in_channels, norm_num_groups)
        self.conv_in = Conv2d(in_channels, out_channels, 3, rng=rng)
        self.norm_out = GroupNorm(out_channels, norm_num_groups)
        self.dropout = Dropout(dropout, rng)
        self.conv_out = Conv2d(out_channels, out_channels, 3, rng=rng)
        self.skip_connection = _skip(in_channels, out_channels, use_conv, rng)
        self.scale_factor = scale_factor

    def forward(self, x: Tensor) -> Tensor:
        if x.shape[1] != self.in_channels:
            raise DimensionError(f"ResBlock expects {self.in_channels} channels, got {x.shape[1]}")
        h = self.conv_in(self.norm_in(x).silu())
        h = self.conv_out(self.dropout(self.norm_out(h).silu()))
        out = self.skip_connection(x) + h
        return out / self.scale_factor if self.scale_factor != 1 else out


class ResBlockWithSMC(Module):
    """SiLU -> SMC -> SiLU -> dropout -> SMC, plus skip; no normalization layers."""

    def __init__(self, in_channels: int, out_channels: int | None = None, dropout: float = 0.0,
                 use_conv: bool = False, scale_factor: float = 1.0, rng: np.random.Generator | None = None,
                 **_unused):
        out_channels = out_channels or in_channels
        self.in_channels, self.out_channels = in_channels, out_channels
        self.conv_in = SMC(in_channels, out_channels, 3, rng=rng)
        self.dropout = Dropout(dropout, rng)
        self.conv_out = SMC(out_channels, out_channels, 3, rng=rng)
        self.skip_connection = _skip(in_channels, out_channels, use_conv, rng)
        self.scale_factor = scale_factor

    def forward(self, x: Tensor) -> Tensor:
        if x.shape[1] != self.in_channels:
            raise DimensionError(f"ResBlockWithSMC expects {self.in_channels} channels, got {x.shape[1]}")
        h = self.conv_in(x.silu())
        h = self.conv_out(self.dropout(h.silu()))
        out = self.skip_connection(x) + h
        return out / self.scale_factor if self.scale_factor != 1 else out


def resblock(in_channels: int, out_channels: int, use_smc: bool, dropout: float = 0.0, rng=None) -> Module:
    cls = ResBlockWithSMC if use_smc else ResBlock
    return cls(in_channels=in_channels, out_channels=out_channels, dropout=dropout, rng=rng)


class AttnBlock(Module):
    """Single-head spatial self-attention with a residual connection."""

    def __init__(self, channels: int, rng: np.random.Generator | None = None):
        self.norm = GroupNorm(channels)
        self.q = Conv2d(channels, channels, 1, rng=rng)
        self.k = Conv2d(channels, channels, 1, rng=rng)
        self.v = Conv2d(channels, channels, 1, rng=rng)
        self.proj_out = Conv2d(channels, channels, 1, rng=rng)

    def forward(self, x: Tensor) -> Tensor:
        n, c, h, w = x.shape
        hn = self.norm(x)
        q = self.q(hn).reshape(n, c, h * w).transpose(0, 2, 1)
        k = self.k(hn).reshape(n, c, h * w)
        v = self.v(hn).reshape(n, c, h * w)
        attn = softmax(matmul(q, k) * (1.0 / math.sqrt(c)), axis=-1)  # (n, hw, hw)
        out = matmul(v, attn.transpose(0, 2, 1)).reshape(n, c, h, w)
        return x + self.proj_out(out)


class MidBlock2D(Module):
    def __init__(self, in_channels: int, out_channels: int, dropout: float = 0.0, use_smc: bool = False,
                 attention: bool = False, rng: np.random.Generator | None = None):
        self.res0 = resblock(in_channels, out_channels, use_smc, dropout, rng)
        self.attn = AttnBlock(out_channels, rng) if attention else None
        self.res1 = resblock(out_channels, out_channels, use_smc, dropout, rng)

    def forward(self, x: Tensor) -> Tensor:
        x = self.res0(x)
        if self.attn is not None:
            x = self.attn(x)
        return self.res1(x)


@dataclass(frozen=True)
class UNetBlockConfig:
    in_channels: int
    out_channels: int
    model_channels: int
    ch_multiplies: tuple[int, ...] = (1, 2, 4)
    num_res_blocks: int = 2
    use_smc: bool = False

    def __post_init__(self):
        if not self.ch_multiplies:
            raise ValueError("ch_multiplies must be nonempty")
        vals = (self.in_channels, self.out_channels, self.model_channels, self.num_res_blocks, *self.ch_multiplies)
        if any(v <= 0 for v in vals):
            raise ValueError(f"all UNet sizes must be positive: {self}")


class LiteVAEUNetBlock(Module):
    """Resolution-preserving UNet used for wavelet feature extraction and aggregation.

    The conv-in output and every encoder resblock output are pushed onto a
    skip stack; each decoder resblock consumes concat(current, popped skip).
    With ``num_res_blocks`` decoder blocks per level one entry (the conv-in
    features) is left on the stack, as in the reference layout.
    """

    def __init__(self, config: UNetBlockConfig, dropout: float = 0.0, rng: np.random.Generator | None = None):
        cfg = self.config = config
        mc = cfg.model_channels
        self.in_layer = Conv2d(cfg.in_channels, mc, 3, rng=rng)
        self.out_layer = Conv2d(mc * cfg.ch_multiplies[0], cfg.out_channels, 3, rng=rng)

        channel = mc
        skip_channels = [mc]
        self.encoder_blocks = []
        for mult in cfg.ch_multiplies:
            for _ in range(cfg.num_res_blocks):
                self.encoder_blocks.append(resblock(channel, mc * mult, cfg.use_smc, dropout, rng))
                channel = mc * mult
                skip_channels.append(channel)
        self.mid_block = MidBlock2D(channel, channel, dropout, cfg.use_smc, rng=rng)
        self.decoder_blocks = []
        for mult in reversed(cfg.ch_multiplies):
            for _ in range(cfg.num_res_blocks):
                self.decoder_blocks.append(resblock(channel + skip_channels.pop(), mc * mult, cfg.use_smc, dropout, rng))
                channel = mc * mult
        self.unused_skips = len(skip_channels)

    def forward(self, x: Tensor) -> Tensor:
        if x.shape[1] != self.config.in_channels:
            raise DimensionError(f"UNet block expects {self.config.in_channels} channels, got {x.shape[1]}")
        x = self.in_layer(x)
        skips = [x]
        for block in self.encoder_blocks:
            x = block(x)
            skips.append(x)
        x = self.mid_block(x)
        for block in self.decoder_blocks:
            x = block(concat([x, skips.pop()], axis=1))
        assert len(skips) == self.unused_skips
        return self.out_layer(x)


class Downsample2D(Module):
    """Learned channel-preserving downsampling: conv with kernel = stride = factor."""

    def __init__(self, channels: int, scale_factor: int = 2, rng: np.random.Generator | None = None):
        self.factor = scale_factor
        self.conv = Conv2d(channels, channels, scale_factor, stride=scale_factor, padding=0, rng=rng)

    def forward(self, x: Tensor) -> Tensor:
        return self.conv(x)


class Upsample(Module):
    def __init__(self, channels: int, rng: np.random.Generator | None = None):
        self.conv = Conv2d(channels, channels, 3, rng=rng)

    def forward(self, x: Tensor) -> Tensor:
        return self.conv(F.upsample_nearest(x, 2))


class StridedDownsample(Module):
    """Pad right/bottom by one, then 3x3 stride-2 conv (SD-VAE encoder downsampling)."""

    def __init__(self, channels: int, rng: np.random.Generator | None = None):
        self.conv = Conv2d(channels, channels, 3, stride=2, padding=0, rng=rng)

    def forward(self, x: Tensor) -> Tensor:
        return self.conv(F.pad2d(x, (0, 1, 0, 1)))


@dataclass(frozen=True)
class DecoderConfig:
    ch: int = 32
    ch_mult: tuple[int, ...] = (1, 2, 4, 4)
    num_res_blocks: int = 2
    attention: bool = False
    use_smc: bool = False
    dropout: float = 0.0


DECODER_PRESETS = {
    "micro": DecoderConfig(ch=16, ch_mult=(1, 1, 2, 2), num_res_blocks=1),
    "tiny": DecoderConfig(ch=32, ch_mult=(1, 2, 4, 4), num_res_blocks=2),
    "paper": DecoderConfig(ch=128, ch_mult=(1, 2, 4, 4), num_res_blocks=2, attention=True),
}


class Decoder(Module):
    """SD-VAE style decoder: conv-in, mid block, up stages with nearest upsampling, norm/SiLU/conv-out.

    ``num_upsamples`` defaults to ``len(ch_mult) - 1`` (factor 8 for four stages).
    """

    def __init__(self, in_channels: int, out_channels: int = 3, config: DecoderConfig = DecoderConfig(),
                 num_upsamples: int | None = None, rng: np.random.Generator | None = None):
        self.config = config
        self.in_channels = in_channels
        levels = len(config.ch_mult)
        self.num_upsamples = levels - 1 if num_upsamples is None else num_upsamples
        block_in = config.ch * config.ch_mult[-1]
        self.conv_in = Conv2d(in_channels, block_in, 3, rng=rng)
        self.mid = MidBlock2D(block_in, block_in, config.dropout, config.use_smc, config.attention, rng)
        self.up_blocks = []
        self.upsamplers = []
        for i_level in reversed(range(levels)):
            block_out = config.ch * config.ch_mult[i_level]
            stage = []
            for _ in range(config.num_res_blocks + 1):
                stage.append(resblock(block_in, block_out, config.use_smc, config.dropout, rng))
                block_in = block_out
            self.up_blocks.append(stage)
            upsample = i_level != 0 and (levels - 1 - i_level) < self.num_upsamples
            self.upsamplers.append(Upsample(block_in, rng) if upsample else None)
        self.norm_out = None if config.use_smc else GroupNorm(block_in)
        self.conv_out = Conv2d(block_in, out_channels, 3, rng=rng)
        self.record_features = False
        self.features: list[tuple[str, np.ndarray]] = []

    def _children(self):
        yield from super()._children()
        for s, stage in enumerate(self.up_blocks):
            for b, block in enumerate(stage):
                yield f"up.{s}.block.{b}", block

    def last_layer(self) -> Parameter:
        return self.conv_out.weight

    def _record(self, name: str, h: Tensor) -> None:
        if self.record_features:
            self.features.append((name, h.data.copy()))

    def forward(self, z: Tensor) -> Tensor:
        if z.shape[1] != self.in_channels:
            raise DimensionError(f"decoder expects {self.in_channels} latent channels, got {z.shape[1]}")
        self.features = []
        h = self.conv_in(z)
        h = self.mid(h)
        self._record("mid", h)
        for s, (stage, up) in enumerate(zip(self.up_blocks, self.upsamplers)):
            for block in stage:
                h = block(h)
            self._record(f"up.{s}", h)
            if up is not None:
                h = up(h)
        if self.norm_out is not None:
            h = self.norm_out(h)
        return self.conv_out(h.silu())


def feature_balance(features: Sequence[tuple[str, np.ndarray]]) -> dict[str, float]:
    """max/mean of per-channel activation RMS for every recorded feature map."""
    out = {}
    for name, h in features:
        rms = np.sqrt((h.astype(np.float64) ** 2).mean(axis=(0, 2, 3)))
        out[name] = float(rms.max() / max(rms.mean(), 1e-12))
    return out
