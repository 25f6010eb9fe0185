"""LiteVAE: wavelet feature extraction + aggregation encoder, Gaussian latent, SD-style decoder.

Also hosts the non-learned wavelet encoders and a conventional strided-conv
encoder used as the comparison baseline.
"""

from __future__ import annotations

from dataclasses import asdict, dataclass, field, replace

import numpy as np

from .nn import (
    DECODER_PRESETS,
    Conv2d,
    Decoder,
    DecoderConfig,
    Downsample2D,
    GroupNorm,
    Identity,
    LiteVAEUNetBlock,
    MidBlock2D,
    Module,
    StridedDownsample,
    UNetBlockConfig,
    resblock,
)
from .tensor import DimensionError, Tensor, as_tensor, concat
from .wavelet import haar_synthesis, normalized_dwt, space_to_depth

LOGVAR_MIN, LOGVAR_MAX = -30.0, 20.0
DOWNSAMPLE = 8


@dataclass(frozen=True)
class EncoderPreset:
    extractor_channels: int
    extractor_mult: tuple[int, ...]
    aggregator_channels: int
    aggregator_mult: tuple[int, ...]
    num_res_blocks: int = 2


# feature-extraction / feature-aggregation widths per model size
SIZE_PRESETS = {
    "S": EncoderPreset(16, (1, 2, 2), 16, (1, 2, 2)),
    "B": EncoderPreset(32, (1, 2, 3), 32, (1, 2, 3)),
    "M": EncoderPreset(64, (1, 2, 4), 32, (1, 2, 3)),
    "L": EncoderPreset(64, (1, 2, 4), 64, (1, 2, 4)),
    "tiny": EncoderPreset(8, (1, 2), 8, (1, 2), num_res_blocks=1),
}

REFERENCE_PRESETS = {
    "micro": DecoderConfig(ch=16, ch_mult=(1, 1, 2, 2), num_res_blocks=1),
    "tiny": DecoderConfig(ch=32, ch_mult=(1, 2, 4, 4), num_res_blocks=2),
    "paper": DecoderConfig(ch=128, ch_mult=(1, 2, 4, 4), num_res_blocks=2, attention=True),
}

ENCODER_KINDS = ("litevae", "reference", "dwt", "dwt2")


@dataclass(frozen=True)
class ModelConfig:
    latent_dim: int = 12
    size_preset: str = "B"
    encoder: str = "litevae"
    use_1x1_conv: bool = False
    share_extractor_weights: bool = False
    extractor_smc: bool = False
    output_type: str = "image"
    decoder_preset: str = "tiny"
    decoder_smc: bool = False
    decoder_attention: bool = False
    reference_preset: str = "tiny"
    image_channels: int = 3
    dropout: float = 0.0

    def __post_init__(self):
        if self.latent_dim < 1:
            raise ValueError("latent_dim must be >= 1")
        if self.size_preset not in SIZE_PRESETS:
            raise ValueError(f"unknown size_preset {self.size_preset!r}; choose from {sorted(SIZE_PRESETS)}")
        if self.encoder not in ENCODER_KINDS:
            raise ValueError(f"unknown encoder {self.encoder!r}; choose from {ENCODER_KINDS}")
        if self.output_type not in ("image", "wavelet"):
            raise ValueError(f"output_type must be 'image' or 'wavelet', got {self.output_type!r}")
        if self.decoder_preset not in DECODER_PRESETS:
            raise ValueError(f"unknown decoder_preset {self.decoder_preset!r}")
        if self.reference_preset not in REFERENCE_PRESETS:
            raise ValueError(f"unknown reference_preset {self.reference_preset!r}")

    @property
    def latent_channels(self) -> int:
        """Channels of the code fed to the decoder."""
        if self.encoder == "dwt":
            return 4 * self.image_channels
        if self.encoder == "dwt2":
            return 16 * self.image_channels
        return self.latent_dim

    @property
    def stochastic(self) -> bool:
        return self.encoder in ("litevae", "reference")

    def decoder_config(self) -> DecoderConfig:
        base = DECODER_PRESETS[self.decoder_preset]
        return replace(base, use_smc=self.decoder_smc, attention=base.attention or self.decoder_attention,
                       dropout=self.dropout)

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass
class GaussianLatent:
    """Diagonal Gaussian over latent codes; ``raw`` splits into mean | logvar along channels."""

    mean: Tensor
    logvar: Tensor
    last_noise: np.ndarray | None = field(default=None, repr=False)

    @classmethod
    def from_raw(cls, raw: Tensor) -> "GaussianLatent":
        raw = as_tensor(raw)
        c = raw.shape[1]
        if c % 2:
            raise DimensionError(f"raw latent needs an even channel count, got {c}")
        mean = raw[:, : c // 2]
        logvar = raw[:, c // 2 :].clamp(LOGVAR_MIN, LOGVAR_MAX)
        return cls(mean, logvar)

    @property
    def std(self) -> Tensor:
        return (self.logvar * 0.5).exp()

    @property
    def var(self) -> Tensor:
        return self.logvar.exp()

    def sample(self, rng: np.random.Generator) -> Tensor:
        eps = rng.standard_normal(self.mean.shape).astype(self.mean.dtype)
        self.last_noise = eps
        return self.mean + self.std * eps

    def mode(self) -> Tensor:
        return self.mean

    def kl(self) -> Tensor:
        """Batch mean of 0.5 * sum(mu^2 + sigma^2 - 1 - log sigma^2) against N(0, I)."""
        n = self.mean.shape[0]
        terms = self.mean * self.mean + self.var - 1.0 - self.logvar
        return terms.sum() * (0.5 / n)


def latent_distribution(raw: Tensor) -> GaussianLatent:
    return GaussianLatent.from_raw(raw)


def _check_divisible(image: Tensor) -> None:
    h, w = image.shape[2:]
    if h % DOWNSAMPLE or w % DOWNSAMPLE:
        raise DimensionError(f"image extents {h}x{w} must be divisible by {DOWNSAMPLE}")


class LiteVAEEncoder(Module):
    """Normalized DWT at levels 1-3 -> per-level UNet extractors -> downsample -> aggregator UNet."""

    def __init__(self, latent_dim: int, preset: EncoderPreset, image_channels: int = 3, share_weights: bool = False,
                 use_smc: bool = False, dropout: float = 0.0, rng: np.random.Generator | None = None):
        bands = 4 * image_channels
        ext = UNetBlockConfig(bands, bands, preset.extractor_channels, preset.extractor_mult,
                              preset.num_res_blocks, use_smc)
        self.feature_extractor_L1 = LiteVAEUNetBlock(ext, dropout, rng)
        if share_weights:
            self.feature_extractor_L2 = self.feature_extractor_L1
            self.feature_extractor_L3 = self.feature_extractor_L1
        else:
            self.feature_extractor_L2 = LiteVAEUNetBlock(ext, dropout, rng)
            self.feature_extractor_L3 = LiteVAEUNetBlock(ext, dropout, rng)
        agg = UNetBlockConfig(3 * bands, 2 * latent_dim, preset.aggregator_channels, preset.aggregator_mult,
                              preset.num_res_blocks, use_smc)
        self.feature_aggregator = LiteVAEUNetBlock(agg, dropout, rng)
        self.downsample_block_L1 = Downsample2D(bands, 4, rng)
        self.downsample_block_L2 = Downsample2D(bands, 2, rng)

    def extractors(self) -> list[LiteVAEUNetBlock]:
        return [self.feature_extractor_L1, self.feature_extractor_L2, self.feature_extractor_L3]

    def forward(self, image: Tensor) -> Tensor:
        _check_divisible(image)
        dwt_l1 = normalized_dwt(image, 1).bands
        dwt_l2 = normalized_dwt(image, 2).bands
        dwt_l3 = normalized_dwt(image, 3).bands
        f1 = self.downsample_block_L1(self.feature_extractor_L1(dwt_l1))
        f2 = self.downsample_block_L2(self.feature_extractor_L2(dwt_l2))
        f3 = self.feature_extractor_L3(dwt_l3)
        return self.feature_aggregator(concat([f1, f2, f3], axis=1))


class ReferenceEncoder(Module):
    """Conventional SD-VAE encoder: strided downsampling stages mirroring the decoder (f = 8)."""

    def __init__(self, latent_dim: int, config: DecoderConfig, image_channels: int = 3, quant_conv: bool = True,
                 rng: np.random.Generator | None = None):
        self.config = config
        levels = len(config.ch_mult)
        self.conv_in = Conv2d(image_channels, config.ch, 3, rng=rng)
        in_mult = (1,) + tuple(config.ch_mult)
        self.down_blocks = []
        self.downsamplers = []
        block_in = config.ch
        for i_level in range(levels):
            block_in = config.ch * in_mult[i_level]
            block_out = config.ch * config.ch_mult[i_level]
            for _ in range(config.num_res_blocks):
                self.down_blocks.append(resblock(block_in, block_out, False, config.dropout, rng))
                block_in = block_out
            self.downsamplers.append(StridedDownsample(block_in, rng) if i_level != levels - 1 else None)
        self.mid = MidBlock2D(block_in, block_in, config.dropout, False, config.attention, rng)
        self.norm_out = GroupNorm(block_in)
        self.conv_out = Conv2d(block_in, 2 * latent_dim, 3, rng=rng)
        self.quant_conv = Conv2d(2 * latent_dim, 2 * latent_dim, 1, rng=rng) if quant_conv else Identity()

    def forward(self, image: Tensor) -> Tensor:
        _check_divisible(image)
        h = self.conv_in(image)
        per_level = self.config.num_res_blocks
        for i, down in enumerate(self.downsamplers):
            for block in self.down_blocks[i * per_level : (i + 1) * per_level]:
                h = block(h)
            if down is not None:
                h = down(h)
        h = self.mid(h)
        h = self.conv_out(self.norm_out(h).silu())
        return self.quant_conv(h)


def nonlearned_encode(image: Tensor, variant: str = "dwt") -> Tensor:
    """Fixed wavelet encoders at f = 8.

    ``dwt``: normalized level-3 bands (4C channels).
    ``dwt2``: level-3 bands followed by space-to-depth (r=2) of the normalized
    level-2 high bands (4C + 12C = 16C channels).
    """
    image = as_tensor(image)
    _check_divisible(image)
    l3 = normalized_dwt(image, 3).bands
    if variant == "dwt":
        return l3
    if variant == "dwt2":
        c = image.shape[1]
        l2_high = normalized_dwt(image, 2).bands[:, c:]
        return concat([l3, space_to_depth(l2_high, 2)], axis=1)
    raise ValueError(f"unknown non-learned encoder {variant!r}")


class LiteVAE(Module):
    """Encoder + diagonal Gaussian latent + decoder with image or wavelet output."""

    def __init__(self, config: ModelConfig = ModelConfig(), seed: int = 0):
        self.config = config
        rng = np.random.default_rng(seed)
        nz = config.latent_dim
        if config.encoder == "litevae":
            self.encoder = LiteVAEEncoder(nz, SIZE_PRESETS[config.size_preset], config.image_channels,
                                          config.share_extractor_weights, config.extractor_smc, config.dropout, rng)
        elif config.encoder == "reference":
            self.encoder = ReferenceEncoder(nz, REFERENCE_PRESETS[config.reference_preset], config.image_channels,
                                            rng=rng)
        else:
            self.encoder = None
        zc = config.latent_channels
        use_pre = config.use_1x1_conv and config.stochastic
        self.pre_conv = Conv2d(2 * zc, 2 * zc, 1, rng=rng) if use_pre else Identity()
        self.post_conv = Conv2d(zc, zc, 1, rng=rng) if config.use_1x1_conv else Identity()
        bands = 4 * config.image_channels
        if config.output_type == "image":
            self.decoder = Decoder(zc, config.image_channels, config.decoder_config(), rng=rng)
        else:
            levels = len(config.decoder_config().ch_mult)
            self.decoder = Decoder(zc, bands, config.decoder_config(), num_upsamples=levels - 2, rng=rng)

    def encode(self, image: Tensor) -> Tensor:
        """Raw encoder output: 2*n_z channels (mean | logvar) for learned encoders, the code itself otherwise."""
        image = as_tensor(image)
        if self.config.encoder in ("dwt", "dwt2"):
            return nonlearned_encode(image, self.config.encoder)
        return self.pre_conv(self.encoder(image))

    def decode(self, latent: Tensor) -> tuple[Tensor, Tensor]:
        """Return (image reconstruction, normalized level-1 wavelet reconstruction)."""
        latent = self.post_conv(as_tensor(latent))
        if self.config.output_type == "image":
            image_recon = self.decoder(latent)
            wavelet_recon = normalized_dwt(image_recon, 1).bands
        else:
            wavelet_recon = self.decoder(latent)
            image_recon = haar_synthesis(wavelet_recon * 2.0)
        return image_recon, wavelet_recon

    def forward(self, image: Tensor, sample: bool = True, rng: np.random.Generator | None = None) -> dict:
        raw = self.encode(image)
        if self.config.stochastic:
            dist = latent_distribution(raw)
            if sample:
                if rng is None:
                    raise ValueError("sampling needs an rng")
                latent = dist.sample(rng)
            else:
                latent = dist.mode()
            kl = dist.kl()
        else:
            dist, latent = None, raw
            kl = Tensor(np.zeros((), dtype=raw.dtype))
        image_recon, wavelet_recon = self.decode(latent)
        return {"sample": image_recon, "wavelet": wavelet_recon, "latent": latent, "kl_reg": kl,
                "latent_dist": dist}

    def reconstruct(self, image: Tensor) -> Tensor:
        return self.forward(image, sample=False)["sample"]

    def last_layer(self):
        return self.decoder.last_layer()

    def encoder_params(self) -> int:
        n = self.encoder.num_params() if self.encoder is not None else 0
        return n + self.pre_conv.num_params()
