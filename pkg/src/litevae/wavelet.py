"""Multi-level 2D Haar transform, space-to-depth packing and Gaussian blur.

Sub-bands of one level are packed along channels as ``[L | H | V | D]``.
For a 2x2 block ``[[a, b], [c, d]]`` the orthonormal Haar coefficients are::

    L = (a + b + c + d) / 2      H = (a - b + c - d) / 2
    V = (a + b - c - d) / 2      D = (a - b - c + d) / 2

The single-level transform is an orthogonal matrix, so its gradient is the
inverse transform and vice versa. Odd extents are rejected rather than padded.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .functional import conv2d, pad2d
from .tensor import DimensionError, Tensor, as_tensor, concat, make_result


def _analysis(x: np.ndarray) -> np.ndarray:
    n, c, h, w = x.shape
    a = x[:, :, 0::2, 0::2]
    b = x[:, :, 0::2, 1::2]
    cc = x[:, :, 1::2, 0::2]
    d = x[:, :, 1::2, 1::2]
    s1, d1 = a + b, a - b
    s2, d2 = cc + d, cc - d
    out = np.empty((n, 4, c, h // 2, w // 2), dtype=x.dtype)
    out[:, 0] = (s1 + s2) * 0.5
    out[:, 1] = (d1 + d2) * 0.5
    out[:, 2] = (s1 - s2) * 0.5
    out[:, 3] = (d1 - d2) * 0.5
    return out.reshape(n, 4 * c, h // 2, w // 2)


def _synthesis(y: np.ndarray) -> np.ndarray:
    n, c4, h, w = y.shape
    c = c4 // 4
    bands = y.reshape(n, 4, c, h, w)
    lo, hh, vv, dd = bands[:, 0], bands[:, 1], bands[:, 2], bands[:, 3]
    p, q = lo + vv, hh + dd  # top row
    r, s = lo - vv, hh - dd  # bottom row
    out = np.empty((n, c, 2 * h, 2 * w), dtype=y.dtype)
    out[:, :, 0::2, 0::2] = (p + q) * 0.5
    out[:, :, 0::2, 1::2] = (p - q) * 0.5
    out[:, :, 1::2, 0::2] = (r + s) * 0.5
    out[:, :, 1::2, 1::2] = (r - s) * 0.5
    return out


def haar_analysis(x: Tensor) -> Tensor:
    """One Haar level: (N, C, H, W) -> (N, 4C, H/2, W/2), bands ordered L, H, V, D."""
    x = as_tensor(x)
    if x.ndim != 4:
        raise DimensionError(f"expected NCHW input, got shape {x.shape}")
    h, w = x.shape[2:]
    if h % 2 or w % 2:
        raise DimensionError(f"Haar analysis needs even extents, got {h}x{w}")
    return make_result(_analysis(x.data), (x,), lambda g: (_synthesis(g),), "haar_analysis")


def haar_synthesis(y: Tensor) -> Tensor:
    """Inverse of :func:`haar_analysis`."""
    y = as_tensor(y)
    if y.ndim != 4 or y.shape[1] % 4:
        raise DimensionError(f"band tensor must be NCHW with 4k channels, got {y.shape}")
    return make_result(_synthesis(y.data), (y,), lambda g: (_analysis(np.ascontiguousarray(g)),), "haar_synthesis")


@dataclass
class WaveletPyramid:
    """Deepest-level bands of an ``level``-level decomposition.

    ``bands`` holds ``[L | H | V | D]`` of the deepest level, divided by
    ``normalization``. ``details`` holds the unnormalized ``[H | V | D]``
    bands of the finer levels, finest first, so the pyramid can be inverted.
    """

    level: int
    bands: Tensor
    normalization: float = 1.0
    details: list[Tensor] = field(default_factory=list)

    @property
    def channels(self) -> int:
        return self.bands.shape[1] // 4

    def band(self, name: str) -> Tensor:
        i = "LHVD".index(name)
        c = self.channels
        return self.bands[:, i * c : (i + 1) * c]

    @property
    def low(self) -> Tensor:
        return self.band("L")

    @property
    def high(self) -> Tensor:
        c = self.channels
        return self.bands[:, c:]


def _check_levels(x: Tensor, level: int) -> None:
    if level < 1:
        raise ValueError(f"level must be >= 1, got {level}")
    h, w = x.shape[2:]
    f = 2**level
    if h % f or w % f:
        raise DimensionError(f"{h}x{w} image is not divisible by 2^{level}")


def dwt2(x: Tensor, level: int = 1) -> WaveletPyramid:
    """Multi-level Haar analysis; returns the deepest level's four bands."""
    x = as_tensor(x)
    _check_levels(x, level)
    c = x.shape[1]
    details = []
    cur = x
    for lv in range(level):
        packed = haar_analysis(cur)
        if lv == level - 1:
            return WaveletPyramid(level=level, bands=packed, details=details)
        details.append(packed[:, c:])
        cur = packed[:, :c]
    raise AssertionError("unreachable")


def normalized_dwt(x: Tensor, level: int = 1) -> WaveletPyramid:
    """:func:`dwt2` with bands divided by 2**level, so a constant image v gives L == v."""
    p = dwt2(x, level)
    scale = float(2**level)
    return WaveletPyramid(level=level, bands=p.bands * (1.0 / scale), normalization=scale, details=p.details)


def idwt2(p: WaveletPyramid) -> Tensor:
    """Exact inverse of :func:`dwt2` / :func:`normalized_dwt`."""
    bands = p.bands
    if bands.ndim != 4 or bands.shape[1] % 4:
        raise DimensionError(f"band tensor must be NCHW with 4k channels, got {bands.shape}")
    if len(p.details) != p.level - 1:
        raise DimensionError(f"level-{p.level} pyramid needs {p.level - 1} detail levels, has {len(p.details)}")
    if p.normalization != 1.0:
        bands = bands * p.normalization
    cur = haar_synthesis(bands)
    for det in reversed(p.details):
        if det.shape[0] != cur.shape[0] or det.shape[1] != 3 * cur.shape[1] or det.shape[2:] != cur.shape[2:]:
            raise DimensionError(f"detail bands {det.shape} inconsistent with low band {cur.shape}")
        cur = haar_synthesis(concat([cur, det], axis=1))
    return cur


def deepest_bands(x: Tensor, level: int, normalize: bool = True) -> Tensor:
    """Packed ``[L|H|V|D]`` tensor of the deepest level (convenience wrapper)."""
    p = normalized_dwt(x, level) if normalize else dwt2(x, level)
    return p.bands


def space_to_depth(x: Tensor, r: int) -> Tensor:
    """Move each r x r block into r*r channels: channel = c*r*r + i*r + j."""
    x = as_tensor(x)
    n, c, h, w = x.shape
    if h % r or w % r:
        raise DimensionError(f"{h}x{w} not divisible by block size {r}")
    if r == 1:
        return x
    out = x.data.reshape(n, c, h // r, r, w // r, r).transpose(0, 1, 3, 5, 2, 4).reshape(n, c * r * r, h // r, w // r)

    def _bw(g):
        return (g.reshape(n, c, r, r, h // r, w // r).transpose(0, 1, 4, 2, 5, 3).reshape(n, c, h, w),)

    return make_result(np.ascontiguousarray(out), (x,), _bw, "space_to_depth")


def depth_to_space(x: Tensor, r: int) -> Tensor:
    """Inverse of :func:`space_to_depth`."""
    x = as_tensor(x)
    n, crr, h, w = x.shape
    if crr % (r * r):
        raise DimensionError(f"{crr} channels not divisible by {r * r}")
    if r == 1:
        return x
    c = crr // (r * r)
    out = x.data.reshape(n, c, r, r, h, w).transpose(0, 1, 4, 2, 5, 3).reshape(n, c, h * r, w * r)

    def _bw(g):
        return (g.reshape(n, c, h, r, w, r).transpose(0, 1, 3, 5, 2, 4).reshape(n, crr, h, w),)

    return make_result(np.ascontiguousarray(out), (x,), _bw, "depth_to_space")


def gaussian_kernel1d(kernel_size: int, sigma: float, dtype=np.float64) -> np.ndarray:
    if kernel_size < 1 or kernel_size % 2 == 0:
        raise ValueError(f"kernel_size must be a positive odd integer, got {kernel_size}")
    if sigma <= 0:
        raise ValueError("sigma must be positive")
    t = np.arange(kernel_size, dtype=np.float64) - (kernel_size - 1) / 2
    k = np.exp(-(t**2) / (2.0 * sigma**2))
    return (k / k.sum()).astype(dtype)


def gaussian_blur(x: Tensor, kernel_size: int = 5, sigma: float = 1.0) -> Tensor:
    """Separable normalized Gaussian blur with reflect padding, per channel."""
    x = as_tensor(x)
    if kernel_size == 1:
        return x
    n, c, h, w = x.shape
    k = gaussian_kernel1d(kernel_size, sigma, x.dtype)
    r = kernel_size // 2
    flat = x.reshape(n * c, 1, h, w)
    flat = pad2d(flat, (r, r, r, r), mode="reflect")
    kv = Tensor(k.reshape(1, 1, kernel_size, 1))
    kh = Tensor(k.reshape(1, 1, 1, kernel_size))
    out = conv2d(conv2d(flat, kv), kh)
    return out.reshape(n, c, h, w)
