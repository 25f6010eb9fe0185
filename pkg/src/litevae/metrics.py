"""Evaluation metrics: PSNR, SSIM, RBF-kernel MMD, parameter and FLOP counters."""

from __future__ import annotations

from typing import Callable, Sequence

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .tensor import Tensor, flop_counter, no_grad, tensor

PSNR_CAP = 100.0
MSE_FLOOR = 1e-10


def _np(x) -> np.ndarray:
    return np.asarray(x.data if isinstance(x, Tensor) else x, dtype=np.float64)


def _per_image(x: np.ndarray) -> np.ndarray:
    """View as (N, C, H, W); 2-D and 3-D inputs are a single image."""
    if x.ndim == 2:
        return x[None, None]
    if x.ndim == 3:
        return x[None]
    if x.ndim == 4:
        return x
    raise ValueError(f"expected a 2-D, 3-D or 4-D image array, got shape {x.shape}")


def psnr_per_image(x, x_hat, peak: float = 1.0) -> np.ndarray:
    a, b = _per_image(_np(x)), _per_image(_np(x_hat))
    if a.shape != b.shape:
        raise ValueError(f"shape mismatch {a.shape} vs {b.shape}")
    mse = ((a - b) ** 2).reshape(a.shape[0], -1).mean(axis=1)
    out = np.full(mse.shape, PSNR_CAP)
    ok = mse >= MSE_FLOOR
    out[ok] = np.minimum(10.0 * np.log10(peak**2 / mse[ok]), PSNR_CAP)
    return out


def psnr(x, x_hat, peak: float = 1.0) -> float:
    """Mean over the batch of 10*log10(peak^2 / MSE), capped at 100 dB."""
    return float(psnr_per_image(x, x_hat, peak).mean())


def _gauss_window(size: int, sigma: float) -> np.ndarray:
    t = np.arange(size) - (size - 1) / 2.0
    g = np.exp(-(t**2) / (2.0 * sigma**2))
    return g / g.sum()


def _filter_valid(x: np.ndarray, g: np.ndarray) -> np.ndarray:
    k = len(g)
    x = sliding_window_view(x, k, axis=-1) @ g
    return np.moveaxis(sliding_window_view(np.moveaxis(x, -1, -2), k, axis=-1) @ g, -1, -2)


def ssim_per_image(x, x_hat, peak: float = 1.0, window: int = 11, sigma: float = 1.5) -> np.ndarray:
    """SSIM averaged over channels and valid windows, one value per image.

    Images smaller than the window use the largest odd window that fits.
    """
    a, b = _per_image(_np(x)), _per_image(_np(x_hat))
    if a.shape != b.shape:
        raise ValueError(f"shape mismatch {a.shape} vs {b.shape}")
    k = min(window, a.shape[-2], a.shape[-1])
    k -= 1 - k % 2
    g = _gauss_window(k, sigma)
    c1, c2 = (0.01 * peak) ** 2, (0.03 * peak) ** 2
    mu_a, mu_b = _filter_valid(a, g), _filter_valid(b, g)
    saa = _filter_valid(a * a, g) - mu_a**2
    sbb = _filter_valid(b * b, g) - mu_b**2
    sab = _filter_valid(a * b, g) - mu_a * mu_b
    num = (2 * mu_a * mu_b + c1) * (2 * sab + c2)
    den = (mu_a**2 + mu_b**2 + c1) * (saa + sbb + c2)
    return (num / den).reshape(a.shape[0], -1).mean(axis=1)


def ssim(x, x_hat, peak: float = 1.0) -> float:
    return float(ssim_per_image(x, x_hat, peak).mean())


def default_bandwidths(dim: int) -> list[float]:
    base = np.sqrt(dim / 2.0)
    return [m * base for m in (0.5, 1.0, 2.0, 4.0, 8.0)]


def _flatten(a) -> np.ndarray:
    a = _np(a)
    return a.reshape(a.shape[0], -1)


def _sq_dists(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    d = (a * a).sum(1)[:, None] + (b * b).sum(1)[None, :] - 2.0 * (a @ b.T)
    return np.maximum(d, 0.0)


def _mmd_from_dists(daa, dbb, dab, bandwidths, biased: bool) -> np.ndarray:
    m, n = daa.shape[0], dbb.shape[0]
    out = []
    for s in bandwidths:
        kaa, kbb, kab = (np.exp(-d / (2.0 * s * s)) for d in (daa, dbb, dab))
        if biased:
            val = kaa.mean() + kbb.mean() - 2.0 * kab.mean()
        else:
            taa = (kaa.sum() - np.trace(kaa)) / (m * (m - 1))
            tbb = (kbb.sum() - np.trace(kbb)) / (n * (n - 1))
            val = taa + tbb - 2.0 * kab.mean()
        out.append(val)
    return np.array(out)


def _canonical(a: np.ndarray, b: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    # fixed argument order makes the estimate exactly symmetric in floating point
    ka = (a.shape, a.tobytes())
    kb = (b.shape, b.tobytes())
    return (b, a) if kb < ka else (a, b)


def mmd_rbf(a, b, bandwidths: Sequence[float] | None = None, biased: bool = False) -> np.ndarray:
    """MMD^2 per bandwidth with k(x, y) = exp(-|x - y|^2 / (2 s^2)).

    Samples are flattened per row. The default is the unbiased U-statistic,
    which needs at least two samples per set; ``biased=True`` gives the
    V-statistic.
    """
    a, b = _canonical(_flatten(a), _flatten(b))
    if a.shape[1] != b.shape[1]:
        raise ValueError(f"dimension mismatch {a.shape[1]} vs {b.shape[1]}")
    if not biased and min(len(a), len(b)) < 2:
        raise ValueError("unbiased MMD needs at least two samples per set")
    bw = default_bandwidths(a.shape[1]) if bandwidths is None else list(bandwidths)
    return _mmd_from_dists(_sq_dists(a, a), _sq_dists(b, b), _sq_dists(a, b), bw, biased)


def mmd_permutation_se(a, b, bandwidths: Sequence[float] | None = None, n_perm: int = 200,
                       rng: np.random.Generator | None = None) -> np.ndarray:
    """Standard error of the unbiased MMD^2 estimate under the pooled-sample null."""
    a, b = _canonical(_flatten(a), _flatten(b))
    rng = rng or np.random.default_rng(0)
    bw = default_bandwidths(a.shape[1]) if bandwidths is None else list(bandwidths)
    pool = np.concatenate([a, b])
    d = _sq_dists(pool, pool)
    m = len(a)
    stats = []
    for _ in range(n_perm):
        p = rng.permutation(len(pool))
        i, j = p[:m], p[m:]
        stats.append(_mmd_from_dists(d[np.ix_(i, i)], d[np.ix_(j, j)], d[np.ix_(i, j)], bw, False))
    return np.std(np.array(stats), axis=0, ddof=1)


def count_params(model) -> int:
    return int(model.num_params())


def count_flops(model: Callable, input_shape: Sequence[int]) -> int:
    """FLOPs of one forward pass; multiply-adds count 2, elementwise ops 1.

    Runs in dry mode so paper-scale models are cheap to measure.
    """
    with no_grad(), flop_counter(dry=True) as counter:
        model(tensor(np.zeros(tuple(input_shape))))
    return counter[0]
