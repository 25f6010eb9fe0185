"""Differentiable NCHW image operations on top of :mod:`litevae.tensor`.

Convolution gathers kernel taps into a channel-major column buffer for the
forward pass; the input gradient is the matching scatter (transposed
correlation), with no im2col matrix transpose in between.
"""

from __future__ import annotations

import numpy as np

from .tensor import DimensionError, Tensor, add_flops, as_tensor, is_dry, make_result


def _gather(xp: np.ndarray, kh: int, kw: int, stride: int, ho: int, wo: int) -> np.ndarray:
    """Columns of shape (N, C, kh, kw, Ho, Wo) from a padded input."""
    n, c = xp.shape[:2]
    cols = np.empty((n, c, kh, kw, ho, wo), dtype=xp.dtype)
    for i in range(kh):
        for j in range(kw):
            cols[:, :, i, j] = xp[:, :, i : i + stride * (ho - 1) + 1 : stride, j : j + stride * (wo - 1) + 1 : stride]
    return cols


def _scatter(gcols: np.ndarray, hp: int, wp: int, stride: int) -> np.ndarray:
    """Adjoint of :func:`_gather`: sum column gradients back onto the padded input."""
    n, c, kh, kw, ho, wo = gcols.shape
    gxp = np.zeros((n, c, hp, wp), dtype=gcols.dtype)
    for i in range(kh):
        for j in range(kw):
            gxp[:, :, i : i + stride * (ho - 1) + 1 : stride, j : j + stride * (wo - 1) + 1 : stride] += gcols[:, :, i, j]
    return gxp


def conv2d(x: Tensor, weight: Tensor, bias: Tensor | None = None, stride: int = 1, padding: int = 0) -> Tensor:
    """2D cross-correlation with zero padding.

    x: (N, C_in, H, W), weight: (C_out, C_in, kH, kW), bias: (C_out,).
    """
    x, weight = as_tensor(x), as_tensor(weight)
    if x.ndim != 4 or weight.ndim != 4:
        raise DimensionError(f"conv2d expects 4-D input and weight, got {x.shape} and {weight.shape}")
    n, c, h, w = x.shape
    co, ci, kh, kw = weight.shape
    if ci != c:
        raise DimensionError(f"conv2d: input has {c} channels, weight expects {ci}")
    if stride < 1 or padding < 0:
        raise ValueError("stride must be positive and padding nonnegative")
    hp, wp = h + 2 * padding, w + 2 * padding
    if kh > hp or kw > wp:
        raise DimensionError(f"conv2d: kernel {kh}x{kw} larger than padded input {hp}x{wp}")
    ho, wo = (hp - kh) // stride + 1, (wp - kw) // stride + 1
    k, npix = c * kh * kw, ho * wo
    add_flops(2 * n * co * npix * k + (n * co * npix if bias is not None else 0))

    wd = weight.data
    w2 = wd.reshape(co, k)
    xd = x.data
    pointwise = kh == 1 and kw == 1 and stride == 1 and padding == 0

    if is_dry():
        out = np.zeros((n, co, ho, wo), dtype=xd.dtype)
        cols = None
    else:
        if pointwise:
            cols = xd.reshape(n, k, npix)
        else:
            xp = np.pad(xd, ((0, 0), (0, 0), (padding, padding), (padding, padding))) if padding else xd
            cols = _gather(xp, kh, kw, stride, ho, wo).reshape(n, k, npix)
        out = w2 @ cols
        if bias is not None:
            out += bias.data.reshape(1, co, 1)
        out = out.reshape(n, co, ho, wo)

    parents = (x, weight) + ((bias,) if bias is not None else ())

    def _bw(g):
        g3 = np.ascontiguousarray(g).reshape(n, co, npix)
        gw = gx = None
        if weight.requires_grad:
            gw = np.matmul(g3, cols.transpose(0, 2, 1)).sum(axis=0).reshape(wd.shape)
        if x.requires_grad:
            gcols = w2.T @ g3
            if pointwise:
                gx = gcols.reshape(n, c, h, w)
            else:
                gxp = _scatter(gcols.reshape(n, c, kh, kw, ho, wo), hp, wp, stride)
                gx = gxp[:, :, padding : padding + h, padding : padding + w] if padding else gxp
        grads = [gx, gw]
        if bias is not None:
            grads.append(g3.sum(axis=(0, 2)))
        return grads

    return make_result(out, parents, _bw, "conv2d")


def group_norm(x: Tensor, groups: int, gamma: Tensor | None = None, beta: Tensor | None = None, eps: float = 1e-6) -> Tensor:
    """Normalize each (sample, channel group) to zero mean and unit variance, then apply gamma/beta."""
    x = as_tensor(x)
    n, c = x.shape[:2]
    if c % groups:
        raise DimensionError(f"group_norm: {groups} groups do not divide {c} channels")
    xd = x.data
    xg = xd.reshape(n, groups, -1)
    mu = xg.mean(axis=2, keepdims=True)
    xc = xg - mu
    var = (xc * xc).mean(axis=2, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = (xc * inv).reshape(xd.shape)
    bshape = (1, c) + (1,) * (xd.ndim - 2)
    out = xhat
    if gamma is not None:
        out = out * gamma.data.reshape(bshape)
    if beta is not None:
        out = out + beta.data.reshape(bshape)
    add_flops(xd.size)
    red = (0,) + tuple(range(2, xd.ndim))

    def _bw(g):
        gg = g * gamma.data.reshape(bshape) if gamma is not None else g
        dxh = gg.reshape(n, groups, -1)
        xh = xhat.reshape(n, groups, -1)
        dx = inv * (dxh - dxh.mean(axis=2, keepdims=True) - xh * (dxh * xh).mean(axis=2, keepdims=True))
        grads = [dx.reshape(xd.shape)]
        if gamma is not None:
            grads.append((g * xhat).sum(axis=red))
        if beta is not None:
            grads.append(g.sum(axis=red))
        return grads

    parents = (x,) + tuple(t for t in (gamma, beta) if t is not None)
    return make_result(out.astype(xd.dtype, copy=False), parents, _bw, "group_norm")


def upsample_nearest(x: Tensor, factor: int) -> Tensor:
    """Replicate every pixel into a factor x factor block."""
    x = as_tensor(x)
    if factor < 1:
        raise ValueError("factor must be positive")
    if factor == 1:
        return x
    n, c, h, w = x.shape
    out = np.repeat(np.repeat(x.data, factor, axis=2), factor, axis=3)

    def _bw(g):
        return (g.reshape(n, c, h, factor, w, factor).sum(axis=(3, 5)),)

    return make_result(out, (x,), _bw, "upsample_nearest")


def pad2d(x: Tensor, pad: tuple[int, int, int, int], mode: str = "constant") -> Tensor:
    """Pad the last two axes by (left, right, top, bottom); mode 'constant' (zeros) or 'reflect'."""
    x = as_tensor(x)
    left, right, top, bottom = pad
    h, w = x.shape[-2:]
    if mode == "reflect" and (max(top, bottom) >= h or max(left, right) >= w):
        raise DimensionError(f"reflect padding {pad} too large for {h}x{w}")
    widths = [(0, 0)] * (x.ndim - 2) + [(top, bottom), (left, right)]
    out = np.pad(x.data, widths, mode=mode)
    if mode == "constant":

        def _bw(g):
            return (g[..., top : top + h, left : left + w],)

    elif mode == "reflect":

        def _bw(g):
            g = g.copy()
            # fold reflected borders back onto their sources
            for i in range(top):
                g[..., 2 * top - i, :] += g[..., i, :]
            for i in range(bottom):
                src = top + h - 2 - i
                g[..., src, :] += g[..., top + h + i, :]
            g = g[..., top : top + h, :]
            for j in range(left):
                g[..., 2 * left - j] += g[..., j]
            for j in range(right):
                src = left + w - 2 - j
                g[..., src] += g[..., left + w + j]
            return (g[..., left : left + w],)

    else:
        raise ValueError(f"unknown pad mode {mode!r}")
    return make_result(out, (x,), _bw, "pad2d")


def dropout(x: Tensor, p: float, rng: np.random.Generator | None = None, training: bool = True) -> Tensor:
    """Inverted dropout; identity when p == 0 or not training."""
    if p <= 0.0 or not training:
        return x
    if rng is None:
        raise ValueError("dropout with p > 0 needs an explicit rng")
    keep = (rng.random(x.shape) >= p).astype(x.dtype) / (1.0 - p)
    return x * keep
