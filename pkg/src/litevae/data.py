"""Image I/O (binary PPM, optional PNG), synthetic images and the training preprocessing."""

from __future__ import annotations

import os
from pathlib import Path

import numpy as np


class ImageFormatError(ValueError):
    pass


def _ppm_tokens(data: bytes, count: int) -> tuple[list[bytes], int]:
    tokens, pos = [], 2
    while len(tokens) < count:
        while pos < len(data) and data[pos:pos + 1].isspace():
            pos += 1
        if pos < len(data) and data[pos:pos + 1] == b"#":
            while pos < len(data) and data[pos:pos + 1] not in (b"\n", b"\r"):
                pos += 1
            continue
        start = pos
        while pos < len(data) and not data[pos:pos + 1].isspace():
            pos += 1
        if start == pos:
            raise ImageFormatError("truncated PPM header")
        tokens.append(data[start:pos])
    return tokens, pos + 1


def decode_ppm(data: bytes) -> np.ndarray:
    """Parse a binary (P6) or grayscale (P5) netpbm image into an (H, W, C) uint8 array."""
    magic = data[:2]
    if magic not in (b"P6", b"P5"):
        raise ImageFormatError(f"not a binary PPM/PGM file (magic {magic!r})")
    tokens, pos = _ppm_tokens(data, 3)
    try:
        w, h, maxval = (int(t) for t in tokens)
    except ValueError as exc:
        raise ImageFormatError(f"bad PPM header: {exc}") from exc
    if maxval != 255:
        raise ImageFormatError(f"only 8-bit images are supported (maxval {maxval})")
    c = 3 if magic == b"P6" else 1
    n = w * h * c
    if len(data) - pos < n:
        raise ImageFormatError(f"PPM pixel data truncated: need {n} bytes, have {len(data) - pos}")
    return np.frombuffer(data, dtype=np.uint8, count=n, offset=pos).reshape(h, w, c).copy()


def encode_ppm(img: np.ndarray) -> bytes:
    img = np.asarray(img)
    if img.dtype != np.uint8:
        raise TypeError("encode_ppm expects uint8 pixels")
    if img.ndim == 2:
        img = img[:, :, None]
    h, w, c = img.shape
    if c == 1:
        return f"P5\n{w} {h}\n255\n".encode() + img.tobytes()
    if c != 3:
        raise ImageFormatError(f"PPM needs 1 or 3 channels, got {c}")
    return f"P6\n{w} {h}\n255\n".encode() + np.ascontiguousarray(img).tobytes()


def read_image(path: str | os.PathLike) -> np.ndarray:
    """Read an 8-bit image as (H, W, C) uint8. PPM/PGM always; PNG when Pillow is installed."""
    path = Path(path)
    if path.suffix.lower() == ".png":
        try:
            from PIL import Image
        except ImportError as exc:  # pragma: no cover - depends on environment
            raise ImageFormatError("PNG input needs Pillow (pip install 'artifact[png]')") from exc
        with Image.open(path) as im:
            arr = np.asarray(im.convert("RGB"))
        return arr.copy()
    return decode_ppm(path.read_bytes())


def write_image(path: str | os.PathLike, img: np.ndarray) -> None:
    Path(path).write_bytes(encode_ppm(img))


IMAGE_SUFFIXES = (".ppm", ".pgm", ".png")


def list_images(directory: str | os.PathLike) -> list[Path]:
    d = Path(directory)
    if not d.is_dir():
        raise FileNotFoundError(f"data directory not found: {d}")
    return sorted(p for p in d.iterdir() if p.suffix.lower() in IMAGE_SUFFIXES)


def load_dataset(directory: str | os.PathLike) -> list[np.ndarray]:
    paths = list_images(directory)
    if not paths:
        raise FileNotFoundError(f"no .ppm/.pgm/.png images in {directory}")
    return [read_image(p) for p in paths]


def synthetic_images(count: int, size: int = 128, seed: int = 0) -> list[np.ndarray]:
    """Smooth RGB test images: random low-frequency sinusoids, a ramp and a soft disc."""
    rng = np.random.default_rng(seed)
    t = (np.arange(size) + 0.5) / size
    yy, xx = np.meshgrid(t, t, indexing="ij")
    out = []
    for _ in range(count):
        img = np.zeros((size, size, 3))
        for c in range(3):
            acc = rng.uniform(-0.3, 0.3) * (xx - 0.5) + rng.uniform(-0.3, 0.3) * (yy - 0.5)
            for _ in range(3):
                fx, fy = rng.uniform(0.5, 3.0, size=2)
                phase = rng.uniform(0, 2 * np.pi)
                acc = acc + rng.uniform(0.05, 0.2) * np.sin(2 * np.pi * (fx * xx + fy * yy) + phase)
            img[:, :, c] = acc
        cy, cx = rng.uniform(0.3, 0.7, size=2)
        r = rng.uniform(0.1, 0.25)
        disc = 1.0 / (1.0 + np.exp(((yy - cy) ** 2 + (xx - cx) ** 2 - r * r) / 0.004))
        img += rng.uniform(-0.3, 0.3, size=3) * disc[:, :, None]
        img = 0.5 + img
        out.append(np.clip(np.round(img * 255.0), 0, 255).astype(np.uint8))
    return out


def center_crop(img: np.ndarray) -> np.ndarray:
    h, w = img.shape[:2]
    s = min(h, w)
    top, left = (h - s) // 2, (w - s) // 2
    return img[top:top + s, left:left + s]


def _area_matrix(n_in: int, n_out: int) -> np.ndarray:
    """(n_out, n_in) averaging weights: each output cell is the mean of the input span it covers."""
    edges = np.arange(n_out + 1) * (n_in / n_out)
    lo, hi = edges[:-1, None], edges[1:, None]
    j = np.arange(n_in)[None, :]
    overlap = np.clip(np.minimum(hi, j + 1) - np.maximum(lo, j), 0.0, None)
    return overlap / overlap.sum(axis=1, keepdims=True)


def area_resize(img: np.ndarray, size: int) -> np.ndarray:
    """Area-weighted resize of an (H, W, C) float image to (size, size, C)."""
    ry = _area_matrix(img.shape[0], size)
    rx = _area_matrix(img.shape[1], size)
    return np.einsum("ih,hwc,jw->ijc", ry, img, rx)


def preprocess(img: np.ndarray, size: int, dtype=np.float32) -> np.ndarray:
    """uint8 (H, W, C) -> (C, size, size) in [-1, 1]: center crop, area resize, rescale."""
    if img.ndim == 2:
        img = img[:, :, None]
    x = area_resize(center_crop(img).astype(np.float64) / 255.0, size)
    return (x * 2.0 - 1.0).transpose(2, 0, 1).astype(dtype)


def preprocess_batch(images: list[np.ndarray], size: int, dtype=np.float32) -> np.ndarray:
    return np.stack([preprocess(im, size, dtype) for im in images])


def to_uint8(x: np.ndarray) -> np.ndarray:
    """(C, H, W) in [-1, 1] -> (H, W, C) uint8."""
    x = np.asarray(x, dtype=np.float64)
    return np.clip(np.round((x.transpose(1, 2, 0) + 1.0) * 127.5), 0, 255).astype(np.uint8)
