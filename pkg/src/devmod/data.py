"""Image ingestion, luma conversion, bicubic resampling, synthetic data.

Images travel as (3, H, W) float64 arrays. The canonical storage convention
is 8-bit (0..255); ``rgb_range`` rescales at the boundaries.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from PIL import Image

from .tensor import Rng

__all__ = [
    "ImagePair",
    "load_png",
    "save_png",
    "rgb_to_y",
    "bicubic_resize",
    "cubic_kernel",
    "resample_weights",
    "synth_dataset",
    "write_dataset",
    "load_dataset",
    "dihedral",
    "dihedral_inverse",
]


def dihedral(arr: np.ndarray, k: int, flip: bool) -> np.ndarray:
    """Apply one of the 8 square symmetries to the trailing two axes.

    The element is "rotate by 90k degrees, then optionally flip horizontally".
    """
    out = np.rot90(arr, k % 4, axes=(-2, -1))
    if flip:
        out = out[..., ::-1]
    return np.ascontiguousarray(out)


def dihedral_inverse(arr: np.ndarray, k: int, flip: bool) -> np.ndarray:
    out = arr[..., ::-1] if flip else arr
    return np.ascontiguousarray(np.rot90(out, -(k % 4), axes=(-2, -1)))


@dataclass
class ImagePair:
    """Aligned HR/LR pair; HR dims are exactly ``scale`` times the LR dims."""

    name: str
    hr: np.ndarray          # (3, H, W)
    lr: np.ndarray          # (3, H/scale, W/scale)
    scale: int
    rgb_range: float = 255.0

    def __post_init__(self):
        _, h, w = self.hr.shape
        if h % self.scale or w % self.scale:
            raise ValueError(f"{self.name}: HR dims {(h, w)} not divisible by {self.scale}")
        if self.lr.shape != (3, h // self.scale, w // self.scale):
            raise ValueError(f"{self.name}: LR shape {self.lr.shape} does not match HR/{self.scale}")


def load_png(path, rgb_range: float = 255.0) -> np.ndarray:
    """Load an 8-bit RGB PNG as (3, H, W) scaled to rgb_range."""
    img = Image.open(path)
    if img.mode != "RGB":
        raise ValueError(f"{path}: expected 8-bit RGB, got color type {img.mode!r}")
    arr = np.asarray(img, dtype=np.float64).transpose(2, 0, 1)
    return arr * (rgb_range / 255.0)


def save_png(path, img: np.ndarray, rgb_range: float = 255.0) -> None:
    """Write (3, H, W) values to an 8-bit RGB PNG (rounded and clipped)."""
    if img.ndim != 3 or img.shape[0] != 3:
        raise ValueError(f"expected (3, H, W), got {img.shape}")
    eight = np.clip(np.round(img * (255.0 / rgb_range)), 0, 255).astype(np.uint8)
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    Image.fromarray(eight.transpose(1, 2, 0), mode="RGB").save(path)


def rgb_to_y(img: np.ndarray, rgb_range: float = 255.0) -> np.ndarray:
    """BT.601 video-range luma, always expressed on the 0..255 scale.

    Y = (65.481 R + 128.553 G + 24.966 B) + 16 with R, G, B in [0, 1], so
    black maps to 16 and white to 235 regardless of the input rgb_range.
    """
    r, g, b = img[0], img[1], img[2]
    return (65.481 * r + 128.553 * g + 24.966 * b) / rgb_range + 16.0


# ---------------------------------------------------------------------------
# bicubic resampling (imresize convention: a=-0.5 kernel, antialias widening)


def cubic_kernel(x: np.ndarray) -> np.ndarray:
    """Keys cubic with a = -0.5."""
    ax = np.abs(x)
    ax2 = ax * ax
    ax3 = ax2 * ax
    near = (1.5 * ax3 - 2.5 * ax2 + 1.0) * (ax <= 1)
    far = (-0.5 * ax3 + 2.5 * ax2 - 4.0 * ax + 2.0) * ((ax > 1) & (ax <= 2))
    return near + far


def resample_weights(in_len: int, out_len: int) -> tuple[np.ndarray, np.ndarray]:
    """Tap weights and source indices for one dimension.

    When downscaling, the kernel is stretched by the inverse scale so it
    averages instead of aliasing. Out-of-range taps reflect symmetrically and
    each row is normalized to sum exactly 1.
    """
    scale = out_len / in_len
    if scale < 1.0:
        width = 4.0 / scale
        kernel = lambda t: scale * cubic_kernel(scale * t)
    else:
        width = 4.0
        kernel = cubic_kernel
    centers = (np.arange(out_len) + 0.5) / scale - 0.5
    left = np.floor(centers - width / 2).astype(np.int64)
    taps = int(math.ceil(width)) + 2
    idx = left[:, None] + np.arange(taps)[None, :]
    weights = kernel(centers[:, None] - idx)
    weights = weights / weights.sum(axis=1, keepdims=True)
    mirror = np.concatenate([np.arange(in_len), np.arange(in_len - 1, -1, -1)])
    idx = mirror[np.mod(idx, 2 * in_len)]
    return weights, idx


def bicubic_resize(img: np.ndarray, scale_num: int, scale_den: int) -> np.ndarray:
    """Separable cubic resampling of (C, H, W) by the rational factor num/den.

    Output dims are floor(dim * num / den); num/den = 1 reproduces the input.
    """
    if scale_den == 0:
        raise ValueError("scale denominator must be non-zero")
    if scale_num <= 0 or scale_den < 0:
        raise ValueError("scale must be positive")
    c, h, w = img.shape
    out_h = (h * scale_num) // scale_den
    out_w = (w * scale_num) // scale_den
    wh, ih = resample_weights(h, out_h)
    ww, iw = resample_weights(w, out_w)
    rows = img[:, ih, :]                      # (C, out_h, taps, W)
    tmp = (rows * wh[None, :, :, None]).sum(axis=2)
    cols = tmp[:, :, iw]                      # (C, out_h, out_w, taps)
    out = (cols * ww[None, None, :, :]).sum(axis=3)
    return out


# ---------------------------------------------------------------------------
# synthetic edge-rich dataset


def _color(rng: Rng) -> np.ndarray:
    return rng.uniform(0.0, 255.0, (3, 1, 1))


def _gradient(rng: Rng, size: int) -> np.ndarray:
    yy, xx = np.mgrid[0:size, 0:size] / max(size - 1, 1)
    theta = rng.uniform(0.0, 2 * math.pi)
    ramp = np.cos(theta) * xx + np.sin(theta) * yy
    ramp = (ramp - ramp.min()) / max(ramp.max() - ramp.min(), 1e-9)
    c0, c1 = _color(rng), _color(rng)
    return c0 + (c1 - c0) * ramp[None]


def _edge(rng: Rng, size: int) -> np.ndarray:
    yy, xx = np.mgrid[0:size, 0:size] / max(size - 1, 1)
    theta = rng.uniform(0.0, 2 * math.pi)
    offset = rng.uniform(0.3, 0.7)
    d = np.cos(theta) * xx + np.sin(theta) * yy - offset
    sharp = rng.uniform(30.0, 150.0)
    mask = 1.0 / (1.0 + np.exp(-sharp * d))
    c0, c1 = _color(rng), _color(rng)
    return c0 + (c1 - c0) * mask[None]


def _grating(rng: Rng, size: int) -> np.ndarray:
    yy, xx = np.mgrid[0:size, 0:size] / size
    theta = rng.uniform(0.0, math.pi)
    freq = rng.uniform(2.0, float(size) / 6.0)
    phase = rng.uniform(0.0, 2 * math.pi)
    wave = 0.5 + 0.5 * np.sin(2 * math.pi * freq * (np.cos(theta) * xx + np.sin(theta) * yy) + phase)
    c0, c1 = _color(rng), _color(rng)
    return c0 + (c1 - c0) * wave[None]


def _checker(rng: Rng, size: int) -> np.ndarray:
    cell = int(rng.integers(3, max(4, size // 6)))
    ox, oy = int(rng.integers(0, cell)), int(rng.integers(0, cell))
    yy, xx = np.mgrid[0:size, 0:size]
    mask = (((yy + oy) // cell + (xx + ox) // cell) % 2).astype(np.float64)
    c0, c1 = _color(rng), _color(rng)
    return c0 + (c1 - c0) * mask[None]


_GENERATORS = (_edge, _grating, _checker, _gradient)


def synth_dataset(n: int, hr_size: int, scale: int, seed: int) -> list[ImagePair]:
    """Deterministic edge-rich HR/LR pairs; LR is the bicubic downscale.

    Both images are quantized to 8-bit values so a PNG round trip is exact.
    """
    if hr_size % scale:
        raise ValueError(f"hr_size {hr_size} not divisible by scale {scale}")
    pairs = []
    root = Rng(seed)
    for i in range(n):
        rng = root.child(i)
        base = _gradient(rng, hr_size)
        layers = 1 + int(rng.integers(0, 2))
        for _ in range(layers):
            gen = _GENERATORS[int(rng.integers(0, len(_GENERATORS)))]
            alpha = rng.uniform(0.35, 0.9)
            base = (1 - alpha) * base + alpha * gen(rng, hr_size)
        hr = np.clip(np.round(base), 0, 255).astype(np.float64)
        lr = np.clip(np.round(bicubic_resize(hr, 1, scale)), 0, 255).astype(np.float64)
        pairs.append(ImagePair(name=f"synth_{i:04d}", hr=hr, lr=lr, scale=scale))
    return pairs


# dataset directory layout: <root>/HR/<name>.png, <root>/LR_bicubic/X<s>/<name>x<s>.png


def write_dataset(pairs: list[ImagePair], root) -> None:
    root = Path(root)
    for p in pairs:
        save_png(root / "HR" / f"{p.name}.png", p.hr, p.rgb_range)
        save_png(root / "LR_bicubic" / f"X{p.scale}" / f"{p.name}x{p.scale}.png",
                 p.lr, p.rgb_range)


def load_dataset(root, scale: int, rgb_range: float = 255.0) -> list[ImagePair]:
    root = Path(root)
    hr_dir = root / "HR"
    lr_dir = root / "LR_bicubic" / f"X{scale}"
    if not hr_dir.is_dir():
        raise FileNotFoundError(f"no HR directory under {root}")
    if not lr_dir.is_dir():
        raise FileNotFoundError(f"no LR_bicubic/X{scale} directory under {root}")
    pairs = []
    for hr_path in sorted(hr_dir.glob("*.png")):
        name = hr_path.stem
        lr_path = lr_dir / f"{name}x{scale}.png"
        if not lr_path.exists():
            raise FileNotFoundError(f"missing LR image {lr_path}")
        pairs.append(ImagePair(name=name, hr=load_png(hr_path, rgb_range),
                               lr=load_png(lr_path, rgb_range), scale=scale,
                               rgb_range=rgb_range))
    return pairs
