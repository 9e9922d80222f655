"""PSNR/SSIM evaluation, self-ensemble inference, and deviation analysis."""

from __future__ import annotations

import csv
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .blocks import feature_deviation
from .data import ImagePair, dihedral, dihedral_inverse, rgb_to_y
from .models import Model, collect_internal
from .tensor import Tensor, no_grad

__all__ = [
    "PsnrResult",
    "MetricReport",
    "DeviationRow",
    "psnr_y",
    "ssim_y",
    "self_ensemble",
    "deviation_histogram",
    "write_histogram_csv",
    "run_deviation_study",
    "write_deviation_csv",
    "evaluate_model",
]


@dataclass
class PsnrResult:
    """PSNR in dB, with identical images reported as a flag, not a sentinel."""

    db: float | None
    infinite: bool = False

    def __str__(self) -> str:
        return "inf" if self.infinite else f"{self.db:.4f}"


def psnr_y(sr: np.ndarray, hr: np.ndarray, shave: int, rgb_range: float = 255.0) -> PsnrResult:
    """PSNR on the BT.601 Y channel with ``shave`` border pixels removed.

    The data range is the 0..255 luma convention regardless of rgb_range.
    """
    if sr.shape != hr.shape:
        raise ValueError(f"size mismatch: {sr.shape} vs {hr.shape}")
    if shave < 0:
        raise ValueError("shave must be >= 0")
    ys = rgb_to_y(sr, rgb_range)
    yh = rgb_to_y(hr, rgb_range)
    if shave:
        ys = ys[shave:-shave, shave:-shave]
        yh = yh[shave:-shave, shave:-shave]
    mse = float(np.mean((ys - yh) ** 2))
    if mse == 0.0:
        return PsnrResult(db=None, infinite=True)
    return PsnrResult(db=10.0 * math.log10(255.0 ** 2 / mse))


_SSIM_WINDOW = 11
_SSIM_SIGMA = 1.5
_SSIM_K1 = 0.01
_SSIM_K2 = 0.03
_SSIM_L = 255.0


def _gaussian_window() -> np.ndarray:
    half = (_SSIM_WINDOW - 1) / 2.0
    coords = np.arange(_SSIM_WINDOW) - half
    g = np.exp(-(coords ** 2) / (2.0 * _SSIM_SIGMA ** 2))
    g /= g.sum()
    return np.outer(g, g)


def _windowed(img: np.ndarray, window: np.ndarray) -> np.ndarray:
    views = np.lib.stride_tricks.sliding_window_view(img, window.shape)
    return np.tensordot(views, window, axes=[(2, 3), (0, 1)])


def ssim_y(sr: np.ndarray, hr: np.ndarray, rgb_range: float = 255.0) -> float:
    """Mean local SSIM on Y with the reference 11x11 Gaussian configuration.

    No downsampling pre-step; the local map runs over valid window positions.
    """
    if sr.shape != hr.shape:
        raise ValueError(f"size mismatch: {sr.shape} vs {hr.shape}")
    ys = rgb_to_y(sr, rgb_range) if sr.ndim == 3 else sr
    yh = rgb_to_y(hr, rgb_range) if hr.ndim == 3 else hr
    if min(ys.shape) < _SSIM_WINDOW:
        raise ValueError(f"image {ys.shape} smaller than the {_SSIM_WINDOW}x{_SSIM_WINDOW} window")
    w = _gaussian_window()
    c1 = (_SSIM_K1 * _SSIM_L) ** 2
    c2 = (_SSIM_K2 * _SSIM_L) ** 2
    mu1 = _windowed(ys, w)
    mu2 = _windowed(yh, w)
    var1 = _windowed(ys * ys, w) - mu1 * mu1
    var2 = _windowed(yh * yh, w) - mu2 * mu2
    cov = _windowed(ys * yh, w) - mu1 * mu2
    num = (2 * mu1 * mu2 + c1) * (2 * cov + c2)
    den = (mu1 * mu1 + mu2 * mu2 + c1) * (var1 + var2 + c2)
    return float(np.mean(num / den))


def self_ensemble(model: Model, lr: np.ndarray) -> np.ndarray:
    """Average the 8 dihedral-transformed inferences, inverse-mapped first.

    ``lr`` is a single (3, H, W) image; the result is the ensembled SR image.
    """
    acc = None
    with no_grad():
        for flip in (False, True):
            for k in range(4):
                t = dihedral(lr, k, flip)
                sr = model.forward(Tensor(t[None]), mode="eval").data[0]
                back = dihedral_inverse(sr, k, flip)
                acc = back if acc is None else acc + back
    return acc / 8.0


def deviation_histogram(values, bins: int, lo: float, hi: float) -> np.ndarray:
    """Fixed-width histogram; out-of-range values clamp into the end bins."""
    values = np.asarray(values, dtype=np.float64).reshape(-1)
    if values.size == 0:
        raise ValueError("histogram needs at least one value")
    if bins < 1:
        raise ValueError("bins must be >= 1")
    if not hi > lo:
        raise ValueError("range must satisfy hi > lo")
    pos = np.floor((values - lo) / (hi - lo) * bins).astype(np.int64)
    pos = np.clip(pos, 0, bins - 1)
    return np.bincount(pos, minlength=bins)


def write_histogram_csv(path, counts: np.ndarray, lo: float, hi: float) -> None:
    bins = len(counts)
    width = (hi - lo) / bins
    with open(path, "w", newline="") as f:
        writer = csv.writer(f)
        writer.writerow(["bin_lo", "bin_hi", "count"])
        for i, c in enumerate(counts):
            writer.writerow([f"{lo + i * width:.10g}", f"{lo + (i + 1) * width:.10g}", int(c)])


# ---------------------------------------------------------------------------
# deviation study


@dataclass
class DeviationRow:
    model: str
    image: str
    block: int
    std: float | None = None
    modulation_factor: float | None = None


def run_deviation_study(models: list[tuple[str, Model]], pairs: list[ImagePair],
                        block_index: int | None = None) -> list[DeviationRow]:
    """Standard deviation of the probed residual feature per image per model,
    plus per-block modulation factors for models that have a modulator.

    The deviation summary is the channel mean of interior spatial stds (the
    conv padding ring is excluded), which is the statistic the toy-block
    algebra preserves exactly. Rows come back sorted by (model, image, block).
    """
    rows: list[DeviationRow] = []
    for name, model in models:
        idx = (len(model.blocks) - 1) if block_index is None else int(block_index)
        if not (0 <= idx < len(model.blocks)):
            raise ValueError(f"{name}: block index {idx} out of range")
        margin = (model.cfg.block.kernel - 1) // 2
        probes = [(idx, "residual_pre_add")]
        if model.blocks[idx].has_adadm:
            probes += [(i, "modulation_factor") for i in range(len(model.blocks))]
        for pair in pairs:
            caps = collect_internal(model, Tensor(pair.lr[None]), probes)
            dev = feature_deviation(caps[f"block{idx}.residual_pre_add"], margin)
            rows.append(DeviationRow(name, pair.name, idx, std=float(dev[0])))
            for i in range(len(model.blocks)):
                key = f"block{i}.modulation_factor"
                if key in caps:
                    rows.append(DeviationRow(name, pair.name, i,
                                             modulation_factor=float(caps[key].reshape(-1)[0])))
    rows.sort(key=lambda r: (r.model, r.image, r.block, r.std is None))
    return rows


def write_deviation_csv(path, rows: list[DeviationRow]) -> None:
    with open(path, "w", newline="") as f:
        writer = csv.writer(f)
        writer.writerow(["model", "image", "block", "std", "modulation_factor"])
        for r in rows:
            writer.writerow([
                r.model, r.image, r.block,
                "" if r.std is None else f"{r.std:.12g}",
                "" if r.modulation_factor is None else f"{r.modulation_factor:.12g}",
            ])


# ---------------------------------------------------------------------------
# model evaluation


@dataclass
class MetricReport:
    dataset: str
    scale: int
    shave: int
    images: list[str] = field(default_factory=list)
    psnr: list[PsnrResult] = field(default_factory=list)
    ssim: list[float] = field(default_factory=list)

    @property
    def any_infinite(self) -> bool:
        return any(p.infinite for p in self.psnr)

    @property
    def mean_psnr(self) -> float:
        finite = [p.db for p in self.psnr if not p.infinite]
        return float(np.mean(finite)) if finite else math.nan

    @property
    def mean_ssim(self) -> float:
        return float(np.mean(self.ssim)) if self.ssim else math.nan

    def to_csv(self, path) -> None:
        with open(path, "w", newline="") as f:
            writer = csv.writer(f)
            writer.writerow(["image", "psnr_db", "ssim"])
            for name, p, s in zip(self.images, self.psnr, self.ssim):
                writer.writerow([name, str(p), f"{s:.6f}"])
            writer.writerow(["mean", f"{self.mean_psnr:.4f}", f"{self.mean_ssim:.6f}"])


def evaluate_model(model: Model, pairs: list[ImagePair], *, shave: int | None = None,
                   use_self_ensemble: bool = False, dataset_name: str = "",
                   threads: int = 1) -> MetricReport:
    """Per-image and mean PSNR/SSIM of a model over a dataset.

    shave defaults to the model scale (the benchmark convention). Parallel
    evaluation over images preserves the input order.
    """
    scale = model.cfg.scale
    shave = scale if shave is None else int(shave)
    rng_range = model.cfg.rgb_range

    def one(pair: ImagePair):
        if pair.rgb_range != rng_range:
            raise ValueError(f"{pair.name}: dataset rgb_range {pair.rgb_range} "
                             f"does not match model rgb_range {rng_range}")
        if use_self_ensemble:
            sr = self_ensemble(model, pair.lr)
        else:
            with no_grad():
                sr = model.forward(Tensor(pair.lr[None]), mode="eval").data[0]
        return (psnr_y(sr, pair.hr, shave, rng_range), ssim_y(sr, pair.hr, rng_range))

    if threads > 1 and len(pairs) > 1:
        with ThreadPoolExecutor(max_workers=threads) as pool:
            results = list(pool.map(one, pairs))
    else:
        results = [one(p) for p in pairs]
    report = MetricReport(dataset=dataset_name, scale=scale, shave=shave)
    for pair, (p, s) in zip(pairs, results):
        report.images.append(pair.name)
        report.psnr.append(p)
        report.ssim.append(s)
    return report
