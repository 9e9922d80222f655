"""Normalization family, the adaptive deviation modulator, and conv layers.

All normalization kinds share one formula: subtract the mean and divide by
the population standard deviation (eps inside the square root) of a pixel
set, then optionally apply a learned per-channel affine map. The kinds only
differ in which pixel set the statistics run over:

    BN  per channel, over (N, H, W)
    LN  per sample, over (C, H, W)
    IN  per (sample, channel), over (H, W)
    GN  per (sample, channel group), over (C/g, H, W)
"""

from __future__ import annotations

import math
import warnings

import numpy as np

from .tensor import (
    Rng,
    Tensor,
    conv2d,
    detach,
    mean_over,
    modulation_factor,
    relu,
    reshape,
    std_over,
)

__all__ = ["Norm", "AdaDM", "Conv2d", "make_conv_layer", "normalize", "adadm"]

NORM_KINDS = ("BN", "LN", "IN", "GN")


class Norm:
    """One normalization layer; ``kind`` selects the statistics set.

    BN keeps per-channel running statistics updated in train mode with
    new = (1 - momentum) * old + momentum * batch (population variance) and
    uses them, frozen, in eval mode, where the layer is a pure per-channel
    affine map of its input.
    """

    def __init__(self, kind: str, channels: int, *, groups: int = 1,
                 eps: float = 1e-5, momentum: float = 0.1, affine: bool = False):
        if kind not in NORM_KINDS:
            raise ValueError(f"unknown normalization kind {kind!r}")
        if eps < 0:
            raise ValueError("eps must be >= 0")
        if not (0.0 < momentum <= 1.0):
            raise ValueError("momentum must be in (0, 1]")
        if kind == "GN" and channels % groups != 0:
            raise ValueError(f"group count {groups} does not divide {channels} channels")
        self.kind = kind
        self.channels = channels
        self.groups = groups if kind == "GN" else (1 if kind == "LN" else channels)
        self.eps = float(eps)
        self.momentum = float(momentum)
        self.affine = bool(affine)
        if affine:
            self.scale = Tensor(np.ones((1, channels, 1, 1)), requires_grad=True)
            self.shift = Tensor(np.zeros((1, channels, 1, 1)), requires_grad=True)
        if kind == "BN":
            self.running_mean = np.zeros((1, channels, 1, 1))
            self.running_var = np.ones((1, channels, 1, 1))
            self.updates = 0

    def __call__(self, x: Tensor, mode: str = "train") -> Tensor:
        if mode not in ("train", "eval"):
            raise ValueError(f"mode must be 'train' or 'eval', got {mode!r}")
        if x.shape[1] != self.channels:
            raise ValueError(f"expected {self.channels} channels, got {x.shape[1]}")
        if self.kind == "BN":
            xhat = self._bn(x, mode)
        elif self.kind == "LN":
            xhat = self._stats_normalize(x, (1, 2, 3))
        elif self.kind == "IN":
            xhat = self._stats_normalize(x, (2, 3))
        else:
            xhat = self._gn(x)
        if self.affine:
            xhat = xhat * self.scale + self.shift
        return xhat

    def _stats_normalize(self, x: Tensor, axes) -> Tensor:
        mu = mean_over(x, axes)
        sigma = std_over(x, axes, self.eps)
        return (x - mu) / sigma

    def _gn(self, x: Tensor) -> Tensor:
        n, c, h, w = x.shape
        g = self.groups
        grouped = reshape(x, (n, g, (c // g) * h, w))
        return reshape(self._stats_normalize(grouped, (2, 3)), (n, c, h, w))

    def _bn(self, x: Tensor, mode: str) -> Tensor:
        n, _, h, w = x.shape
        if mode == "train":
            if n * h * w < 2:
                raise ValueError("BN train mode needs at least 2 pixels per channel")
            mu = mean_over(x, (0, 2, 3))
            sigma = std_over(x, (0, 2, 3), self.eps)
            batch_var = np.maximum(sigma.data ** 2 - self.eps, 0.0)
            m = self.momentum
            self.running_mean = (1.0 - m) * self.running_mean + m * mu.data
            self.running_var = (1.0 - m) * self.running_var + m * batch_var
            self.updates += 1
            return (x - mu) / sigma
        if self.updates == 0:
            warnings.warn("BN evaluated before any running-stat update; "
                          "using initialized mean 0 / var 1", stacklevel=2)
        denom = Tensor(np.sqrt(self.running_var + self.eps))
        return (x - Tensor(self.running_mean)) / denom

    def params(self) -> dict[str, Tensor]:
        return {"scale": self.scale, "shift": self.shift} if self.affine else {}

    def state_json(self) -> dict:
        out = {"kind": self.kind, "channels": self.channels, "eps": self.eps,
               "momentum": self.momentum, "affine": self.affine}
        if self.kind == "GN":
            out["groups"] = self.groups
        if self.kind == "BN":
            out["updates"] = self.updates
        return out


def normalize(x: Tensor, spec: Norm, mode: str = "train") -> Tensor:
    return spec(x, mode)


class AdaDM:
    """Per-sample multiplicative deviation modulation of a feature.

    Given the feature ``gamma`` to modulate and the block input ``x``, the
    output is gamma * exp(w * log(sigma(x)) + b) where sigma(x) is the
    standard deviation of each sample over (C, H, W). w starts at 1 and b at
    0, so a fresh modulator multiplies by sigma(x) exactly. With
    ``detach_sigma`` the sigma value still shapes the forward pass but the
    gradient does not flow back into x through it; w and b keep their
    gradients either way.
    """

    # eps guards all-constant inputs (black patches); keep it tiny so the
    # default modulator still multiplies by sigma to machine precision.
    def __init__(self, *, detach_sigma: bool = False, eps: float = 1e-8):
        self.detach_sigma = bool(detach_sigma)
        self.eps = float(eps)
        self.w = Tensor(np.ones((1, 1, 1, 1)), requires_grad=True)
        self.b = Tensor(np.zeros((1, 1, 1, 1)), requires_grad=True)

    def __call__(self, gamma: Tensor, x: Tensor, sigma_override: Tensor | None = None) -> Tensor:
        if gamma.shape[0] != x.shape[0]:
            raise ValueError(f"batch mismatch: gamma N={gamma.shape[0]}, x N={x.shape[0]}")
        sigma = sigma_override if sigma_override is not None else std_over(x, (1, 2, 3), self.eps)
        bad = np.argwhere(sigma.data.reshape(-1) <= 0.0)
        if bad.size:
            raise ValueError(f"sample {int(bad[0][0])} has non-positive deviation; "
                             "constant input with eps=0?")
        if self.detach_sigma:
            sigma = detach(sigma)
        return gamma * modulation_factor(sigma, self.w, self.b)

    def factor_value(self, x: Tensor) -> np.ndarray:
        """Forward-only modulation factor per sample, shape (N,)."""
        sigma = std_over(x, (1, 2, 3), self.eps)
        return modulation_factor(sigma, self.w, self.b).data.reshape(-1).copy()

    def params(self) -> dict[str, Tensor]:
        return {"w": self.w, "b": self.b}

    def state_json(self) -> dict:
        return {"w": float(self.w.data.reshape(())), "b": float(self.b.data.reshape(())),
                "detach_sigma": self.detach_sigma, "eps": self.eps}


def adadm(gamma: Tensor, x: Tensor, state: AdaDM) -> Tensor:
    return state(gamma, x)


class Conv2d:
    """Same-padding convolution layer owning its weights.

    Weights are fan-in scaled: normal(0, sqrt(2 / (c_in * k^2))). Bias, when
    present, starts at zero.
    """

    def __init__(self, c_in: int, c_out: int, k: int = 3, *, bias: bool = True, rng: Rng):
        if k % 2 == 0:
            raise ValueError("kernel side must be odd")
        self.c_in, self.c_out, self.k = c_in, c_out, k
        std = math.sqrt(2.0 / (c_in * k * k))
        self.w = Tensor(rng.normal((c_out, c_in, k, k), 0.0, std), requires_grad=True)
        self.b = Tensor(np.zeros((1, c_out, 1, 1)), requires_grad=True) if bias else None

    def __call__(self, x: Tensor) -> Tensor:
        return conv2d(x, self.w, self.b)

    def params(self) -> dict[str, Tensor]:
        out = {"w": self.w}
        if self.b is not None:
            out["b"] = self.b
        return out


def make_conv_layer(c_in: int, c_out: int, k: int, bias: bool, rng: Rng) -> Conv2d:
    return Conv2d(c_in, c_out, k, bias=bias, rng=rng)


__all__ += ["relu"]
