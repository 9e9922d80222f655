"""Residual block topologies and the exact deviation-identity verifier.

The toy blocks (T1, T2, T3) isolate what per-sample normalization does to
the spread of the residual branch:

    T1  x + Conv(x)
    T2  x + Conv(LN(x))
    T3  x + sigma(x) * Conv(LN(x))

with bias-free convs and affine-off LN. T3 multiplies the branch by the same
per-sample sigma that LN divided by, so both blocks share one sigma node and
the branch spread of T3 matches T1 exactly at any eps.

The real blocks follow the standard super-resolution wiring:

    RB         x + Conv(ReLU(Conv(x)))
    SRRB       x + BN(Conv(ReLU(BN(Conv(x)))))        post-conv BN
    PreRB      x + Conv(BN(ReLU(Conv(BN(x)))))        BN right before each conv
    RB_AdaDM   PreRB branch followed by a deviation modulator
    RDB        dense Conv/ReLU chain, concat, 1x1 fusion, local skip
    RDB_AdaDM  RDB with BN at the front and a modulator at the end
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from .layers import AdaDM, Conv2d, Norm
from .tensor import (
    Rng,
    Tensor,
    concat_channels,
    conv2d,
    mean_over,
    relu,
    scalar_mul,
    std_over,
)

__all__ = [
    "BLOCK_KINDS",
    "BlockConfig",
    "build_block",
    "block_forward",
    "DaIdentityReport",
    "verify_da_identity",
    "interior_std",
    "feature_deviation",
]

BLOCK_KINDS = ("T1", "T2", "T3", "RB", "SRRB", "PreRB", "RB_AdaDM", "RDB", "RDB_AdaDM")

TAP_POINTS = ("block_input", "residual_pre_add", "modulation_factor")


@dataclass
class BlockConfig:
    """Topology selector plus the knobs a block kind understands."""

    kind: str
    channels: int
    kernel: int = 3
    ln_eps: float = 1e-5            # T2/T3 normalization
    bn_eps: float = 1e-5
    bn_momentum: float = 0.1
    bn_affine: bool = True
    use_bn: bool = True             # ablation switch for the *_AdaDM kinds
    detach_sigma: bool = False
    residual_scale: float = 1.0     # optional branch scaler, 1 = off
    rdb_convs: int = 4              # dense convs (RDB kinds)
    growth: int = 16                # channels added per dense conv (RDB kinds)

    def __post_init__(self):
        if self.kind not in BLOCK_KINDS:
            raise ValueError(f"unknown block kind {self.kind!r}")
        if self.channels <= 0:
            raise ValueError("channels must be positive")
        if self.kind.startswith("RDB") and (self.rdb_convs < 1 or self.growth < 1):
            raise ValueError("RDB needs rdb_convs >= 1 and growth >= 1")


class _Block:
    """Shared scaffolding: parameter flattening and tap capture."""

    has_adadm = False

    def __init__(self, cfg: BlockConfig):
        self.cfg = cfg
        self._convs: dict[str, Conv2d] = {}
        self._norms: dict[str, Norm] = {}
        self._mods: dict[str, AdaDM] = {}

    def forward(self, x: Tensor, mode: str = "train", taps: Optional[dict] = None,
                tap_prefix: str = "") -> Tensor:
        raise NotImplementedError

    def _tap(self, taps, prefix, name, value: np.ndarray):
        if taps is not None:
            taps[prefix + name] = np.array(value, copy=True)

    def params(self) -> dict[str, Tensor]:
        out: dict[str, Tensor] = {}
        for name, conv in self._convs.items():
            for pname, p in conv.params().items():
                out[f"{name}.{pname}"] = p
        for name, norm in self._norms.items():
            for pname, p in norm.params().items():
                out[f"{name}.{pname}"] = p
        return out

    def norms(self) -> dict[str, Norm]:
        return dict(self._norms)

    def modulators(self) -> dict[str, AdaDM]:
        return dict(self._mods)


class _T1(_Block):
    def __init__(self, cfg, rng):
        super().__init__(cfg)
        self._convs["conv"] = Conv2d(cfg.channels, cfg.channels, cfg.kernel, bias=False, rng=rng)

    def forward(self, x, mode="train", taps=None, tap_prefix=""):
        self._tap(taps, tap_prefix, "block_input", x.data)
        branch = self._convs["conv"](x)
        self._tap(taps, tap_prefix, "residual_pre_add", branch.data)
        return x + branch


class _T2(_Block):
    def __init__(self, cfg, rng):
        super().__init__(cfg)
        self._convs["conv"] = Conv2d(cfg.channels, cfg.channels, cfg.kernel, bias=False, rng=rng)

    def forward(self, x, mode="train", taps=None, tap_prefix=""):
        self._tap(taps, tap_prefix, "block_input", x.data)
        mu = mean_over(x, (1, 2, 3))
        sigma = std_over(x, (1, 2, 3), self.cfg.ln_eps)
        branch = self._convs["conv"]((x - mu) / sigma)
        self._tap(taps, tap_prefix, "residual_pre_add", branch.data)
        return x + branch


class _T3(_Block):
    def __init__(self, cfg, rng):
        super().__init__(cfg)
        self._convs["conv"] = Conv2d(cfg.channels, cfg.channels, cfg.kernel, bias=False, rng=rng)

    def forward(self, x, mode="train", taps=None, tap_prefix=""):
        self._tap(taps, tap_prefix, "block_input", x.data)
        mu = mean_over(x, (1, 2, 3))
        sigma = std_over(x, (1, 2, 3), self.cfg.ln_eps)  # shared by LN and the multiply
        branch = self._convs["conv"]((x - mu) / sigma) * sigma
        self._tap(taps, tap_prefix, "residual_pre_add", branch.data)
        return x + branch


class _RB(_Block):
    def __init__(self, cfg, rng):
        super().__init__(cfg)
        c, k = cfg.channels, cfg.kernel
        self._convs["conv1"] = Conv2d(c, c, k, bias=True, rng=rng)
        self._convs["conv2"] = Conv2d(c, c, k, bias=True, rng=rng)

    def forward(self, x, mode="train", taps=None, tap_prefix=""):
        self._tap(taps, tap_prefix, "block_input", x.data)
        branch = self._convs["conv2"](relu(self._convs["conv1"](x)))
        if self.cfg.residual_scale != 1.0:
            branch = scalar_mul(branch, self.cfg.residual_scale)
        self._tap(taps, tap_prefix, "residual_pre_add", branch.data)
        return x + branch


class _SRRB(_Block):
    def __init__(self, cfg, rng):
        super().__init__(cfg)
        c, k = cfg.channels, cfg.kernel
        self._convs["conv1"] = Conv2d(c, c, k, bias=True, rng=rng)
        self._convs["conv2"] = Conv2d(c, c, k, bias=True, rng=rng)
        self._norms["bn1"] = self._make_bn(c)
        self._norms["bn2"] = self._make_bn(c)

    def _make_bn(self, c):
        cfg = self.cfg
        return Norm("BN", c, eps=cfg.bn_eps, momentum=cfg.bn_momentum, affine=cfg.bn_affine)

    def forward(self, x, mode="train", taps=None, tap_prefix=""):
        self._tap(taps, tap_prefix, "block_input", x.data)
        h = relu(self._norms["bn1"](self._convs["conv1"](x), mode))
        branch = self._norms["bn2"](self._convs["conv2"](h), mode)
        self._tap(taps, tap_prefix, "residual_pre_add", branch.data)
        return x + branch


class _PreRB(_SRRB):
    def forward(self, x, mode="train", taps=None, tap_prefix=""):
        self._tap(taps, tap_prefix, "block_input", x.data)
        h = relu(self._convs["conv1"](self._norms["bn1"](x, mode)))
        branch = self._convs["conv2"](self._norms["bn2"](h, mode))
        self._tap(taps, tap_prefix, "residual_pre_add", branch.data)
        return x + branch


class _RBAdaDM(_SRRB):
    has_adadm = True

    def __init__(self, cfg, rng):
        super().__init__(cfg, rng)
        if not cfg.use_bn:
            self._norms.clear()
        self._mods["adadm"] = AdaDM(detach_sigma=cfg.detach_sigma)

    def forward(self, x, mode="train", taps=None, tap_prefix=""):
        self._tap(taps, tap_prefix, "block_input", x.data)
        if self.cfg.use_bn:
            h = relu(self._convs["conv1"](self._norms["bn1"](x, mode)))
            pre = self._convs["conv2"](self._norms["bn2"](h, mode))
        else:
            pre = self._convs["conv2"](relu(self._convs["conv1"](x)))
        branch = self._mods["adadm"](pre, x)
        if taps is not None:
            self._tap(taps, tap_prefix, "modulation_factor",
                      self._mods["adadm"].factor_value(x).reshape(-1, 1, 1, 1))
        self._tap(taps, tap_prefix, "residual_pre_add", branch.data)
        return x + branch


class _RDB(_Block):
    def __init__(self, cfg, rng):
        super().__init__(cfg)
        c, k, g = cfg.channels, cfg.kernel, cfg.growth
        for i in range(cfg.rdb_convs):
            self._convs[f"dense{i}"] = Conv2d(c + i * g, g, k, bias=True, rng=rng)
        self._convs["fusion"] = Conv2d(c + cfg.rdb_convs * g, c, 1, bias=True, rng=rng)

    def _dense(self, h, mode):
        feats = h
        for i in range(self.cfg.rdb_convs):
            y = relu(self._convs[f"dense{i}"](feats))
            feats = concat_channels([feats, y])
        return self._convs["fusion"](feats)

    def forward(self, x, mode="train", taps=None, tap_prefix=""):
        self._tap(taps, tap_prefix, "block_input", x.data)
        branch = self._dense(x, mode)
        self._tap(taps, tap_prefix, "residual_pre_add", branch.data)
        return x + branch


class _RDBAdaDM(_RDB):
    has_adadm = True

    def __init__(self, cfg, rng):
        super().__init__(cfg, rng)
        if cfg.use_bn:
            self._norms["bn"] = Norm("BN", cfg.channels, eps=cfg.bn_eps,
                                     momentum=cfg.bn_momentum, affine=cfg.bn_affine)
        self._mods["adadm"] = AdaDM(detach_sigma=cfg.detach_sigma)

    def forward(self, x, mode="train", taps=None, tap_prefix=""):
        self._tap(taps, tap_prefix, "block_input", x.data)
        h = self._norms["bn"](x, mode) if self.cfg.use_bn else x
        fused = self._dense(h, mode)
        branch = self._mods["adadm"](fused, x)
        if taps is not None:
            self._tap(taps, tap_prefix, "modulation_factor",
                      self._mods["adadm"].factor_value(x).reshape(-1, 1, 1, 1))
        self._tap(taps, tap_prefix, "residual_pre_add", branch.data)
        return x + branch


_BLOCK_CLASSES = {
    "T1": _T1, "T2": _T2, "T3": _T3,
    "RB": _RB, "SRRB": _SRRB, "PreRB": _PreRB, "RB_AdaDM": _RBAdaDM,
    "RDB": _RDB, "RDB_AdaDM": _RDBAdaDM,
}


def build_block(cfg: BlockConfig, rng: Rng) -> _Block:
    return _BLOCK_CLASSES[cfg.kind](cfg, rng)


def block_forward(block: _Block, x: Tensor, mode: str = "train",
                  taps: Optional[dict] = None) -> Tensor:
    if x.shape[1] != block.cfg.channels:
        raise ValueError(f"block expects {block.cfg.channels} channels, got {x.shape[1]}")
    return block.forward(x, mode, taps)


# ---------------------------------------------------------------------------
# exact identity verification


def interior_std(values: np.ndarray, margin: int) -> np.ndarray:
    """Per (sample, channel) spatial std with a border ring removed.

    A zero-padded conv of a constant image is constant per output channel
    only away from the borders, and only per channel (each output channel
    has its own kernel sum). The exact spread identities therefore live on
    per-channel interior statistics; pooled (C, H, W) statistics pick up the
    channel-to-channel offsets and are only approximately preserved.
    """
    if margin > 0:
        values = values[:, :, margin:-margin, margin:-margin]
    n, c = values.shape[:2]
    return values.reshape(n, c, -1).std(axis=2)


def feature_deviation(values: np.ndarray, margin: int) -> np.ndarray:
    """Per-sample deviation summary: channel mean of interior spatial stds."""
    return interior_std(values, margin).mean(axis=1)


@dataclass
class DaIdentityReport:
    max_err_shrink: float       # | std(gamma) - std(y) / sigma |
    max_err_restore: float      # | std(gamma_hat) - std(y) |
    max_err_values: float       # | gamma_hat - (y - mu * kernel_sum) | on the interior
    tol: float
    per_sample_sigma: list[float] = field(default_factory=list)

    @property
    def passed(self) -> bool:
        return max(self.max_err_shrink, self.max_err_restore, self.max_err_values) <= self.tol

    def __str__(self) -> str:
        state = "pass" if self.passed else "FAIL"
        return (f"deviation identity {state}: shrink err {self.max_err_shrink:.3e}, "
                f"restore err {self.max_err_restore:.3e}, value err "
                f"{self.max_err_values:.3e} (tol {self.tol:.1e})")


def verify_da_identity(x: Tensor, conv_weights: Tensor, tol: float = 1e-10,
                       bias: Tensor | None = None) -> DaIdentityReport:
    """Check, per sample and output channel, that normalization divides the
    branch spread by sigma(x) and that multiplying back restores it.

    All statistics are interior spatial stds (border ring of (k-1)/2 pixels
    excluded), because the constant-image response of a zero-padded conv is
    per-channel constant only there. The report also carries the value-level
    identity gamma_hat = y - mu * kernel_sum, which is what a reinstated conv
    bias breaks; per-channel stds alone are shift invariant and cannot see a
    bias.

    Preconditions for exactness: bias-free conv, affine-off per-sample
    normalization at eps=0, non-constant samples. Passing a bias demonstrates
    the violation; the report then flags it.
    """
    k = conv_weights.shape[2]
    margin = (k - 1) // 2
    mu = mean_over(x, (1, 2, 3))
    sigma = std_over(x, (1, 2, 3), 0.0)
    s = sigma.data.reshape(-1)
    if np.any(s <= 0.0):
        idx = int(np.argwhere(s <= 0.0)[0][0])
        raise ValueError(f"sample {idx} is constant; the identity needs sigma > 0")
    y = conv2d(x, conv_weights, bias)
    gamma = conv2d((x - mu) / sigma, conv_weights, bias)
    gamma_hat = gamma * sigma
    std_y = interior_std(y.data, margin)        # (N, C_out)
    std_g = interior_std(gamma.data, margin)
    std_gh = interior_std(gamma_hat.data, margin)
    err_a = np.abs(std_g - std_y / s[:, None])
    err_b = np.abs(std_gh - std_y)
    kernel_sum = conv_weights.data.sum(axis=(1, 2, 3)).reshape(1, -1, 1, 1)
    expected = y.data - mu.data * kernel_sum
    sl = slice(margin, -margin) if margin else slice(None)
    err_v = np.abs(gamma_hat.data - expected)[:, :, sl, sl]
    return DaIdentityReport(float(err_a.max()), float(err_b.max()), float(err_v.max()),
                            tol, [float(v) for v in s])
