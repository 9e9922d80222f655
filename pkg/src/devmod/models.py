"""Head / body / tail super-resolution networks parameterized by block kind.

head: one 3x3 conv RGB -> channels
body: n_blocks residual blocks, a closing 3x3 conv, and a skip from the
      head output (the global feature skip)
tail: sub-pixel upsampler (x2, x3, or x4 as two x2 stages) and a final
      3x3 conv back to RGB
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass, field

import numpy as np

from .blocks import BlockConfig, build_block
from .layers import Conv2d
from .tensor import Rng, Tensor, no_grad, pixel_shuffle

__all__ = ["ModelConfig", "Model", "build_model", "model_forward", "collect_internal",
           "desk_model_config", "toy_model_config"]

# DIV2K channel means in the 0..1 convention, used only when mean_shift is on
_RGB_MEANS = (0.4488, 0.4371, 0.4040)


@dataclass
class ModelConfig:
    scale: int
    n_blocks: int
    channels: int
    block: BlockConfig
    rgb_range: float = 255.0
    global_skip: bool = True
    mean_shift: bool = False

    def __post_init__(self):
        if self.scale not in (2, 3, 4):
            raise ValueError(f"unsupported scale {self.scale}; expected 2, 3 or 4")
        if self.n_blocks < 1:
            raise ValueError("n_blocks must be >= 1")
        if self.block.channels != self.channels:
            raise ValueError("block channels must match model channels")

    def to_json(self) -> dict:
        blk = self.block
        return {
            "scale": self.scale, "n_blocks": self.n_blocks, "channels": self.channels,
            "rgb_range": self.rgb_range, "global_skip": self.global_skip,
            "mean_shift": self.mean_shift,
            "block": {
                "kind": blk.kind, "channels": blk.channels, "kernel": blk.kernel,
                "ln_eps": blk.ln_eps, "bn_eps": blk.bn_eps, "bn_momentum": blk.bn_momentum,
                "bn_affine": blk.bn_affine, "use_bn": blk.use_bn,
                "detach_sigma": blk.detach_sigma, "residual_scale": blk.residual_scale,
                "rdb_convs": blk.rdb_convs, "growth": blk.growth,
            },
        }

    @staticmethod
    def from_json(doc: dict) -> "ModelConfig":
        blk = BlockConfig(**doc["block"])
        rest = {k: v for k, v in doc.items() if k != "block"}
        return ModelConfig(block=blk, **rest)


def desk_model_config(kind: str, *, scale: int = 2, n_blocks: int = 4, channels: int = 16,
                      rgb_range: float = 255.0, **block_kw) -> ModelConfig:
    """Laptop-sized preset: 4 blocks of 16 channels."""
    block = BlockConfig(kind=kind, channels=channels, **block_kw)
    return ModelConfig(scale=scale, n_blocks=n_blocks, channels=channels,
                       block=block, rgb_range=rgb_range)


def toy_model_config(kind: str, *, scale: int = 2, rgb_range: float = 255.0,
                     **block_kw) -> ModelConfig:
    """The 32-block, 64-channel toy configuration (M1/M2/M3 with T1/T2/T3)."""
    block = BlockConfig(kind=kind, channels=64, **block_kw)
    return ModelConfig(scale=scale, n_blocks=32, channels=64, block=block,
                       rgb_range=rgb_range)


class Model:
    def __init__(self, cfg: ModelConfig, rng: Rng):
        self.cfg = cfg
        c, k = cfg.channels, 3
        self.head = Conv2d(3, c, k, bias=True, rng=rng)
        self.blocks = [build_block(cfg.block, rng) for _ in range(cfg.n_blocks)]
        self.body_conv = Conv2d(c, c, k, bias=True, rng=rng)
        self.tail_convs: list[tuple[Conv2d, int]] = []  # (conv, shuffle factor)
        if cfg.scale in (2, 3):
            r = cfg.scale
            self.tail_convs.append((Conv2d(c, c * r * r, k, bias=True, rng=rng), r))
        else:  # x4 as two x2 stages
            self.tail_convs.append((Conv2d(c, c * 4, k, bias=True, rng=rng), 2))
            self.tail_convs.append((Conv2d(c, c * 4, k, bias=True, rng=rng), 2))
        self.final = Conv2d(c, 3, k, bias=True, rng=rng)
        self._means = np.array(_RGB_MEANS).reshape(1, 3, 1, 1) * cfg.rgb_range

    def forward(self, lr: Tensor, mode: str = "train", taps: dict | None = None) -> Tensor:
        if lr.shape[1] != 3:
            raise ValueError(f"expected 3 input channels, got {lr.shape[1]}")
        limit = self.cfg.rgb_range
        if lr.data.min() < -0.25 * limit or lr.data.max() > 1.25 * limit:
            warnings.warn(f"input values outside the rgb_range {limit} convention",
                          stacklevel=2)
        x = lr - Tensor(self._means) if self.cfg.mean_shift else lr
        h = self.head(x)
        f = h
        for i, blk in enumerate(self.blocks):
            f = blk.forward(f, mode, taps, tap_prefix=f"block{i}.")
        body = self.body_conv(f)
        if self.cfg.global_skip:
            body = body + h
        t = body
        for conv, r in self.tail_convs:
            t = pixel_shuffle(conv(t), r)
        out = self.final(t)
        if self.cfg.mean_shift:
            out = out + Tensor(self._means)
        return out

    def params(self) -> dict[str, Tensor]:
        out: dict[str, Tensor] = {}
        for name, p in self.head.params().items():
            out[f"head.{name}"] = p
        for i, blk in enumerate(self.blocks):
            for name, p in blk.params().items():
                out[f"body.{i}.{name}"] = p
            for name, mod in blk.modulators().items():
                for pname, p in mod.params().items():
                    out[f"body.{i}.{name}.{pname}"] = p
        for name, p in self.body_conv.params().items():
            out[f"body.conv.{name}"] = p
        for j, (conv, _) in enumerate(self.tail_convs):
            for name, p in conv.params().items():
                out[f"tail.{j}.{name}"] = p
        for name, p in self.final.params().items():
            out[f"final.{name}"] = p
        return out

    def norms(self):
        out = {}
        for i, blk in enumerate(self.blocks):
            for name, norm in blk.norms().items():
                out[f"body.{i}.{name}"] = norm
        return out

    def modulators(self):
        out = {}
        for i, blk in enumerate(self.blocks):
            for name, mod in blk.modulators().items():
                out[f"body.{i}.{name}"] = mod
        return out

    def param_count(self) -> int:
        return sum(p.size for p in self.params().values())


def build_model(cfg: ModelConfig, rng: Rng) -> Model:
    return Model(cfg, rng)


def model_forward(model: Model, lr: Tensor, mode: str = "eval") -> Tensor:
    return model.forward(lr, mode)


def collect_internal(model: Model, lr: Tensor, probes) -> dict[str, np.ndarray]:
    """Capture named internal tensors from a single eval forward pass.

    ``probes`` is an iterable of (block_index, tap_name) with tap_name one of
    block_input, residual_pre_add, modulation_factor. Returns a map keyed by
    "block{i}.{tap}". The forward output is not altered by probing.
    """
    requested = []
    for idx, tap in probes:
        idx = int(idx)
        if not (0 <= idx < len(model.blocks)):
            raise ValueError(f"block index {idx} out of range (0..{len(model.blocks) - 1})")
        if tap not in ("block_input", "residual_pre_add", "modulation_factor"):
            raise ValueError(f"unknown probe {tap!r}")
        if tap == "modulation_factor" and not model.blocks[idx].has_adadm:
            raise ValueError(f"block {idx} ({model.blocks[idx].cfg.kind}) has no modulator")
        requested.append((idx, tap))
    taps: dict[str, np.ndarray] = {}
    with no_grad():
        model.forward(lr, mode="eval", taps=taps)
    return {f"block{i}.{t}": taps[f"block{i}.{t}"] for i, t in requested}
