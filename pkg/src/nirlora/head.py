"""ASPP binary segmentation head operating on the encoder's token grid.

Five parallel branches (1x1 conv, three dilated 3x3 convs, global pooling),
channel concat, 1x1 fuse, 3x3 refine, 1x1 classifier, then bilinear upsample
to the input resolution. The head returns logits; sigmoid is applied only in
:func:`predict_mask` and at evaluation.

With the default rates a 14x14 grid is smaller than the dilation, so most
taps of the rate-24/36 kernels read zero padding and those branches act like
a 1x1 conv on the centre tap. That is left as is.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import ShapeError, Tensor
from .layers import Conv2d, Module


@dataclass(frozen=True)
class HeadConfig:
    in_dim: int
    width: int = 256
    atrous_rates: tuple[int, ...] = (12, 24, 36)
    out_classes: int = 1

    def __post_init__(self):
        rates = tuple(self.atrous_rates)
        if any(r <= 0 for r in rates) or len(set(rates)) != len(rates):
            raise ValueError(f"atrous rates must be positive and distinct, got {rates}")
        if self.out_classes != 1:
            raise ValueError("only binary segmentation (out_classes = 1) is supported")
        object.__setattr__(self, "atrous_rates", rates)


def head_param_count(cfg: HeadConfig) -> int:
    d, w = cfg.in_dim, cfg.width
    n_branches = 2 + len(cfg.atrous_rates)
    one_by_one = d * w + w
    atrous = len(cfg.atrous_rates) * (d * w * 9 + w)
    pool = d * w + w
    fuse = n_branches * w * w + w
    refine = w * w * 9 + w
    classifier = w * cfg.out_classes + cfg.out_classes
    return one_by_one + atrous + pool + fuse + refine + classifier


def tokens_to_grid(z: Tensor) -> Tensor:
    """``B x N x D`` tokens to ``B x D x g x g``; token n lands at (n // g, n % g)."""
    squeeze = z.ndim == 2
    x = z.reshape((1,) + z.shape) if squeeze else z
    b, n, d = x.shape
    g = math.isqrt(n)
    if g * g != n:
        raise ShapeError(f"{n} tokens do not form a square grid")
    grid = x.reshape(b, g, g, d).transpose(0, 3, 1, 2)
    return grid.reshape(d, g, g) if squeeze else grid


def grid_to_tokens(grid: Tensor) -> Tensor:
    squeeze = grid.ndim == 3
    x = grid.reshape((1,) + grid.shape) if squeeze else grid
    b, d, g, g2 = x.shape
    z = x.transpose(0, 2, 3, 1).reshape(b, g * g2, d)
    return z.reshape(g * g2, d) if squeeze else z


class ASPP(Module):
    def __init__(self, cfg: HeadConfig, rng=None):
        d, w = cfg.in_dim, cfg.width
        self.branch0 = Conv2d(d, w, 1, rng)
        for i, rate in enumerate(cfg.atrous_rates, start=1):
            setattr(self, f"branch{i}", Conv2d(d, w, 3, rng, dilation=rate, padding=rate))
        self.pool = Conv2d(d, w, 1, rng)
        self.project = Conv2d((2 + len(cfg.atrous_rates)) * w, w, 1, rng)
        self._n_atrous = len(cfg.atrous_rates)

    def branches(self, grid: Tensor) -> list[Tensor]:
        g_h, g_w = grid.shape[-2:]
        outs = [ad.relu(self.branch0(grid))]
        for i in range(1, self._n_atrous + 1):
            outs.append(ad.relu(getattr(self, f"branch{i}")(grid)))
        pooled = ad.relu(self.pool(ad.adaptive_avg_pool(grid)))
        outs.append(ad.bilinear_resize(pooled, g_h, g_w))
        return outs

    def __call__(self, grid: Tensor) -> Tensor:
        return ad.relu(self.project(ad.concat(self.branches(grid), axis=-3)))


class ASPPHead(Module):
    def __init__(self, cfg: HeadConfig, rng=None):
        self.aspp = ASPP(cfg, rng)
        self.refine = Conv2d(cfg.width, cfg.width, 3, rng, padding=1)
        self.classifier = Conv2d(cfg.width, cfg.out_classes, 1, rng)
        self._cfg = cfg

    @property
    def config(self) -> HeadConfig:
        return self._cfg

    def __call__(self, grid: Tensor, output_size: tuple[int, int]) -> Tensor:
        x = ad.relu(self.refine(self.aspp(grid)))
        logits = self.classifier(x)
        return ad.bilinear_resize(logits, *output_size)


def aspp_forward(grid: Tensor, head: ASPPHead, output_size: tuple[int, int]) -> Tensor:
    return head(grid, output_size)


def sigmoid(x: np.ndarray) -> np.ndarray:
    out = np.empty_like(x, dtype=np.float64)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


def predict_mask(logits, threshold: float = 0.5) -> np.ndarray:
    """Binary mask ``sigmoid(logits) >= threshold`` as uint8; the channel axis is dropped."""
    if not 0.0 < threshold < 1.0:
        raise ValueError(f"threshold must lie in (0, 1), got {threshold}")
    arr = logits.data if isinstance(logits, Tensor) else np.asarray(logits)
    if arr.ndim >= 3 and arr.shape[-3] == 1:
        arr = arr[..., 0, :, :]
    return (sigmoid(arr) >= threshold).astype(np.uint8)
