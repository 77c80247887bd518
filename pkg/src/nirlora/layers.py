"""Parameter containers shared by the encoder and the head."""

from __future__ import annotations

from typing import Iterator

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor


class Module:
    """Registry of named parameters discovered from instance attributes.

    Attribute order is registration order, so names and archive layout are
    stable across runs. Private attributes (leading underscore) are skipped.
    """

    def named_parameters(self, prefix: str = "") -> Iterator[tuple[str, Tensor]]:
        for key, value in vars(self).items():
            if key.startswith("_") or value is None:
                continue
            name = f"{prefix}{key}"
            if isinstance(value, Tensor):
                yield name, value
            elif isinstance(value, Module):
                yield from value.named_parameters(name + ".")
            elif isinstance(value, list) and value and isinstance(value[0], Module):
                for i, item in enumerate(value):
                    yield from item.named_parameters(f"{name}.{i}.")

    def parameters(self) -> list[Tensor]:
        return [p for _, p in self.named_parameters()]

    def set_trainable(self, flag: bool) -> None:
        for p in self.parameters():
            p.requires_grad = flag
            if not flag:
                p.grad = None


def _param(shape, rng: np.random.Generator | None, std: float = 0.0, fill: float = 0.0) -> Tensor:
    if rng is None or std == 0.0:
        data = np.full(shape, fill, dtype=np.float32) if fill else np.zeros(shape, dtype=np.float32)
    else:
        data = rng.normal(0.0, std, size=shape).astype(np.float32)
    return Tensor(data, requires_grad=True)


class Linear(Module):
    """Row-vector linear map ``x @ weight + bias`` with weight stored as ``C_in x C_out``.

    An attached ``adapter`` adds its low-rank path to the output.
    """

    def __init__(self, c_in: int, c_out: int, rng=None, std: float = 0.02, bias: bool = True):
        self.weight = _param((c_in, c_out), rng, std)
        self.bias = _param((c_out,), None) if bias else None
        self.adapter = None

    @property
    def c_in(self) -> int:
        return self.weight.shape[0]

    @property
    def c_out(self) -> int:
        return self.weight.shape[1]

    def named_parameters(self, prefix: str = "") -> Iterator[tuple[str, Tensor]]:
        yield prefix + "weight", self.weight
        if self.bias is not None:
            yield prefix + "bias", self.bias
        if self.adapter is not None:
            yield prefix + "lora_A", self.adapter.A
            yield prefix + "lora_B", self.adapter.B

    def __call__(self, x: Tensor) -> Tensor:
        out = x @ self.weight
        if self.bias is not None:
            out = out + self.bias
        if self.adapter is not None:
            out = out + self.adapter(x)
        return out


class LayerNorm(Module):
    def __init__(self, dim: int, eps: float = 1e-6):
        self.gamma = _param((dim,), None, fill=1.0)
        self.beta = _param((dim,), None)
        self._eps = eps

    def __call__(self, x: Tensor) -> Tensor:
        return ad.layer_norm(x, self.gamma, self.beta, self._eps)


class Conv2d(Module):
    def __init__(self, c_in: int, c_out: int, k: int, rng=None, dilation: int = 1, padding: int = 0):
        # He-normal init; the head ends in ReLUs
        std = float(np.sqrt(2.0 / (c_in * k * k)))
        self.weight = _param((c_out, c_in, k, k), rng, std)
        self.bias = _param((c_out,), None)
        self._dilation = dilation
        self._padding = padding

    def __call__(self, x: Tensor) -> Tensor:
        return ad.conv2d(x, self.weight, self.bias, stride=1, dilation=self._dilation, padding=self._padding)
