"""Small module system on top of :mod:`icmaux.autodiff`."""

from __future__ import annotations

import math
from typing import Iterator

import numpy as np

from . import autodiff as ad
from .autodiff import Parameter, Tensor

LEAK = 0.1


class Module:
    """Base class; parameters are discovered from attributes in definition order."""

    def named_parameters(self, prefix: str = "") -> Iterator[tuple[str, Parameter]]:
        for key, val in vars(self).items():
            name = f"{prefix}{key}"
            if isinstance(val, Parameter):
                val.name = name
                yield name, val
            elif isinstance(val, Module):
                yield from val.named_parameters(name + ".")
            elif isinstance(val, (list, tuple)):
                for i, item in enumerate(val):
                    if isinstance(item, Module):
                        yield from item.named_parameters(f"{name}.{i}.")
                    elif isinstance(item, Parameter):
                        item.name = f"{name}.{i}"
                        yield item.name, item

    def parameters(self) -> list[Parameter]:
        return [p for _, p in self.named_parameters()]

    def state_dict(self) -> dict[str, np.ndarray]:
        return {n: p.data.copy() for n, p in self.named_parameters()}

    def load_state_dict(self, state: dict[str, np.ndarray]) -> None:
        params = dict(self.named_parameters())
        missing = set(params) - set(state)
        if missing:
            raise KeyError(f"missing parameters: {sorted(missing)}")
        for name, p in params.items():
            arr = np.asarray(state[name], dtype=p.dtype)
            if arr.shape != p.shape:
                raise ad.ShapeError(f"{name}: checkpoint shape {arr.shape} != model shape {p.shape}")
            p.data = arr.copy()

    def freeze(self) -> None:
        for p in self.parameters():
            p.requires_grad = False
            p.grad = None

    def num_parameters(self) -> int:
        return int(sum(p.data.size for p in self.parameters()))

    def zero_grad(self) -> None:
        ad.zero_grads(self.parameters())


def _kaiming(rng: np.random.Generator, shape: tuple, fan_in: int) -> np.ndarray:
    bound = math.sqrt(6.0 / ((1 + LEAK**2) * fan_in))
    return rng.uniform(-bound, bound, size=shape).astype(np.float32)


class Conv2d(Module):
    def __init__(self, cin: int, cout: int, k: int, rng: np.random.Generator, group: str,
                 stride: int = 1, pad: int | None = None):
        self.stride = stride
        self.pad = (k - 1) // 2 if pad is None else pad
        self.weight = Parameter(_kaiming(rng, (cout, cin, k, k), cin * k * k), group=group)
        self.bias = Parameter(np.zeros(cout, np.float32), group=group)

    def __call__(self, x: Tensor) -> Tensor:
        return ad.conv2d(x, self.weight, self.bias, self.stride, self.pad)


class ConvTranspose2d(Module):
    """Stride-2 upsampling by default (kernel 4, pad 1 exactly doubles H and W)."""

    def __init__(self, cin: int, cout: int, rng: np.random.Generator, group: str,
                 k: int = 4, stride: int = 2, pad: int = 1):
        self.stride, self.pad = stride, pad
        # fan-in of a stride-2 transposed conv is roughly cin * k*k / stride^2
        self.weight = Parameter(_kaiming(rng, (cin, cout, k, k), cin * k * k // (stride * stride)), group=group)
        self.bias = Parameter(np.zeros(cout, np.float32), group=group)

    def __call__(self, x: Tensor) -> Tensor:
        return ad.conv_transpose2d(x, self.weight, self.bias, self.stride, self.pad)


class ResBlock(Module):
    """Two 3x3 convs with a skip path; optional 2x up- or downsampling.

    Upsampling is nearest-neighbour before the block, downsampling is a
    stride-2 first conv (the skip then uses a strided 1x1 conv).
    """

    def __init__(self, cin: int, cout: int, rng: np.random.Generator, group: str, resample: str | None = None):
        if resample not in (None, "up", "down"):
            raise ValueError(f"resample must be None, 'up' or 'down', got {resample!r}")
        self.resample = resample
        stride = 2 if resample == "down" else 1
        self.conv1 = Conv2d(cin, cout, 3, rng, group, stride=stride)
        self.conv2 = Conv2d(cout, cout, 3, rng, group)
        self.skip = Conv2d(cin, cout, 1, rng, group, stride=stride) if (cin != cout or stride != 1) else None

    def __call__(self, x: Tensor) -> Tensor:
        if self.resample == "up":
            x = ad.upsample2x(x)
        h = ad.leaky_relu(self.conv1(x), LEAK)
        h = self.conv2(h)
        s = self.skip(x) if self.skip is not None else x
        return ad.leaky_relu(h + s, LEAK)
