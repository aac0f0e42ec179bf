"""Parameter containers and the handful of layers the networks need."""
from __future__ import annotations

from collections import OrderedDict
from typing import Iterator

import numpy as np

from .tensor import ConvSpec, Tensor, conv3d, fully_connected, tconv3d, xavier_init, zeros_param

__all__ = ["Module", "Conv3d", "ConvTranspose3d", "Linear"]


class Module:
    """Holds named parameters and child modules, registered on attribute set."""

    def __init__(self):
        object.__setattr__(self, "_params", OrderedDict())
        object.__setattr__(self, "_children", OrderedDict())

    def __setattr__(self, name, value):
        if isinstance(value, Tensor) and value.requires_grad:
            self._params[name] = value
        elif isinstance(value, Module):
            self._children[name] = value
        elif isinstance(value, (list, tuple)) and value and all(isinstance(v, Module) for v in value):
            for i, v in enumerate(value):
                self._children[f"{name}.{i}"] = v
        object.__setattr__(self, name, value)

    def named_parameters(self, prefix: str = "") -> Iterator[tuple[str, Tensor]]:
        for name, p in self._params.items():
            yield prefix + name, p
        for name, child in self._children.items():
            yield from child.named_parameters(prefix + name + ".")

    def parameters(self) -> list[Tensor]:
        return [p for _, p in self.named_parameters()]

    def num_parameters(self) -> int:
        return int(sum(p.size for p in self.parameters()))

    def state_dict(self) -> "OrderedDict[str, np.ndarray]":
        return OrderedDict((k, p.data) for k, p in self.named_parameters())

    def load_state_dict(self, state) -> None:
        own = dict(self.named_parameters())
        missing = sorted(set(own) - set(state))
        unexpected = sorted(set(state) - set(own))
        if missing or unexpected:
            raise KeyError(f"state mismatch: missing={missing[:5]} unexpected={unexpected[:5]}")
        for k, p in own.items():
            arr = np.asarray(state[k])
            if arr.shape != p.shape:
                raise ValueError(f"parameter {k}: shape {arr.shape} != {p.shape}")
            p.data = arr.astype(p.dtype, copy=True)

    def astype(self, dtype) -> "Module":
        for p in self.parameters():
            p.data = p.data.astype(dtype)
            p.grad = None
        return self

    def zero_grad(self) -> None:
        for p in self.parameters():
            p.grad = None

    def requires_grad_(self, flag: bool) -> "Module":
        for p in self.parameters():
            p.requires_grad = flag
            if not flag:
                p.grad = None
        return self

    def __call__(self, *args, **kwargs):
        return self.forward(*args, **kwargs)


class Conv3d(Module):
    def __init__(self, in_channels, out_channels, kernel, stride=1, padding=0, *, rng: np.random.Generator):
        super().__init__()
        self.spec = ConvSpec(in_channels, out_channels, kernel, stride, padding)
        k = int(np.prod(self.spec.kernel))
        self.weight = xavier_init(self.spec.weight_shape, in_channels * k, out_channels * k, rng=rng)
        self.bias = zeros_param((out_channels,))

    def forward(self, x: Tensor) -> Tensor:
        return conv3d(x, self.weight, self.bias, self.spec)

    def output_shape(self, spatial):
        return self.spec.output_shape(spatial)


class ConvTranspose3d(Module):
    """Transposed conv from ``in_channels`` to ``out_channels``."""

    def __init__(self, in_channels, out_channels, kernel, stride=1, padding=0, *, rng: np.random.Generator):
        super().__init__()
        # the forward conv being transposed maps out_channels -> in_channels
        self.spec = ConvSpec(out_channels, in_channels, kernel, stride, padding)
        k = int(np.prod(self.spec.kernel))
        self.weight = xavier_init(self.spec.weight_shape, in_channels * k, out_channels * k, rng=rng)
        self.bias = zeros_param((out_channels,))

    def forward(self, x: Tensor, output_target=None) -> Tensor:
        return tconv3d(x, self.weight, self.bias, self.spec, output_target)


class Linear(Module):
    def __init__(self, in_features, out_features, *, rng: np.random.Generator):
        super().__init__()
        self.weight = xavier_init((in_features, out_features), in_features, out_features, rng=rng)
        self.bias = zeros_param((out_features,))

    def forward(self, x: Tensor) -> Tensor:
        return fully_connected(x, self.weight, self.bias)
