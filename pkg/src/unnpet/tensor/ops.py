"""Differentiable operations on :class:`~unnpet.tensor.tensor.Tensor`."""
from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np

from . import _conv
from .tensor import Tensor

__all__ = [
    "ConvSpec",
    "ConfigurationError",
    "add",
    "sub",
    "mul",
    "div",
    "neg",
    "power",
    "absolute",
    "sum",
    "mean",
    "reshape",
    "transpose",
    "getitem",
    "concat",
    "maximum",
    "relu",
    "sigmoid",
    "softmax",
    "conv3d",
    "tconv3d",
    "fully_connected",
    "global_avg_pool",
    "box_mean2d",
]


class ConfigurationError(ValueError):
    """A layer or op was configured in a way that cannot produce valid output."""


def _lift(x, like: Tensor | None = None) -> Tensor:
    if isinstance(x, Tensor):
        return x
    dtype = like.dtype if like is not None else None
    return Tensor(np.asarray(x, dtype=dtype))


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    if g.shape == shape:
        return g
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for ax, n in enumerate(shape):
        if n == 1 and g.shape[ax] != 1:
            g = g.sum(axis=ax, keepdims=True)
    return g


# -- elementwise ----------------------------------------------------------------

def add(a, b) -> Tensor:
    a = _lift(a, b if isinstance(b, Tensor) else None)
    b = _lift(b, a)
    sa, sb = a.shape, b.shape
    return Tensor._from_op(
        a.data + b.data, (a, b),
        lambda g: (_unbroadcast(g, sa), _unbroadcast(g, sb)), "add")


def sub(a, b) -> Tensor:
    a = _lift(a, b if isinstance(b, Tensor) else None)
    b = _lift(b, a)
    sa, sb = a.shape, b.shape
    return Tensor._from_op(
        a.data - b.data, (a, b),
        lambda g: (_unbroadcast(g, sa), _unbroadcast(-g, sb)), "sub")


def mul(a, b) -> Tensor:
    a = _lift(a, b if isinstance(b, Tensor) else None)
    b = _lift(b, a)
    ad, bd = a.data, b.data

    def backward(g):
        return (_unbroadcast(g * bd, ad.shape) if a.requires_grad else None,
                _unbroadcast(g * ad, bd.shape) if b.requires_grad else None)

    return Tensor._from_op(ad * bd, (a, b), backward, "mul")


def div(a, b) -> Tensor:
    a = _lift(a, b if isinstance(b, Tensor) else None)
    b = _lift(b, a)
    ad, bd = a.data, b.data
    out = ad / bd

    def backward(g):
        return (_unbroadcast(g / bd, ad.shape) if a.requires_grad else None,
                _unbroadcast(-g * out / bd, bd.shape) if b.requires_grad else None)

    return Tensor._from_op(out, (a, b), backward, "div")


def neg(a: Tensor) -> Tensor:
    return Tensor._from_op(-a.data, (a,), lambda g: (-g,), "neg")


def power(a: Tensor, exponent: float) -> Tensor:
    ad = a.data
    e = float(exponent)
    out = ad ** e
    return Tensor._from_op(out, (a,), lambda g: (g * e * ad ** (e - 1.0),), "pow")


def absolute(a: Tensor) -> Tensor:
    ad = a.data
    return Tensor._from_op(np.abs(ad), (a,), lambda g: (g * np.sign(ad),), "abs")


def maximum(a: Tensor, b: Tensor) -> Tensor:
    """Elementwise max; ties send the gradient to ``a``."""
    take_a = a.data >= b.data
    out = np.where(take_a, a.data, b.data)
    sa, sb = a.shape, b.shape
    return Tensor._from_op(
        out, (a, b),
        lambda g: (_unbroadcast(np.where(take_a, g, 0), sa), _unbroadcast(np.where(take_a, 0, g), sb)),
        "maximum")


def relu(x: Tensor) -> Tensor:
    mask = x.data > 0
    return Tensor._from_op(x.data * mask, (x,), lambda g: (g * mask,), "relu")


def sigmoid(x: Tensor) -> Tensor:
    xd = x.data
    # split by sign so exp never overflows
    e = np.exp(-np.abs(xd))
    out = np.where(xd >= 0, 1.0 / (1.0 + e), e / (1.0 + e)).astype(xd.dtype, copy=False)
    return Tensor._from_op(out, (x,), lambda g: (g * out * (1.0 - out),), "sigmoid")


def softmax(x: Tensor) -> Tensor:
    """Softmax over the last axis, stabilised by subtracting the row max."""
    z = x.data - x.data.max(axis=-1, keepdims=True)
    e = np.exp(z)
    out = e / e.sum(axis=-1, keepdims=True)

    def backward(g):
        return (out * (g - (g * out).sum(axis=-1, keepdims=True)),)

    return Tensor._from_op(out, (x,), backward, "softmax")


# -- reductions and shape --------------------------------------------------------

def sum(x: Tensor, axis=None, keepdims: bool = False) -> Tensor:  # noqa: A001
    shape = x.shape

    def backward(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, shape).copy(),)

    return Tensor._from_op(np.asarray(x.data.sum(axis=axis, keepdims=keepdims)), (x,), backward, "sum")


def mean(x: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    if axis is None:
        count = x.size
    else:
        axes = (axis,) if np.isscalar(axis) else tuple(axis)
        count = int(np.prod([x.shape[a] for a in axes]))
    shape = x.shape

    def backward(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g / count, shape).astype(x.dtype, copy=True),)

    return Tensor._from_op(np.asarray(x.data.mean(axis=axis, keepdims=keepdims)), (x,), backward, "mean")


def reshape(x: Tensor, shape) -> Tensor:
    old = x.shape
    return Tensor._from_op(x.data.reshape(shape), (x,), lambda g: (g.reshape(old),), "reshape")


def transpose(x: Tensor, axes=None) -> Tensor:
    axes = tuple(range(x.ndim))[::-1] if axes is None else tuple(axes)
    inv = tuple(np.argsort(axes))
    return Tensor._from_op(
        np.ascontiguousarray(x.data.transpose(axes)), (x,),
        lambda g: (np.ascontiguousarray(g.transpose(inv)),), "transpose")


def getitem(x: Tensor, index) -> Tensor:
    shape, dtype = x.shape, x.dtype

    def backward(g):
        full = np.zeros(shape, dtype=dtype)
        np.add.at(full, index, g) if _needs_add_at(index) else full.__setitem__(index, g)
        return (full,)

    return Tensor._from_op(np.array(x.data[index]), (x,), backward, "getitem")


def _needs_add_at(index) -> bool:
    items = index if isinstance(index, tuple) else (index,)
    return any(isinstance(i, (list, np.ndarray)) for i in items)


def concat(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    tensors = list(tensors)
    sizes = [t.shape[axis] for t in tensors]
    bounds = np.cumsum([0] + sizes)

    def backward(g):
        return tuple(
            np.ascontiguousarray(np.take(g, np.arange(bounds[i], bounds[i + 1]), axis=axis))
            for i in range(len(tensors)))

    return Tensor._from_op(np.concatenate([t.data for t in tensors], axis=axis), tensors, backward, "concat")


# -- layers -------------------------------------------------------------------------

def _triple(v) -> tuple[int, int, int]:
    if np.isscalar(v):
        return (int(v),) * 3
    t = tuple(int(i) for i in v)
    if len(t) != 3:
        raise ConfigurationError(f"expected 3 values, got {v!r}")
    return t


@dataclass(frozen=True)
class ConvSpec:
    """Geometry of a 3-D convolution: kernel, stride, zero padding, channels."""

    in_channels: int
    out_channels: int
    kernel: tuple = (3, 3, 3)
    stride: tuple = (1, 1, 1)
    padding: tuple = (0, 0, 0)

    def __post_init__(self):
        object.__setattr__(self, "kernel", _triple(self.kernel))
        object.__setattr__(self, "stride", _triple(self.stride))
        object.__setattr__(self, "padding", _triple(self.padding))
        if min(self.kernel) < 1 or min(self.stride) < 1:
            raise ConfigurationError(f"kernel and stride must be positive: {self}")
        if min(self.padding) < 0:
            raise ConfigurationError(f"padding must be non-negative: {self}")
        if self.in_channels < 1 or self.out_channels < 1:
            raise ConfigurationError(f"channel counts must be positive: {self}")

    @property
    def weight_shape(self) -> tuple[int, ...]:
        return (self.out_channels, self.in_channels) + self.kernel

    def output_shape(self, spatial) -> tuple[int, int, int]:
        out = tuple(_conv.out_extent(n, k, s, p)
                    for n, k, s, p in zip(spatial, self.kernel, self.stride, self.padding))
        if min(out) < 1:
            raise ConfigurationError(
                f"input extent {tuple(spatial)} too small for kernel {self.kernel}, "
                f"stride {self.stride}, padding {self.padding} (output {out})")
        return out

    def transpose_shape(self, spatial) -> tuple[int, int, int]:
        return tuple(_conv.tconv_natural_extent(n, k, s, p)
                     for n, k, s, p in zip(spatial, self.kernel, self.stride, self.padding))


def _check_conv_inputs(x: Tensor, kernel: Tensor, spec: ConvSpec, in_ch: int, name: str):
    if x.ndim != 5:
        raise ValueError(f"{name}: expected N x C x D x H x W input, got shape {x.shape}")
    if x.shape[1] != in_ch:
        raise ValueError(f"{name}: input has {x.shape[1]} channels, spec expects {in_ch}")
    if kernel.shape != spec.weight_shape:
        raise ValueError(f"{name}: kernel shape {kernel.shape} does not match spec {spec.weight_shape}")


def conv3d(x: Tensor, kernel: Tensor, bias: Tensor | None, spec: ConvSpec) -> Tensor:
    """Cross-correlate ``x`` (N, C, D, H, W) with ``kernel`` (O, C, kD, kH, kW)."""
    _check_conv_inputs(x, kernel, spec, spec.in_channels, "conv3d")
    spec.output_shape(x.shape[2:])
    xd, wd = x.data, kernel.data
    out = _conv.conv3d_forward(xd, wd, spec.stride, spec.padding)
    if bias is not None:
        out += bias.data.reshape(1, -1, 1, 1, 1)
    in_spatial = x.shape[2:]

    def backward(g):
        gx = _conv.conv3d_grad_input(g, wd, in_spatial, spec.stride, spec.padding) if x.requires_grad else None
        gw = _conv.conv3d_grad_weight(xd, g, spec.kernel, spec.stride, spec.padding) if kernel.requires_grad else None
        gb = g.sum(axis=(0, 2, 3, 4)) if bias is not None and bias.requires_grad else None
        return gx, gw, gb

    parents = (x, kernel) + ((bias,) if bias is not None else ())
    return Tensor._from_op(out, parents, backward, "conv3d")


def _conv_extent_matches(spec: ConvSpec, spatial, expected) -> bool:
    out = tuple((n + 2 * p - k) // st + 1 for n, p, k, st in zip(spatial, spec.padding, spec.kernel, spec.stride))
    return out == tuple(expected)


def tconv3d(x: Tensor, kernel: Tensor, bias: Tensor | None, spec: ConvSpec, output_target=None) -> Tensor:
    """Transposed convolution: the adjoint of ``conv3d`` with the same kernel.

    ``kernel`` has the shape of the forward conv it transposes, i.e.
    ``(spec.out_channels, spec.in_channels, kD, kH, kW)``; this op maps
    ``spec.out_channels`` channels back to ``spec.in_channels``.
    ``output_target`` selects the output extent. When a forward conv of that
    extent has the input's extent the result is computed at that size (the
    exact adjoint); otherwise the natural extent ``(n - 1) * s + k - 2p`` is
    center-cropped or zero-padded (extra voxel at the end).
    """
    _check_conv_inputs(x, kernel, spec, spec.out_channels, "tconv3d")
    natural = spec.transpose_shape(x.shape[2:])
    if min(natural) < 1:
        raise ConfigurationError(f"tconv3d: natural output {natural} is empty for {spec}")
    if output_target is not None:
        output_target = _triple(output_target)
        for n, t, s in zip(natural, output_target, spec.stride):
            if abs(t - n) >= s or t < 1:
                raise ConfigurationError(
                    f"tconv3d: output target {output_target} unreachable from natural extent {natural}")
    xd, wd = x.data, kernel.data
    # a target that conv3d maps back onto the input extent is produced directly,
    # which keeps the op the exact adjoint of that conv
    base = natural
    if output_target is not None and _conv_extent_matches(spec, output_target, x.shape[2:]):
        base = output_target
    out = _conv.conv3d_grad_input(xd, wd, base, spec.stride, spec.padding)
    if output_target is not None and tuple(output_target) != base:
        out = _conv.fit_extent(out, output_target)
    if bias is not None:
        out += bias.data.reshape(1, -1, 1, 1, 1)

    def backward(g):
        gn = _conv.unfit_extent(g, base) if g.shape[2:] != base else g
        gx = _conv.conv3d_forward(gn, wd, spec.stride, spec.padding) if x.requires_grad else None
        gw = _conv.conv3d_grad_weight(gn, xd, spec.kernel, spec.stride, spec.padding) if kernel.requires_grad else None
        gb = g.sum(axis=(0, 2, 3, 4)) if bias is not None and bias.requires_grad else None
        return gx, gw, gb

    parents = (x, kernel) + ((bias,) if bias is not None else ())
    return Tensor._from_op(out, parents, backward, "tconv3d")


def fully_connected(x: Tensor, weight: Tensor, bias: Tensor | None) -> Tensor:
    """Affine map ``x @ weight + bias`` with ``weight`` of shape (F, G)."""
    if x.ndim != 2 or weight.ndim != 2 or x.shape[1] != weight.shape[0]:
        raise ValueError(f"fully_connected: input {x.shape} incompatible with weight {weight.shape}")
    if bias is not None and bias.shape != (weight.shape[1],):
        raise ValueError(f"fully_connected: bias {bias.shape} does not match weight {weight.shape}")
    xd, wd = x.data, weight.data
    out = xd @ wd
    if bias is not None:
        out = out + bias.data

    def backward(g):
        return (g @ wd.T if x.requires_grad else None,
                xd.T @ g if weight.requires_grad else None,
                g.sum(axis=0) if bias is not None else None)

    parents = (x, weight) + ((bias,) if bias is not None else ())
    return Tensor._from_op(out, parents, backward, "fully_connected")


def global_avg_pool(x: Tensor) -> Tensor:
    """(N, C, D, H, W) -> (N, C) mean over the spatial axes."""
    if x.ndim != 5:
        raise ValueError(f"global_avg_pool expects 5-D input, got {x.shape}")
    return mean(x, axis=(2, 3, 4))


def _box_sum_valid(a: np.ndarray, k: int) -> np.ndarray:
    """Sum over every k x k window of the last two axes (valid region only)."""
    c = np.cumsum(a, axis=-1)
    c = np.concatenate([c[..., k - 1:k], c[..., k:] - c[..., :-k]], axis=-1)
    c = np.cumsum(c, axis=-2)
    return np.concatenate([c[..., k - 1:k, :], c[..., k:, :] - c[..., :-k, :]], axis=-2)


def box_mean2d(x: Tensor, k: int) -> Tensor:
    """Uniform k x k moving average over the last two axes, valid windows only."""
    h, w = x.shape[-2:]
    if h < k or w < k:
        raise ValueError(f"box_mean2d: plane {h}x{w} smaller than window {k}x{k}")
    scale = 1.0 / (k * k)
    out = _box_sum_valid(x.data, k) * scale

    def backward(g):
        pad = [(0, 0)] * (g.ndim - 2) + [(k - 1, k - 1), (k - 1, k - 1)]
        return (_box_sum_valid(np.pad(g, pad), k) * scale,)

    return Tensor._from_op(out.astype(x.dtype, copy=False), (x,), backward, "box_mean2d")
