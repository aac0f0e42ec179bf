"""Denoiser, noise-aware gating network, fusion head and their assembly.

Count levels are ordered ``COUNT_LEVELS = (0.01, 0.02, 0.05, 0.10, 0.25, 0.50)``;
weight vectors, denoiser lists and the fusion input stack all follow it.
"""
from __future__ import annotations

import logging
from dataclasses import asdict, dataclass, field

import numpy as np

from .nn import Conv3d, ConvTranspose3d, Linear, Module
from .tensor import ConfigurationError, Tensor, concat, global_avg_pool, maximum, no_grad, relu, sigmoid, softmax

logger = logging.getLogger(__name__)

COUNT_LEVELS: tuple[float, ...] = (0.01, 0.02, 0.05, 0.10, 0.25, 0.50)

__all__ = [
    "COUNT_LEVELS",
    "SlabShapeError",
    "DenoiserConfig",
    "NoiseAwareConfig",
    "FusionConfig",
    "DenseBlock",
    "SCSEBlock",
    "Denoiser",
    "NoiseAwareNet",
    "FusionHead",
    "UnnModel",
    "level_name",
]


class SlabShapeError(ValueError):
    """Input slab does not match the shape the gating network was built for."""


def level_name(f: float) -> str:
    """Display label, e.g. ``0.05 -> 'Net_5'``."""
    return f"Net_{int(round(f * 100))}"


def _triple(v):
    return tuple(int(i) for i in v)


@dataclass
class DenoiserConfig:
    base_filters: int = 32
    down_stages: int = 4
    up_stages: int = 4
    down_kernel: tuple = (1, 3, 3)
    down_stride: tuple = (1, 2, 2)
    up_stride: tuple = (1, 2, 2)
    dense_block_layers: int = 3
    dense_kernel: tuple = (5, 3, 3)
    se_reduction: int = 2
    final_kernel: tuple = (3, 3, 3)
    # encoder->decoder additive skips; "none" gives the plain encoder/decoder,
    # which cannot carry fine detail through the 3x3 bottleneck
    skip: str = "additive"
    # add the network input to the final conv output
    residual: bool = True

    def __post_init__(self):
        for name in ("down_kernel", "down_stride", "up_stride", "dense_kernel", "final_kernel"):
            setattr(self, name, _triple(getattr(self, name)))
        if self.down_stages != self.up_stages:
            raise ConfigurationError("down_stages must equal up_stages")
        if self.base_filters % self.se_reduction:
            raise ConfigurationError(
                f"base_filters={self.base_filters} not divisible by se_reduction={self.se_reduction}")
        if self.skip not in ("none", "additive"):
            raise ConfigurationError(f"unknown skip mode {self.skip!r}")
        if any(k % 2 == 0 for k in self.dense_kernel + self.final_kernel):
            raise ConfigurationError("dense and final kernels must have odd extents")

    def stage_extents(self, spatial) -> list[tuple[int, int, int]]:
        """Spatial extents after each down stage, starting with the input."""
        extents = [tuple(spatial)]
        for i in range(self.down_stages):
            nxt = tuple((n - k) // s + 1 for n, k, s in zip(extents[-1], self.down_kernel, self.down_stride))
            if min(nxt) < 1:
                raise ConfigurationError(
                    f"input {tuple(spatial)} too small: down stage {i + 1} would produce {nxt}")
            extents.append(nxt)
        return extents


@dataclass
class NoiseAwareConfig:
    slab_shape: tuple = (20, 64, 64)
    filters: int = 32
    kernel: tuple = (3, 3, 3)
    strides: tuple = ((1, 2, 2), (2, 2, 2), (1, 2, 2), (2, 2, 2), (2, 2, 2))
    fc_sizes: tuple = (18, 6)

    def __post_init__(self):
        self.slab_shape = _triple(self.slab_shape)
        self.kernel = _triple(self.kernel)
        self.strides = tuple(_triple(s) for s in self.strides)
        self.fc_sizes = tuple(int(s) for s in self.fc_sizes)
        if self.fc_sizes[-1] != len(COUNT_LEVELS):
            raise ConfigurationError(f"last FC layer must have {len(COUNT_LEVELS)} outputs")

    def conv_extents(self) -> list[tuple[int, int, int]]:
        pad = tuple(k // 2 for k in self.kernel)
        ext = [self.slab_shape]
        for s in self.strides:
            ext.append(tuple((n + 2 * p - k) // st + 1 for n, p, k, st in zip(ext[-1], pad, self.kernel, s)))
        if min(ext[-1]) < 1:
            raise ConfigurationError(f"slab {self.slab_shape} too small for the gating strides")
        return ext

    @property
    def flatten_width(self) -> int:
        return self.filters * int(np.prod(self.conv_extents()[-1]))


@dataclass
class FusionConfig:
    filters: int = 32
    layers: int = 6
    kernel: tuple = (3, 3, 3)
    # add the channel sum of the weighted stack (I_ws) to the conv output
    residual: bool = True

    def __post_init__(self):
        self.kernel = _triple(self.kernel)


class DenseBlock(Module):
    """Three padded conv+ReLU layers; layer j sees the block input and all earlier outputs."""

    def __init__(self, channels: int, n_layers: int, kernel, *, rng):
        super().__init__()
        pad = tuple(k // 2 for k in kernel)
        self.channels = channels
        self.layers = [Conv3d(channels * (j + 1), channels, kernel, 1, pad, rng=rng) for j in range(n_layers)]
        self.trace: list[int] = []

    def forward(self, x: Tensor) -> Tensor:
        if x.shape[1] != self.channels:
            raise ValueError(f"dense block expects {self.channels} channels, got {x.shape[1]}")
        feats = [x]
        self.trace = []
        out = x
        for layer in self.layers:
            inp = feats[0] if len(feats) == 1 else concat(feats, axis=1)
            self.trace.append(inp.shape[1])
            out = relu(layer(inp))
            feats.append(out)
        return out


class SCSEBlock(Module):
    """Concurrent channel and spatial squeeze-excitation, combined by elementwise max."""

    def __init__(self, channels: int, reduction: int, *, rng):
        super().__init__()
        if channels % reduction:
            raise ConfigurationError(f"channels {channels} not divisible by reduction {reduction}")
        self.fc1 = Linear(channels, channels // reduction, rng=rng)
        self.fc2 = Linear(channels // reduction, channels, rng=rng)
        self.spatial = Conv3d(channels, 1, (1, 1, 1), rng=rng)
        self.last_gates: tuple[np.ndarray, np.ndarray] | None = None

    def forward(self, x: Tensor) -> Tensor:
        n, c = x.shape[:2]
        z = relu(self.fc1(global_avg_pool(x)))
        channel_gate = sigmoid(self.fc2(z)).reshape(n, c, 1, 1, 1)
        spatial_gate = sigmoid(self.spatial(x))
        self.last_gates = (channel_gate.data, spatial_gate.data)
        return maximum(x * channel_gate, x * spatial_gate)


class Denoiser(Module):
    """Encoder/decoder denoiser: 4 unpadded strided down stages, 4 transposed up stages.

    Each stage is conv -> ReLU -> dense block -> scSE; a final conv with one
    filter and no activation produces the output. By default encoder features
    are added to the decoder stage of matching extent and the input is added
    to the output (``skip="additive"``, ``residual=True``). A residual model
    starts with a zero final conv, so untrained it is the identity.
    """

    def __init__(self, config: DenoiserConfig | None = None, *, seed: int = 0, count_level: float | None = None):
        super().__init__()
        self.config = cfg = config or DenoiserConfig()
        self.count_level = count_level
        rng = np.random.default_rng(seed)
        f = cfg.base_filters
        self.down = [Conv3d(1 if i == 0 else f, f, cfg.down_kernel, cfg.down_stride, 0, rng=rng)
                     for i in range(cfg.down_stages)]
        self.down_dense = [DenseBlock(f, cfg.dense_block_layers, cfg.dense_kernel, rng=rng)
                           for _ in range(cfg.down_stages)]
        self.down_se = [SCSEBlock(f, cfg.se_reduction, rng=rng) for _ in range(cfg.down_stages)]
        self.up = [ConvTranspose3d(f, f, cfg.down_kernel, cfg.up_stride, 0, rng=rng) for _ in range(cfg.up_stages)]
        self.up_dense = [DenseBlock(f, cfg.dense_block_layers, cfg.dense_kernel, rng=rng)
                         for _ in range(cfg.up_stages)]
        self.up_se = [SCSEBlock(f, cfg.se_reduction, rng=rng) for _ in range(cfg.up_stages)]
        self.final = Conv3d(f, 1, cfg.final_kernel, 1, tuple(k // 2 for k in cfg.final_kernel), rng=rng)
        if cfg.residual:
            # start as the identity; a random correction on near-clean input drives
            # the last dense layer's ReLUs dead before anything is learned
            self.final.weight.data[...] = 0
        self.shape_trace: list[tuple[int, int, int]] = []

    def forward(self, x: Tensor) -> Tensor:
        if x.ndim != 5 or x.shape[1] != 1:
            raise ValueError(f"denoiser expects N x 1 x D x H x W input, got {x.shape}")
        cfg = self.config
        extents = cfg.stage_extents(x.shape[2:])
        trace = [x.shape[2:]]
        h = x
        skips = []
        for conv, dense, se in zip(self.down, self.down_dense, self.down_se):
            h = se(dense(relu(conv(h))))
            trace.append(h.shape[2:])
            skips.append(h)
        for i, (tconv, dense, se) in enumerate(zip(self.up, self.up_dense, self.up_se)):
            target = extents[-2 - i]
            h = relu(tconv(h, output_target=target))
            if cfg.skip == "additive" and i < cfg.up_stages - 1:
                h = h + skips[-2 - i]
            h = se(dense(h))
            trace.append(h.shape[2:])
        self.shape_trace = trace
        out = self.final(h)
        return out + x if cfg.residual else out


class NoiseAwareNet(Module):
    """Five strided conv layers, flatten, FC(18)+ReLU, FC(6), softmax."""

    def __init__(self, config: NoiseAwareConfig | None = None, *, seed: int = 0):
        super().__init__()
        self.config = cfg = config or NoiseAwareConfig()
        rng = np.random.default_rng(seed)
        pad = tuple(k // 2 for k in cfg.kernel)
        self.convs = [Conv3d(1 if i == 0 else cfg.filters, cfg.filters, cfg.kernel, s, pad, rng=rng)
                      for i, s in enumerate(cfg.strides)]
        sizes = (cfg.flatten_width,) + cfg.fc_sizes
        self.fcs = [Linear(a, b, rng=rng) for a, b in zip(sizes[:-1], sizes[1:])]

    def forward(self, x: Tensor) -> Tensor:
        if x.ndim != 5 or x.shape[1] != 1:
            raise ValueError(f"gating network expects N x 1 x D x H x W input, got {x.shape}")
        if tuple(x.shape[2:]) != self.config.slab_shape:
            raise SlabShapeError(
                f"input slab {tuple(x.shape[2:])} does not match the gating slab_shape "
                f"{self.config.slab_shape} this model was built/loaded with")
        h = x
        for conv in self.convs:
            h = relu(conv(h))
        h = h.reshape(x.shape[0], -1)
        for i, fc in enumerate(self.fcs):
            h = fc(h)
            if i < len(self.fcs) - 1:
                h = relu(h)
        return softmax(h)


class FusionHead(Module):
    """Six padded 3x3x3 convs squeezing the weighted 6-channel stack to one channel.

    With ``config.residual`` the convs predict a correction to the weighted sum
    (the channel sum of the stack) instead of the whole image.
    """

    def __init__(self, config: FusionConfig | None = None, *, seed: int = 0, in_channels: int = len(COUNT_LEVELS)):
        super().__init__()
        self.config = cfg = config or FusionConfig()
        rng = np.random.default_rng(seed)
        pad = tuple(k // 2 for k in cfg.kernel)
        widths = [in_channels] + [cfg.filters] * (cfg.layers - 1) + [1]
        self.in_channels = in_channels
        self.convs = [Conv3d(a, b, cfg.kernel, 1, pad, rng=rng) for a, b in zip(widths[:-1], widths[1:])]

    def forward(self, stack: Tensor) -> Tensor:
        if stack.ndim != 5 or stack.shape[1] != self.in_channels:
            raise ValueError(f"fusion head expects N x {self.in_channels} x D x H x W, got {stack.shape}")
        h = stack
        for i, conv in enumerate(self.convs):
            h = conv(h)
            if i < len(self.convs) - 1:
                h = relu(h)
        if self.config.residual:
            h = h + stack.sum(axis=1, keepdims=True)
        return h


@dataclass
class UnnOutput:
    out: Tensor
    weighted_sum: Tensor
    weights: Tensor
    stack: Tensor = field(repr=False)


class UnnModel(Module):
    """Six count-level denoisers, a gating network and a fusion head."""

    def __init__(self, denoisers, gating: NoiseAwareNet, fusion: FusionHead, frozen_denoisers: bool = True):
        super().__init__()
        denoisers = list(denoisers)
        if len(denoisers) != len(COUNT_LEVELS):
            raise ConfigurationError(f"expected {len(COUNT_LEVELS)} denoisers, got {len(denoisers)}")
        levels = [d.count_level for d in denoisers]
        if any(lv is not None for lv in levels) and list(levels) != list(COUNT_LEVELS):
            raise ConfigurationError(f"denoisers must be ordered by count level {COUNT_LEVELS}, got {levels}")
        self.denoisers = denoisers
        self.gating = gating
        self.fusion = fusion
        self.frozen_denoisers = False
        self.set_frozen(frozen_denoisers)

    def set_frozen(self, flag: bool) -> None:
        self.frozen_denoisers = bool(flag)
        for d in self.denoisers:
            d.requires_grad_(not flag)

    def trainable_parameters(self) -> list[Tensor]:
        if self.frozen_denoisers:
            return self.gating.parameters() + self.fusion.parameters()
        return self.parameters()

    def denoise_all(self, x: Tensor) -> list[Tensor]:
        if self.frozen_denoisers:
            with no_grad():
                return [d(x) for d in self.denoisers]
        return [d(x) for d in self.denoisers]

    def forward(self, x: Tensor, weights=None, denoised=None) -> UnnOutput:
        """Run the full network on a slab.

        ``weights`` overrides the gating output (N x 6) and ``denoised`` supplies
        precomputed denoiser outputs; both exist for tests and caching.
        """
        if denoised is None:
            denoised = self.denoise_all(x)
        denoised = [d if isinstance(d, Tensor) else Tensor(d) for d in denoised]
        w = self.gating(x) if weights is None else (weights if isinstance(weights, Tensor) else Tensor(weights))
        n = x.shape[0]
        weighted = [denoised[i] * w[:, i].reshape(n, 1, 1, 1, 1) for i in range(len(denoised))]
        stack = concat(weighted, axis=1)
        ws = stack.sum(axis=1, keepdims=True)
        out = self.fusion(stack)
        return UnnOutput(out=out, weighted_sum=ws, weights=w, stack=stack)


def architecture_fingerprint(model: Module) -> dict:
    """Configs plus parameter counts; stored in and checked against checkpoints."""
    if isinstance(model, Denoiser):
        return {"kind": "denoiser", "denoiser": asdict(model.config), "n_params": model.num_parameters()}
    if isinstance(model, UnnModel):
        return {
            "kind": "unn",
            "denoiser": asdict(model.denoisers[0].config),
            "denoiser_n_params": model.denoisers[0].num_parameters(),
            "gating": asdict(model.gating.config),
            "gating_n_params": model.gating.num_parameters(),
            "fusion": asdict(model.fusion.config),
            "fusion_n_params": model.fusion.num_parameters(),
            "n_params": model.num_parameters(),
        }
    raise TypeError(f"no fingerprint for {type(model).__name__}")
