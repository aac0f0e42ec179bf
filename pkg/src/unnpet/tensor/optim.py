"""Adam optimizer and Xavier initialisation."""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .tensor import Tensor, get_default_dtype

__all__ = ["AdamConfig", "Adam", "TrainingDivergedError", "xavier_init", "zeros_param"]


class TrainingDivergedError(FloatingPointError):
    """A gradient or loss became NaN or infinite."""


@dataclass
class AdamConfig:
    learning_rate: float = 1e-4
    beta1: float = 0.9
    beta2: float = 0.999
    epsilon: float = 1e-8
    step_count: int = 0

    def __post_init__(self):
        if self.learning_rate < 0:
            raise ValueError("learning_rate must be non-negative")
        if not (0.0 <= self.beta1 < 1.0 and 0.0 <= self.beta2 < 1.0):
            raise ValueError(f"betas must lie in [0, 1): {self.beta1}, {self.beta2}")
        if self.epsilon <= 0:
            raise ValueError("epsilon must be positive")


@dataclass
class Adam:
    """Bias-corrected Adam over a fixed list of parameters.

    ``step`` consumes the gradients and clears them, so each update needs a
    fresh forward/backward pass.
    """

    params: list
    config: AdamConfig = field(default_factory=AdamConfig)
    m: list = field(init=False)
    v: list = field(init=False)

    def __post_init__(self):
        self.params = list(self.params)
        self.m = [np.zeros_like(p.data) for p in self.params]
        self.v = [np.zeros_like(p.data) for p in self.params]

    def zero_grad(self) -> None:
        for p in self.params:
            p.grad = None

    def step(self) -> None:
        cfg = self.config
        for i, p in enumerate(self.params):
            if p.grad is None:
                raise RuntimeError(f"parameter {i} {p.shape} has no gradient; call backward() first")
            if not np.all(np.isfinite(p.grad)):
                raise TrainingDivergedError(f"non-finite gradient in parameter {i} {p.shape}")
        cfg.step_count += 1
        t = cfg.step_count
        b1, b2 = cfg.beta1, cfg.beta2
        corr1 = 1.0 - b1 ** t
        corr2 = 1.0 - b2 ** t
        for p, m, v in zip(self.params, self.m, self.v):
            g = p.grad
            m *= b1
            m += (1.0 - b1) * g
            v *= b2
            v += (1.0 - b2) * g * g
            update = cfg.learning_rate * (m / corr1) / (np.sqrt(v / corr2) + cfg.epsilon)
            p.data -= update.astype(p.data.dtype, copy=False)
        self.zero_grad()

    def state_arrays(self) -> dict[str, np.ndarray]:
        out = {}
        for i, (m, v) in enumerate(zip(self.m, self.v)):
            out[f"adam.m.{i}"] = m
            out[f"adam.v.{i}"] = v
        return out

    def load_state_arrays(self, arrays: dict[str, np.ndarray], step_count: int) -> None:
        for i in range(len(self.params)):
            self.m[i] = np.array(arrays[f"adam.m.{i}"], dtype=self.params[i].dtype)
            self.v[i] = np.array(arrays[f"adam.v.{i}"], dtype=self.params[i].dtype)
        self.config.step_count = int(step_count)


def xavier_init(shape, fan_in: int, fan_out: int, rng_seed=None, rng: np.random.Generator | None = None,
                dtype=None) -> Tensor:
    """Gaussian Xavier/Glorot draw: zero mean, variance ``2 / (fan_in + fan_out)``."""
    if fan_in < 1 or fan_out < 1:
        raise ValueError(f"fans must be >= 1, got {fan_in}, {fan_out}")
    if rng is None:
        rng = np.random.default_rng(rng_seed)
    std = np.sqrt(2.0 / (fan_in + fan_out))
    data = rng.normal(0.0, std, size=tuple(shape)).astype(dtype or get_default_dtype())
    return Tensor(data, requires_grad=True)


def zeros_param(shape, dtype=None) -> Tensor:
    return Tensor(np.zeros(tuple(shape), dtype=dtype or get_default_dtype()), requires_grad=True)
