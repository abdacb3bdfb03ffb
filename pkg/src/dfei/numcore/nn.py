"""Dense layers, initializers and seeded parameter construction."""

from __future__ import annotations

import zlib
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from ..errors import DimensionError
from . import autograd as ag
from .autograd import Tensor


def derived_rng(master_seed: int, name: str) -> np.random.Generator:
    """Generator whose stream depends only on ``(master_seed, name)``."""
    return np.random.default_rng(np.random.SeedSequence([int(master_seed), zlib.crc32(name.encode())]))


def glorot_uniform(fan_in: int, fan_out: int, rng: np.random.Generator) -> np.ndarray:
    limit = np.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-limit, limit, size=(fan_in, fan_out))


def embedding_uniform(rows: int, dim: int, rng: np.random.Generator, scale: float = 0.05) -> np.ndarray:
    return rng.uniform(-scale, scale, size=(rows, dim))


@dataclass
class Linear:
    """Affine map ``x @ W + b``."""

    name: str
    W: Tensor
    b: Tensor

    @classmethod
    def create(cls, name: str, fan_in: int, fan_out: int, seed: int, seed_name: str | None = None) -> "Linear":
        rng = derived_rng(seed, (seed_name or name) + ".W")
        W = Tensor(glorot_uniform(fan_in, fan_out, rng), requires_grad=True, name=name + ".W")
        b = Tensor(np.zeros(fan_out), requires_grad=True, name=name + ".b")
        return cls(name, W, b)

    @property
    def in_dim(self) -> int:
        return self.W.shape[0]

    @property
    def out_dim(self) -> int:
        return self.W.shape[1]

    def tensors(self) -> dict[str, Tensor]:
        return {self.name + ".W": self.W, self.name + ".b": self.b}

    def __call__(self, x: Tensor) -> Tensor:
        if x.shape[-1] != self.in_dim:
            raise DimensionError(
                f"layer {self.name!r} expects input width {self.in_dim}, got {x.shape[-1]}"
            )
        return ag.add(ag.matmul(x, self.W), self.b)


@dataclass
class MLPSpec:
    layers: list[Linear] = field(default_factory=list)

    @classmethod
    def create(cls, name: str, in_dim: int, dims: Sequence[int], seed: int, seed_name: str | None = None) -> "MLPSpec":
        layers = []
        prev = in_dim
        for i, width in enumerate(dims):
            layers.append(
                Linear.create(f"{name}.{i}", prev, width, seed, None if seed_name is None else f"{seed_name}.{i}")
            )
            prev = width
        return cls(layers)

    def tensors(self) -> dict[str, Tensor]:
        out: dict[str, Tensor] = {}
        for layer in self.layers:
            out.update(layer.tensors())
        return out

    @property
    def out_dim(self) -> int:
        return self.layers[-1].out_dim


_ACTIVATIONS = {"relu": ag.relu, "sigmoid": ag.sigmoid, "identity": lambda t: t}


def mlp_forward(
    x: Tensor,
    layers: Sequence[Linear] | MLPSpec,
    dropout_rates: Sequence[float] | None = None,
    training: bool = False,
    rng: np.random.Generator | None = None,
    activation: str = "relu",
) -> Tensor:
    """Apply affine -> activation -> dropout for every layer in turn."""
    if isinstance(layers, MLPSpec):
        layers = layers.layers
    rates = list(dropout_rates) if dropout_rates is not None else [0.0] * len(layers)
    if len(rates) != len(layers):
        raise DimensionError(f"{len(layers)} layers but {len(rates)} dropout rates")
    act = _ACTIVATIONS[activation]
    if x.data.ndim != 2:
        raise DimensionError(f"mlp input must be 2-D, got shape {x.shape}")
    h = x
    for layer, rate in zip(layers, rates):
        h = ag.dropout(act(layer(h)), rate, training, rng)
    return h
