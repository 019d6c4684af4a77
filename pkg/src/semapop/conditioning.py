"""Persona adapter and FiLM modulation layers."""

from __future__ import annotations

import torch
from torch import nn

ADAPTER_HIDDEN = 1024
CONDITION_DIM = 128
ADAPTER_DROPOUT = 0.1

_ACTIVATIONS = {"relu": nn.ReLU, "leaky_relu": lambda: nn.LeakyReLU(0.2), "gelu": nn.GELU}


def seeded_dropout(x: torch.Tensor, p: float, training: bool, generator: torch.Generator | None = None):
    """Inverted dropout whose mask comes from ``generator`` when given."""
    if not training or p == 0:
        return x
    keep = torch.rand(x.shape, generator=generator, dtype=x.dtype) >= p
    return x * keep / (1 - p)


class Adapter(nn.Module):
    """Two affine layers mapping a persona embedding to a conditioning vector."""

    def __init__(
        self,
        embed_dim: int,
        hidden_dim: int = ADAPTER_HIDDEN,
        cond_dim: int = CONDITION_DIM,
        dropout: float = ADAPTER_DROPOUT,
        activation: str = "relu",
    ):
        super().__init__()
        self.embed_dim = embed_dim
        self.fc1 = nn.Linear(embed_dim, hidden_dim)
        self.act = _ACTIVATIONS[activation]()
        self.fc2 = nn.Linear(hidden_dim, cond_dim)
        self.dropout = dropout

    @property
    def cond_dim(self) -> int:
        return self.fc2.out_features

    def forward(self, e: torch.Tensor, generator: torch.Generator | None = None) -> torch.Tensor:
        if e.shape[-1] != self.embed_dim:
            raise ValueError(f"embedding dim {e.shape[-1]} != adapter input {self.embed_dim}")
        h = self.act(self.fc1(e))
        h = seeded_dropout(h, self.dropout, self.training, generator)
        return self.fc2(h)


class FiLM(nn.Module):
    """``h' = (1 + gamma(c)) * h + beta(c)`` with zero-initialized maps.

    Zero weights and biases make the layer an exact identity at
    initialization, for every conditioning input.
    """

    def __init__(self, cond_dim: int, feature_dim: int):
        super().__init__()
        self.gamma = nn.Linear(cond_dim, feature_dim)
        self.beta = nn.Linear(cond_dim, feature_dim)
        for layer in (self.gamma, self.beta):
            nn.init.zeros_(layer.weight)
            nn.init.zeros_(layer.bias)

    def forward(self, h: torch.Tensor, c: torch.Tensor) -> torch.Tensor:
        if h.shape[-1] != self.gamma.out_features or c.shape[-1] != self.gamma.in_features:
            raise ValueError("FiLM dimension mismatch")
        return (1 + self.gamma(c)) * h + self.beta(c)


def adapt(e, params: Adapter, training: bool = False, seed: int = 0) -> torch.Tensor:
    e = torch.as_tensor(e, dtype=params.fc1.weight.dtype)
    was = params.training
    params.train(training)
    try:
        gen = torch.Generator().manual_seed(seed)
        return params(e, generator=gen)
    finally:
        params.train(was)


def film(h, c, params: FiLM) -> torch.Tensor:
    return params(torch.as_tensor(h), torch.as_tensor(c))


def build_initial_hidden(z, c) -> torch.Tensor:
    """``[z; c]`` along the feature axis, noise first."""
    z, c = torch.as_tensor(z), torch.as_tensor(c)
    if not (torch.isfinite(z).all() and torch.isfinite(c).all()):
        raise ValueError("noise and conditioning must be finite")
    return torch.cat([z, c], dim=-1)
