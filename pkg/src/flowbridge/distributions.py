"""Densities: the standard normal and flows usable as the base of other flows."""

from __future__ import annotations

import math

import numpy as np
import torch
from torch import nn

from .diffcore import DTYPE, NonFiniteError
from .transforms import CompositeTransform

LOG_2PI = math.log(2 * math.pi)


def rng(seed: int) -> np.random.Generator:
    """Portable seeded generator (PCG64) used for every random draw in the package."""
    return np.random.Generator(np.random.PCG64(int(seed)))


def normal_log_prob(z) -> torch.Tensor:
    z = torch.as_tensor(z, dtype=DTYPE)
    if not bool(torch.isfinite(z).all()):
        raise NonFiniteError("normal_log_prob input")
    d = z.shape[-1]
    return -0.5 * d * LOG_2PI - 0.5 * (z * z).sum(-1)


class StandardNormal(nn.Module):
    conditional = False

    def __init__(self, dim: int = 2):
        super().__init__()
        if dim < 1:
            raise ValueError("dimension must be positive")
        self.dim = dim

    def log_prob(self, z: torch.Tensor, c: torch.Tensor | None = None) -> torch.Tensor:
        if z.shape[-1] != self.dim:
            raise ValueError(f"expected dimension {self.dim}, got {z.shape[-1]}")
        return normal_log_prob(z)

    def sample(self, n: int, c: torch.Tensor | None = None, seed: int = 0) -> torch.Tensor:
        if n <= 0:
            raise ValueError("n must be positive")
        return torch.from_numpy(rng(seed).standard_normal((n, self.dim)))


class FlowDensity(nn.Module):
    """log p(x | c) = log p_base(f^-1(x; c) | c) + log|det J_{f^-1}(x)|.

    ``base`` may be a StandardNormal or another FlowDensity.
    """

    def __init__(self, transform: CompositeTransform, base: nn.Module | None = None,
                 condition_scale: float = 1.0):
        super().__init__()
        self.transform = transform
        self.condition_scale = float(condition_scale)
        self.base = base if base is not None else StandardNormal(transform.dim)
        if self.base.dim != transform.dim:
            raise ValueError("base and transform dimensions differ")

    @property
    def dim(self) -> int:
        return self.transform.dim

    @property
    def conditional(self) -> bool:
        return bool(self.transform.arch.context) or self.base.conditional

    def _ctx(self, c):
        # raw conditions (n,) or (n, 1) are divided by condition_scale before entering the networks
        if c is None or not self.transform.arch.context:
            return None
        c = torch.as_tensor(c, dtype=DTYPE)
        return (c.reshape(-1, 1) if c.dim() < 2 else c) / self.condition_scale

    def log_prob(self, x: torch.Tensor, c: torch.Tensor | None = None) -> torch.Tensor:
        z, logdet = self.transform.inverse(x, self._ctx(c))
        return self.base.log_prob(z, c) + logdet

    def sample(self, n: int, c: torch.Tensor | None = None, seed: int = 0) -> torch.Tensor:
        if c is not None:
            c = torch.as_tensor(c, dtype=DTYPE)
            if c.numel() == 1:
                c = c.reshape(1).expand(n)
        z = self.base.sample(n, c, seed)
        x, _ = self.transform.forward(z, self._ctx(c))
        return x


    def encode(self, x: torch.Tensor, c: torch.Tensor | None = None) -> torch.Tensor:
        """Map data all the way down to the innermost normal latent space."""
        z, _ = self.transform.inverse(x, self._ctx(c))
        return self.base.encode(z, c) if isinstance(self.base, FlowDensity) else z

    def decode(self, z: torch.Tensor, c: torch.Tensor | None = None) -> torch.Tensor:
        if isinstance(self.base, FlowDensity):
            z = self.base.decode(z, c)
        x, _ = self.transform.forward(z, self._ctx(c))
        return x


def flow_log_prob(m: FlowDensity, x, c=None) -> torch.Tensor:
    return m.log_prob(torch.as_tensor(x, dtype=DTYPE), None if c is None else torch.as_tensor(c, dtype=DTYPE))


def flow_sample(m: FlowDensity, n: int, c=None, seed: int = 0) -> torch.Tensor:
    with torch.no_grad():
        return m.sample(n, None if c is None else torch.as_tensor(c, dtype=DTYPE), seed)
