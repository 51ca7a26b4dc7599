"""L1 transport-distance regularizer."""

from __future__ import annotations

from dataclasses import dataclass

import torch

from .diffcore import DTYPE


@dataclass(frozen=True)
class PenaltyConfig:
    l1_weight: float = 0.0
    # False trains on the penalty alone (the "L1 only" baseline)
    likelihood: bool = True

    def __post_init__(self):
        if not self.l1_weight >= 0:
            raise ValueError(f"penalty.l1_weight must be non-negative, got {self.l1_weight}")


def l1_penalty(x, y, weight: float) -> torch.Tensor:
    """weight * mean over points of sum_d |x_d - y_d|.

    The subgradient of |.| at zero is 0.
    """
    x = torch.as_tensor(x, dtype=DTYPE)
    y = torch.as_tensor(y, dtype=DTYPE)
    if x.shape != y.shape:
        raise ValueError(f"shape mismatch: {tuple(x.shape)} vs {tuple(y.shape)}")
    if weight < 0:
        raise ValueError("weight must be non-negative")
    if weight == 0:
        return (x - y).sum() * 0.0
    return weight * (x - y).abs().sum(-1).mean()
