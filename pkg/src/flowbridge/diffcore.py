"""Reverse-mode differentiation over a closed set of float64 operations.

Autograd itself is delegated to torch; this module fixes the vocabulary the
flows are allowed to use, the parameter container, and gradient clipping.
"""

from __future__ import annotations

import math
from collections import OrderedDict
from dataclasses import dataclass, field
from typing import Callable, Iterator, Mapping

import torch
import torch.nn.functional as F

DTYPE = torch.float64

torch.set_default_dtype(DTYPE)


class NonFiniteError(FloatingPointError):
    """Raised when a loss or one of its named stages stops being finite."""

    def __init__(self, stage: str, detail: str = ""):
        self.stage = stage
        msg = f"non-finite value in {stage}"
        if detail:
            msg += f": {detail}"
        super().__init__(msg)


def check_finite(t: torch.Tensor, stage: str) -> torch.Tensor:
    if not bool(torch.isfinite(t).all()):
        bad = (~torch.isfinite(t)).sum().item()
        raise NonFiniteError(stage, f"{bad} of {t.numel()} entries")
    return t


# -- vocabulary ---------------------------------------------------------------

def affine(x: torch.Tensor, weight: torch.Tensor, bias: torch.Tensor | None = None) -> torch.Tensor:
    return F.linear(x, weight, bias)


def relu(x: torch.Tensor) -> torch.Tensor:
    return torch.relu(x)


def tanh(x: torch.Tensor) -> torch.Tensor:
    return torch.tanh(x)


def softmax(x: torch.Tensor, dim: int = -1) -> torch.Tensor:
    return torch.softmax(x, dim=dim)


def softplus(x: torch.Tensor) -> torch.Tensor:
    return F.softplus(x)


def log(x: torch.Tensor) -> torch.Tensor:
    return torch.log(x)


def exp(x: torch.Tensor) -> torch.Tensor:
    return torch.exp(x)


def total(x: torch.Tensor, dim: int | None = None) -> torch.Tensor:
    return x.sum() if dim is None else x.sum(dim=dim)


VOCABULARY: dict[str, Callable[..., torch.Tensor]] = {
    "affine": affine,
    "relu": relu,
    "tanh": tanh,
    "softmax": softmax,
    "softplus": softplus,
    "log": log,
    "exp": exp,
    "sum": total,
}


# -- parameters ---------------------------------------------------------------

@dataclass
class ParameterStore:
    """Ordered, named float64 parameter tensors plus the seed that created them."""

    arrays: "OrderedDict[str, torch.Tensor]" = field(default_factory=OrderedDict)
    rng_seed: int = 0

    @classmethod
    def from_module(cls, module: torch.nn.Module, rng_seed: int = 0) -> "ParameterStore":
        return cls(OrderedDict(module.named_parameters()), rng_seed)

    def __iter__(self) -> Iterator[str]:
        return iter(self.arrays)

    def __len__(self) -> int:
        return len(self.arrays)

    def __getitem__(self, name: str) -> torch.Tensor:
        return self.arrays[name]

    def items(self):
        return self.arrays.items()

    def values(self):
        return self.arrays.values()

    def numel(self) -> int:
        return sum(p.numel() for p in self.arrays.values())

    def all_finite(self) -> bool:
        return all(bool(torch.isfinite(p).all()) for p in self.arrays.values())

    def snapshot(self) -> "OrderedDict[str, torch.Tensor]":
        return OrderedDict((k, v.detach().clone()) for k, v in self.arrays.items())


GradientSet = "OrderedDict[str, torch.Tensor]"


def grad(loss: Callable[[], torch.Tensor], params: ParameterStore) -> "OrderedDict[str, torch.Tensor]":
    """Evaluate ``loss()`` and return d loss / d p for every parameter in ``params``.

    Parameters that do not influence the loss get zero gradients. Raises
    :class:`NonFiniteError` if the loss is not finite.
    """
    names = list(params.arrays)
    tensors = [params.arrays[n] for n in names]
    with torch.enable_grad():
        leaves = [t.requires_grad_(True) if not t.requires_grad else t for t in tensors]
        value = loss()
        if value.dim() != 0:
            raise ValueError(f"loss must be a scalar, got shape {tuple(value.shape)}")
        check_finite(value.detach(), "loss")
        if not value.requires_grad:
            grads = [None] * len(leaves)
        else:
            grads = torch.autograd.grad(value, leaves, allow_unused=True)
    out = OrderedDict()
    for n, t, g in zip(names, tensors, grads):
        g = torch.zeros_like(t) if g is None else g.detach()
        out[n] = check_finite(g, f"gradient of {n}")
    return out


def global_norm(g: Mapping[str, torch.Tensor]) -> float:
    # fixed summation order: declaration order of the parameters
    sq = 0.0
    for v in g.values():
        sq += float((v * v).sum())
    return math.sqrt(sq)


def clip_grad_norm(g: Mapping[str, torch.Tensor], max_norm: float) -> tuple["OrderedDict[str, torch.Tensor]", float]:
    """Rescale ``g`` so its global L2 norm is at most ``max_norm``.

    Returns the (possibly) rescaled gradients and the pre-clip norm.
    """
    if not max_norm > 0:
        raise ValueError(f"max_norm must be positive, got {max_norm}")
    norm = global_norm(g)
    if norm <= max_norm:
        return OrderedDict(g), norm
    scale = max_norm / norm
    return OrderedDict((k, v * scale) for k, v in g.items()), norm


def value_and_grad(loss: Callable[[], torch.Tensor], params: ParameterStore):
    """Like :func:`grad` but also returns the loss value as a float."""
    box = {}

    def wrapped():
        box["v"] = loss()
        return box["v"]

    g = grad(wrapped, params)
    return float(box["v"].detach()), g
