"""Adam with bias correction and the cosine learning-rate schedule."""

from __future__ import annotations

import math
from collections import OrderedDict
from dataclasses import dataclass, field
from typing import Mapping

import torch

from .diffcore import NonFiniteError, ParameterStore


def cosine_lr(step: int, total_steps: int, lr0: float) -> float:
    """lr0 * (1 + cos(pi * step / total_steps)) / 2, reaching exactly 0 at the end."""
    if total_steps <= 0:
        raise ValueError("total_steps must be positive")
    if not 0 <= step <= total_steps:
        raise ValueError(f"step {step} outside [0, {total_steps}]")
    if step == total_steps:
        return 0.0
    return lr0 * (1 + math.cos(math.pi * step / total_steps)) / 2


@dataclass
class OptimizerState:
    m: "OrderedDict[str, torch.Tensor]" = field(default_factory=OrderedDict)
    v: "OrderedDict[str, torch.Tensor]" = field(default_factory=OrderedDict)
    step: int = 0
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8

    @classmethod
    def for_params(cls, params: ParameterStore, **kw) -> "OptimizerState":
        zeros = lambda: OrderedDict((k, torch.zeros_like(p)) for k, p in params.items())
        return cls(zeros(), zeros(), **kw)


def adam_step(params: ParameterStore, grads: Mapping[str, torch.Tensor], state: OptimizerState, lr: float) -> None:
    """One bias-corrected Adam update, applied to ``params`` in place."""
    for k, g in grads.items():
        if not bool(torch.isfinite(g).all()):
            raise NonFiniteError(f"gradient of {k}")
    state.step += 1
    t = state.step
    b1, b2 = state.beta1, state.beta2
    c1 = 1 - b1 ** t
    c2 = 1 - b2 ** t
    with torch.no_grad():
        for k, p in params.items():
            g = grads[k]
            m = state.m[k].mul_(b1).add_(g, alpha=1 - b1)
            v = state.v[k].mul_(b2).addcmul_(g, g, value=1 - b2)
            p.sub_(lr * (m / c1) / ((v / c2).sqrt() + state.eps))
