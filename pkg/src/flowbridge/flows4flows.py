"""Flows whose base densities are themselves trained flows.

A transformer f maps data space X to Y. Trained flow densities on X and Y
(frozen) make both directions trainable by exact maximum likelihood:

    left  (x in X):  log p_Y(f(x)) + log|det J_f(x)|
    right (y in Y):  log p_X(f^-1(y)) + log|det J_{f^-1}(y)|

In ``delta`` mode f is conditioned on the condition difference
c_y - c_x. Negative differences are served by the inverse of the
transformer at the positive difference, so swapping the two conditions
always gives the exact inverse map, and equal conditions give the identity.
"""

from __future__ import annotations

import torch
from torch import nn

from . import diffcore as dc
from .diffcore import DTYPE, NonFiniteError, ParameterStore
from .distributions import FlowDensity
from .optim import OptimizerState, adam_step
from .penalty import PenaltyConfig, l1_penalty
from .transforms import CompositeTransform

CONDITION_MODES = ("none", "delta")


def _as_cond(c, n: int) -> torch.Tensor | None:
    if c is None:
        return None
    c = torch.as_tensor(c, dtype=DTYPE).reshape(-1)
    return c.expand(n) if c.numel() == 1 else c


class FlowForFlowModel(nn.Module):
    def __init__(self, transformer: CompositeTransform, density_x: FlowDensity, density_y: FlowDensity | None = None,
                 condition_mode: str = "none", condition_scale: float = 1.0):
        super().__init__()
        if condition_mode not in CONDITION_MODES:
            raise ValueError(f"condition_mode must be one of {CONDITION_MODES}")
        density_y = density_x if density_y is None else density_y
        if not transformer.dim == density_x.dim == density_y.dim:
            raise ValueError("transformer and base densities must share one dimension")
        if condition_mode == "delta" and transformer.arch.context != 1:
            raise ValueError("delta mode needs a transformer with one context feature")
        if condition_mode == "none" and transformer.arch.context:
            raise ValueError("an unconditional model needs an unconditional transformer")
        self.transformer = transformer
        self.density_x = density_x
        self.density_y = density_y
        self.condition_mode = condition_mode
        self.condition_scale = float(condition_scale)
        self.freeze_bases()

    @property
    def shared_base(self) -> bool:
        return self.density_x is self.density_y

    def freeze_bases(self) -> None:
        for d in (self.density_x, self.density_y):
            for p in d.parameters():
                p.requires_grad_(False)

    def transformer_params(self) -> ParameterStore:
        return ParameterStore.from_module(self.transformer)

    def embed(self, c_from: torch.Tensor, c_to: torch.Tensor) -> torch.Tensor:
        return ((c_to - c_from) / self.condition_scale).reshape(-1, 1)

    def apply(self, points: torch.Tensor, c_from=None, c_to=None, to_y: bool = True) -> tuple[torch.Tensor, torch.Tensor]:
        """Map points with the transformer; returns (mapped, log|det J|).

        Unconditional: ``to_y`` selects f (X -> Y) or f^-1 (Y -> X).
        Delta mode: conditions decide the direction; ``to_y`` is ignored.
        Equal conditions leave points unchanged.
        """
        points = torch.as_tensor(points, dtype=DTYPE)
        n = points.shape[0]
        if self.condition_mode == "none":
            return self.transformer.forward(points) if to_y else self.transformer.inverse(points)
        c_from, c_to = _as_cond(c_from, n), _as_cond(c_to, n)
        if c_from is None or c_to is None:
            raise ValueError("delta mode needs both conditions")
        if c_from.shape[0] != n or c_to.shape[0] != n:
            raise ValueError("condition count does not match point count")
        delta = self.embed(c_from, c_to)
        sign = torch.sign(delta[:, 0])
        # negative delta runs the inverse at |delta|; zero delta is exactly the identity
        if bool((sign > 0).all()):
            return self.transformer.forward(points, delta)
        if bool((sign < 0).all()):
            return self.transformer.inverse(points, -delta)
        out, logdet = points.clone(), points.new_zeros(n)
        for s_, run in ((1, self.transformer.forward), (-1, self.transformer.inverse)):
            idx = (sign == s_).nonzero()[:, 0]
            if idx.numel():
                y, ld = run(points[idx], delta[idx].abs())
                out = out.index_put((idx,), y)
                logdet = logdet.index_put((idx,), ld)
        return out, logdet


def _check_batch(lp: torch.Tensor, what: str) -> None:
    bad = ~torch.isfinite(lp)
    if bool(bad.any()):
        raise NonFiniteError(what, f"{int(bad.sum())} of {lp.numel()} batch entries non-finite")


def f4f_loss_left(m: FlowForFlowModel, x, c_x=None, c_y=None) -> torch.Tensor:
    """-mean[log p_Y(f(x)) + log|det J_f(x)|] over an X batch."""
    x = torch.as_tensor(x, dtype=DTYPE)
    c_x, c_y = _as_cond(c_x, x.shape[0]), _as_cond(c_y, x.shape[0])
    y, logdet = m.apply(x, c_x, c_y, to_y=True)
    lp = m.density_y.log_prob(y, c_y) + logdet
    _check_batch(lp, "left likelihood")
    return -lp.mean()


def f4f_loss_right(m: FlowForFlowModel, y, c_x=None, c_y=None) -> torch.Tensor:
    """-mean[log p_X(f^-1(y)) + log|det J_{f^-1}(y)|] over a Y batch."""
    y = torch.as_tensor(y, dtype=DTYPE)
    c_x, c_y = _as_cond(c_x, y.shape[0]), _as_cond(c_y, y.shape[0])
    x, logdet = m.apply(y, c_y, c_x, to_y=False)
    lp = m.density_x.log_prob(x, c_x) + logdet
    _check_batch(lp, "right likelihood")
    return -lp.mean()


def step_loss(m: FlowForFlowModel, step: int, batch_x, batch_y, c_x=None, c_y=None,
              penalty: PenaltyConfig = PenaltyConfig()) -> torch.Tensor:
    """Objective of one training step: even steps go X -> Y, odd steps Y -> X.

    ``c_x``/``c_y`` are the conditions attached to the X and Y batches; the
    active direction pairs its batch with the other batch's conditions.
    """
    if step % 2 == 0:
        inp = torch.as_tensor(batch_x, dtype=DTYPE)
        out, logdet = m.apply(inp, c_x, c_y, to_y=True)
        target, c_target = m.density_y, c_y
    else:
        inp = torch.as_tensor(batch_y, dtype=DTYPE)
        out, logdet = m.apply(inp, c_y, c_x, to_y=False)
        target, c_target = m.density_x, c_x
    loss = inp.new_zeros(())
    if penalty.likelihood:
        lp = target.log_prob(out, _as_cond(c_target, inp.shape[0])) + logdet
        _check_batch(lp, "left likelihood" if step % 2 == 0 else "right likelihood")
        loss = loss - lp.mean()
    if penalty.l1_weight > 0:
        loss = loss + l1_penalty(inp, out, penalty.l1_weight)
    return loss


def train_step(m: FlowForFlowModel, state: OptimizerState, batch_x, batch_y, lr: float, c_x=None, c_y=None,
               penalty: PenaltyConfig = PenaltyConfig(), grad_clip: float = 5.0,
               params: ParameterStore | None = None) -> tuple[float, float]:
    """One clipped Adam step on the transformer; returns (loss, pre-clip grad norm).

    The direction is taken from ``state.step`` parity.
    """
    params = params if params is not None else m.transformer_params()
    step = state.step
    value, g = dc.value_and_grad(lambda: step_loss(m, step, batch_x, batch_y, c_x, c_y, penalty), params)
    g, norm = dc.clip_grad_norm(g, grad_clip)
    adam_step(params, g, state, lr)
    return value, norm


def transfer(m: FlowForFlowModel, x, c_x=None, c_y=None) -> torch.Tensor:
    """Move X points (at condition c_x) to Y (at condition c_y)."""
    with torch.no_grad():
        y, _ = m.apply(torch.as_tensor(x, dtype=DTYPE), c_x, c_y, to_y=True)
    return y


def transfer_back(m: FlowForFlowModel, y, c_x=None, c_y=None) -> torch.Tensor:
    """Inverse of :func:`transfer`."""
    with torch.no_grad():
        x, _ = m.apply(torch.as_tensor(y, dtype=DTYPE), c_y, c_x, to_y=False)
    return x


def base_transfer(density_x: FlowDensity, density_y: FlowDensity, x, c_x=None, c_y=None) -> torch.Tensor:
    """Encode with density_x into its normal latent space, decode with density_y."""
    x = torch.as_tensor(x, dtype=DTYPE)
    n = x.shape[0]
    with torch.no_grad():
        z = density_x.encode(x, _as_cond(c_x, n))
        return density_y.decode(z, _as_cond(c_y, n))
