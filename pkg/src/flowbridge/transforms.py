"""Monotone rational-quadratic spline transforms driven by masked autoregressive networks."""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
import torch
from torch import nn

from . import diffcore as dc
from .diffcore import DTYPE

MIN_BIN_WIDTH = 1e-3
MIN_BIN_HEIGHT = 1e-3
MIN_DERIVATIVE = 1e-3
# softplus(0 + shift) + MIN_DERIVATIVE == 1, so zero outputs give unit slopes
_DERIV_SHIFT = math.log(math.expm1(1.0 - MIN_DERIVATIVE))


@dataclass
class SplineParams:
    """Constrained spline parameters; leading dims broadcast against the inputs.

    widths, heights: (..., K), positive, each summing to 2 * tail_bound.
    derivatives: (..., K + 1), positive.
    """

    widths: torch.Tensor
    heights: torch.Tensor
    derivatives: torch.Tensor
    tail_bound: float = 4.0

    @property
    def num_bins(self) -> int:
        return self.widths.shape[-1]

    def validate(self) -> None:
        k = self.num_bins
        if self.heights.shape[-1] != k or self.derivatives.shape[-1] != k + 1:
            raise ValueError("spline parameter shapes do not agree (need K, K, K+1)")
        if not self.tail_bound > 0:
            raise ValueError("tail_bound must be positive")
        for name in ("widths", "heights", "derivatives"):
            v = getattr(self, name)
            if not bool(torch.isfinite(v).all()) or not bool((v > 0).all()):
                raise ValueError(f"spline {name} must be finite and strictly positive")
        span = 2 * self.tail_bound
        for name in ("widths", "heights"):
            s = getattr(self, name).sum(-1)
            if not torch.allclose(s, torch.full_like(s, span), rtol=1e-9, atol=1e-9):
                raise ValueError(f"spline {name} must sum to 2 * tail_bound")

    @classmethod
    def identity(cls, num_bins: int = 8, tail_bound: float = 4.0) -> "SplineParams":
        w = torch.full((num_bins,), 2 * tail_bound / num_bins, dtype=DTYPE)
        return cls(w, w.clone(), torch.ones(num_bins + 1, dtype=DTYPE), tail_bound)


def spline_params(unconstrained: torch.Tensor, num_bins: int, tail_bound: float) -> SplineParams:
    """Map unconstrained (..., 3K+1) values to valid spline parameters."""
    k = num_bins
    uw, uh, ud = unconstrained[..., :k], unconstrained[..., k:2 * k], unconstrained[..., 2 * k:]
    span = 2 * tail_bound
    widths = span * (MIN_BIN_WIDTH + (1 - MIN_BIN_WIDTH * k) * dc.softmax(uw))
    heights = span * (MIN_BIN_HEIGHT + (1 - MIN_BIN_HEIGHT * k) * dc.softmax(uh))
    derivs = MIN_DERIVATIVE + dc.softplus(ud + _DERIV_SHIFT)
    return SplineParams(widths, heights, derivs, tail_bound)


def _knots(sizes: torch.Tensor, bound: float) -> torch.Tensor:
    cum = torch.cumsum(sizes, dim=-1)
    cum = torch.nn.functional.pad(cum, (1, 0), value=0.0) - bound
    # pin the end knots so the partition of [-B, B] is exact
    first = torch.full_like(cum[..., :1], -bound)
    last = torch.full_like(cum[..., :1], bound)
    return torch.cat([first, cum[..., 1:-1], last], dim=-1)


def _gather(t: torch.Tensor, idx: torch.Tensor) -> torch.Tensor:
    return t.gather(-1, idx.unsqueeze(-1)).squeeze(-1)


def _rqs(x: torch.Tensor, p: SplineParams, inverse: bool) -> tuple[torch.Tensor, torch.Tensor]:
    """Elementwise spline on ``x`` with params of shape x.shape + (K,) etc."""
    bound = p.tail_bound
    if p.widths.shape[:-1] != x.shape:
        p = SplineParams(p.widths.expand(*x.shape, -1), p.heights.expand(*x.shape, -1),
                         p.derivatives.expand(*x.shape, -1), bound)
    inside = (x >= -bound) & (x <= bound)
    xc = x.clamp(-bound, bound)

    cw = _knots(p.widths, bound)
    ch = _knots(p.heights, bound)
    knots = ch if inverse else cw
    # bin search; the last knot is nudged so x == B lands in bin K-1
    search = knots.detach().clone()
    search[..., -1] += 1e-6
    idx = (torch.sum(xc.detach().unsqueeze(-1) >= search, dim=-1) - 1).clamp(0, p.num_bins - 1)

    x_k = _gather(cw, idx)
    w_k = _gather(p.widths, idx)
    y_k = _gather(ch, idx)
    h_k = _gather(p.heights, idx)
    d_k = _gather(p.derivatives, idx)
    d_k1 = _gather(p.derivatives, idx + 1)
    delta = h_k / w_k

    if not inverse:
        theta = (xc - x_k) / w_k
        t1mt = theta * (1 - theta)
        num = h_k * (delta * theta.pow(2) + d_k * t1mt)
        den = delta + (d_k + d_k1 - 2 * delta) * t1mt
        out = y_k + num / den
        dnum = delta.pow(2) * (d_k1 * theta.pow(2) + 2 * delta * t1mt + d_k * (1 - theta).pow(2))
        logdet = dc.log(dnum) - 2 * dc.log(den)
    else:
        dy = xc - y_k
        s = d_k1 + d_k - 2 * delta
        a = h_k * (delta - d_k) + dy * s
        b = h_k * d_k - dy * s
        c = -delta * dy
        disc = (b.pow(2) - 4 * a * c).clamp_min(0.0)
        theta = (2 * c) / (-b - torch.sqrt(disc))
        out = theta * w_k + x_k
        t1mt = theta * (1 - theta)
        den = delta + s * t1mt
        dnum = delta.pow(2) * (d_k1 * theta.pow(2) + 2 * delta * t1mt + d_k * (1 - theta).pow(2))
        logdet = -(dc.log(dnum) - 2 * dc.log(den))

    out = torch.where(inside, out, x)
    logdet = torch.where(inside, logdet, torch.zeros_like(logdet))
    return out, logdet


def rqs_forward(x: torch.Tensor, p: SplineParams) -> tuple[torch.Tensor, torch.Tensor]:
    """Monotone spline y(x) with identity tails outside [-B, B]; returns (y, log dy/dx)."""
    p.validate()
    return _rqs(torch.as_tensor(x, dtype=DTYPE), p, inverse=False)


def rqs_inverse(y: torch.Tensor, p: SplineParams) -> tuple[torch.Tensor, torch.Tensor]:
    """Inverse of :func:`rqs_forward`; returns (x, log dx/dy)."""
    p.validate()
    return _rqs(torch.as_tensor(y, dtype=DTYPE), p, inverse=True)


# -- masked networks ----------------------------------------------------------

class MaskedLinear(nn.Linear):
    def __init__(self, in_features: int, out_features: int, mask: torch.Tensor):
        super().__init__(in_features, out_features, dtype=DTYPE)
        self.register_buffer("mask", mask.to(DTYPE))

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        return dc.affine(x, self.weight * self.mask, self.bias)


def _init_affine(layer: nn.Linear, gen: torch.Generator, zero: bool = False) -> None:
    with torch.no_grad():
        if zero:
            layer.weight.zero_()
        else:
            bound = 1.0 / math.sqrt(layer.in_features)
            layer.weight.copy_(torch.rand(layer.weight.shape, generator=gen, dtype=DTYPE) * 2 * bound - bound)
        layer.bias.zero_()


class MaskedResidualNet(nn.Module):
    """Residual MADE: outputs for dimension d see inputs < d and the context.

    Hidden units carry a degree m; a unit of degree m sees inputs 0..m-1.
    Degree-0 units exist only when there is a context, so that every output
    dimension can depend on it.
    """

    def __init__(self, dim: int, out_per_dim: int, hidden: int = 128, blocks: int = 2,
                 context: int = 0, seed: int = 0):
        super().__init__()
        self.dim, self.out_per_dim, self.context = dim, out_per_dim, context
        lo = 0 if context else 1
        span = max(dim - lo, 1)
        hid_deg = torch.arange(hidden) % span + lo
        if dim == 1 and not context:
            hid_deg = torch.zeros(hidden, dtype=torch.long)
        in_deg = torch.arange(1, dim + 1)
        out_deg = torch.arange(dim).repeat_interleave(out_per_dim)

        self.initial = MaskedLinear(dim, hidden, (hid_deg[:, None] >= in_deg[None, :]))
        hh = hid_deg[:, None] >= hid_deg[None, :]
        self.blocks = nn.ModuleList()
        for _ in range(blocks):
            self.blocks.append(nn.ModuleList([MaskedLinear(hidden, hidden, hh), MaskedLinear(hidden, hidden, hh)]))
        self.final = MaskedLinear(hidden, dim * out_per_dim, (out_deg[:, None] >= hid_deg[None, :]))
        if context:
            self.ctx_initial = nn.Linear(context, hidden, dtype=DTYPE)
            self.ctx_blocks = nn.ModuleList([nn.Linear(context, hidden, dtype=DTYPE) for _ in range(blocks)])

        gen = torch.Generator().manual_seed(int(seed))
        _init_affine(self.initial, gen)
        for a, b in self.blocks:
            _init_affine(a, gen)
            _init_affine(b, gen)
        if context:
            _init_affine(self.ctx_initial, gen)
            for lin in self.ctx_blocks:
                _init_affine(lin, gen)
        _init_affine(self.final, gen, zero=True)

    def forward(self, x: torch.Tensor, c: torch.Tensor | None = None) -> torch.Tensor:
        h = self.initial(x)
        if self.context:
            h = h + self.ctx_initial(c)
        for i, (a, b) in enumerate(self.blocks):
            t = a(dc.relu(h))
            if self.context:
                t = t + self.ctx_blocks[i](c)
            h = h + b(dc.relu(t))
        out = self.final(dc.relu(h))
        return out.view(x.shape[0], self.dim, self.out_per_dim)


class AutoregressiveSplineLayer(nn.Module):
    """y_d = spline(x_d; params(x_<d, c)), optionally in reversed dimension order."""

    def __init__(self, dim: int, hidden: int = 128, blocks: int = 2, bins: int = 8,
                 tail_bound: float = 4.0, context: int = 0, reverse: bool = False, seed: int = 0):
        super().__init__()
        self.dim, self.bins, self.tail_bound, self.reverse = dim, bins, tail_bound, reverse
        self.net = MaskedResidualNet(dim, 3 * bins + 1, hidden, blocks, context, seed)

    def _order(self, x: torch.Tensor) -> torch.Tensor:
        return x.flip(-1) if self.reverse else x

    def _params(self, x: torch.Tensor, c: torch.Tensor | None) -> SplineParams:
        return spline_params(self.net(x, c), self.bins, self.tail_bound)

    def forward(self, x: torch.Tensor, c: torch.Tensor | None = None) -> tuple[torch.Tensor, torch.Tensor]:
        xo = self._order(x)
        y, ld = _rqs(xo, self._params(xo, c), inverse=False)
        return self._order(y), ld.sum(-1)

    def inverse(self, y: torch.Tensor, c: torch.Tensor | None = None) -> tuple[torch.Tensor, torch.Tensor]:
        yo = self._order(y)
        n = yo.shape[0]
        cols: list[torch.Tensor] = []
        lds: list[torch.Tensor] = []
        for d in range(self.dim):
            if d == 0 and c is None:
                # first-dimension params depend on nothing: evaluate once and broadcast
                p = self._params(yo.new_zeros(1, self.dim), None)
                p = SplineParams(p.widths.expand(n, -1, -1), p.heights.expand(n, -1, -1),
                                 p.derivatives.expand(n, -1, -1), self.tail_bound)
            else:
                pad = yo.new_zeros(n, self.dim - d)
                partial = torch.cat(cols + [pad], dim=-1) if cols else pad
                p = self._params(partial, c)
            pd = SplineParams(p.widths[:, d], p.heights[:, d], p.derivatives[:, d], self.tail_bound)
            xd, ld = _rqs(yo[:, d], pd, inverse=True)
            cols.append(xd.unsqueeze(-1))
            lds.append(ld)
        x = torch.cat(cols, dim=-1)
        return self._order(x), torch.stack(lds, -1).sum(-1)


@dataclass(frozen=True)
class Architecture:
    dim: int = 2
    layers: int = 4
    hidden: int = 128
    blocks: int = 2
    bins: int = 8
    tail_bound: float = 4.0
    context: int = 0

    @classmethod
    def preset(cls, name: str = "standard", **overrides) -> "Architecture":
        if name == "standard":
            base = cls()
        elif name == "bigger":
            base = cls(layers=5, blocks=3)
        else:
            raise ValueError(f"unknown architecture preset {name!r}")
        return cls(**{**base.__dict__, **overrides})


class CompositeTransform(nn.Module):
    """Stack of autoregressive spline layers; odd layers use reversed order."""

    def __init__(self, arch: Architecture, seed: int = 0):
        super().__init__()
        self.arch = arch
        seeds = np.random.SeedSequence(seed).generate_state(arch.layers)
        self.layers = nn.ModuleList(
            AutoregressiveSplineLayer(arch.dim, arch.hidden, arch.blocks, arch.bins, arch.tail_bound,
                                      arch.context, reverse=bool(i % 2), seed=int(s))
            for i, s in enumerate(seeds)
        )

    @property
    def dim(self) -> int:
        return self.arch.dim

    def _check(self, x: torch.Tensor, c: torch.Tensor | None) -> None:
        if x.dim() != 2 or x.shape[1] != self.arch.dim:
            raise ValueError(f"expected points of shape (n, {self.arch.dim}), got {tuple(x.shape)}")
        if self.arch.context:
            if c is None or c.dim() != 2 or c.shape != (x.shape[0], self.arch.context):
                raise ValueError(f"expected condition of shape ({x.shape[0]}, {self.arch.context})")
        elif c is not None:
            raise ValueError("transform is unconditional but a condition was given")

    def forward(self, x: torch.Tensor, c: torch.Tensor | None = None) -> tuple[torch.Tensor, torch.Tensor]:
        self._check(x, c)
        logdet = x.new_zeros(x.shape[0])
        for layer in self.layers:
            x, ld = layer(x, c)
            logdet = logdet + ld
        return x, logdet

    def inverse(self, y: torch.Tensor, c: torch.Tensor | None = None) -> tuple[torch.Tensor, torch.Tensor]:
        self._check(y, c)
        logdet = y.new_zeros(y.shape[0])
        for layer in reversed(self.layers):
            y, ld = layer.inverse(y, c)
            logdet = logdet + ld
        return y, logdet


def transform_forward(t: CompositeTransform, x, c=None) -> tuple[torch.Tensor, torch.Tensor]:
    return t.forward(torch.as_tensor(x, dtype=DTYPE), None if c is None else torch.as_tensor(c, dtype=DTYPE))


def transform_inverse(t: CompositeTransform, y, c=None) -> tuple[torch.Tensor, torch.Tensor]:
    return t.inverse(torch.as_tensor(y, dtype=DTYPE), None if c is None else torch.as_tensor(c, dtype=DTYPE))
