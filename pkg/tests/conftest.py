import numpy as np
import pytest
import torch

from flowbridge.distributions import FlowDensity
from flowbridge.transforms import Architecture, CompositeTransform


def randomize(module: torch.nn.Module, seed: int, scale: float = 0.3) -> torch.nn.Module:
    """Give every parameter (including the zero-initialized output layers) a random value."""
    g = torch.Generator().manual_seed(seed)
    with torch.no_grad():
        for p in module.parameters():
            p.copy_(p + scale * torch.randn(p.shape, generator=g, dtype=p.dtype))
    return module


def small_arch(**kw) -> Architecture:
    base = dict(dim=2, layers=2, hidden=16, blocks=1, bins=8, tail_bound=4.0, context=0)
    base.update(kw)
    return Architecture(**base)


def central_difference(f, x: np.ndarray, h: float = 1e-5) -> np.ndarray:
    """Gradient of scalar f at x by central differences, coordinate by coordinate."""
    x = np.array(x, dtype=float)
    g = np.zeros_like(x)
    for i in np.ndindex(x.shape):
        xp, xm = x.copy(), x.copy()
        xp[i] += h
        xm[i] -= h
        g[i] = (f(xp) - f(xm)) / (2 * h)
    return g


@pytest.fixture
def random_transform():
    return randomize(CompositeTransform(small_arch(), seed=3), seed=11)


@pytest.fixture
def random_density(random_transform):
    return FlowDensity(random_transform)


ACCEPTANCE_LINES: list[str] = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)
