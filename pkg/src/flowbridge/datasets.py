"""Seeded 2D toy distributions, their rotated / radially scaled families, and support oracles.

Every generator truncates its noise at ``NOISE_CUTOFF`` standard deviations, so the
support of a distribution is the band of that half-width around its skeleton
(segments, circles, a spiral curve) or, for the checkerboard, the union of
occupied cells. Membership tests are exact against that support.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
from scipy.spatial import cKDTree

from .distributions import rng

NAMES = ("checkerboard", "four_circles", "ring", "concentric_rings", "spirals", "star", "eight_star")
MODES = ("rotation", "radial_scale")
DEFAULT_RANGES = {"rotation": (0.0, 45.0), "radial_scale": (0.5, 1.5)}
NOISE_CUTOFF = 3.0
BOX = 4.0

FOUR_CIRCLES_CENTERS = np.array([[1.5, 1.5], [-1.5, 1.5], [-1.5, -1.5], [1.5, -1.5]])
FOUR_CIRCLES_RADIUS, FOUR_CIRCLES_SIGMA = 1.5, 0.1
RING_RADIUS, RING_SIGMA = 3.0, 0.2
CONCENTRIC_RADII, CONCENTRIC_SIGMA = (1.5, 3.0), 0.15
SPIRAL_RATE, SPIRAL_T, SPIRAL_SIGMA = 0.35, (1.0, 10.0), 0.1
STAR_LENGTH, STAR_SIGMA = 3.5, 0.1
STAR_ARMS = {"star": 5, "eight_star": 8}

NOISE_SIGMA = {
    "checkerboard": 0.0,
    "four_circles": FOUR_CIRCLES_SIGMA,
    "ring": RING_SIGMA,
    "concentric_rings": CONCENTRIC_SIGMA,
    "spirals": SPIRAL_SIGMA,
    "star": STAR_SIGMA,
    "eight_star": STAR_SIGMA,
}


@dataclass(frozen=True)
class DatasetSpec:
    name: str
    n: int
    seed: int = 0

    def __post_init__(self):
        if self.name not in NAMES:
            raise ValueError(f"unknown dataset {self.name!r}; choose from {', '.join(NAMES)}")
        if self.n <= 0:
            raise ValueError("n must be positive")


@dataclass(frozen=True)
class ConditionalDatasetSpec:
    base: DatasetSpec
    mode: str = "rotation"
    cmin: float | None = None
    cmax: float | None = None

    def __post_init__(self):
        if self.mode not in MODES:
            raise ValueError(f"unknown conditional mode {self.mode!r}; choose from {', '.join(MODES)}")
        lo, hi = DEFAULT_RANGES[self.mode]
        object.__setattr__(self, "cmin", lo if self.cmin is None else float(self.cmin))
        object.__setattr__(self, "cmax", hi if self.cmax is None else float(self.cmax))
        if not self.cmin <= self.cmax:
            raise ValueError("cmin must not exceed cmax")
        if self.mode == "radial_scale" and self.cmin <= 0:
            raise ValueError("radial scale factors must be positive")

    @property
    def range(self) -> tuple[float, float]:
        return self.cmin, self.cmax


def _truncated_normal(g: np.random.Generator, size, cutoff: float = NOISE_CUTOFF) -> np.ndarray:
    out = g.standard_normal(size)
    bad = np.abs(out) > cutoff
    while bad.any():
        out[bad] = g.standard_normal(int(bad.sum()))
        bad = np.abs(out) > cutoff
    return out


def _isotropic_truncated(g: np.random.Generator, n: int, cutoff: float = NOISE_CUTOFF) -> np.ndarray:
    out = g.standard_normal((n, 2))
    bad = np.hypot(out[:, 0], out[:, 1]) > cutoff
    while bad.any():
        out[bad] = g.standard_normal((int(bad.sum()), 2))
        bad = np.hypot(out[:, 0], out[:, 1]) > cutoff
    return out


def _polar(r: np.ndarray, theta: np.ndarray) -> np.ndarray:
    return np.stack([r * np.cos(theta), r * np.sin(theta)], axis=1)


def _checker_cells() -> np.ndarray:
    cells = [(i, j) for i in range(4) for j in range(4) if (i + j) % 2 == 0]
    return np.array(cells, dtype=float) * 2.0 - BOX


def _star_angles(arms: int) -> np.ndarray:
    return math.pi / 2 + 2 * math.pi * np.arange(arms) / arms


def _spiral_curve(t: np.ndarray, arm: np.ndarray | int) -> np.ndarray:
    return _polar(SPIRAL_RATE * t, t + math.pi * np.asarray(arm))


def sample(spec: DatasetSpec) -> np.ndarray:
    """Draw ``spec.n`` i.i.d. points of the named distribution, shape (n, 2)."""
    g = rng(spec.seed)
    n, name = spec.n, spec.name
    if name == "checkerboard":
        corners = _checker_cells()[g.integers(0, 8, n)]
        return corners + 2.0 * g.random((n, 2))
    if name == "four_circles":
        centers = FOUR_CIRCLES_CENTERS[g.integers(0, 4, n)]
        theta = 2 * math.pi * g.random(n)
        r = FOUR_CIRCLES_RADIUS + FOUR_CIRCLES_SIGMA * _truncated_normal(g, n)
        return centers + _polar(r, theta)
    if name == "ring":
        theta = 2 * math.pi * g.random(n)
        return _polar(RING_RADIUS + RING_SIGMA * _truncated_normal(g, n), theta)
    if name == "concentric_rings":
        radii = np.asarray(CONCENTRIC_RADII)[g.integers(0, 2, n)]
        theta = 2 * math.pi * g.random(n)
        return _polar(radii + CONCENTRIC_SIGMA * _truncated_normal(g, n), theta)
    if name == "spirals":
        arm = g.integers(0, 2, n)
        t = g.uniform(*SPIRAL_T, n)
        return _spiral_curve(t, arm) + SPIRAL_SIGMA * _isotropic_truncated(g, n)
    # star / eight_star
    angles = _star_angles(STAR_ARMS[name])[g.integers(0, STAR_ARMS[name], n)]
    s = STAR_LENGTH * g.random(n)
    off = STAR_SIGMA * _truncated_normal(g, n)
    along = np.stack([np.cos(angles), np.sin(angles)], axis=1)
    perp = np.stack([-np.sin(angles), np.cos(angles)], axis=1)
    return s[:, None] * along + off[:, None] * perp


def _check_range(spec: ConditionalDatasetSpec, c: np.ndarray) -> None:
    if np.any(c < spec.cmin) or np.any(c > spec.cmax):
        raise ValueError(f"condition outside [{spec.cmin}, {spec.cmax}]")


def apply_condition(points: np.ndarray, mode: str, c) -> np.ndarray:
    """Rotate by ``c`` degrees about the origin, or multiply radii by ``c``."""
    c = np.asarray(c, dtype=float)
    if mode == "rotation":
        a = np.deg2rad(c)
        cos, sin = np.cos(a), np.sin(a)
        x, y = points[:, 0], points[:, 1]
        return np.stack([cos * x - sin * y, sin * x + cos * y], axis=1)
    if mode == "radial_scale":
        return points * (c[..., None] if c.ndim else c)
    raise ValueError(f"unknown conditional mode {mode!r}")


def undo_condition(points: np.ndarray, mode: str, c) -> np.ndarray:
    c = np.asarray(c, dtype=float)
    if mode == "rotation":
        return apply_condition(points, mode, -c)
    if mode == "radial_scale":
        return points / (c[..., None] if c.ndim else c)
    raise ValueError(f"unknown conditional mode {mode!r}")


def sample_conditions(spec: ConditionalDatasetSpec) -> np.ndarray:
    """Per-point conditions, uniform on the range, from a stream independent of the points."""
    g = rng(np.random.SeedSequence([spec.base.seed, 1]).generate_state(1)[0])
    return g.uniform(spec.cmin, spec.cmax, spec.base.n)


def sample_conditional(spec: ConditionalDatasetSpec, c=None) -> tuple[np.ndarray, np.ndarray]:
    """Base samples transformed per condition; returns (points, conditions).

    ``c`` may be a scalar, a per-point array, or None to draw conditions uniformly.
    """
    if c is None:
        c = sample_conditions(spec)
    c = np.broadcast_to(np.asarray(c, dtype=float), (spec.base.n,)).copy()
    _check_range(spec, c)
    return apply_condition(sample(spec.base), spec.mode, c), c


# -- support oracles ----------------------------------------------------------

def _dist_to_boxes(p: np.ndarray, corners: np.ndarray, side: float) -> np.ndarray:
    lo = corners[None, :, :]
    hi = lo + side
    d = np.maximum(np.maximum(lo - p[:, None, :], p[:, None, :] - hi), 0.0)
    return np.sqrt((d ** 2).sum(-1)).min(axis=1)


def _dist_to_segments(p: np.ndarray, angles: np.ndarray, length: float) -> np.ndarray:
    u = np.stack([np.cos(angles), np.sin(angles)], axis=1)
    s = np.clip(p @ u.T, 0.0, length)
    proj = s[:, :, None] * u[None, :, :]
    return np.sqrt(((p[:, None, :] - proj) ** 2).sum(-1)).min(axis=1)


_SPIRAL_TREE: tuple[cKDTree, np.ndarray, np.ndarray] | None = None


def _spiral_tree():
    global _SPIRAL_TREE
    if _SPIRAL_TREE is None:
        t = np.linspace(*SPIRAL_T, 50_001)
        ts = np.concatenate([t, t])
        arms = np.repeat([0, 1], t.size)
        _SPIRAL_TREE = (cKDTree(_spiral_curve(ts, arms)), ts, arms)
    return _SPIRAL_TREE


def _dist_to_spiral(p: np.ndarray) -> np.ndarray:
    tree, ts, arms = _spiral_tree()
    d0, idx = tree.query(p)
    t = ts[idx].copy()
    arm = arms[idx]
    lo, hi = SPIRAL_T
    # Newton refinement of the closest curve parameter
    for _ in range(8):
        phi = t + math.pi * arm
        r = SPIRAL_RATE * t
        cx, cy = r * np.cos(phi), r * np.sin(phi)
        dx, dy = SPIRAL_RATE * np.cos(phi) - r * np.sin(phi), SPIRAL_RATE * np.sin(phi) + r * np.cos(phi)
        ddx = -2 * SPIRAL_RATE * np.sin(phi) - r * np.cos(phi)
        ddy = 2 * SPIRAL_RATE * np.cos(phi) - r * np.sin(phi)
        ex, ey = cx - p[:, 0], cy - p[:, 1]
        g1 = ex * dx + ey * dy
        g2 = dx * dx + dy * dy + ex * ddx + ey * ddy
        step = np.where(g2 > 0, g1 / np.where(g2 > 0, g2, 1.0), 0.0)
        t = np.clip(t - step, lo, hi)
    d1 = np.linalg.norm(_spiral_curve(t, arm) - p, axis=1)
    return np.minimum(d0, d1)


def skeleton_distance(name: str, points: np.ndarray) -> np.ndarray:
    """Distance from each point to the noiseless skeleton (occupied cells for the checkerboard)."""
    p = np.asarray(points, dtype=float).reshape(-1, 2)
    if name == "checkerboard":
        return _dist_to_boxes(p, _checker_cells(), 2.0)
    if name == "four_circles":
        d = np.linalg.norm(p[:, None, :] - FOUR_CIRCLES_CENTERS[None], axis=-1)
        return np.abs(d - FOUR_CIRCLES_RADIUS).min(axis=1)
    if name == "ring":
        return np.abs(np.hypot(p[:, 0], p[:, 1]) - RING_RADIUS)
    if name == "concentric_rings":
        r = np.hypot(p[:, 0], p[:, 1])
        return np.min([np.abs(r - rad) for rad in CONCENTRIC_RADII], axis=0)
    if name == "spirals":
        return _dist_to_spiral(p)
    if name in STAR_ARMS:
        return _dist_to_segments(p, _star_angles(STAR_ARMS[name]), STAR_LENGTH)
    raise ValueError(f"no support oracle for dataset {name!r}")


def support_membership(name: str, points, mode: str | None = None, c=None, tolerance: float = 0.0):
    """True where a point lies within ``tolerance`` of the distribution's support.

    The support already includes the truncated noise band (3 sigma of the
    generator's noise). With ``mode``/``c`` the support is rotated or scaled.
    Returns a bool for a single point, else a boolean array.
    """
    if name not in NOISE_SIGMA:
        raise ValueError(f"no support oracle for dataset {name!r}")
    p = np.asarray(points, dtype=float)
    single = p.ndim == 1
    p = p.reshape(-1, 2)
    if mode is not None:
        if c is None:
            raise ValueError("a condition value is required with a conditional mode")
        p = undo_condition(p, mode, c)
        if mode == "radial_scale":
            # distances shrink by the scale factor when mapping back
            tolerance = tolerance / np.asarray(c, dtype=float)
    band = NOISE_CUTOFF * NOISE_SIGMA[name]
    ok = skeleton_distance(name, p) <= band + tolerance
    return bool(ok[0]) if single else ok
