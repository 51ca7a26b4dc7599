"""Side-by-side input/output scatter plots with position-matched colors."""

from __future__ import annotations

import numpy as np


def position_colors(points: np.ndarray, radius_scale: float = 4.0) -> np.ndarray:
    """RGB colors: hue from the input angle, brightness from the input radius."""
    from matplotlib.colors import hsv_to_rgb

    p = np.asarray(points, dtype=float)
    hue = (np.arctan2(p[:, 1], p[:, 0]) + np.pi) / (2 * np.pi)
    r = np.clip(np.hypot(p[:, 0], p[:, 1]) / radius_scale, 0.0, 1.0)
    hsv = np.stack([hue, np.full_like(hue, 0.85), 0.3 + 0.7 * r], axis=1)
    return hsv_to_rgb(hsv)


def plot_pairs(inputs: np.ndarray, outputs: np.ndarray, path: str, title: str | None = None,
               limit: float = 4.0) -> None:
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    colors = position_colors(inputs)
    fig, axes = plt.subplots(1, 2, figsize=(8, 4), dpi=100)
    for ax, pts, label in zip(axes, (inputs, outputs), ("input", "output")):
        ax.scatter(pts[:, 0], pts[:, 1], c=colors, s=1.5, linewidths=0)
        ax.set_xlim(-limit, limit)
        ax.set_ylim(-limit, limit)
        ax.set_aspect("equal")
        ax.set_title(label)
    if title:
        fig.suptitle(title)
    fig.tight_layout()
    fig.savefig(path, metadata={"Software": None})
    plt.close(fig)
