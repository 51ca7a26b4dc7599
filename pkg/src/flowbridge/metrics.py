"""Evaluation metrics: mean translation, out-of-support fraction, held-out NLL."""

from __future__ import annotations

import csv
import os
from dataclasses import asdict, dataclass, fields

import numpy as np
import torch

from . import datasets
from .diffcore import DTYPE, NonFiniteError


@dataclass
class EvalReport:
    mean_translation: float
    ood_fraction: float
    mean_nll: float
    n_points: int
    seed: int

    def __post_init__(self):
        if not 0.0 <= self.ood_fraction <= 1.0 and not np.isnan(self.ood_fraction):
            raise ValueError("ood_fraction must lie in [0, 1]")
        if self.n_points <= 0:
            raise ValueError("n_points must be positive")

    def to_text(self) -> str:
        return "\n".join(f"{f.name}: {getattr(self, f.name)!r}" for f in fields(self)) + "\n"


def _arr(a) -> np.ndarray:
    if isinstance(a, torch.Tensor):
        a = a.detach().cpu().numpy()
    return np.asarray(a, dtype=float)


def mean_translation(x, y) -> float:
    """Mean over points of the L1 displacement sum_d |x_d - y_d|."""
    x, y = _arr(x), _arr(y)
    if x.shape != y.shape:
        raise ValueError(f"shape mismatch: {x.shape} vs {y.shape}")
    return float(np.abs(x - y).sum(-1).mean())


def ood_fraction(points, name: str, mode: str | None = None, c=None, tolerance: float = 0.0) -> float:
    """Fraction of points outside the (rotated / scaled) support of ``name``."""
    p = _arr(points).reshape(-1, 2)
    inside = datasets.support_membership(name, p, mode=mode, c=c, tolerance=tolerance)
    return float(1.0 - np.mean(inside))


def mean_nll(density, points, c=None, batch_size: int = 4096) -> float:
    """Negative mean log-likelihood; raises on a non-finite log_prob, naming the point."""
    x = torch.as_tensor(_arr(points), dtype=DTYPE)
    cc = None if c is None else torch.as_tensor(_arr(c), dtype=DTYPE).reshape(-1)
    if cc is not None and cc.numel() == 1:
        cc = cc.expand(x.shape[0])
    bad = ~torch.isfinite(x).all(-1)
    if bool(bad.any()):
        j = int(bad.nonzero()[0, 0])
        raise NonFiniteError("mean_nll", f"log_prob at point {x[j].tolist()}")
    parts = []
    with torch.no_grad():
        for i in range(0, x.shape[0], batch_size):
            lp = density.log_prob(x[i:i + batch_size], None if cc is None else cc[i:i + batch_size])
            bad = ~torch.isfinite(lp)
            if bool(bad.any()):
                j = int(bad.nonzero()[0, 0]) + i
                raise NonFiniteError("mean_nll", f"log_prob at point {x[j].tolist()}")
            parts.append(lp)
    return float(-torch.cat(parts).mean())


RESULTS_COLUMNS = ("dataset", "model", "l1_weight", "seed", "mean_translation", "ood_fraction", "mean_nll", "n_points")


def append_results(path: str, dataset: str, model: str, l1_weight: float, report: EvalReport) -> None:
    """Append one row to a CSV results ledger, writing the header for a new file."""
    new = not os.path.exists(path) or os.path.getsize(path) == 0
    row = {"dataset": dataset, "model": model, "l1_weight": l1_weight, **asdict(report)}
    with open(path, "a", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=RESULTS_COLUMNS)
        if new:
            w.writeheader()
        w.writerow({k: row[k] for k in RESULTS_COLUMNS})
