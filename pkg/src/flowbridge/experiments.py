"""Multi-model experiment pipelines: the identity-map translation table and the rotated-conditional comparison."""

from __future__ import annotations

import csv
import dataclasses
import hashlib
import json
import logging
import math
import os
from dataclasses import dataclass, field

import torch

from . import checkpoint, datasets
from .config import ExperimentConfig, derive_seed
from .metrics import ood_fraction
from .penalty import PenaltyConfig
from .trainer import (evaluate_base_transfer, evaluate_f4f, load_density, load_f4f, train_base, train_f4f,
                      eval_conditions)

log = logging.getLogger(__name__)

TABLE1_COLUMNS = ("dataset", "seed", "flow4flow", "flow4flow_l1", "base_transfer", "l1_only")
RATIO_FLAG = 5.0


@dataclass
class Table1Config:
    datasets: list[str] = field(default_factory=lambda: ["four_circles", "checkerboard"])
    seeds: list[int] = field(default_factory=lambda: [0, 1, 2])
    full: bool = False
    l1_weight: float = 1.0
    base_epochs: int = 10
    f4f_epochs: int = 20
    l1_only_epochs: int = 20

    def resolved_datasets(self) -> list[str]:
        return list(datasets.NAMES) if self.full else list(self.datasets)


def config_hash(cfg: ExperimentConfig) -> str:
    d = cfg.to_dict()
    d.pop("output", None)
    return hashlib.sha256(json.dumps(d, sort_keys=True).encode()).hexdigest()[:16]


def _cached(path: str, chash: str) -> bool:
    if not os.path.exists(path):
        return False
    try:
        header, _ = checkpoint.read(path)
    except (ValueError, OSError):
        return False
    meta = header.get("metadata", {})
    return meta.get("config_hash") == chash and meta.get("epochs_done") == meta.get("epochs")


def _stamp(path: str, chash: str) -> None:
    header, arrays = checkpoint.read(path)
    meta = dict(header["metadata"], config_hash=chash)
    checkpoint.write(path, header["kind"], arrays, header["config"], header["seed"], meta)


def _variant(cfg: ExperimentConfig, **trainer_and_penalty) -> ExperimentConfig:
    t = {k: v for k, v in trainer_and_penalty.items() if k in {f.name for f in dataclasses.fields(cfg.trainer)}}
    p = {k: v for k, v in trainer_and_penalty.items() if k in {f.name for f in dataclasses.fields(PenaltyConfig)}}
    return dataclasses.replace(cfg, trainer=dataclasses.replace(cfg.trainer, **t),
                               penalty=dataclasses.replace(cfg.penalty, **p))


def ensure_base(cfg: ExperimentConfig, side: str, path: str):
    h = config_hash(cfg) + f"-base-{side}"
    if not _cached(path, h):
        train_base(cfg, side, path, path.replace(".ckpt", ".jsonl"))
        _stamp(path, h)
    return load_density(path)[0]


def ensure_f4f(cfg: ExperimentConfig, dx, dy, path: str, base_headers=None):
    h = config_hash(cfg) + "-f4f"
    if not _cached(path, h):
        train_f4f(cfg, dx, dy, path, path.replace(".ckpt", ".jsonl"), base_headers)
        _stamp(path, h)
    return load_f4f(path)[0]


def identity_row(base_cfg: ExperimentConfig, name: str, seed: int, t1: Table1Config, out_dir: str) -> dict:
    """Train both bases and the three transformer variants for one (dataset, seed); return translations."""
    cfg = dataclasses.replace(base_cfg, dataset=dataclasses.replace(base_cfg.dataset, x=name, y=name, mode=None))
    cfg = _variant(cfg, seed=seed)
    d = os.path.join(out_dir, name, f"seed{seed}")
    bcfg = _variant(cfg, epochs=t1.base_epochs)
    dx = ensure_base(bcfg, "x", os.path.join(d, "base_x.ckpt"))
    dy = ensure_base(bcfg, "y", os.path.join(d, "base_y.ckpt"))
    headers = (checkpoint.read(os.path.join(d, "base_x.ckpt"))[0]["config"],
               checkpoint.read(os.path.join(d, "base_y.ckpt"))[0]["config"])
    row = {"dataset": name, "seed": seed}
    variants = {
        "flow4flow": _variant(cfg, epochs=t1.f4f_epochs, l1_weight=0.0, likelihood=True),
        "flow4flow_l1": _variant(cfg, epochs=t1.f4f_epochs, l1_weight=t1.l1_weight, likelihood=True),
        "l1_only": _variant(cfg, epochs=t1.l1_only_epochs, l1_weight=t1.l1_weight, likelihood=False),
    }
    for col, vcfg in variants.items():
        model = ensure_f4f(vcfg, dx, dy, os.path.join(d, f"{col}.ckpt"), headers)
        row[col] = evaluate_f4f(model, vcfg).mean_translation
    row["base_transfer"] = evaluate_base_transfer(dx, dy, cfg).mean_translation
    return row


def seed_ratio_flags(rows: list[dict], columns=("flow4flow", "flow4flow_l1", "base_transfer", "l1_only"),
                     threshold: float = RATIO_FLAG) -> list[str]:
    """Lines describing every (dataset, metric) whose max/min across seeds exceeds ``threshold``."""
    flags = []
    for name in sorted({r["dataset"] for r in rows}):
        sub = [r for r in rows if r["dataset"] == name]
        if len(sub) < 2:
            continue
        for col in columns:
            vals = [float(r[col]) for r in sub]
            lo, hi = min(vals), max(vals)
            if hi == lo:
                continue
            ratio = math.inf if lo <= 0 else hi / lo
            if ratio > threshold:
                flags.append(f"FLAG {name} {col}: across-seed ratio {ratio:.3g} > {threshold:g} "
                             f"(min {lo:.4g}, max {hi:.4g})")
    return flags


def write_table1(rows: list[dict], path: str) -> str:
    os.makedirs(os.path.dirname(os.path.abspath(path)), exist_ok=True)
    with open(path, "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=TABLE1_COLUMNS)
        w.writeheader()
        for r in rows:
            w.writerow({k: (repr(float(r[k])) if isinstance(r[k], float) else r[k]) for k in TABLE1_COLUMNS})
    flags = seed_ratio_flags(rows)
    report = os.path.splitext(path)[0] + "_report.txt"
    with open(report, "w") as fh:
        for r in rows:
            fh.write(" ".join(f"{k}={r[k]}" for k in TABLE1_COLUMNS) + "\n")
        fh.write("\n".join(flags) + ("\n" if flags else "no metric varies by more than "
                                     f"{RATIO_FLAG:g}x across seeds\n"))
    return report


def reproduce_table1(cfg: ExperimentConfig, t1: Table1Config, out_csv: str, work_dir: str | None = None) -> list[dict]:
    work_dir = work_dir or os.path.join(os.path.dirname(os.path.abspath(out_csv)), "table1_runs")
    rows = []
    for name in t1.resolved_datasets():
        for seed in t1.seeds:
            log.info("table1: %s seed %d", name, seed)
            rows.append(identity_row(cfg, name, seed, t1, work_dir))
    write_table1(rows, out_csv)
    return rows


def conditional_comparison(cfg: ExperimentConfig, seed: int, out_dir: str, base_epochs: int | None = None,
                           f4f_epochs: int | None = None) -> dict:
    """Shared conditional base + delta-mode transformer; out-of-support fractions at the target condition.

    Returns ood of transferred eval points, ood of base-density samples at the
    target condition, ood of the base-transfer route, and the transfer translation.
    """
    cfg = _variant(cfg, seed=seed)
    d = os.path.join(out_dir, f"{cfg.dataset.x}_{cfg.dataset.mode}", f"seed{seed}")
    base = ensure_base(_variant(cfg, epochs=base_epochs), "x", os.path.join(d, "base.ckpt"))
    header = checkpoint.read(os.path.join(d, "base.ckpt"))[0]["config"]
    cfg = _variant(cfg, epochs=f4f_epochs)
    model = ensure_f4f(cfg, base, None, os.path.join(d, "f4f.ckpt"), (header, None))
    report = evaluate_f4f(model, cfg)
    bt = evaluate_base_transfer(base, base, cfg)
    _, c_to = eval_conditions(cfg)
    n = cfg.dataset.n_eval
    with torch.no_grad():
        samples = base.sample(n, torch.full((n,), c_to), derive_seed(seed, "conditional-sample"))
    return {
        "seed": seed,
        "f4f_ood": report.ood_fraction,
        "base_sample_ood": ood_fraction(samples, cfg.dataset.x, cfg.dataset.mode, c_to),
        "base_transfer_ood": bt.ood_fraction,
        "f4f_translation": report.mean_translation,
        "base_transfer_translation": bt.mean_translation,
    }
