"""Training loops for base densities and flow-for-flow models."""

from __future__ import annotations

import hashlib
import json
import logging
import math
import os
import time
from dataclasses import dataclass, field
from typing import Callable

import numpy as np
import torch

from . import checkpoint, datasets
from . import diffcore as dc
from .config import ExperimentConfig, derive_seed
from .diffcore import NonFiniteError, ParameterStore
from .distributions import FlowDensity, rng
from .flows4flows import FlowForFlowModel, base_transfer, f4f_loss_right, step_loss, transfer
from .metrics import EvalReport, mean_nll, mean_translation, ood_fraction
from .optim import OptimizerState, adam_step, cosine_lr
from .transforms import Architecture, CompositeTransform

log = logging.getLogger(__name__)

BASE_EPOCHS = {False: 10, True: 32}
F4F_EPOCHS = {False: 20, True: 12}


class TrainingDiverged(RuntimeError):
    def __init__(self, cause: Exception, last_checkpoint: str | None):
        self.last_checkpoint = last_checkpoint
        super().__init__(f"training diverged ({cause}); last good checkpoint: {last_checkpoint}")


@dataclass
class History:
    nll: list[float] = field(default_factory=list)
    max_grad_norm: float = 0.0
    steps: int = 0
    wall_seconds: float = 0.0


def param_hash(module: torch.nn.Module) -> str:
    h = hashlib.sha256()
    for k, v in module.named_parameters():
        h.update(k.encode())
        h.update(np.ascontiguousarray(v.detach().numpy(), dtype="<f8").tobytes())
    return h.hexdigest()


# -- data ---------------------------------------------------------------------

def dataset_name(cfg: ExperimentConfig, side: str) -> str:
    return cfg.dataset.x if side == "x" else cfg.dataset.target


def make_data(cfg: ExperimentConfig, side: str, n: int, purpose: str = "train", c=None):
    """(points, conditions or None) for one side of an experiment as float64 tensors."""
    spec = datasets.DatasetSpec(dataset_name(cfg, side), n, derive_seed(cfg.trainer.seed, purpose, side))
    if not cfg.dataset.conditional:
        return torch.from_numpy(datasets.sample(spec)), None
    lo, hi = cfg.dataset.resolved_range()
    cspec = datasets.ConditionalDatasetSpec(spec, cfg.dataset.mode, lo, hi)
    pts, cond = datasets.sample_conditional(cspec, c)
    return torch.from_numpy(pts), torch.from_numpy(cond)


# -- model construction -------------------------------------------------------

def build_density(arch: Architecture, seed: int, condition_scale: float = 1.0) -> FlowDensity:
    return FlowDensity(CompositeTransform(arch, seed=seed), condition_scale=condition_scale)


def density_config(cfg: ExperimentConfig, side: str) -> dict:
    arch = cfg.architecture.build(context=1 if cfg.dataset.conditional else 0)
    return {
        "architecture": arch.__dict__,
        "condition_scale": cfg.dataset.condition_scale(),
        "dataset": dataset_name(cfg, side),
        "mode": cfg.dataset.mode,
        "range": list(cfg.dataset.resolved_range()) if cfg.dataset.conditional else None,
    }


def density_from_header(cfg: dict, arrays=None, prefix: str = "") -> FlowDensity:
    d = build_density(Architecture(**cfg["architecture"]), 0, cfg["condition_scale"])
    if arrays is not None:
        checkpoint.load_into(d, arrays, prefix)
    return d


def load_density(path: str) -> tuple[FlowDensity, dict]:
    header, arrays = checkpoint.read(path)
    if header["kind"] != "base":
        raise ValueError(f"{path} is a {header['kind']!r} checkpoint, expected a base density")
    return density_from_header(header["config"], arrays), header


def save_density(path: str, density: FlowDensity, dcfg: dict, seed: int, metadata: dict) -> None:
    checkpoint.write(path, "base", checkpoint.module_arrays(density), dcfg, seed, metadata)


def save_f4f(path: str, model: FlowForFlowModel, fcfg: dict, seed: int, metadata: dict) -> None:
    arrays = checkpoint.module_arrays(model.transformer, "gamma.")
    arrays.update(checkpoint.module_arrays(model.density_x, "density_x."))
    if not model.shared_base:
        arrays.update(checkpoint.module_arrays(model.density_y, "density_y."))
    checkpoint.write(path, "f4f", arrays, fcfg, seed, metadata)


def load_f4f(path: str) -> tuple[FlowForFlowModel, dict]:
    header, arrays = checkpoint.read(path)
    if header["kind"] != "f4f":
        raise ValueError(f"{path} is a {header['kind']!r} checkpoint, expected a flow-for-flow model")
    cfg = header["config"]
    gamma = CompositeTransform(Architecture(**cfg["architecture"]), seed=0)
    checkpoint.load_into(gamma, arrays, "gamma.")
    dx = density_from_header(cfg["density_x"], arrays, "density_x.")
    dy = dx if cfg["shared_base"] else density_from_header(cfg["density_y"], arrays, "density_y.")
    model = FlowForFlowModel(gamma, dx, dy, cfg["condition_mode"], cfg["condition_scale"])
    return model, header


# -- loop ---------------------------------------------------------------------

def _jsonl(path: str | None):
    if path is None:
        return None
    os.makedirs(os.path.dirname(os.path.abspath(path)), exist_ok=True)
    return open(path, "w")


def _fit(params: ParameterStore, loss_at: Callable[[int, torch.Tensor], torch.Tensor], n: int, tc,
         epochs: int, log_file, on_epoch: Callable[[int], None] | None = None, shuffle_tag: str = "") -> History:
    torch.set_num_threads(tc.threads)
    steps_per_epoch = math.ceil(n / tc.batch_size)
    total = epochs * steps_per_epoch
    state = OptimizerState.for_params(params)
    hist = History()
    step = 0
    started = time.perf_counter()
    for epoch in range(epochs):
        perm = torch.from_numpy(rng(derive_seed(tc.seed, "shuffle", shuffle_tag, epoch)).permutation(n))
        losses = []
        for i in range(steps_per_epoch):
            idx = perm[i * tc.batch_size:(i + 1) * tc.batch_size]
            lr = cosine_lr(step, total, tc.initial_lr)
            value, g = dc.value_and_grad(lambda: loss_at(step, idx), params)
            g, norm = dc.clip_grad_norm(g, tc.grad_clip)
            adam_step(params, g, state, lr)
            losses.append(value)
            hist.max_grad_norm = max(hist.max_grad_norm, norm)
            if log_file is not None and (step % tc.log_every == 0 or step == total - 1):
                log_file.write(json.dumps({"step": step, "epoch": epoch, "lr": lr, "loss": value,
                                           "grad_norm": norm, "clipped": norm > tc.grad_clip}) + "\n")
            step += 1
        hist.nll.append(float(np.mean(losses)))
        log.info("epoch %d/%d loss %.5f", epoch + 1, epochs, hist.nll[-1])
        if on_epoch is not None:
            on_epoch(epoch)
    hist.steps = step
    # timing goes to the log only; checkpoints must stay bitwise reproducible
    hist.wall_seconds = time.perf_counter() - started
    if log_file is not None:
        log_file.write(json.dumps({"wall_seconds": hist.wall_seconds, "steps": step}) + "\n")
    return hist


# -- base densities -----------------------------------------------------------

def train_base(cfg: ExperimentConfig, side: str = "x", out_path: str | None = None,
               log_path: str | None = None) -> tuple[FlowDensity, History]:
    """Maximum-likelihood fit of a flow density to one side's training data."""
    tc = cfg.trainer
    epochs = tc.epochs or BASE_EPOCHS[cfg.dataset.conditional]
    dcfg = density_config(cfg, side)
    seed = derive_seed(tc.seed, "init", side)
    density = build_density(Architecture(**dcfg["architecture"]), seed, dcfg["condition_scale"])
    x, c = make_data(cfg, side, tc.n_train)
    params = ParameterStore.from_module(density, seed)

    def loss_at(step, idx):
        return -density.log_prob(x[idx], None if c is None else c[idx]).mean()

    with torch.no_grad():
        probe = torch.arange(min(tc.n_train, 10_000))
        initial = float(loss_at(0, probe))
    meta = {"role": f"base_{side}", "epochs": epochs, "n_train": tc.n_train, "trainer_seed": tc.seed}
    last = {"path": None}

    def on_epoch(epoch):
        if out_path:
            save_density(out_path, density, dcfg, seed, {**meta, "epochs_done": epoch + 1})
            last["path"] = out_path

    fh = _jsonl(log_path)
    try:
        hist = _fit(params, loss_at, tc.n_train, tc, epochs, fh, on_epoch, shuffle_tag=f"base-{side}")
    except NonFiniteError as exc:
        raise TrainingDiverged(exc, last["path"]) from exc
    finally:
        if fh:
            fh.close()
    hist.nll.insert(0, initial)
    if out_path:
        save_density(out_path, density, dcfg, seed, {**meta, "epochs_done": epochs, "nll_history": hist.nll,
                                                     "max_grad_norm": hist.max_grad_norm})
    for p in density.parameters():
        p.requires_grad_(False)
    return density, hist


def evaluate_base(density: FlowDensity, cfg: ExperimentConfig, side: str = "x", seed: int | None = None) -> EvalReport:
    """Held-out NLL and out-of-support fraction of generated samples."""
    seed = cfg.trainer.seed if seed is None else seed
    ecfg = _with_seed(cfg, seed)
    n = cfg.dataset.n_eval
    name = dataset_name(cfg, side)
    if cfg.dataset.conditional:
        cx = cfg.dataset.eval_cy if cfg.dataset.eval_cy is not None else cfg.dataset.resolved_range()[1]
        x, c = make_data(ecfg, side, n, "eval", c=cx)
        nll = mean_nll(density, x, c)
        with torch.no_grad():
            s = density.sample(n, torch.full((n,), float(cx)), derive_seed(seed, "eval-sample", side))
        ood = ood_fraction(s, name, cfg.dataset.mode, cx)
    else:
        x, _ = make_data(ecfg, side, n, "eval")
        nll = mean_nll(density, x)
        with torch.no_grad():
            s = density.sample(n, None, derive_seed(seed, "eval-sample", side))
        ood = ood_fraction(s, name)
    return EvalReport(float("nan"), ood, nll, n, seed)


def _with_seed(cfg: ExperimentConfig, seed: int) -> ExperimentConfig:
    import dataclasses
    return dataclasses.replace(cfg, trainer=dataclasses.replace(cfg.trainer, seed=seed))


# -- transformer between bases ----------------------------------------------

def f4f_config(cfg: ExperimentConfig, dx: dict, dy: dict | None, shared: bool) -> dict:
    arch = cfg.architecture.build(context=1 if cfg.dataset.conditional else 0)
    return {
        "architecture": arch.__dict__,
        "condition_mode": "delta" if cfg.dataset.conditional else "none",
        "condition_scale": cfg.dataset.condition_scale(),
        "shared_base": shared,
        "density_x": dx,
        "density_y": dy,
        "dataset_x": cfg.dataset.x,
        "dataset_y": cfg.dataset.target,
        "mode": cfg.dataset.mode,
        "range": list(cfg.dataset.resolved_range()) if cfg.dataset.conditional else None,
    }


def train_f4f(cfg: ExperimentConfig, density_x: FlowDensity, density_y: FlowDensity | None = None,
              out_path: str | None = None, log_path: str | None = None,
              base_headers: tuple[dict, dict | None] | None = None) -> tuple[FlowForFlowModel, History, EvalReport]:
    """Train the transformer between frozen base densities, alternating directions per step."""
    tc = cfg.trainer
    cond = cfg.dataset.conditional
    epochs = tc.epochs or F4F_EPOCHS[cond]
    shared = density_y is None or density_y is density_x
    density_y = density_x if shared else density_y
    seed = derive_seed(tc.seed, "init", "f4f")
    arch = cfg.architecture.build(context=1 if cond else 0)
    model = FlowForFlowModel(CompositeTransform(arch, seed=seed), density_x, density_y,
                             "delta" if cond else "none", cfg.dataset.condition_scale())
    hx, hy = param_hash(density_x), param_hash(density_y)

    x, cx = make_data(cfg, "x", tc.n_train)
    y, cy = make_data(cfg, "y", tc.n_train)
    params = model.transformer_params()
    params.rng_seed = seed
    penalty = cfg.penalty

    def loss_at(step, idx):
        return step_loss(model, step, x[idx], y[idx],
                         None if cx is None else cx[idx], None if cy is None else cy[idx], penalty)

    dx_cfg = base_headers[0] if base_headers else density_config(cfg, "x")
    dy_cfg = None if shared else (base_headers[1] if base_headers else density_config(cfg, "y"))
    fcfg = f4f_config(cfg, dx_cfg, dy_cfg, shared)
    meta = {"epochs": epochs, "n_train": tc.n_train, "l1_weight": penalty.l1_weight,
            "likelihood": penalty.likelihood, "trainer_seed": tc.seed,
            "datasets": [cfg.dataset.x, cfg.dataset.target]}
    last = {"path": None}

    def on_epoch(epoch):
        if out_path:
            save_f4f(out_path, model, fcfg, seed, {**meta, "epochs_done": epoch + 1})
            last["path"] = out_path

    fh = _jsonl(log_path)
    try:
        hist = _fit(params, loss_at, tc.n_train, tc, epochs, fh, on_epoch, shuffle_tag="f4f")
    except NonFiniteError as exc:
        raise TrainingDiverged(exc, last["path"]) from exc
    finally:
        if fh:
            fh.close()
    if param_hash(density_x) != hx or param_hash(density_y) != hy:
        raise RuntimeError("base density parameters changed during transformer training")
    report = evaluate_f4f(model, cfg)
    if out_path:
        save_f4f(out_path, model, fcfg, seed, {**meta, "epochs_done": epochs, "loss_history": hist.nll,
                                              "max_grad_norm": hist.max_grad_norm, "base_hash": [hx, hy],
                                              "report": report.__dict__})
    return model, hist, report


def eval_conditions(cfg: ExperimentConfig) -> tuple[float, float]:
    lo, hi = cfg.dataset.resolved_range()
    cx = lo if cfg.dataset.eval_cx is None else float(cfg.dataset.eval_cx)
    cy = hi if cfg.dataset.eval_cy is None else float(cfg.dataset.eval_cy)
    return cx, cy


def evaluate_f4f(model: FlowForFlowModel, cfg: ExperimentConfig, seed: int | None = None) -> EvalReport:
    """Transfer held-out X points and score them against Y.

    Conditional runs transfer from ``eval_cx`` to ``eval_cy`` (default: the
    ends of the condition range) and score against the transformed support.
    """
    seed = cfg.trainer.seed if seed is None else seed
    ecfg = _with_seed(cfg, seed)
    n = cfg.dataset.n_eval
    target = cfg.dataset.target
    if cfg.dataset.conditional:
        c_from, c_to = eval_conditions(cfg)
        x, _ = make_data(ecfg, "x", n, "eval", c=c_from)
        y, _ = make_data(ecfg, "y", n, "eval", c=c_to)
        out = transfer(model, x, c_from, c_to)
        ood = ood_fraction(out, target, cfg.dataset.mode, c_to)
        with torch.no_grad():
            nll = float(f4f_loss_right(model, y, c_from, c_to))
    else:
        x, _ = make_data(ecfg, "x", n, "eval")
        y, _ = make_data(ecfg, "y", n, "eval")
        out = transfer(model, x)
        ood = ood_fraction(out, target)
        with torch.no_grad():
            nll = float(f4f_loss_right(model, y))
    return EvalReport(mean_translation(x, out), ood, nll, n, seed)


def evaluate_base_transfer(density_x: FlowDensity, density_y: FlowDensity, cfg: ExperimentConfig,
                           seed: int | None = None) -> EvalReport:
    """Same scoring as :func:`evaluate_f4f` for the encode/decode route through two bases."""
    seed = cfg.trainer.seed if seed is None else seed
    ecfg = _with_seed(cfg, seed)
    n = cfg.dataset.n_eval
    target = cfg.dataset.target
    if cfg.dataset.conditional:
        c_from, c_to = eval_conditions(cfg)
        x, _ = make_data(ecfg, "x", n, "eval", c=c_from)
        y, _ = make_data(ecfg, "y", n, "eval", c=c_to)
        out = base_transfer(density_x, density_y, x, c_from, c_to)
        ood = ood_fraction(out, target, cfg.dataset.mode, c_to)
        nll = mean_nll(density_y, y, c_to)
    else:
        x, _ = make_data(ecfg, "x", n, "eval")
        y, _ = make_data(ecfg, "y", n, "eval")
        out = base_transfer(density_x, density_y, x)
        ood = ood_fraction(out, target)
        nll = mean_nll(density_y, y)
    return EvalReport(mean_translation(x, out), ood, nll, n, seed)
