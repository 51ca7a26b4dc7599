"""Command-line interface: data generation, training, transfer, evaluation, plots and the identity-map table."""

from __future__ import annotations

import argparse
import csv
import dataclasses
import logging
import os
import sys
import time
from dataclasses import dataclass, field

import numpy as np
import yaml

from . import config as config_mod
from . import datasets, trainer
from .config import ConfigError, ExperimentConfig
from .diffcore import NonFiniteError
from .flows4flows import transfer
from .metrics import append_results

EXIT_OK, EXIT_USAGE, EXIT_NUMERIC = 0, 1, 2

log = logging.getLogger("flowbridge")


class UsageError(Exception):
    pass


@dataclass
class RunManifest:
    config_path: str | None
    config: dict
    output_dir: str
    artifacts: list[str] = field(default_factory=list)

    def write(self, path: str) -> None:
        with open(path, "w") as fh:
            yaml.safe_dump(dataclasses.asdict(self), fh, sort_keys=False)


def _fmt(v: float) -> str:
    return "%.17g" % v


def write_points_csv(path: str | None, columns: list[str], rows: np.ndarray) -> None:
    fh = open(path, "w", newline="") if path else sys.stdout
    try:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(columns)
        for r in rows:
            w.writerow([_fmt(v) for v in r])
    finally:
        if path:
            fh.close()


def read_points_csv(path: str) -> tuple[list[str], np.ndarray]:
    with open(path, newline="") as fh:
        r = csv.reader(fh)
        try:
            header = next(r)
        except StopIteration:
            raise UsageError(f"{path}: empty file") from None
        rows = [[float(v) for v in row] for row in r if row]
    if not rows:
        raise UsageError(f"{path}: no data rows")
    return header, np.asarray(rows, dtype=float)


# -- commands -----------------------------------------------------------------

def cmd_make_data(a) -> int:
    spec = datasets.DatasetSpec(a.dataset, a.n, a.seed)
    if a.mode:
        cspec = datasets.ConditionalDatasetSpec(spec, a.mode, a.cmin, a.cmax)
        pts, c = datasets.sample_conditional(cspec)
        write_points_csv(a.out, ["x0", "x1", "c"], np.column_stack([pts, c]))
    else:
        write_points_csv(a.out, ["x0", "x1"], datasets.sample(spec))
    return EXIT_OK


def _outdir(cfg: ExperimentConfig) -> str:
    os.makedirs(cfg.output.dir, exist_ok=True)
    return cfg.output.dir


def cmd_train_base(a) -> int:
    cfg = config_mod.load(a.config)
    out = _outdir(cfg)
    ckpt = a.out or os.path.join(out, f"base_{a.side}.ckpt")
    logp = os.path.splitext(ckpt)[0] + ".jsonl"
    t0 = time.time()
    density, hist = trainer.train_base(cfg, a.side, ckpt, logp)
    report = trainer.evaluate_base(density, cfg, a.side)
    rep_path = os.path.splitext(ckpt)[0] + "_report.txt"
    with open(rep_path, "w") as fh:
        fh.write(report.to_text())
    RunManifest(a.config, cfg.to_dict(), out, [ckpt, logp, rep_path]).write(
        os.path.join(out, f"manifest_base_{a.side}.yaml"))
    print(f"base density ({trainer.dataset_name(cfg, a.side)}): {ckpt}")
    print(f"nll per epoch: {' '.join(f'{v:.4f}' for v in hist.nll)}")
    print(report.to_text(), end="")
    print(f"elapsed: {time.time() - t0:.1f}s")
    return EXIT_OK


def cmd_train_f4f(a) -> int:
    cfg = config_mod.load(a.config)
    o = cfg.output
    if not o.base_x:
        raise ConfigError(["output.base_x: required for train-f4f"])
    shared = o.shared_base or (cfg.dataset.conditional and not o.base_y)
    if not shared and not o.base_y:
        raise ConfigError(["output.base_y: required unless output.shared_base is true"])
    for p in [o.base_x] + ([] if shared else [o.base_y]):
        if not os.path.exists(p):
            raise UsageError(f"missing base checkpoint: {p}")
    dx, hx = trainer.load_density(o.base_x)
    dy, hy = (dx, None) if shared else trainer.load_density(o.base_y)
    out = _outdir(cfg)
    ckpt = a.out or os.path.join(out, "f4f.ckpt")
    logp = os.path.splitext(ckpt)[0] + ".jsonl"
    t0 = time.time()
    _, hist, report = trainer.train_f4f(cfg, dx, None if shared else dy, ckpt, logp,
                                        (hx["config"], None if shared else hy["config"]))
    rep_path = os.path.splitext(ckpt)[0] + "_report.txt"
    with open(rep_path, "w") as fh:
        fh.write(report.to_text())
    RunManifest(a.config, cfg.to_dict(), out, [ckpt, logp, rep_path]).write(os.path.join(out, "manifest_f4f.yaml"))
    print(f"flow-for-flow model: {ckpt}")
    print(f"loss per epoch: {' '.join(f'{v:.4f}' for v in hist.nll)}")
    print(report.to_text(), end="")
    print(f"elapsed: {time.time() - t0:.1f}s")
    return EXIT_OK


def cmd_transfer(a) -> int:
    model, header = trainer.load_f4f(a.model)
    cols, data = read_points_csv(a.inp)
    if data.shape[1] < 2 or cols[:2] != ["x0", "x1"]:
        raise UsageError(f"{a.inp}: expected columns x0,x1[,c]")
    x = data[:, :2]
    conditional = model.condition_mode == "delta"
    if conditional:
        if a.cx is not None:
            cx = np.full(len(x), a.cx)
        elif "c" in cols:
            cx = data[:, cols.index("c")]
        else:
            raise UsageError("conditional model: give --cx or an input column c")
        if a.cy is None:
            raise UsageError("conditional model: --cy is required")
        cy = np.full(len(x), a.cy)
        y = transfer(model, x, cx, cy).numpy()
        write_points_csv(a.out, ["x0", "x1", "y0", "y1", "cx", "cy"], np.column_stack([x, y, cx, cy]))
    else:
        y = transfer(model, x).numpy()
        write_points_csv(a.out, ["x0", "x1", "y0", "y1"], np.column_stack([x, y]))
    return EXIT_OK


def _eval_config(header: dict, dataset: str | None, seed: int, n: int, cx, cy) -> ExperimentConfig:
    c = header["config"]
    if header["kind"] == "f4f":
        dx, dy = c["dataset_x"], dataset or c["dataset_y"]
    else:
        dx = dy = dataset or c["dataset"]
    mode = c.get("mode")
    rng_ = c.get("range") or [None, None]
    d = config_mod.DataConfig(x=dx, y=dy, mode=mode, cmin=rng_[0], cmax=rng_[1], n_eval=n, eval_cx=cx, eval_cy=cy)
    return ExperimentConfig(dataset=d, trainer=config_mod.TrainConfig(seed=seed))


def cmd_evaluate(a) -> int:
    from . import checkpoint

    header, _ = checkpoint.read(a.model)
    cfg = _eval_config(header, a.dataset, a.seed, a.n, a.cx, a.cy)
    if header["kind"] == "f4f":
        model, _ = trainer.load_f4f(a.model)
        report = trainer.evaluate_f4f(model, cfg)
        kind, weight = "flow4flow", header["metadata"].get("l1_weight", 0.0)
    else:
        density, _ = trainer.load_density(a.model)
        report = trainer.evaluate_base(density, cfg)
        kind, weight = "base_density", 0.0
    text = report.to_text()
    print(text, end="")
    if a.out:
        with open(a.out, "w") as fh:
            fh.write(text)
    results = a.results or os.path.join(os.path.dirname(os.path.abspath(a.model)), "results.csv")
    append_results(results, cfg.dataset.target, kind, weight, report)
    return EXIT_OK


def cmd_plot(a) -> int:
    from .plotting import plot_pairs

    cols, data = read_points_csv(a.pairs)
    if cols[:4] != ["x0", "x1", "y0", "y1"]:
        raise UsageError(f"{a.pairs}: expected columns x0,x1,y0,y1")
    try:
        plot_pairs(data[:, :2], data[:, 2:4], a.out, a.title)
    except OSError as exc:
        raise UsageError(f"cannot write {a.out}: {exc}") from exc
    return EXIT_OK


def cmd_reproduce_table1(a) -> int:
    from .experiments import Table1Config, reproduce_table1

    with open(a.config) as fh:
        raw = yaml.safe_load(fh) or {}
    t1_raw = raw.pop("table1", {}) or {}
    cfg = config_mod.from_dict(raw)
    known = {f.name for f in dataclasses.fields(Table1Config)}
    bad = [f"table1.{k}: unknown key" for k in t1_raw if k not in known]
    if bad:
        raise ConfigError(bad)
    t1 = Table1Config(**t1_raw)
    if a.full:
        t1.full = True
    if a.seeds:
        t1.seeds = a.seeds
    rows = reproduce_table1(cfg, t1, a.out, a.work_dir)
    with open(os.path.splitext(a.out)[0] + "_report.txt") as fh:
        print(fh.read(), end="")
    RunManifest(a.config, {**cfg.to_dict(), "table1": dataclasses.asdict(t1)}, os.path.dirname(os.path.abspath(a.out)),
                [a.out, os.path.splitext(a.out)[0] + "_report.txt"]).write(os.path.splitext(a.out)[0] + "_manifest.yaml")
    return EXIT_OK if rows else EXIT_USAGE


# -- parser -------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="flowbridge", description=__doc__)
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    s = sub.add_parser("make-data", help="sample a toy dataset to CSV")
    s.add_argument("--dataset", required=True)
    s.add_argument("--n", type=int, required=True)
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--mode", choices=datasets.MODES)
    s.add_argument("--cmin", type=float)
    s.add_argument("--cmax", type=float)
    s.add_argument("--out")
    s.set_defaults(func=cmd_make_data)

    s = sub.add_parser("train-base", help="train a base flow density")
    s.add_argument("--config", required=True)
    s.add_argument("--side", choices=("x", "y"), default="x")
    s.add_argument("--out")
    s.set_defaults(func=cmd_train_base)

    s = sub.add_parser("train-f4f", help="train a flow between two trained base densities")
    s.add_argument("--config", required=True)
    s.add_argument("--out")
    s.set_defaults(func=cmd_train_f4f)

    s = sub.add_parser("transfer", help="map points with a trained model; writes paired CSV")
    s.add_argument("--model", required=True)
    s.add_argument("--in", dest="inp", required=True)
    s.add_argument("--cx", type=float)
    s.add_argument("--cy", type=float)
    s.add_argument("--out")
    s.set_defaults(func=cmd_transfer)

    s = sub.add_parser("evaluate", help="score a checkpoint on held-out generator data")
    s.add_argument("--model", required=True)
    s.add_argument("--dataset")
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--n", type=int, default=10_000)
    s.add_argument("--cx", type=float)
    s.add_argument("--cy", type=float)
    s.add_argument("--out")
    s.add_argument("--results")
    s.set_defaults(func=cmd_evaluate)

    s = sub.add_parser("plot", help="render a paired CSV as matched-color scatter plots")
    s.add_argument("--pairs", required=True)
    s.add_argument("--out", required=True)
    s.add_argument("--title")
    s.set_defaults(func=cmd_plot)

    s = sub.add_parser("reproduce-table1", help="identity-map translation table over datasets and seeds")
    s.add_argument("--config", required=True)
    s.add_argument("--out", required=True)
    s.add_argument("--full", action="store_true", help="all seven datasets")
    s.add_argument("--seeds", type=int, nargs="+")
    s.add_argument("--work-dir")
    s.set_defaults(func=cmd_reproduce_table1)
    return p


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return EXIT_OK if exc.code == 0 else EXIT_USAGE
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(asctime)s %(name)s %(message)s")
    try:
        return args.func(args)
    except (NonFiniteError, trainer.TrainingDiverged) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except ConfigError as exc:
        print("error: invalid config", file=sys.stderr)
        for prob in exc.problems:
            print(f"  {prob}", file=sys.stderr)
        return EXIT_USAGE
    except (UsageError, ValueError, FileNotFoundError, PermissionError, IsADirectoryError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE


if __name__ == "__main__":
    sys.exit(main())
