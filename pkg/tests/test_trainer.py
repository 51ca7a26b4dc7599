import json
import math

import numpy as np
import pytest
import torch

from flowbridge import checkpoint, config
from flowbridge import diffcore as dc
from flowbridge.diffcore import ParameterStore
from flowbridge.flows4flows import transfer
from flowbridge.optim import OptimizerState, adam_step, cosine_lr
from flowbridge.trainer import (TrainingDiverged, evaluate_base, load_density, load_f4f, param_hash, train_base,
                                train_f4f)


def tiny_config(**trainer):
    t = {"n_train": 512, "batch_size": 64, "epochs": 3, "initial_lr": 3e-3, "log_every": 1, **trainer}
    return config.from_dict({"dataset": {"x": "four_circles", "n_eval": 500},
                             "architecture": {"hidden": 16, "blocks": 1, "layers": 2}, "trainer": t})


def test_cosine_schedule_values():
    assert cosine_lr(0, 100, 1e-3) == 1e-3
    assert cosine_lr(50, 100, 1e-3) == pytest.approx(5e-4, abs=1e-18)
    assert cosine_lr(100, 100, 1e-3) == 0.0
    assert cosine_lr(25, 100, 1.0) == pytest.approx((1 + math.cos(math.pi / 4)) / 2)
    for bad in ((-1, 10), (11, 10), (0, 0)):
        with pytest.raises(ValueError):
            cosine_lr(*bad, 1e-3)


def _store(values):
    return ParameterStore.from_module(torch.nn.ParameterDict({"w": torch.nn.Parameter(torch.tensor(values))}), 0)


def test_adam_zero_gradient_leaves_parameters():
    p = _store([1.0, -2.0])
    st = OptimizerState.for_params(p)
    adam_step(p, {"w": torch.zeros(2)}, st, 0.1)
    assert torch.equal(p["w"].detach(), torch.tensor([1.0, -2.0]))
    assert st.step == 1


def test_adam_first_two_steps_by_hand():
    p = _store([1.0, -2.0])
    st = OptimizerState.for_params(p)
    g1, g2 = torch.tensor([0.5, -4.0]), torch.tensor([1.0, 2.0])
    adam_step(p, {"w": g1}, st, 0.1)
    # first bias-corrected step is lr * g / (|g| + eps)
    expect = torch.tensor([1.0, -2.0]) - 0.1 * g1 / (g1.abs() + 1e-8)
    assert torch.allclose(p["w"].detach(), expect, atol=1e-15)
    adam_step(p, {"w": g2}, st, 0.1)
    m = (0.1 * g1 * 0.9 + 0.1 * g2) / (1 - 0.9 ** 2)
    v = (0.001 * g1 ** 2 * 0.999 + 0.001 * g2 ** 2) / (1 - 0.999 ** 2)
    expect = expect - 0.1 * m / (v.sqrt() + 1e-8)
    assert torch.allclose(p["w"].detach(), expect, atol=1e-14)


def test_adam_constant_gradient_moves_by_lr_per_step():
    p = _store([0.0])
    st = OptimizerState.for_params(p)
    for _ in range(50):
        adam_step(p, {"w": torch.tensor([3.0])}, st, 0.01)
    assert p["w"].item() == pytest.approx(-0.5, rel=1e-6)


def test_adam_rejects_non_finite_gradients():
    p = _store([0.0])
    with pytest.raises(dc.NonFiniteError):
        adam_step(p, {"w": torch.tensor([math.inf])}, OptimizerState.for_params(p), 0.1)


def _log(path):
    with open(path) as fh:
        return [json.loads(line) for line in fh]


def test_train_base_lowers_nll_and_logs(tmp_path):
    cfg = tiny_config()
    d, hist = train_base(cfg, "x", str(tmp_path / "b.ckpt"), str(tmp_path / "b.jsonl"))
    assert len(hist.nll) == 4 and hist.steps == 24
    assert hist.nll[-1] < hist.nll[0]
    assert not any(p.requires_grad for p in d.parameters())
    rows = _log(tmp_path / "b.jsonl")
    assert set(rows[0]) == {"step", "epoch", "lr", "loss", "grad_norm", "clipped"}
    assert rows[0]["lr"] == 3e-3 and rows[-2]["step"] == 23
    assert "wall_seconds" in rows[-1]
    loaded, header = load_density(str(tmp_path / "b.ckpt"))
    assert header["metadata"]["epochs_done"] == 3
    x = torch.randn(20, 2)
    assert torch.equal(loaded.log_prob(x), d.log_prob(x))
    report = evaluate_base(loaded, cfg)
    assert 0 <= report.ood_fraction <= 1 and math.isfinite(report.mean_nll)


def test_default_epochs():
    from flowbridge.trainer import BASE_EPOCHS, F4F_EPOCHS
    assert (BASE_EPOCHS[False], F4F_EPOCHS[False], BASE_EPOCHS[True], F4F_EPOCHS[True]) == (10, 20, 32, 12)


def test_evaluation_is_reproducible(tmp_path):
    cfg = tiny_config(epochs=1)
    train_base(cfg, "x", str(tmp_path / "b.ckpt"))
    a = evaluate_base(load_density(str(tmp_path / "b.ckpt"))[0], cfg, seed=5)
    b = evaluate_base(load_density(str(tmp_path / "b.ckpt"))[0], cfg, seed=5)
    assert a.to_text() == b.to_text()


def test_training_is_bitwise_reproducible(tmp_path):
    cfg = tiny_config(epochs=1)
    train_base(cfg, "x", str(tmp_path / "a.ckpt"))
    train_base(cfg, "x", str(tmp_path / "b.ckpt"))
    assert (tmp_path / "a.ckpt").read_bytes() == (tmp_path / "b.ckpt").read_bytes()
    other = tiny_config(epochs=1, seed=1)
    train_base(other, "x", str(tmp_path / "c.ckpt"))
    assert (tmp_path / "a.ckpt").read_bytes() != (tmp_path / "c.ckpt").read_bytes()


def test_gradient_clipping_engages(tmp_path):
    cfg = tiny_config(epochs=1, grad_clip=1e-3)
    _, hist = train_base(cfg, "x", None, str(tmp_path / "log.jsonl"))
    steps = [r for r in _log(tmp_path / "log.jsonl") if "step" in r and "clipped" in r]
    assert all(r["clipped"] for r in steps)
    assert hist.max_grad_norm > 1e-3


def test_divergence_reports_last_checkpoint(tmp_path, monkeypatch):
    cfg = tiny_config(epochs=2)
    real = dc.value_and_grad
    calls = {"n": 0}

    def flaky(fn, params):
        calls["n"] += 1
        if calls["n"] == 12:
            raise dc.NonFiniteError("loss", "forced")
        return real(fn, params)

    monkeypatch.setattr(dc, "value_and_grad", flaky)
    with pytest.raises(TrainingDiverged) as info:
        train_base(cfg, "x", str(tmp_path / "b.ckpt"))
    assert info.value.last_checkpoint == str(tmp_path / "b.ckpt")
    assert checkpoint.read(str(tmp_path / "b.ckpt"))[0]["metadata"]["epochs_done"] == 1


def test_train_f4f_keeps_bases_and_round_trips(tmp_path):
    cfg = tiny_config(epochs=1)
    dx, _ = train_base(cfg, "x", str(tmp_path / "x.ckpt"))
    dy, _ = train_base(cfg, "y", str(tmp_path / "y.ckpt"))
    hx, hy = param_hash(dx), param_hash(dy)
    model, hist, report = train_f4f(cfg, dx, dy, str(tmp_path / "f.ckpt"), str(tmp_path / "f.jsonl"))
    assert (param_hash(dx), param_hash(dy)) == (hx, hy)
    assert report.n_points == 500 and report.mean_translation >= 0
    loaded, header = load_f4f(str(tmp_path / "f.ckpt"))
    assert header["metadata"]["report"]["mean_translation"] == report.mean_translation
    x = torch.randn(30, 2)
    assert torch.equal(transfer(loaded, x), transfer(model, x))
    assert header["config"]["shared_base"] is False


def test_conditional_f4f_with_shared_base(tmp_path):
    cfg = config.from_dict({"dataset": {"x": "four_circles", "mode": "rotation", "n_eval": 300},
                            "architecture": {"hidden": 16, "blocks": 1, "layers": 2},
                            "trainer": {"n_train": 256, "batch_size": 64, "epochs": 1}})
    base, _ = train_base(cfg, "x")
    model, _, report = train_f4f(cfg, base, None, str(tmp_path / "f.ckpt"))
    assert model.shared_base and model.condition_mode == "delta"
    loaded, header = load_f4f(str(tmp_path / "f.ckpt"))
    assert header["config"]["density_y"] is None
    x = torch.randn(10, 2)
    assert torch.equal(transfer(loaded, x, 0.0, 45.0), transfer(model, x, 0.0, 45.0))
    assert np.isfinite(report.mean_translation)
