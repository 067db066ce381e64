import json

import numpy as np
import pytest
import torch

from migan._io import derive_seed
from migan.data import DatasetSplit, preprocess
from migan.errors import ConfigError, ModeError, NonFiniteLossError
from migan.networks import parameter_digest
from migan.trainer import (NoiseStream, TrainConfig, Trainer, collate, generate, make_optimizers,
                           sample_noise, train, train_step)


def tiny(mode="segmentation", **kw):
    base = dict(mode=mode, input_size=64, g_base_filters=4, d_base_filters=4, batch_size=4,
                epochs=2, seed=3)
    base.update(kw)
    return TrainConfig(**base)


@pytest.fixture(scope="module")
def pre(synth64):
    return [preprocess(s, size=64) for s in synth64]


@pytest.fixture(scope="module")
def split(pre):
    return DatasetSplit(train=pre[:8], val=pre[8:10], seed=0)


def test_noise_scale():
    z = sample_noise(25, 0.001, NoiseStream(1))
    assert z.shape == (25, 400)
    assert 0.00097 <= float(z.std()) <= 0.00103
    z = sample_noise(25, 1.0, NoiseStream(2))
    assert abs(float(z.std()) - 1) < 0.03
    with pytest.raises(ValueError):
        sample_noise(1, 0.0, NoiseStream(0))


def test_noise_stream_reproducible():
    assert torch.equal(NoiseStream(5).normal(3), NoiseStream(5).normal(3))
    assert derive_seed(0, "noise") != derive_seed(0, "init-g")


def test_config_validation():
    with pytest.raises(ConfigError):
        TrainConfig(lr=0).validate()
    with pytest.raises(ConfigError):
        TrainConfig(mode="pix2pix").validate()
    with pytest.raises(ConfigError):
        TrainConfig.from_dict({"learning_rate": 1})
    assert TrainConfig.from_dict({"lr": 0.1, "style_blocks": [1, 2]}).style_blocks == (1, 2)


@pytest.mark.parametrize("mode", ["segmentation", "synthesis_l1", "synthesis_style"])
def test_version_counts(mode, pre):
    t = Trainer(tiny(mode), style_pool=[p.image for p in pre[:2]])
    batch = collate(pre[:4])
    for _ in range(3):
        rec = t.train_step(batch)
    assert (t.g.version, t.d.version) == (6, 3)
    assert np.isfinite(rec["g_loss"]) and np.isfinite(rec["d_loss"])
    assert set(rec["components"]) >= {"adv"}


def test_zero_lr_keeps_parameters(pre):
    cfg = tiny()
    t = Trainer(cfg)
    opts = make_optimizers(t.g, t.d, cfg, lr=0.0)
    before = {k: v.clone() for k, v in t.g.named_parameters()}
    dbefore = {k: v.clone() for k, v in t.d.named_parameters()}
    train_step(t.g, t.d, collate(pre[:4]), cfg, opts)
    assert all(torch.equal(before[k], v) for k, v in t.g.named_parameters())
    assert all(torch.equal(dbefore[k], v) for k, v in t.d.named_parameters())


def test_generator_loss_decreases(pre):
    t = Trainer(tiny(g_base_filters=8, lr=1e-3))
    batch = collate(pre[:4])
    first = t.train_step(batch)["g_loss"]
    losses = [t.train_step(batch)["g_loss"] for _ in range(49)]
    assert np.mean(losses[-5:]) < first


def test_adam_matches_closed_form():
    cfg = TrainConfig(lr=0.01)
    a, c = 3.0, 0.7
    theta = torch.nn.Parameter(torch.tensor([2.0], dtype=torch.float64))
    opt = torch.optim.Adam([theta], lr=cfg.lr, betas=(cfg.adam_beta1, cfg.adam_beta2), eps=cfg.adam_eps)
    x, m, v = 2.0, 0.0, 0.0
    b1, b2 = cfg.adam_beta1, cfg.adam_beta2
    for t in range(1, 6):
        opt.zero_grad()
        (0.5 * a * (theta - c) ** 2).sum().backward()
        opt.step()
        g = a * (x - c)
        m = b1 * m + (1 - b1) * g
        v = b2 * v + (1 - b2) * g * g
        x -= cfg.lr * (m / (1 - b1 ** t)) / ((v / (1 - b2 ** t)) ** 0.5 + cfg.adam_eps)
        assert abs(theta.item() - x) < 1e-12


def test_train_zero_epochs_returns_initialisation(split):
    ckpt, log = train(tiny(epochs=0), split)
    assert log.selected_epoch == 0 and len(log.epochs) == 1 and not log.steps
    fresh = Trainer(tiny(epochs=0))
    assert parameter_digest(ckpt.networks["generator"]) == parameter_digest(fresh.g)


def test_train_writes_artifacts(split, tmp_path):
    ckpt, log = train(tiny(epochs=2), split, out_dir=tmp_path)
    assert {"epoch_0000.ckpt", "epoch_0001.ckpt", "epoch_0002.ckpt", "best.ckpt",
            "trainlog.jsonl"} <= {p.name for p in tmp_path.iterdir()}
    lines = [json.loads(l) for l in (tmp_path / "trainlog.jsonl").read_text().splitlines()]
    assert lines[-1]["kind"] == "selection" and lines[-1]["epoch"] == log.selected_epoch
    best = min(log.epochs, key=lambda r: r["val_loss"])
    assert best["epoch"] == log.selected_epoch
    assert ckpt.meta["extra"]["mode"] == "segmentation"


def test_early_stopping(split):
    _, log = train(tiny(epochs=6, patience=1, lr=1e-9), split)
    assert len(log.epochs) < 7


def test_training_is_deterministic(split):
    _, a = train(tiny(epochs=1), split)
    _, b = train(tiny(epochs=1), split)
    assert a == b


def test_validation_uses_fixed_noise(split):
    t = Trainer(tiny("synthesis_l1"))
    assert t.validation_loss(split.val) == t.validation_loss(split.val)


def test_non_finite_loss_raises(pre):
    t = Trainer(tiny())
    batch = collate(pre[:4])
    batch["zscore"][0, 0, 0, 0] = float("nan")
    with pytest.raises(NonFiniteLossError) as info:
        t.train_step(batch)
    assert info.value.snapshot["step"] == 0


def test_style_training_runs(split):
    ckpt, log = train(tiny("synthesis_style", epochs=1), split)
    assert "style" in log.steps[0]["components"]
    assert ckpt.networks["generator"].spec.role == "synthesis"


def test_generate(split, pre):
    ckpt, _ = train(tiny("synthesis_l1", epochs=1), split)
    imgs = generate(ckpt, [pre[0].mask, pre[1].mask], n_per_mask=3, seed=4)
    assert len(imgs) == 2 and imgs[0].shape == (3, 3, 64, 64)
    assert np.abs(imgs[0]).max() <= 1
    again = generate(ckpt, [pre[0].mask, pre[1].mask], n_per_mask=3, seed=4)
    assert np.array_equal(imgs[1], again[1])
    seg, _ = train(tiny(epochs=0), split)
    with pytest.raises(ModeError):
        generate(seg, [pre[0].mask])
