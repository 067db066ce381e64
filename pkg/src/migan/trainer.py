"""Adversarial training loop, model selection and image generation."""

import copy
import json
import logging
import math
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path

import numpy as np
import torch

from . import losses
from ._io import derive_seed
from .errors import ConfigError, ModeError, NonFiniteLossError
from .features import ExtractorConfig, extract, load_extractor
from .networks import (Checkpoint, NetworkSpec, build_network, load_checkpoint,
                       save_checkpoint)

log = logging.getLogger(__name__)

MODES = losses.MODES


@dataclass
class TrainConfig:
    mode: str = "segmentation"
    lr: float = 2e-4
    adam_beta1: float = 0.5
    adam_beta2: float = 0.999
    adam_eps: float = 1e-8
    lambda_dev: float = 10.0
    lambda_seg: float = 10.0
    omega_cont: float = 1.0
    omega_sty: float = 10.0
    omega_tv: float = 100.0
    block_weights: tuple = (0.2, 0.2, 0.2, 0.2, 0.2)
    g_updates_per_d: int = 2
    noise_sigma_train: float = 0.001
    noise_sigma_eval: float = 1.0
    batch_size: int = 8
    epochs: int = 500
    patience: int = 20
    seed: int = 0
    input_size: int = 64
    g_base_filters: int = 64
    d_base_filters: int = 32
    dtype: str = "float32"
    threads: int = 1
    extractor: str = "standin"
    vgg_weights: str = None
    style_blocks: tuple = (1, 2, 3, 4, 5)
    content_blocks: tuple = (4,)
    style_layer: int = 1
    content_layer: int = 0
    seg_checkpoint: str = None

    def __post_init__(self):
        self.block_weights = tuple(self.block_weights)
        self.style_blocks = tuple(self.style_blocks)
        self.content_blocks = tuple(self.content_blocks)
        self.validate()

    def validate(self):
        if self.mode not in MODES:
            raise ConfigError(f"mode must be one of {MODES}, got {self.mode!r}")
        if not self.lr > 0:
            raise ConfigError("lr must be > 0")
        if self.g_updates_per_d < 1:
            raise ConfigError("g_updates_per_d must be >= 1")
        if not (self.noise_sigma_train > 0 and self.noise_sigma_eval > 0):
            raise ConfigError("noise standard deviations must be > 0")
        if self.batch_size < 1 or self.epochs < 0 or self.patience < 1:
            raise ConfigError("batch_size and patience must be >= 1, epochs >= 0")
        if self.dtype not in ("float32", "float64"):
            raise ConfigError("dtype must be float32 or float64")
        if self.input_size < 64 or self.input_size & (self.input_size - 1):
            raise ConfigError("input_size must be a power of two >= 64")
        ExtractorConfig(self.style_blocks, self.content_blocks, self.style_layer,
                        self.content_layer).validate(((0,) * 4,) * 5)

    @classmethod
    def from_dict(cls, d):
        names = {f.name for f in fields(cls)}
        unknown = set(d) - names
        if unknown:
            raise ConfigError(f"unknown training options: {sorted(unknown)}")
        return cls(**d)

    def to_dict(self):
        return asdict(self)

    @property
    def torch_dtype(self):
        return getattr(torch, self.dtype)

    @property
    def weights(self):
        return losses.LossWeights(self.lambda_dev, self.lambda_seg, self.omega_cont,
                                  self.omega_sty, self.omega_tv, self.block_weights)

    @property
    def extractor_config(self):
        return ExtractorConfig(self.style_blocks, self.content_blocks, self.style_layer,
                               self.content_layer)

    @property
    def generator_role(self):
        return "segmentor" if self.mode == "segmentation" else "synthesis"


@dataclass
class TrainLog:
    steps: list = field(default_factory=list)
    epochs: list = field(default_factory=list)
    selected_epoch: int = None
    selected_step: int = None

    def to_jsonl(self, path):
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        with open(path, "w") as fh:
            for rec in self.steps:
                fh.write(json.dumps({"kind": "step", **rec}, sort_keys=True) + "\n")
            for rec in self.epochs:
                fh.write(json.dumps({"kind": "epoch", **rec}, sort_keys=True) + "\n")
            fh.write(json.dumps({"kind": "selection", "epoch": self.selected_epoch,
                                 "step": self.selected_step}) + "\n")


# -- noise -------------------------------------------------------------------

class NoiseStream:
    """Seeded source of Gaussian noise codes; position advances per draw."""

    def __init__(self, seed, dim=400):
        self.seed = int(seed)
        self.dim = dim
        self._gen = torch.Generator().manual_seed(self.seed)

    def normal(self, n):
        return torch.randn((n, self.dim), generator=self._gen, dtype=torch.float64)


def sample_noise(n, sigma, stream, dtype=torch.float64):
    """Draw ``n`` i.i.d. N(0, sigma^2) noise codes from ``stream``."""
    if not sigma > 0:
        raise ValueError("sigma must be > 0")
    return (sigma * stream.normal(n)).to(dtype)


# -- batches -----------------------------------------------------------------

def collate(samples, dtype=torch.float32):
    """Stack PreprocessedSamples into a dict of N x C x S x S tensors."""
    def stack(attr, add_channel=False):
        arr = np.stack([getattr(s, attr) for s in samples]).astype(np.float64)
        t = torch.from_numpy(arr)
        return (t.unsqueeze(1) if add_channel else t).to(dtype)

    return {"image": stack("image"), "zscore": stack("zscore_image"),
            "mask": stack("mask", True), "fov": stack("fov", True)}


def _signed(mask):
    return 2 * mask - 1


def _zscore_torch(image, fov):
    w = fov.expand_as(image)
    n = w.sum(dim=(-2, -1), keepdim=True).clamp_min(1)
    mu = (image * w).sum(dim=(-2, -1), keepdim=True) / n
    var = (((image - mu) * w) ** 2).sum(dim=(-2, -1), keepdim=True) / n
    return (image - mu) / var.clamp_min(1e-12).sqrt()


class Trainer:
    """Holds networks, optimizers and random streams for one training run."""

    def __init__(self, config, style_pool=None, g_state=None, d_state=None):
        self.config = config
        torch.set_num_threads(config.threads)
        dtype = config.torch_dtype
        seed = config.seed
        self.g = g_state or build_network(
            NetworkSpec(config.generator_role, config.input_size, config.g_base_filters),
            derive_seed(seed, "init-g"), dtype)
        self.d = d_state or build_network(
            NetworkSpec("discriminator", config.input_size, config.d_base_filters),
            derive_seed(seed, "init-d"), dtype)
        self.g_opt, self.d_opt = make_optimizers(self.g, self.d, config)
        self.noise = NoiseStream(derive_seed(seed, "noise"))
        self.data_rng = np.random.default_rng(derive_seed(seed, "data"))
        self.weights = config.weights
        self.step = 0
        self.extractor = self.segmentor = None
        self.style_pool = None
        if config.mode == "synthesis_style":
            self.extractor = load_extractor(config.extractor, config.vgg_weights,
                                            seed=derive_seed(seed, "extractor"), dtype=dtype)
            if style_pool is None or len(style_pool) == 0:
                raise ConfigError("synthesis_style training needs a non-empty style pool")
            self.style_pool = style_pool
            self._style_cursor = 0
            if config.seg_checkpoint:
                seg = load_checkpoint(config.seg_checkpoint).networks["generator"]
                if seg.spec.role != "segmentor":
                    raise ModeError("seg_checkpoint must hold a segmentor")
                self.segmentor = seg.to(dtype).eval().requires_grad_(False)

    # the generator's output and the discriminator's view of it
    def _fake(self, batch, sigma):
        if self.config.mode == "segmentation":
            prob = self.g(batch["zscore"])
            return prob, batch["image"], _signed(prob)
        z = sample_noise(batch["mask"].shape[0], sigma, self.noise, batch["mask"].dtype)
        fake = self.g(_signed(batch["mask"]), z)
        return fake, fake, _signed(batch["mask"])

    def _next_style(self):
        img = self.style_pool[self._style_cursor % len(self.style_pool)]
        self._style_cursor += 1
        return torch.as_tensor(np.asarray(img)).to(self.config.torch_dtype).unsqueeze(0)

    def generator_loss(self, batch, sigma, style_image=None):
        out, d_img, d_mask = self._fake(batch, sigma)
        d_fake = self.d(d_img, d_mask)
        if not (torch.isfinite(out).all() and torch.isfinite(d_fake).all()):
            self._check(torch.tensor(math.nan), "generator", {})
        mode = self.config.mode
        if mode == "segmentation":
            parts = {"bce": losses.seg_bce(batch["mask"], out)}
        elif mode == "synthesis_l1":
            parts = {"l1": losses.l1_deviation(batch["image"], out)}
        else:
            cfg = self.config.extractor_config
            fx = extract(self.extractor, batch["image"], cfg)
            fs = extract(self.extractor, style_image, cfg)
            fg = extract(self.extractor, out, cfg)
            parts = {"style": losses.style_transfer_loss(fx, fs, fg, out, self.weights)}
            if self.segmentor is not None:
                seg_in = _zscore_torch(out, batch["fov"])
                parts["seg"] = losses.seg_bce(batch["mask"], self.segmentor(seg_in))
        total = losses.generator_objective(mode, self.weights, d_fake=d_fake, **parts)
        comps = {"adv": float(losses.generator_adv_loss(d_fake.detach())),
                 **{k: float(v.detach()) for k, v in parts.items()}}
        return total, comps, out

    def _check(self, loss, what, comps):
        if not torch.isfinite(loss):
            raise NonFiniteLossError(
                f"non-finite {what} loss at step {self.step}",
                snapshot={"step": self.step, "mode": self.config.mode, "what": what,
                          "components": comps, "g_version": self.g.version,
                          "d_version": self.d.version})

    def train_step(self, batch):
        """``g_updates_per_d`` generator updates, then one discriminator update."""
        self.g.train()
        self.d.train()
        sigma = self.config.noise_sigma_train
        style = self._next_style() if self.config.mode == "synthesis_style" else None
        for _ in range(self.config.g_updates_per_d):
            g_loss, comps, _ = self.generator_loss(batch, sigma, style)
            self._check(g_loss, "generator", comps)
            self.g_opt.zero_grad(set_to_none=True)
            g_loss.backward()
            self.g_opt.step()
            self.g.version += 1

        with torch.no_grad():
            _, d_img, d_mask = self._fake(batch, sigma)
        d_real = self.d(batch["image"], _signed(batch["mask"]))
        d_fake = self.d(d_img, d_mask)
        d_loss = losses.discriminator_loss(d_real, d_fake)
        self._check(d_loss, "discriminator", {"d_loss": float(d_loss.detach())})
        self.d_opt.zero_grad(set_to_none=True)
        d_loss.backward()
        self.d_opt.step()
        self.d.version += 1

        self.step += 1
        return {"step": self.step, "g_loss": float(g_loss.detach()), "components": comps,
                "d_loss": float(d_loss.detach()), "d_real_mean": float(d_real.detach().mean()),
                "d_fake_mean": float(d_fake.detach().mean())}

    @torch.no_grad()
    def validation_loss(self, samples):
        """Mean generator objective over ``samples`` in inference mode.

        Noise is redrawn from a fixed stream so every epoch sees the same codes.
        """
        if not samples:
            return math.nan, {}
        self.g.eval()
        self.d.eval()
        saved_noise, saved_cursor = self.noise, getattr(self, "_style_cursor", 0)
        self.noise = NoiseStream(derive_seed(self.config.seed, "val-noise"))
        self._style_cursor = 0
        total, n, comp_sums = 0.0, 0, {}
        try:
            for start in range(0, len(samples), self.config.batch_size):
                chunk = samples[start:start + self.config.batch_size]
                batch = collate(chunk, self.config.torch_dtype)
                style = self._next_style() if self.config.mode == "synthesis_style" else None
                loss, comps, _ = self.generator_loss(batch, self.config.noise_sigma_train, style)
                total += float(loss) * len(chunk)
                for k, v in comps.items():
                    comp_sums[k] = comp_sums.get(k, 0.0) + v * len(chunk)
                n += len(chunk)
        finally:
            self.noise, self._style_cursor = saved_noise, saved_cursor
        return total / n, {k: v / n for k, v in comp_sums.items()}

    def snapshot(self):
        return {"generator": copy.deepcopy(self.g), "discriminator": copy.deepcopy(self.d)}


def make_optimizers(g, d, config, lr=None):
    lr = config.lr if lr is None else lr
    betas = (config.adam_beta1, config.adam_beta2)
    return (torch.optim.Adam(g.parameters(), lr=lr, betas=betas, eps=config.adam_eps),
            torch.optim.Adam(d.parameters(), lr=lr, betas=betas, eps=config.adam_eps))


def train_step(g_state, d_state, batch, config, optimizers, noise=None):
    """Functional wrapper around :meth:`Trainer.train_step` for callers that
    manage their own networks and optimizers."""
    t = Trainer.__new__(Trainer)
    t.config, t.g, t.d = config, g_state, d_state
    t.g_opt, t.d_opt = optimizers
    t.noise = noise or NoiseStream(derive_seed(config.seed, "noise"))
    t.weights = config.weights
    t.step = 0
    t.extractor = t.segmentor = t.style_pool = None
    if config.mode == "synthesis_style":
        raise ModeError("use Trainer for synthesis_style training (needs a style pool)")
    return t.train_step(batch)


def _checkpoint_extra(config, epoch, val_loss):
    return {"mode": config.mode, "epoch": epoch, "val_loss": val_loss,
            "config": config.to_dict()}


def train(config, split, style_pool=None, out_dir=None, progress=None):
    """Train on ``split.train`` and return ``(best_checkpoint, TrainLog)``.

    The returned checkpoint is the epoch with the least validation loss;
    epoch 0 is the untrained initialization.
    """
    if not split.train:
        raise ConfigError("training split is empty")
    if config.mode == "synthesis_style" and style_pool is None:
        style_pool = [s.image for s in split.train]
    trainer = Trainer(config, style_pool)
    tlog = TrainLog()
    out_dir = Path(out_dir) if out_dir else None
    val = split.val or split.train

    def end_epoch(epoch):
        val_loss, comps = trainer.validation_loss(val)
        rec = {"epoch": epoch, "step": trainer.step, "val_loss": val_loss, "val_components": comps}
        tlog.epochs.append(rec)
        if out_dir:
            save_checkpoint(out_dir / f"epoch_{epoch:04d}.ckpt",
                            {"generator": trainer.g, "discriminator": trainer.d},
                            trainer.step, _checkpoint_extra(config, epoch, val_loss))
        if progress:
            progress(rec)
        return val_loss

    best_loss = end_epoch(0)
    best = (0, trainer.step, best_loss, trainer.snapshot())
    stale = 0
    for epoch in range(1, config.epochs + 1):
        order = trainer.data_rng.permutation(len(split.train))
        for start in range(0, len(order), config.batch_size):
            batch = collate([split.train[i] for i in order[start:start + config.batch_size]],
                            config.torch_dtype)
            tlog.steps.append(trainer.train_step(batch))
        val_loss = end_epoch(epoch)
        if val_loss < best[2]:
            best = (epoch, trainer.step, val_loss, trainer.snapshot())
            stale = 0
        else:
            stale += 1
            if stale >= config.patience:
                log.info("early stop after %d epochs without improvement", stale)
                break

    epoch, step, val_loss, nets = best
    tlog.selected_epoch, tlog.selected_step = epoch, step
    ckpt = Checkpoint(networks=nets, step=step,
                      meta={"extra": _checkpoint_extra(config, epoch, val_loss)})
    if out_dir:
        save_checkpoint(out_dir / "best.ckpt", nets, step, ckpt.meta["extra"])
        tlog.to_jsonl(out_dir / "trainlog.jsonl")
    return ckpt, tlog


def checkpoint_mode(checkpoint):
    mode = checkpoint.meta.get("extra", {}).get("mode")
    if mode is None:
        role = checkpoint.networks["generator"].spec.role
        mode = "segmentation" if role == "segmentor" else "synthesis_l1"
    return mode


@torch.no_grad()
def generate(checkpoint, masks, n_per_mask=1, sigma_eval=1.0, seed=0, z=None):
    """Synthesize ``n_per_mask`` images per binary mask with fresh noise.

    Returns a list (one entry per mask) of n x 3 x S x S arrays in [-1, 1].
    """
    g = checkpoint.networks["generator"]
    if g.spec.role != "synthesis":
        raise ModeError(f"generate needs a synthesis checkpoint, got {g.spec.role}")
    g.eval()
    dtype = next(g.parameters()).dtype
    stream = NoiseStream(derive_seed(seed, "generate"))
    out = []
    for m in masks:
        y = torch.as_tensor(np.asarray(m, dtype=np.float64)).to(dtype)
        y = _signed(y.reshape(1, 1, *y.shape[-2:])).expand(n_per_mask, -1, -1, -1)
        codes = torch.as_tensor(z).to(dtype).reshape(n_per_mask, -1) if z is not None \
            else sample_noise(n_per_mask, sigma_eval, stream, dtype)
        out.append(g(y, codes).cpu().numpy())
    return out
