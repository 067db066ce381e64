"""Differentiable training objectives.

Every reduction over batch items and pixels is a mean, so the weighting
coefficients alone control the balance between terms. Functions accept
torch tensors (or anything ``torch.as_tensor`` understands) and return
0-dim tensors that carry gradients.
"""

from dataclasses import dataclass

import torch

from .errors import DomainError, ModeError, ShapeMismatchError, StructureMismatchError

EPS = 1e-7
MODES = ("synthesis_l1", "synthesis_style", "segmentation")


@dataclass
class LossWeights:
    lambda_dev: float = 10.0
    lambda_seg: float = 10.0
    omega_cont: float = 1.0
    omega_sty: float = 10.0
    omega_tv: float = 100.0
    block_weights: tuple = (0.2, 0.2, 0.2, 0.2, 0.2)

    def __post_init__(self):
        self.block_weights = tuple(float(w) for w in self.block_weights)
        scalars = (self.lambda_dev, self.lambda_seg, self.omega_cont, self.omega_sty, self.omega_tv)
        if min(scalars + self.block_weights) < 0:
            raise ValueError("loss weights must be non-negative")

    def block_weight(self, block):
        return self.block_weights[block - 1]


def _t(x):
    return x if torch.is_tensor(x) else torch.as_tensor(x, dtype=torch.float64)


def _same_shape(a, b):
    if a.shape != b.shape:
        raise ShapeMismatchError(f"shape mismatch: {tuple(a.shape)} vs {tuple(b.shape)}")


def _probabilities(p):
    p = _t(p)
    if torch.any((p < 0) | (p > 1)) or torch.any(torch.isnan(p)):
        raise DomainError("probabilities must lie in [0, 1]")
    return p.clamp(EPS, 1 - EPS)


def l1_deviation(x, x_hat):
    x, x_hat = _t(x), _t(x_hat)
    _same_shape(x, x_hat)
    return (x - x_hat).abs().mean()


def generator_adv_loss(d_fake):
    """Non-saturating generator loss, mean of -log D(G(y, z))."""
    return -torch.log(_probabilities(d_fake)).mean()


def discriminator_loss(d_real, d_fake):
    """Negated discriminator objective: -(mean log D(x) + mean log(1 - D(G)))."""
    d_real, d_fake = _probabilities(d_real), _probabilities(d_fake)
    return -(torch.log(d_real).mean() + torch.log1p(-d_fake).mean())


def seg_bce(y, y_hat):
    y = _t(y)
    y_hat = _probabilities(y_hat)
    y = y.to(y_hat.dtype)
    _same_shape(y, y_hat)
    return -(y * torch.log(y_hat) + (1 - y) * torch.log1p(-y_hat)).mean()


def gram(features):
    """Channel inner products: C x H x W -> C x C (batched over leading dims)."""
    f = _t(features)
    flat = f.reshape(*f.shape[:-2], -1)
    return flat @ flat.transpose(-1, -2)


def _entries(feats):
    return feats.entries if hasattr(feats, "entries") else feats


def _keys(feats, kind, keys):
    if keys is not None:
        return list(keys)
    picked = getattr(feats, kind + "_keys", None)
    return list(picked) if picked is not None else sorted(_entries(feats))


def _pair(a, b, key):
    try:
        fa, fb = _entries(a)[key], _entries(b)[key]
    except KeyError as exc:
        raise StructureMismatchError(f"feature entry {key} missing") from exc
    if fa.shape[-3:] != fb.shape[-3:]:
        raise StructureMismatchError(f"entry {key}: {tuple(fa.shape)} vs {tuple(fb.shape)}")
    return fa, fb


def _batch_mean(per_item):
    return per_item.mean() if per_item.dim() else per_item


def style_loss(feats_style, feats_gen, weights=None, keys=None):
    """Weighted squared Frobenius distance between Gram matrices.

    Entries are keyed by ``(block, layer)``; each term is scaled by the
    block weight over the layer's spatial area.
    """
    weights = weights or LossWeights()
    total = 0.0
    for key in _keys(feats_gen, "style", keys):
        fs, fg = _pair(feats_style, feats_gen, key)
        h, w = fg.shape[-2:]
        diff = gram(fs) - gram(fg)
        term = diff.pow(2).sum(dim=(-2, -1))
        total = total + weights.block_weight(key[0]) / (w * h) * _batch_mean(term)
    return _t(total)


def content_loss(feats_x, feats_gen, keys=None):
    total = 0.0
    for key in _keys(feats_gen, "content", keys):
        fx, fg = _pair(feats_x, feats_gen, key)
        h, w = fg.shape[-2:]
        term = (fx - fg).pow(2).sum(dim=(-3, -2, -1))
        total = total + _batch_mean(term) / (w * h)
    return _t(total)


def tv_loss(x_hat):
    """Sum of squared horizontal and vertical neighbour differences,
    summed over channels (C x H x W, or batched with a mean over items)."""
    x = _t(x_hat)
    if x.dim() < 3:
        raise ShapeMismatchError("tv_loss expects C x H x W input")
    dh = (x[..., 1:, :] - x[..., :-1, :]).pow(2).sum(dim=(-3, -2, -1))
    dw = (x[..., :, 1:] - x[..., :, :-1]).pow(2).sum(dim=(-3, -2, -1))
    return _batch_mean(dh + dw)


def style_transfer_loss(feats_x, feats_style, feats_gen, x_hat, weights=None):
    weights = weights or LossWeights()
    return (weights.omega_cont * content_loss(feats_x, feats_gen)
            + weights.omega_sty * style_loss(feats_style, feats_gen, weights)
            + weights.omega_tv * tv_loss(x_hat))


_PARTS = {
    "synthesis_l1": ({"d_fake", "l1"}, set()),
    "segmentation": ({"d_fake", "bce"}, set()),
    "synthesis_style": ({"d_fake", "style"}, {"seg"}),
}


def generator_objective(mode, weights=None, **parts):
    """Total generator loss for one training mode.

    ``parts`` supplies precomputed terms: ``d_fake`` (discriminator outputs
    on generated pairs) plus ``l1`` for ``synthesis_l1``, ``bce`` for
    ``segmentation``, or ``style`` (and optionally ``seg``) for
    ``synthesis_style``.
    """
    if mode not in _PARTS:
        raise ModeError(f"unknown mode {mode!r}; expected one of {MODES}")
    weights = weights or LossWeights()
    required, optional = _PARTS[mode]
    given = set(parts)
    if not required <= given or given - required - optional:
        raise ModeError(f"mode {mode} needs parts {sorted(required)} (optional {sorted(optional)}), "
                        f"got {sorted(given)}")
    adv = generator_adv_loss(parts["d_fake"])
    if mode == "synthesis_l1":
        return adv + weights.lambda_dev * _t(parts["l1"])
    if mode == "segmentation":
        return adv + weights.lambda_seg * _t(parts["bce"])
    seg = _t(parts.get("seg", 0.0))
    return adv + weights.lambda_seg * seg + _t(parts["style"])
