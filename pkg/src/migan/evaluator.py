"""Segmentation metrics restricted to the field of view, and reports."""

import json
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np
import torch

from .data import preprocess, restore_original
from .errors import (DegenerateInputError, ModeError, NoPositiveError, ShapeMismatchError,
                     SingleClassError)
from .networks import segmentor_forward

N_BINS = 256


def _inside(values, fov):
    values = np.asarray(values, dtype=np.float64)
    fov = np.asarray(fov).astype(bool)
    if values.shape != fov.shape:
        raise ShapeMismatchError(f"array {values.shape} and fov {fov.shape} differ")
    return values[fov]


def histogram_bins(values, n_bins=N_BINS):
    """Right-closed bin index on [0, 1]: bin k holds (k/n, (k+1)/n], 0 in bin 0."""
    edges = np.arange(n_bins + 1) / n_bins
    idx = np.searchsorted(edges, np.asarray(values, dtype=np.float64), side="left") - 1
    return np.clip(idx, 0, n_bins - 1)


def otsu_threshold(prob, fov, n_bins=N_BINS):
    """Otsu threshold over FOV pixels.

    Candidate thresholds are the bin edges k/n_bins, k = 1..n_bins-1; the
    lower class is ``prob <= t``. Returns ``(t, mask)`` with
    ``mask = (prob > t) & fov``; equal scores resolve to the lower ``t``.
    """
    vals = _inside(prob, fov)
    if vals.size == 0 or np.all(vals == vals[0]):
        raise DegenerateInputError("Otsu needs at least two distinct values inside the FOV")
    counts = np.bincount(histogram_bins(vals, n_bins), minlength=n_bins).astype(np.float64)
    levels = np.arange(n_bins, dtype=np.float64)
    total = counts.sum()
    n0 = np.cumsum(counts)[:-1]
    s0 = np.cumsum(counts * levels)[:-1]
    n1 = total - n0
    s1 = (counts * levels).sum() - s0
    with np.errstate(divide="ignore", invalid="ignore"):
        score = n0 * n1 * (s1 / n1 - s0 / n0) ** 2 / total ** 2
    score[(n0 == 0) | (n1 == 0)] = -1.0
    k = int(np.argmax(score)) + 1
    t = k / n_bins
    mask = ((np.asarray(prob) > t) & np.asarray(fov).astype(bool)).astype(np.uint8)
    return t, mask


def dice(pred, gold, fov):
    p, g = _inside(pred, fov) > 0, _inside(gold, fov) > 0
    if np.asarray(pred).shape != np.asarray(gold).shape:
        raise ShapeMismatchError("pred and gold shapes differ")
    denom = p.sum() + g.sum()
    return 1.0 if denom == 0 else float(2.0 * (p & g).sum() / denom)


def _sweep(prob, gold, fov):
    """Cumulative TP/FP counts at every distinct score, highest first."""
    s = _inside(prob, fov)
    y = _inside(gold, fov) > 0
    order = np.argsort(-s, kind="mergesort")
    s, y = s[order], y[order]
    last = np.r_[np.flatnonzero(np.diff(s)), s.size - 1]
    tp = np.cumsum(y)[last]
    fp = np.cumsum(~y)[last]
    return tp, fp, int(y.sum()), int((~y).sum())


def roc_curve(prob, gold, fov):
    tp, fp, pos, neg = _sweep(prob, gold, fov)
    if pos == 0 or neg == 0:
        raise SingleClassError("AUC-ROC needs both classes inside the FOV")
    return np.r_[0.0, fp / neg], np.r_[0.0, tp / pos]


def auc_roc(prob, gold, fov):
    fpr, tpr = roc_curve(prob, gold, fov)
    return float(np.sum(np.diff(fpr) * (tpr[1:] + tpr[:-1]) / 2))


def pr_curve(prob, gold, fov):
    tp, fp, pos, _ = _sweep(prob, gold, fov)
    if pos == 0:
        raise NoPositiveError("AUC-PR needs at least one positive inside the FOV")
    return np.r_[0.0, tp / pos], tp / (tp + fp)


def auc_pr(prob, gold, fov):
    """Step-wise area: sum of recall increments times precision at that threshold."""
    recall, precision = pr_curve(prob, gold, fov)
    return float(np.sum(np.diff(recall) * precision))


@dataclass
class EvalReport:
    per_image: list
    aggregate: dict
    config: dict = field(default_factory=dict)

    def to_json(self, path=None):
        text = json.dumps(asdict(self), indent=2, sort_keys=True)
        if path:
            Path(path).parent.mkdir(parents=True, exist_ok=True)
            Path(path).write_text(text + "\n")
        return text

    def table(self, dataset="dataset"):
        """Markdown table with the Dice / AUC ROC / AUC PR columns."""
        a = self.aggregate
        return "\n".join([
            f"| Method | {dataset} Dice | {dataset} AUC ROC | {dataset} AUC PR |",
            "|---|---|---|---|",
            f"| {self.config.get('method', 'MI-GAN')} | {a['dice']:.3f} | {a['auc_roc']:.3f} | {a['auc_pr']:.3f} |",
        ])


def image_metrics(prob, gold, fov, image_id=""):
    t, binary = otsu_threshold(prob, fov)
    return {"id": image_id, "dice": dice(binary, gold, fov), "auc_roc": auc_roc(prob, gold, fov),
            "auc_pr": auc_pr(prob, gold, fov), "otsu_threshold": t}


def evaluate_predictions(predictions, samples, config=None):
    """Score full-resolution probability maps against ``samples``' gold masks."""
    rows = [image_metrics(p, s.mask, s.fov, s.id) for p, s in zip(predictions, samples)]
    rows.sort(key=lambda r: r["id"])
    agg = {k: float(np.mean([r[k] for r in rows])) for k in ("dice", "auc_roc", "auc_pr")}
    return EvalReport(per_image=rows, aggregate=agg, config=dict(config or {}))


@torch.no_grad()
def segment(segmentor, samples, size=None, batch_size=8):
    """Probability maps at each sample's native geometry, FOV-masked."""
    if segmentor.spec.role != "segmentor":
        raise ModeError(f"need a segmentor, got {segmentor.spec.role}")
    segmentor.eval()
    size = size or segmentor.spec.input_size
    dtype = next(segmentor.parameters()).dtype
    out = []
    for start in range(0, len(samples), batch_size):
        chunk = samples[start:start + batch_size]
        pre = [preprocess(s, size=size) for s in chunk]
        x = torch.from_numpy(np.stack([p.zscore_image for p in pre])).to(dtype)
        probs = segmentor_forward(segmentor, x).double().numpy()[:, 0]
        out.extend(restore_original(p, s) for p, s in zip(probs, chunk))
    return out


def evaluate_dataset(checkpoint, samples, config=None):
    seg = checkpoint.networks["generator"]
    preds = segment(seg, samples)
    return evaluate_predictions(preds, samples, config)
