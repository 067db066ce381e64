"""Independent reference implementations used as test oracles.

These are deliberately naive (explicit loops, exact fractions) and share no
code with the package.
"""

from fractions import Fraction

import numpy as np


def l1_loop(x, y):
    x, y = np.ravel(x), np.ravel(y)
    total = 0.0
    for a, b in zip(x, y):
        total += abs(a - b)
    return total / len(x)


def bce_loop(y, p, eps=1e-7):
    y, p = np.ravel(y), np.ravel(p)
    total = 0.0
    for t, q in zip(y, p):
        q = min(max(q, eps), 1 - eps)
        total += -(t * np.log(q) + (1 - t) * np.log(1 - q))
    return total / len(y)


def gram_loop(f):
    c, h, w = f.shape
    g = np.zeros((c, c))
    for i in range(c):
        for j in range(c):
            s = 0.0
            for r in range(h):
                for q in range(w):
                    s += f[i, r, q] * f[j, r, q]
            g[i, j] = s
    return g


def tv_loop(x):
    c, h, w = x.shape
    total = 0.0
    for ch in range(c):
        for r in range(h):
            for q in range(w):
                if r + 1 < h:
                    total += (x[ch, r + 1, q] - x[ch, r, q]) ** 2
                if q + 1 < w:
                    total += (x[ch, r, q + 1] - x[ch, r, q]) ** 2
    return total


def style_loop(fs, fg, block_weights):
    """fs, fg: dict (block, layer) -> C x H x W arrays (single image)."""
    total = 0.0
    for key in fg:
        a, b = gram_loop(fs[key]), gram_loop(fg[key])
        _, h, w = fg[key].shape
        fro = 0.0
        for i in range(a.shape[0]):
            for j in range(a.shape[1]):
                fro += (a[i, j] - b[i, j]) ** 2
        total += block_weights[key[0] - 1] / (w * h) * fro
    return total


def content_loop(fx, fg):
    total = 0.0
    for key in fg:
        _, h, w = fg[key].shape
        fro = 0.0
        for a, b in zip(np.ravel(fx[key]), np.ravel(fg[key])):
            fro += (a - b) ** 2
        total += fro / (w * h)
    return total


def otsu_sweep(values, n_bins=256):
    """Exhaustive threshold sweep with exact rational arithmetic.

    Pixel level = index of the right-closed bin (k/n, (k+1)/n] holding it.
    Returns the threshold k/n maximising between-class variance (lowest k on ties).
    """
    levels = []
    for v in np.ravel(values):
        b = 0
        while b < n_bins - 1 and v > (b + 1) / n_bins:
            b += 1
        levels.append(b)
    n = len(levels)
    best_k, best = None, None
    for k in range(1, n_bins):
        lo = [l for l in levels if l < k]
        hi = [l for l in levels if l >= k]
        if not lo or not hi:
            continue
        w0, w1 = Fraction(len(lo), n), Fraction(len(hi), n)
        mu0, mu1 = Fraction(sum(lo), len(lo)), Fraction(sum(hi), len(hi))
        score = w0 * w1 * (mu1 - mu0) ** 2
        if best is None or score > best:
            best, best_k = score, k
    return best_k / n_bins


def auc_roc_pairs(scores, labels):
    pos = [s for s, l in zip(scores, labels) if l]
    neg = [s for s, l in zip(scores, labels) if not l]
    wins = 0.0
    for p in pos:
        for q in neg:
            wins += 1.0 if p > q else 0.5 if p == q else 0.0
    return wins / (len(pos) * len(neg))


def auc_pr_sweep(scores, labels):
    n_pos = sum(1 for l in labels if l)
    area, prev_recall = 0.0, 0.0
    for t in sorted(set(scores), reverse=True):
        tp = sum(1 for s, l in zip(scores, labels) if s >= t and l)
        fp = sum(1 for s, l in zip(scores, labels) if s >= t and not l)
        recall = tp / n_pos
        area += (recall - prev_recall) * (tp / (tp + fp))
        prev_recall = recall
    return area


def iou_count(a, b):
    inter = union = 0
    for u, v in zip(np.ravel(a), np.ravel(b)):
        inter += int(bool(u) and bool(v))
        union += int(bool(u) or bool(v))
    return inter / union


def central_differences(f, x, h=1e-4):
    """Gradient of scalar ``f`` at numpy array ``x`` by central differences."""
    x = np.array(x, dtype=np.float64)
    grad = np.zeros_like(x)
    flat, gflat = x.reshape(-1), grad.reshape(-1)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + h
        up = f(x)
        flat[i] = orig - h
        down = f(x)
        flat[i] = orig
        gflat[i] = (up - down) / (2 * h)
    return grad


def max_relative_error(analytic, numeric, floor=1e-8):
    a, n = np.ravel(analytic), np.ravel(numeric)
    return float(np.max(np.abs(a - n) / np.maximum(np.maximum(np.abs(a), np.abs(n)), floor)))
