"""Procedural retina-like datasets for desk-scale experiments.

Vessel trees grow as branching random walks from an optic-disc origin,
are rasterised to a binary mask, and rendered over a smooth textured
background inside a circular field of view.
"""

from dataclasses import asdict, dataclass
from pathlib import Path

import numpy as np
from PIL import Image
from scipy import ndimage

from .._io import write_json
from .samples import DatasetKind, FundusSample


@dataclass(frozen=True)
class VesselParams:
    fov_radius: float = 0.46        # fraction of image size
    n_roots: tuple = (4, 6)         # inclusive range of trunks leaving the disc
    root_radius: float = 0.011      # fraction of size
    min_radius_px: float = 0.55
    min_radius_frac: float = 0.0025
    step: float = 0.025             # walk step, fraction of size
    turn_sd: float = 0.22           # radians per step
    taper: float = 0.97
    branch_prob: float = 0.14
    child_scale: float = 0.78
    max_segments: int = 1600
    vessel_contrast: float = 0.45
    noise_sd: float = 3.0


def _grow_tree(rng, size, p):
    centre = np.array([size / 2.0, size / 2.0])
    fov_r = p.fov_radius * size
    side = rng.choice([-1.0, 1.0])
    disc = centre + np.array([rng.uniform(-0.1, 0.1) * fov_r, side * rng.uniform(0.25, 0.4) * fov_r])
    step = p.step * size
    r_min = max(p.min_radius_px, p.min_radius_frac * size)
    r0 = max(p.root_radius * size, r_min * 2.4)
    stack = []
    n_roots = rng.integers(p.n_roots[0], p.n_roots[1] + 1)
    base = rng.uniform(0, 2 * np.pi)
    for k in range(n_roots):
        heading = base + 2 * np.pi * k / n_roots + rng.normal(0, 0.25)
        stack.append((disc.copy(), heading, r0 * rng.uniform(0.8, 1.1)))

    segments = []
    while stack and len(segments) < p.max_segments:
        pos, heading, radius = stack.pop()
        while radius >= r_min and len(segments) < p.max_segments:
            heading += rng.normal(0, p.turn_sd)
            nxt = pos + step * np.array([np.sin(heading), np.cos(heading)])
            if np.linalg.norm(nxt - centre) > fov_r:
                break
            segments.append((pos, nxt, radius))
            pos = nxt
            radius *= p.taper
            if rng.random() < p.branch_prob:
                turn = rng.uniform(0.45, 0.9) * rng.choice([-1.0, 1.0])
                stack.append((pos.copy(), heading + turn, radius * p.child_scale))
                radius *= 0.92
    return disc, segments


def _rasterise(segments, size):
    """Binary mask of all pixel centres within ``radius`` of a segment."""
    mask = np.zeros((size, size), dtype=bool)
    for a, b, radius in segments:
        lo = np.floor(np.minimum(a, b) - radius - 1).astype(int).clip(0, size - 1)
        hi = np.ceil(np.maximum(a, b) + radius + 1).astype(int).clip(0, size - 1)
        rows, cols = np.mgrid[lo[0]:hi[0] + 1, lo[1]:hi[1] + 1]
        pts = np.stack([rows + 0.5, cols + 0.5], -1)
        ab = b - a
        t = np.clip(((pts - a) @ ab) / max(ab @ ab, 1e-12), 0.0, 1.0)
        dist = np.linalg.norm(pts - (a + t[..., None] * ab), axis=-1)
        mask[lo[0]:hi[0] + 1, lo[1]:hi[1] + 1] |= dist <= radius
    return mask


def _render(rng, mask, fov, disc, size, p):
    yy, xx = np.mgrid[0:size, 0:size] + 0.5
    rr = np.hypot(yy - size / 2, xx - size / 2) / (p.fov_radius * size)
    illum = 1.0 - 0.35 * rr ** 2
    texture = ndimage.gaussian_filter(rng.normal(size=(size, size)), sigma=size / 12)
    texture /= np.abs(texture).max() + 1e-12
    disc_r = 0.09 * size
    glow = np.exp(-((yy - disc[0]) ** 2 + (xx - disc[1]) ** 2) / (2 * disc_r ** 2))
    tint = np.array([205.0, 95.0, 40.0]) * rng.uniform(0.85, 1.1, 3)
    base = tint * (illum * (1 + 0.08 * texture))[..., None] + 70.0 * glow[..., None] * [1.0, 1.0, 0.6]
    soft = ndimage.gaussian_filter(mask.astype(float), sigma=max(0.5, size / 256))
    soft = np.maximum(soft, mask)
    darken = 1.0 - p.vessel_contrast * soft[..., None] * np.array([0.7, 1.0, 0.8])
    image = base * darken + rng.normal(0, p.noise_sd, (size, size, 3))
    image = np.clip(np.round(image), 0, 255) * fov[..., None]
    return image.astype(np.float64)


def make_sample(index, size, seed, params=VesselParams()):
    rng = np.random.default_rng(np.random.SeedSequence([int(seed), int(index)]))
    yy, xx = np.mgrid[0:size, 0:size] + 0.5
    fov = (np.hypot(yy - size / 2, xx - size / 2) <= params.fov_radius * size).astype(np.uint8)
    disc, segments = _grow_tree(rng, size, params)
    mask = (_rasterise(segments, size) & fov.astype(bool)).astype(np.uint8)
    image = _render(rng, mask, fov, disc, size, params)
    return FundusSample(image=image, mask=mask, fov=fov, id=f"synth_{index:05d}",
                        original_size=(size, size), kind=DatasetKind.SYNTHETIC)


def make_synthetic_dataset(n, size, seed, params=VesselParams()):
    """Generate ``n`` synthetic fundus samples of ``size`` x ``size`` pixels.

    Each sample depends only on ``(seed, index)``.
    """
    if size < 64 or n < 1:
        raise ValueError("make_synthetic_dataset needs size >= 64 and n >= 1")
    return [make_sample(i, size, seed, params) for i in range(n)]


def export_dataset(samples, out, manifest=None):
    """Write samples in the ``images/ masks/ fov/`` PNG layout plus a manifest."""
    out = Path(out)
    for sub in ("images", "masks", "fov"):
        (out / sub).mkdir(parents=True, exist_ok=True)
    for s in samples:
        Image.fromarray(s.image.astype(np.uint8)).save(out / "images" / f"{s.id}.png")
        Image.fromarray(s.mask.astype(np.uint8) * 255).save(out / "masks" / f"{s.id}.png")
        Image.fromarray(s.fov.astype(np.uint8) * 255).save(out / "fov" / f"{s.id}.png")
    write_json(out / "manifest.json", dict(manifest or {}, count=len(samples),
                                          ids=[s.id for s in samples]))


def synthesize_to_disk(n, size, seed, out, params=VesselParams()):
    samples = make_synthetic_dataset(n, size, seed, params)
    export_dataset(samples, out, manifest={"seed": seed, "size": size, "n": n,
                                           "params": asdict(params)})
    return samples
