"""Fundus sample containers, dataset loading and geometric preprocessing."""

import enum
import logging
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np
from PIL import Image
from scipy import ndimage

from ..errors import InsufficientDataError, MissingPairError, ShapeMismatchError

log = logging.getLogger(__name__)

IMAGE_SUFFIXES = {".png", ".tif", ".tiff", ".gif", ".ppm", ".jpg", ".jpeg"}
TARGET_SIZE = 512
# Native (rows, cols) geometry of the two public datasets.
NATIVE_SHAPE = {"DRIVE": (584, 565), "STARE": (605, 700)}
STARE_FOV_LUMINANCE = 25.0


class DatasetKind(str, enum.Enum):
    DRIVE = "DRIVE"
    STARE = "STARE"
    SYNTHETIC = "SYNTHETIC"


@dataclass
class FundusSample:
    image: np.ndarray          # H x W x 3, values in [0, 255]
    mask: np.ndarray           # H x W, {0, 1}
    fov: np.ndarray            # H x W, {0, 1}
    id: str
    original_size: tuple
    kind: DatasetKind = DatasetKind.SYNTHETIC
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        self.kind = DatasetKind(self.kind)
        h, w = self.image.shape[:2]
        if self.image.ndim != 3 or self.image.shape[2] != 3:
            raise ShapeMismatchError(f"{self.id}: image must be HxWx3, got {self.image.shape}")
        if self.mask.shape != (h, w) or self.fov.shape != (h, w):
            raise ShapeMismatchError(
                f"{self.id}: image {self.image.shape[:2]}, mask {self.mask.shape}, "
                f"fov {self.fov.shape} differ")
        self.original_size = tuple(int(v) for v in self.original_size)


@dataclass
class PreprocessedSample:
    image: np.ndarray          # 3 x S x S in [-1, 1]
    mask: np.ndarray           # S x S, {0, 1}
    fov: np.ndarray            # S x S, {0, 1}
    zscore_image: np.ndarray   # 3 x S x S, standardized over FOV pixels
    id: str
    original_size: tuple
    kind: DatasetKind = DatasetKind.SYNTHETIC


@dataclass
class DatasetSplit:
    train: list
    val: list
    seed: int


def scale_to_unit(values):
    """Linear map [0, 255] -> [-1, 1]."""
    return np.asarray(values, dtype=np.float64) / 127.5 - 1.0


def unscale_from_unit(values):
    return (np.asarray(values, dtype=np.float64) + 1.0) * 127.5


def _read_rgb(path):
    with Image.open(path) as im:
        return np.asarray(im.convert("RGB"), dtype=np.float64)


def _read_binary(path):
    with Image.open(path) as im:
        return (np.asarray(im.convert("L")) > 127).astype(np.uint8)


def _list_images(directory):
    if not directory.is_dir():
        return []
    return sorted(p for p in directory.iterdir() if p.suffix.lower() in IMAGE_SUFFIXES)


def _match(stem, candidates, shared_tokens=frozenset()):
    """Find the file paired with ``stem``: exact stem first, then the
    leading ``_``-delimited token (``21_training`` <-> ``21_manual1``) when
    no other image shares that token. Several matches mean several
    annotators; the first sorted one wins."""
    exact = [p for p in candidates if p.stem == stem]
    if exact:
        return exact[0]
    token = stem.split("_")[0]
    if token in shared_tokens:
        return None
    loose = [p for p in candidates if p.stem.split("_")[0] == token]
    return loose[0] if loose else None


def stare_fov(image):
    """Estimate a field-of-view mask from luminance when none ships with the data."""
    lum = image @ np.array([0.299, 0.587, 0.114])
    fg = lum > STARE_FOV_LUMINANCE
    labels, n = ndimage.label(fg)
    if n == 0:
        return np.zeros(fg.shape, dtype=np.uint8)
    sizes = ndimage.sum(fg, labels, index=np.arange(1, n + 1))
    largest = labels == (1 + int(np.argmax(sizes)))
    closed = ndimage.binary_closing(largest, structure=np.ones((5, 5)), iterations=2)
    return ndimage.binary_fill_holes(closed).astype(np.uint8)


def load_dataset(root, kind):
    """Load every image/mask(/fov) triple under ``root``.

    Layout: ``root/images``, ``root/masks`` and optionally ``root/fov``.
    """
    kind = DatasetKind(kind)
    root = Path(root)
    if not root.is_dir():
        raise FileNotFoundError(root)
    images = _list_images(root / "images")
    if not images:
        log.warning("no images found under %s", root)
        return []
    if not (root / "masks").is_dir():
        raise MissingPairError(f"{root}: masks directory is missing")
    masks = _list_images(root / "masks")
    fovs = _list_images(root / "fov")
    tokens = [p.stem.split("_")[0] for p in images]
    shared = frozenset(t for t in tokens if tokens.count(t) > 1)

    samples = []
    for img_path in images:
        mask_path = _match(img_path.stem, masks, shared)
        if mask_path is None:
            raise MissingPairError(f"no mask found for image {img_path.name}")
        image = _read_rgb(img_path)
        mask = _read_binary(mask_path)
        fov_path = _match(img_path.stem, fovs, shared)
        fov = _read_binary(fov_path) if fov_path is not None else None
        if mask.shape != image.shape[:2] or (fov is not None and fov.shape != mask.shape):
            raise ShapeMismatchError(f"{img_path.name}: image and mask dimensions differ")
        if kind is not DatasetKind.SYNTHETIC and image.shape[:2] != NATIVE_SHAPE[kind.value]:
            raise ShapeMismatchError(
                f"{img_path.name}: expected {NATIVE_SHAPE[kind.value]} for {kind.value}, "
                f"got {image.shape[:2]}")
        if fov is None:
            fov = stare_fov(image)
        outside = int((mask > fov).sum())
        if outside:
            log.warning("%s: %d vessel pixels outside the FOV dropped", img_path.name, outside)
            mask = mask * fov
        samples.append(FundusSample(image=image, mask=mask, fov=fov, id=img_path.stem,
                                    original_size=image.shape[:2], kind=kind))
    return samples


def _resize(channel, size, resample):
    """Resize one 2-D float channel to ``size`` = (rows, cols)."""
    im = Image.fromarray(np.asarray(channel, dtype=np.float32), mode="F")
    out = im.resize((size[1], size[0]), resample=resample)
    return np.asarray(out, dtype=np.float64)


def _resize_binary(arr, size):
    return (_resize(arr, size, Image.NEAREST) >= 0.5).astype(np.uint8)


def _square_crop_box(shape):
    h, w = shape
    side = min(h, w)
    top, left = (h - side) // 2, (w - side) // 2
    return top, left, side


def zscore_channels(image, fov):
    """Per-channel standardization using statistics over FOV pixels only.

    ``image`` is C x H x W. Constant channels are centred but not scaled.
    """
    inside = fov.astype(bool)
    if not inside.any():
        inside = np.ones_like(inside)
    out = np.empty_like(image, dtype=np.float64)
    for c in range(image.shape[0]):
        vals = image[c][inside]
        mu, sd = vals.mean(), vals.std()
        out[c] = (image[c] - mu) / (sd if sd > 0 else 1.0)
    return out


def preprocess(sample, kind=None, size=TARGET_SIZE):
    """Crop/resize ``sample`` to ``size`` x ``size`` and rescale to [-1, 1]."""
    kind = DatasetKind(kind or sample.kind)
    h, w = sample.image.shape[:2]
    image, mask, fov = sample.image, sample.mask, sample.fov
    if kind is DatasetKind.SYNTHETIC:
        if h != w or h < 64:
            raise ShapeMismatchError(f"synthetic samples must be square and >= 64, got {(h, w)}")
    elif (h, w) != NATIVE_SHAPE[kind.value]:
        raise ShapeMismatchError(f"{kind.value} sample must be {NATIVE_SHAPE[kind.value]}, got {(h, w)}")
    if kind is DatasetKind.DRIVE:
        top, left, side = _square_crop_box((h, w))
        image = image[top:top + side, left:left + side]
        mask = mask[top:top + side, left:left + side]
        fov = fov[top:top + side, left:left + side]

    out_shape = (size, size)
    if image.shape[:2] != out_shape:
        image = np.stack([_resize(image[..., c], out_shape, Image.BICUBIC) for c in range(3)], -1)
        mask = _resize_binary(mask, out_shape)
        fov = _resize_binary(fov, out_shape)
    mask = (mask * fov).astype(np.uint8)
    chw = np.clip(scale_to_unit(image), -1.0, 1.0).transpose(2, 0, 1)
    return PreprocessedSample(image=np.ascontiguousarray(chw), mask=mask.astype(np.uint8),
                              fov=fov.astype(np.uint8), zscore_image=zscore_channels(chw, fov),
                              id=sample.id, original_size=sample.original_size, kind=kind)


def restore_original(pred, sample):
    """Map a square prediction back onto ``sample``'s native geometry and
    zero everything outside its field of view."""
    pred = np.asarray(pred, dtype=np.float64)
    h, w = sample.original_size
    if sample.kind is DatasetKind.DRIVE:
        top, left, side = _square_crop_box((h, w))
        inner = _resize(pred, (side, side), Image.BICUBIC)
        out = np.zeros((h, w))
        out[top:top + side, left:left + side] = inner
    else:
        out = _resize(pred, (h, w), Image.BICUBIC) if pred.shape != (h, w) else pred.copy()
    return np.clip(out, 0.0, 1.0) * sample.fov


# -- augmentation ----------------------------------------------------------

@dataclass
class AugmentSpec:
    rotations: tuple = (0, 90, 180, 270)
    hflip: bool = True
    random_rotations: int = 0   # extra angles drawn uniformly from [0, 360)


def _rotate(arr, angle, order, cval):
    """Rotate the last two axes counter-clockwise by ``angle`` degrees."""
    if angle % 90 == 0:
        return np.ascontiguousarray(np.rot90(arr, k=int(angle // 90) % 4, axes=(-2, -1)))
    return ndimage.rotate(arr, angle, axes=(-1, -2), reshape=False, order=order,
                          mode="constant", cval=cval)


def _transform(s, angle, flip):
    def geo(arr, order, cval):
        out = _rotate(arr, angle, order, cval) if angle else arr
        return np.ascontiguousarray(out[..., ::-1]) if flip else out

    suffix = (f"_r{angle:g}" if angle else "") + ("_f" if flip else "")
    return replace(s, image=geo(s.image, 1, -1.0),
                   mask=(geo(s.mask, 0, 0) > 0).astype(np.uint8),
                   fov=(geo(s.fov, 0, 0) > 0).astype(np.uint8),
                   zscore_image=geo(s.zscore_image, 1, 0.0), id=s.id + suffix)


def augment(sample, spec=None, seed=0):
    """Return ``sample`` followed by its rotated and/or mirrored copies."""
    spec = spec or AugmentSpec(rotations=(), hflip=False)
    angles = [float(a) % 360 for a in spec.rotations]
    if spec.random_rotations:
        rng = np.random.default_rng(seed)
        angles += list(rng.uniform(0, 360, spec.random_rotations))
    if any(a < 0 or a >= 360 for a in spec.rotations):
        raise ValueError("rotation angles must lie in [0, 360)")
    out = [sample]
    seen = {(0.0, False)}
    for angle in angles:
        for flip in ((False, True) if spec.hflip else (False,)):
            if (angle, flip) in seen:
                continue
            seen.add((angle, flip))
            out.append(_transform(sample, angle, flip))
    if spec.hflip and (0.0, True) not in seen:
        out.append(_transform(sample, 0.0, True))
    return out


def split_train_val(samples, seed, ratio=19):
    """Shuffle deterministically and hold out one sample in ``ratio + 1``."""
    n = len(samples)
    if n < 2:
        raise InsufficientDataError(f"need at least 2 samples to split, got {n}")
    n_val = min(n - 1, max(1, int(round(n / (ratio + 1)))))
    order = np.random.default_rng(seed).permutation(n)
    val_idx = set(order[:n_val].tolist())
    train = [s for i, s in enumerate(samples) if i not in val_idx]
    val = [s for i, s in enumerate(samples) if i in val_idx]
    return DatasetSplit(train=train, val=val, seed=seed)
