"""Frozen perceptual feature extractors for the style and content losses.

Two extractors share one five-block topology (convolutions inside a block
keep resolution, 2x2 pooling between blocks):

* ``vgg19`` - the ImageNet VGG-19 convolutional trunk, loaded from a
  checksummed weights container (see :func:`save_vgg19_container`).
* ``standin`` - a small fixed-seed random stack with smooth activations and
  average pooling, cheap enough for unit tests and differentiable
  everywhere so finite-difference checks are well posed.

Feature entries are keyed ``(block, conv)``, both 1-based, and hold the
activation that follows that convolution.
"""

import hashlib
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch
from torch import nn
from torch.nn import functional as F

from ._io import load_npz, save_npz
from .errors import ChecksumError, ConfigError, ShapeMismatchError, WeightsFormatError

VGG19_LAYOUT = ((64, 64), (128, 128), (256,) * 4, (512,) * 4, (512,) * 4)
STANDIN_LAYOUT = ((8, 8), (16, 16), (16, 16), (32, 32), (32, 32))
IMAGENET_MEAN = (0.485, 0.456, 0.406)
IMAGENET_STD = (0.229, 0.224, 0.225)
CONTAINER_FORMAT = "vgg19-features"
# Indices of the conv layers inside torchvision's ``vgg19().features``.
TORCHVISION_CONV_INDICES = (0, 2, 5, 7, 10, 12, 14, 16, 19, 21, 23, 25, 28, 30, 32, 34)


@dataclass(frozen=True)
class ExtractorConfig:
    """Which activations feed the style and content losses.

    ``style_layer`` is the 1-based convolution number used in every style
    block; ``content_layer`` is a 0-based offset into the content block.
    The defaults both select each block's first convolution.
    """
    style_blocks: tuple = (1, 2, 3, 4, 5)
    content_blocks: tuple = (4,)
    style_layer: int = 1
    content_layer: int = 0

    @property
    def style_keys(self):
        return tuple((b, self.style_layer) for b in self.style_blocks)

    @property
    def content_keys(self):
        return tuple((b, self.content_layer + 1) for b in self.content_blocks)

    def validate(self, layout):
        for block, conv in self.style_keys + self.content_keys:
            if not 1 <= block <= len(layout):
                raise ConfigError(f"block index {block} outside 1..{len(layout)}")
            if not 1 <= conv <= len(layout[block - 1]):
                raise ConfigError(f"block {block} has no layer {conv}")


@dataclass
class FeatureSet:
    entries: dict
    source: str
    style_keys: tuple = ()
    content_keys: tuple = ()

    def __len__(self):
        return len(self.entries)

    def detach(self):
        return FeatureSet({k: v.detach() for k, v in self.entries.items()}, self.source,
                          self.style_keys, self.content_keys)


class Extractor(nn.Module):
    def __init__(self, layout, kind, kernel=3, mean=IMAGENET_MEAN, std=IMAGENET_STD):
        super().__init__()
        self.kind = kind
        self.layout = tuple(tuple(b) for b in layout)
        blocks, cin = [], 3
        for widths in self.layout:
            convs = nn.ModuleList()
            for cout in widths:
                convs.append(nn.Conv2d(cin, cout, kernel, padding=kernel // 2))
                cin = cout
            blocks.append(convs)
        self.blocks = nn.ModuleList(blocks)
        self.register_buffer("mean", torch.tensor(mean).view(1, 3, 1, 1))
        self.register_buffer("std", torch.tensor(std).view(1, 3, 1, 1))

    def _act(self, x):
        return torch.tanh(x) if self.kind == "standin" else F.relu(x)

    def _pool(self, x):
        return F.avg_pool2d(x, 2) if self.kind == "standin" else F.max_pool2d(x, 2)

    def forward(self, image, wanted):
        x = ((image + 1) / 2 - self.mean.to(image.dtype)) / self.std.to(image.dtype)
        out = {}
        last = max(b for b, _ in wanted)
        for b, convs in enumerate(self.blocks[:last], start=1):
            if b > 1:
                x = self._pool(x)
            for c, conv in enumerate(convs, start=1):
                x = self._act(conv(x))
                if (b, c) in wanted:
                    out[(b, c)] = x
        return out


def _freeze(ext):
    ext.eval()
    for p in ext.parameters():
        p.requires_grad_(False)
    return ext


def _checksum(arrays):
    h = hashlib.sha256()
    for name in sorted(arrays):
        h.update(name.encode())
        h.update(np.ascontiguousarray(arrays[name], dtype=np.float32).tobytes())
    return h.hexdigest()


def _param_name(block, conv, what):
    return f"block{block}.conv{conv}.{what}"


def save_vgg19_container(path, arrays):
    """Write VGG-19 conv weights (named ``block{b}.conv{c}.kernel|bias``)
    with a shape manifest and a content checksum."""
    arrays = {k: np.asarray(v, dtype=np.float32) for k, v in arrays.items()}
    meta = {"format": CONTAINER_FORMAT,
            "shapes": {k: list(v.shape) for k, v in arrays.items()},
            "checksum": _checksum(arrays)}
    save_npz(path, arrays, meta)


def convert_torchvision_vgg19(state_dict, out):
    """Convert a torchvision ``vgg19`` state dict (or its ``.pth`` path)."""
    if not isinstance(state_dict, dict):
        state_dict = torch.load(state_dict, map_location="cpu", weights_only=True)
    arrays, i = {}, 0
    for b, widths in enumerate(VGG19_LAYOUT, start=1):
        for c in range(1, len(widths) + 1):
            idx = TORCHVISION_CONV_INDICES[i]
            arrays[_param_name(b, c, "kernel")] = state_dict[f"features.{idx}.weight"].numpy()
            arrays[_param_name(b, c, "bias")] = state_dict[f"features.{idx}.bias"].numpy()
            i += 1
    save_vgg19_container(out, arrays)


def _load_vgg19(path):
    if path is None or not Path(path).is_file():
        raise WeightsFormatError(f"VGG-19 weights file not found: {path}")
    try:
        arrays, meta = load_npz(path)
    except Exception as exc:
        raise WeightsFormatError(f"unreadable VGG-19 container {path}: {exc}") from exc
    if not meta or meta.get("format") != CONTAINER_FORMAT:
        raise WeightsFormatError(f"{path} is not a VGG-19 weights container")
    if _checksum(arrays) != meta.get("checksum"):
        raise ChecksumError(f"{path}: checksum mismatch, file is corrupted")
    ext = Extractor(VGG19_LAYOUT, "vgg19")
    state = {}
    for b, convs in enumerate(ext.blocks, start=1):
        for c, conv in enumerate(convs, start=1):
            for what, param in (("kernel", conv.weight), ("bias", conv.bias)):
                name = _param_name(b, c, what)
                if name not in arrays or tuple(arrays[name].shape) != tuple(param.shape):
                    raise WeightsFormatError(f"{path}: {name} missing or mis-shaped")
                state[f"blocks.{b - 1}.{c - 1}.{'weight' if what == 'kernel' else 'bias'}"] = \
                    torch.from_numpy(arrays[name])
    ext.load_state_dict(state, strict=False)
    return ext


def load_extractor(kind, weights_path=None, seed=0, dtype=torch.float64):
    """Return a frozen ``vgg19`` or ``standin`` extractor."""
    if kind == "vgg19":
        ext = _load_vgg19(weights_path)
    elif kind == "standin":
        ext = Extractor(STANDIN_LAYOUT, "standin")
        gen = torch.Generator().manual_seed(int(seed))
        with torch.no_grad():
            for conv in ext.modules():
                if isinstance(conv, nn.Conv2d):
                    fan_in = conv.in_channels * conv.kernel_size[0] * conv.kernel_size[1]
                    conv.weight.copy_(torch.randn(conv.weight.shape, generator=gen) * (2.0 / fan_in) ** 0.5)
                    conv.bias.copy_(0.1 * torch.randn(conv.bias.shape, generator=gen))
    else:
        raise ConfigError(f"unknown extractor kind {kind!r}")
    return _freeze(ext.to(dtype))


def extract(extractor, image, config=None):
    """Features of ``image`` (3 x S x S or N x 3 x S x S, values in [-1, 1])."""
    config = config or ExtractorConfig()
    config.validate(extractor.layout)
    x = torch.as_tensor(image)
    if x.dim() == 3:
        x = x.unsqueeze(0)
    x = x.to(extractor.mean.dtype)
    wanted = set(config.style_keys) | set(config.content_keys)
    if not wanted:
        return FeatureSet({}, extractor.kind)
    deepest = max(b for b, _ in wanted)
    if x.dim() != 4 or x.shape[1] != 3 or x.shape[-1] < 2 ** (deepest - 1) or x.shape[-2] < 2 ** (deepest - 1):
        raise ShapeMismatchError(
            f"image of shape {tuple(x.shape)} too small to reach block {deepest}")
    entries = extractor(x, wanted)
    return FeatureSet(entries, extractor.kind, config.style_keys, config.content_keys)
