"""Generator, segmentor and discriminator networks plus checkpoint I/O.

All three networks are stacks of 4x4, stride-2 (de)convolutions with batch
normalization and LeakyReLU; no pooling. The generator is an encoder-decoder
whose decoder receives the mirrored encoder activations by concatenation.
"""

import hashlib
import json
import math
import zipfile
from dataclasses import asdict, dataclass, fields

import numpy as np
import torch
from torch import nn
from torch.nn import functional as F

from ._io import load_npz, save_npz
from .errors import CheckpointError, ModeError, ShapeMismatchError, SpecError

ROLES = ("synthesis", "segmentor", "discriminator")
NOISE_DIM = 400
CHECKPOINT_FORMAT = "migan-checkpoint"
CHECKPOINT_VERSION = 1


@dataclass(frozen=True)
class NetworkSpec:
    role: str
    input_size: int = 512
    base_filters: int = None
    kernel: int = 4
    stride: int = 2
    leaky_slope: float = 0.2
    bn_eps: float = 1e-5
    noise_dim: int = NOISE_DIM
    noise_grid: int = 32
    init_std: float = 0.02

    def __post_init__(self):
        if self.role not in ROLES:
            raise SpecError(f"unknown role {self.role!r}; expected one of {ROLES}")
        size = self.input_size
        if size < 64 or size & (size - 1):
            raise SpecError(f"input_size must be a power of two >= 64, got {size}")
        if self.base_filters is None:
            object.__setattr__(self, "base_filters", 32 if self.role == "discriminator" else 64)
        if self.base_filters < 1:
            raise SpecError("base_filters must be positive")
        if (self.kernel, self.stride) != (4, 2):
            raise SpecError("all layers use 4x4 kernels with stride 2")

    @property
    def depth(self):
        """Number of stride-2 encoder layers; the bottleneck is 4x4."""
        return int(math.log2(self.input_size)) - 2

    def to_dict(self):
        return asdict(self)

    @classmethod
    def from_dict(cls, d):
        names = {f.name for f in fields(cls)}
        return cls(**{k: v for k, v in d.items() if k in names})

    def hash(self):
        blob = json.dumps(self.to_dict(), sort_keys=True).encode()
        return hashlib.sha256(blob).hexdigest()


def encoder_channels(spec):
    """Output channels of each generator encoder layer (last = bottleneck)."""
    b, d = spec.base_filters, spec.depth
    return [min(b * 2 ** k, 4 * b) for k in range(d - 1)] + [8 * b]


def decoder_channels(spec):
    """Output channels of each decoder layer except the image head.

    Entry ``j`` has the spatial size of encoder layer ``depth - 1 - j``.
    """
    enc = encoder_channels(spec)
    return [min(2 * enc[k], 8 * spec.base_filters) for k in reversed(range(spec.depth - 1))]


def discriminator_channels(spec):
    b = spec.base_filters
    return [min(b * 2 ** k, 16 * b) for k in range(spec.depth)]


def _down(cin, cout, slope, eps):
    return nn.Sequential(nn.Conv2d(cin, cout, 4, 2, 1, bias=False),
                         nn.BatchNorm2d(cout, eps=eps), nn.LeakyReLU(slope))


def _up(cin, cout, slope, eps):
    return nn.Sequential(nn.ConvTranspose2d(cin, cout, 4, 2, 1, bias=False),
                         nn.BatchNorm2d(cout, eps=eps), nn.LeakyReLU(slope))


class EncoderDecoder(nn.Module):
    """Shared template for the synthesis generator and the segmentor."""

    def __init__(self, spec):
        super().__init__()
        self.spec = spec
        self.version = 0
        synthesis = spec.role == "synthesis"
        in_ch, out_ch = (2, 3) if synthesis else (3, 1)
        if synthesis:
            self.noise_proj = nn.Linear(spec.noise_dim, spec.noise_grid ** 2)
        enc = encoder_channels(spec)
        dec = decoder_channels(spec)
        slope, eps = spec.leaky_slope, spec.bn_eps
        self.encoder = nn.ModuleList(
            _down(cin, cout, slope, eps) for cin, cout in zip([in_ch] + enc[:-1], enc))
        skips = list(reversed(enc[:-1]))          # mirrored encoder outputs
        dec_in = [enc[-1]] + [d + s for d, s in zip(dec[:-1], skips[:-1])]
        self.decoder = nn.ModuleList(_up(cin, cout, slope, eps) for cin, cout in zip(dec_in, dec))
        self.head = nn.ConvTranspose2d(dec[-1] + skips[-1], out_ch, 4, 2, 1)

    def inject_noise(self, z, size=None):
        """Project ``z`` (N x 400) to an N x 1 x size x size noise plane."""
        size = size or self.spec.input_size
        g = self.spec.noise_grid
        plane = self.noise_proj(z).view(-1, 1, g, g)
        return F.interpolate(plane, size=(size, size), mode="bilinear", align_corners=False)

    def forward(self, x, z=None, return_features=False):
        if self.spec.role == "synthesis":
            x = torch.cat([x, self.inject_noise(z, x.shape[-1])], dim=1)
        feats = []
        h = x
        for layer in self.encoder:
            h = layer(h)
            feats.append(h)
        skips = feats[-2::-1]
        junctions = []
        h = self.decoder[0](feats[-1])
        for layer, skip in zip(self.decoder[1:], skips[:-1]):
            h = torch.cat([h, skip], dim=1)
            junctions.append(h)
            h = layer(h)
        h = torch.cat([h, skips[-1]], dim=1)
        junctions.append(h)
        out = self.head(h)
        out = torch.tanh(out) if self.spec.role == "synthesis" else torch.sigmoid(out)
        if return_features:
            return out, {"encoder": feats, "junctions": junctions}
        return out


class Discriminator(nn.Module):
    """Scores an (image, mask) pair; one probability per pair."""

    def __init__(self, spec):
        super().__init__()
        self.spec = spec
        self.version = 0
        chans = discriminator_channels(spec)
        self.convs = nn.ModuleList(
            _down(cin, cout, spec.leaky_slope, spec.bn_eps) for cin, cout in zip([4] + chans[:-1], chans))
        self.fc = nn.Linear(chans[-1] * 16, 1)

    def forward(self, x, y, return_features=False):
        h = torch.cat([x, y], dim=1)
        feats = []
        for conv in self.convs:
            h = conv(h)
            feats.append(h)
        d = torch.sigmoid(self.fc(h.flatten(1))).squeeze(1)
        return (d, feats) if return_features else d


def _init(module, std, gen):
    for m in module.modules():
        if isinstance(m, (nn.Conv2d, nn.ConvTranspose2d, nn.Linear)):
            nn.init.trunc_normal_(m.weight, 0.0, std, -2 * std, 2 * std, generator=gen)
            if m.bias is not None:
                nn.init.zeros_(m.bias)
        elif isinstance(m, nn.BatchNorm2d):
            nn.init.ones_(m.weight)
            nn.init.zeros_(m.bias)


def build_network(spec, seed=0, dtype=torch.float32):
    """Instantiate the network described by ``spec`` with seeded weights."""
    if isinstance(spec, dict):
        spec = NetworkSpec.from_dict(spec)
    net = Discriminator(spec) if spec.role == "discriminator" else EncoderDecoder(spec)
    gen = torch.Generator().manual_seed(int(seed))
    with torch.no_grad():
        _init(net, spec.init_std, gen)
    return net.to(dtype)


def _check_role(state, role):
    if state.spec.role != role:
        raise ModeError(f"expected a {role} network, got {state.spec.role}")


def _batched(t, channels, size, what):
    t = torch.as_tensor(t)
    if t.dim() == 3:
        t = t.unsqueeze(0)
    if t.dim() != 4 or t.shape[1] != channels or tuple(t.shape[2:]) != (size, size):
        raise ShapeMismatchError(f"{what}: expected N x {channels} x {size} x {size}, got {tuple(t.shape)}")
    return t


def _dtype(state):
    return next(state.parameters()).dtype


def generator_forward(state, y, z):
    """Synthesize images from masks ``y`` (values in {-1, 1}) and noise ``z``."""
    _check_role(state, "synthesis")
    s = state.spec.input_size
    y = _batched(y, 1, s, "mask").to(_dtype(state))
    z = torch.as_tensor(z).to(_dtype(state))
    if z.dim() == 1:
        z = z.unsqueeze(0)
    if z.shape != (y.shape[0], state.spec.noise_dim):
        raise ShapeMismatchError(f"noise must be N x {state.spec.noise_dim}, got {tuple(z.shape)}")
    return state(y, z)


def segmentor_forward(state, x):
    _check_role(state, "segmentor")
    x = _batched(x, 3, state.spec.input_size, "image").to(_dtype(state))
    return state(x)


def discriminator_forward(state, x, y):
    _check_role(state, "discriminator")
    s = state.spec.input_size
    x = _batched(x, 3, s, "image").to(_dtype(state))
    y = _batched(y, 1, s, "mask").to(_dtype(state))
    if x.shape[0] != y.shape[0]:
        raise ShapeMismatchError("image and mask batch sizes differ")
    return state(x, y)


def inject_noise(state, z, target_size=None):
    _check_role(state, "synthesis")
    z = torch.as_tensor(z).to(_dtype(state))
    if z.shape[-1] != state.spec.noise_dim:
        raise ShapeMismatchError(f"noise code must have length {state.spec.noise_dim}")
    out = state.inject_noise(z.reshape(-1, state.spec.noise_dim), target_size)
    return out[0] if z.dim() == 1 else out


def parameter_digest(state):
    """SHA-256 over all parameters and buffers; used to prove frozenness."""
    h = hashlib.sha256()
    for name, t in sorted(state.state_dict().items()):
        h.update(name.encode())
        h.update(t.detach().cpu().contiguous().numpy().tobytes())
    return h.hexdigest()


# -- checkpoints -------------------------------------------------------------

@dataclass
class Checkpoint:
    networks: dict
    step: int
    meta: dict


def save_checkpoint(path, networks, step=0, extra=None):
    """Write ``networks`` (name -> module) with their specs to ``path``."""
    arrays, nets_meta = {}, {}
    for name, net in networks.items():
        nets_meta[name] = {"spec": net.spec.to_dict(), "spec_hash": net.spec.hash(),
                           "version": int(getattr(net, "version", 0)),
                           "dtype": str(_dtype(net)).replace("torch.", "")}
        for key, t in net.state_dict().items():
            arrays[f"{name}/{key}"] = t.detach().cpu().numpy()
    meta = {"format": CHECKPOINT_FORMAT, "version": CHECKPOINT_VERSION, "step": int(step),
            "networks": nets_meta, "extra": extra or {}}
    save_npz(path, arrays, meta)


def load_checkpoint(path, expected=None):
    """Read a checkpoint; ``expected`` maps network name -> NetworkSpec that
    the stored spec must hash-match."""
    try:
        arrays, meta = load_npz(path)
    except (OSError, ValueError, KeyError, zipfile.BadZipFile) as exc:
        raise CheckpointError(f"cannot read checkpoint {path}: {exc}") from exc
    if not meta or meta.get("format") != CHECKPOINT_FORMAT:
        raise CheckpointError(f"{path} is not a checkpoint file")
    if meta.get("version") != CHECKPOINT_VERSION:
        raise CheckpointError(f"unsupported checkpoint version {meta.get('version')}")
    nets = {}
    for name, info in meta["networks"].items():
        spec = NetworkSpec.from_dict(info["spec"])
        if spec.hash() != info["spec_hash"]:
            raise CheckpointError(f"{name}: stored spec does not match its hash")
        if expected and name in expected and expected[name].hash() != info["spec_hash"]:
            raise CheckpointError(f"{name}: checkpoint spec differs from the requested spec")
        net = build_network(spec, dtype=getattr(torch, info.get("dtype", "float32")))
        prefix = name + "/"
        state = {k[len(prefix):]: torch.from_numpy(np.array(v)) for k, v in arrays.items()
                 if k.startswith(prefix)}
        try:
            net.load_state_dict(state)
        except RuntimeError as exc:
            raise CheckpointError(f"{name}: {exc}") from exc
        net.version = info.get("version", 0)
        nets[name] = net
    return Checkpoint(networks=nets, step=meta["step"], meta=meta)
