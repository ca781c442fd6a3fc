"""DCGAN-style generator and discriminator with exposed layer taps, plus the
shared checkpoint archive format (``.npz`` of named arrays + JSON manifest)."""

from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass
from pathlib import Path

import numpy as np
import torch
import torch.nn as nn

from .core import EPSILON
from .errors import ConfigError, ShapeError

DEFAULT_WIDTHS = (64, 128, 256, 512)
TOY_WIDTHS = (32, 64, 128, 256)

_REGISTRY = {}


def register(cls):
    _REGISTRY[cls.__name__] = cls
    return cls


def _activation(name):
    if name == "lrelu":
        return nn.LeakyReLU(0.2)
    if name == "softplus":
        return nn.Softplus()
    if name == "tanh":
        return nn.Tanh()
    raise ConfigError(f"unknown activation {name!r}")


def _init_orthogonal(module: nn.Module) -> None:
    for m in module.modules():
        if isinstance(m, (nn.Conv2d, nn.ConvTranspose2d, nn.Linear)):
            nn.init.orthogonal_(m.weight)
            if m.bias is not None:
                nn.init.zeros_(m.bias)


class InstanceNormInput(nn.Module):
    """Per-image, per-channel standardization of the input image."""

    def __init__(self, epsilon=EPSILON):
        super().__init__()
        self.epsilon = epsilon

    def forward(self, x):
        mu = x.mean(dim=(-2, -1), keepdim=True)
        sigma = torch.sqrt((x - mu).pow(2).mean(dim=(-2, -1), keepdim=True) + self.epsilon ** 2)
        return (x - mu) / sigma


@register
class Discriminator(nn.Module):
    """Stack of ``conv(4x4, stride 2) + activation`` layers and a linear head.

    ``layers[i]`` is the ``(i+1)``-th layer; FSM can be injected between any
    two consecutive layers. ``input_norm`` standardizes each input channel
    first, which makes the network blind to global color moments.
    """

    def __init__(self, resolution=32, in_channels=3, widths=TOY_WIDTHS, activation="lrelu",
                 input_norm=False, epsilon=EPSILON, seed=None):
        super().__init__()
        widths = tuple(int(w) for w in widths)
        if resolution % (2 ** len(widths)):
            raise ConfigError(f"resolution {resolution} not divisible by 2**{len(widths)}")
        self.resolution = int(resolution)
        self.in_channels = int(in_channels)
        self.widths = widths
        self.activation = activation
        self.input_norm = bool(input_norm)
        self.epsilon = epsilon

        layers = []
        prev = in_channels
        for i, w in enumerate(widths):
            block = [nn.Conv2d(prev, w, 4, 2, 1), _activation(activation)]
            if i == 0 and input_norm:
                block.insert(0, InstanceNormInput(epsilon))
            layers.append(nn.Sequential(*block))
            prev = w
        self.layers = nn.ModuleList(layers)
        self.final_size = resolution // 2 ** len(widths)
        self.head = nn.Sequential(nn.Flatten(), nn.Linear(prev * self.final_size ** 2, 1))

        if seed is not None:
            with torch.random.fork_rng():
                torch.manual_seed(seed)
                _init_orthogonal(self)
        else:
            _init_orthogonal(self)

    @property
    def n_layers(self):
        return len(self.layers)

    def config(self):
        return dict(resolution=self.resolution, in_channels=self.in_channels,
                    widths=list(self.widths), activation=self.activation,
                    input_norm=self.input_norm, epsilon=self.epsilon)

    def feature_shapes(self):
        """``(C, H, W)`` at every layer boundary, in layer order."""
        return [(w, self.resolution // 2 ** (i + 1), self.resolution // 2 ** (i + 1))
                for i, w in enumerate(self.widths)]

    def check_input(self, image):
        expected = (self.in_channels, self.resolution, self.resolution)
        if image.dim() != 4 or tuple(image.shape[1:]) != expected:
            raise ShapeError(f"expected [B, {expected[0]}, {expected[1]}, {expected[2]}] "
                             f"images, got {tuple(image.shape)}")

    def features(self, image):
        self.check_input(image)
        feats = []
        x = image
        for layer in self.layers:
            x = layer(x)
            feats.append(x)
        return feats

    def forward(self, image):
        self.check_input(image)
        x = image
        for layer in self.layers:
            x = layer(x)
        return self.head(x).squeeze(1)


@register
class Generator(nn.Module):
    """Latent vector -> image in ``[-1, 1]`` through transposed convolutions."""

    def __init__(self, resolution=32, out_channels=3, latent_dim=64, widths=(256, 128, 64),
                 seed=None):
        super().__init__()
        n_up = int(math.log2(resolution // 4))
        if 4 * 2 ** n_up != resolution:
            raise ConfigError(f"resolution {resolution} must be 4 * 2**k")
        widths = tuple(int(w) for w in widths)
        if len(widths) != n_up:
            raise ConfigError(f"need {n_up} widths for resolution {resolution}, got {len(widths)}")
        self.resolution = int(resolution)
        self.out_channels = int(out_channels)
        self.latent_dim = int(latent_dim)
        self.widths = widths

        self.project = nn.Sequential(nn.Linear(latent_dim, widths[0] * 16),
                                     nn.Unflatten(1, (widths[0], 4, 4)),
                                     nn.BatchNorm2d(widths[0]), nn.ReLU())
        blocks = []
        for w_in, w_out in zip(widths[:-1], widths[1:]):
            blocks += [nn.ConvTranspose2d(w_in, w_out, 4, 2, 1), nn.BatchNorm2d(w_out), nn.ReLU()]
        blocks += [nn.ConvTranspose2d(widths[-1], out_channels, 4, 2, 1), nn.Tanh()]
        self.blocks = nn.Sequential(*blocks)

        if seed is not None:
            with torch.random.fork_rng():
                torch.manual_seed(seed)
                _init_orthogonal(self)
        else:
            _init_orthogonal(self)

    def config(self):
        return dict(resolution=self.resolution, out_channels=self.out_channels,
                    latent_dim=self.latent_dim, widths=list(self.widths))

    def forward(self, z):
        if z.dim() != 2 or z.shape[1] != self.latent_dim:
            raise ShapeError(f"expected latents [B, {self.latent_dim}], got {tuple(z.shape)}")
        return self.blocks(self.project(z))


def default_generator_widths(resolution, base=32):
    n_up = int(math.log2(resolution // 4))
    return tuple(base * 2 ** (n_up - 1 - i) for i in range(n_up))


@dataclass
class EmbeddingSpec:
    """Which discriminator features serve as the embedding vector.

    ``layer`` indexes ``disc.layers`` (default: the last one, i.e. the input
    of the linear head); ``pooling`` is ``"mean"`` (global average over
    space) or ``"flatten"``.
    """

    layer: int = -1
    pooling: str = "mean"

    def dim(self, disc: Discriminator) -> int:
        c, h, w = disc.feature_shapes()[self.layer]
        if self.pooling == "mean":
            return c
        if self.pooling == "flatten":
            return c * h * w
        raise ConfigError(f"unknown pooling {self.pooling!r}")


def disc_forward(disc: Discriminator, image):
    """Return ``(logit, features)`` with one feature map per layer."""
    feats = disc.features(image)
    return disc.head(feats[-1]).squeeze(1), feats


def gen_forward(gen: Generator, z):
    return gen(z)


def embed(disc: Discriminator, image, spec: EmbeddingSpec = None):
    spec = spec or EmbeddingSpec()
    feat = disc.features(image)[spec.layer]
    if spec.pooling == "mean":
        return feat.mean(dim=(-2, -1))
    if spec.pooling == "flatten":
        return feat.flatten(1)
    raise ConfigError(f"unknown pooling {spec.pooling!r}")


# -- checkpoint archive -------------------------------------------------------

MANIFEST_KEY = "__manifest__"


def save_archive(path, modules: dict, manifest: dict = None, arrays: dict = None):
    """Write named modules (state dicts) and extra arrays into one ``.npz``.

    ``manifest`` is stored as JSON together with the constructor config of
    every module so :func:`load_archive` can rebuild them.
    """
    path = Path(path)
    out = {}
    nets = {}
    for name, module in modules.items():
        nets[name] = {"type": type(module).__name__, "config": module.config()}
        for key, value in module.state_dict().items():
            out[f"{name}/{key}"] = value.detach().cpu().numpy()
    for key, value in (arrays or {}).items():
        out[f"extra/{key}"] = np.asarray(value)
    meta = dict(manifest or {})
    meta["modules"] = nets
    for module in modules.values():
        if isinstance(module, Discriminator):
            meta.setdefault("architecture", "dcgan")
            meta.setdefault("resolution", module.resolution)
            meta.setdefault("layer_count", module.n_layers)
            meta.setdefault("embedding", asdict(EmbeddingSpec()))
            break
    out[MANIFEST_KEY] = np.array(json.dumps(meta, sort_keys=True))
    path.parent.mkdir(parents=True, exist_ok=True)
    tmp = path.with_name(path.name + ".tmp.npz")
    np.savez(tmp, **out)
    tmp.replace(path)
    return path


def load_archive(path, dtype=None):
    """Inverse of :func:`save_archive`: returns ``(modules, manifest, arrays)``."""
    with np.load(Path(path), allow_pickle=False) as data:
        manifest = json.loads(str(data[MANIFEST_KEY]))
        entries = {k: data[k] for k in data.files if k != MANIFEST_KEY}
    modules = {}
    for name, info in manifest.get("modules", {}).items():
        cls = _REGISTRY.get(info["type"])
        if cls is None:
            raise ConfigError(f"unknown module type {info['type']!r} in {path}")
        module = cls(**info["config"])
        prefix = f"{name}/"
        state = {k[len(prefix):]: torch.from_numpy(np.array(v))
                 for k, v in entries.items() if k.startswith(prefix)}
        module.load_state_dict(state)
        if dtype is not None:
            module.to(dtype)
        modules[name] = module
    arrays = {k[len("extra/"):]: v for k, v in entries.items() if k.startswith("extra/")}
    return modules, manifest, arrays


def load_discriminator(path) -> Discriminator:
    modules, _, _ = load_archive(path)
    for module in modules.values():
        if isinstance(module, Discriminator):
            return module
    raise ConfigError(f"no discriminator in {path}")


def load_generator(path) -> Generator:
    modules, _, _ = load_archive(path)
    for name in ("gen_ema", "gen"):
        if isinstance(modules.get(name), Generator):
            return modules[name]
    for module in modules.values():
        if isinstance(module, Generator):
            return module
    raise ConfigError(f"no generator in {path}")
