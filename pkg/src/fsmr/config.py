"""Training configuration, presets and the layered key-value file format.

A config file is INI text with one section per block::

    [train]
    preset = dcgan-toy
    iterations = 2000

    [mix]
    lambda = 10
    target = both

Command-line overrides use ``section.key=value``.
"""

from __future__ import annotations

import configparser
import hashlib
import json
from dataclasses import asdict, dataclass, field, fields, replace
from typing import Optional

from .core import TARGETS, MixPolicy
from .data import DatasetSpec
from .errors import ConfigError
from .networks import DEFAULT_WIDTHS, TOY_WIDTHS


@dataclass
class ModelConfig:
    resolution: int = 32
    channels: int = 3
    latent_dim: int = 64
    disc_widths: tuple = TOY_WIDTHS
    gen_widths: tuple = (128, 64, 32)
    activation: str = "lrelu"


@dataclass
class OptimConfig:
    lr: float = 1e-4
    beta1: float = 0.5
    beta2: float = 0.999
    eps: float = 1e-8


@dataclass
class MixConfig:
    lambda_fsmr: float = 10.0
    target: str = "both"
    alpha: Optional[float] = None  # None -> Uniform(0, 1)
    per_layer_alpha: bool = False
    taps: Optional[tuple] = None  # None -> every layer boundary
    reference_rule: str = "pairs"

    def policy(self) -> MixPolicy:
        taps = (self.taps,) if isinstance(self.taps, int) else self.taps
        return MixPolicy(alpha_fixed=self.alpha, per_layer_alpha=self.per_layer_alpha,
                         taps=taps, target=self.target, lambda_fsmr=self.lambda_fsmr,
                         reference_rule=self.reference_rule)


@dataclass
class OnTheFlyConfig:
    enabled: bool = False
    weight: float = 10.0
    stylizer: str = "fallback"  # "fallback" or a stylizer checkpoint path
    styles: str = "pack"  # "pack" or a directory of style images
    n_styles: int = 16


@dataclass
class BCRConfig:
    enabled: bool = False
    lambda_real: float = 10.0
    lambda_fake: float = 10.0
    pad: int = 4


@dataclass
class AblationConfig:
    enabled: bool = False
    distribution: str = "normal"  # "normal" or "in-batch"
    mu_std: float = 10.0
    sigma_std: float = 10.0


@dataclass
class LogConfig:
    eval_every: int = 0
    checkpoint_every: int = 0
    sample_every: int = 0
    probe_pairs: int = 256
    probe_contents: int = 256
    fid_samples: int = 256


@dataclass
class TrainConfig:
    preset: str = "dcgan-toy"
    iterations: int = 2000
    batch_size: int = 32
    r1_gamma: float = 0.1
    ema_decay: float = 0.0
    seed: int = 0
    prefetch: int = 0
    model: ModelConfig = field(default_factory=ModelConfig)
    optim: OptimConfig = field(default_factory=OptimConfig)
    mix: MixConfig = field(default_factory=MixConfig)
    otf: OnTheFlyConfig = field(default_factory=OnTheFlyConfig)
    bcr: BCRConfig = field(default_factory=BCRConfig)
    ablation: AblationConfig = field(default_factory=AblationConfig)
    data: DatasetSpec = field(default_factory=DatasetSpec)
    log: LogConfig = field(default_factory=LogConfig)

    def validate(self):
        """Raise :class:`ConfigError` naming the first offending field."""
        checks = [
            ("train.iterations", self.iterations >= 1, "must be >= 1"),
            ("train.batch_size", self.batch_size >= 1, "must be >= 1"),
            ("train.r1_gamma", self.r1_gamma >= 0, "must be >= 0"),
            ("train.ema_decay", 0 <= self.ema_decay < 1, "must lie in [0, 1)"),
            ("mix.lambda", self.mix.lambda_fsmr >= 0, "must be >= 0"),
            ("mix.target", self.mix.target in TARGETS, f"must be one of {TARGETS}"),
            ("mix.alpha", self.mix.alpha is None or 0 <= self.mix.alpha <= 1,
             "must lie in [0, 1]"),
            ("otf.weight", self.otf.weight >= 0, "must be >= 0"),
            ("bcr.lambda_real", self.bcr.lambda_real >= 0, "must be >= 0"),
            ("bcr.lambda_fake", self.bcr.lambda_fake >= 0, "must be >= 0"),
            ("bcr.pad", 0 <= self.bcr.pad < self.model.resolution, "must lie in [0, resolution)"),
            ("optim.lr", self.optim.lr > 0, "must be > 0"),
            ("ablation.distribution", self.ablation.distribution in ("normal", "in-batch"),
             "must be 'normal' or 'in-batch'"),
            ("data.resolution", self.data.resolution == self.model.resolution,
             "must equal model.resolution"),
            ("model.gen_widths", 4 * 2 ** len(self.model.gen_widths) == self.model.resolution,
             "needs log2(resolution / 4) entries"),
            ("model.disc_widths", self.model.resolution % 2 ** len(self.model.disc_widths) == 0,
             "too many layers for the resolution"),
        ]
        for name, ok, msg in checks:
            if not ok:
                raise ConfigError(f"{name}: {msg}")
        self.mix.policy()
        return self

    def to_dict(self):
        return asdict(self)

    def hash(self):
        return config_hash(self.to_dict())


def config_hash(d) -> str:
    """Stable under key reordering."""
    return hashlib.sha256(json.dumps(d, sort_keys=True, default=list).encode()).hexdigest()[:16]


SECTIONS = {
    "model": ModelConfig, "optim": OptimConfig, "mix": MixConfig, "otf": OnTheFlyConfig,
    "bcr": BCRConfig, "ablation": AblationConfig, "data": DatasetSpec, "log": LogConfig,
}
ALIASES = {("mix", "lambda"): ("mix", "lambda_fsmr")}


def preset(name: str) -> TrainConfig:
    """Named starting points; fields can still be overridden afterwards."""
    if name == "dcgan-toy":
        return TrainConfig(preset=name)
    if name == "smoke":
        return TrainConfig(
            preset=name, iterations=20, batch_size=8,
            model=ModelConfig(resolution=16, disc_widths=(16, 32, 64), gen_widths=(32, 16),
                              latent_dim=16),
            data=DatasetSpec(resolution=16, size=64),
            log=LogConfig(eval_every=10, checkpoint_every=10, sample_every=10, probe_pairs=32,
                          probe_contents=32, fid_samples=32))
    if name == "dcgan-cifar-like":
        return TrainConfig(preset=name, iterations=20000,
                           model=ModelConfig(disc_widths=DEFAULT_WIDTHS, gen_widths=(256, 128, 64),
                                             latent_dim=128))
    if name == "highres-face-like":
        return TrainConfig(
            preset=name, iterations=20000, r1_gamma=10.0, ema_decay=0.999,
            model=ModelConfig(resolution=64, disc_widths=(64, 128, 256, 512),
                              gen_widths=(512, 256, 128, 64), latent_dim=128),
            optim=OptimConfig(lr=2e-3, beta1=0.0, beta2=0.99),
            mix=MixConfig(lambda_fsmr=0.05, target="real_only"),
            data=DatasetSpec(resolution=64))
    raise ConfigError(f"train.preset: unknown preset {name!r}")


def _coerce(text: str, current, name):
    text = text.strip()
    try:
        if text.lower() in ("none", "null", ""):
            if current is None or name.endswith((".alpha", ".taps")):
                return None
            raise ValueError(text)
        if isinstance(current, bool):
            if text.lower() in ("1", "true", "yes", "on"):
                return True
            if text.lower() in ("0", "false", "no", "off"):
                return False
            raise ValueError(text)
        if isinstance(current, int):
            return int(text)
        if isinstance(current, float):
            return float(text)
        if isinstance(current, tuple) or (current is None and "," in text):
            return tuple(int(t) for t in text.replace(" ", "").split(",") if t)
        if current is None:
            try:
                return float(text) if "." in text or "e" in text.lower() else int(text)
            except ValueError:
                return text
        return text
    except ValueError:
        raise ConfigError(f"{name}: cannot parse {text!r}") from None


def apply_setting(cfg: TrainConfig, key: str, value: str) -> TrainConfig:
    """Apply one ``section.key=value`` (or ``key=value`` for [train])."""
    section, _, name = key.rpartition(".")
    section = section or "train"
    section, name = ALIASES.get((section, name), (section, name))
    if section == "train":
        target = cfg
    elif section in SECTIONS:
        target = getattr(cfg, section)
    else:
        raise ConfigError(f"{key}: unknown section {section!r}")
    valid = {f.name for f in fields(target)}
    if name not in valid or (section == "train" and name in SECTIONS):
        raise ConfigError(f"{key}: unknown key")
    setattr(target, name, _coerce(value, getattr(target, name), key))
    if section == "data":
        DatasetSpec.__post_init__(target)
    return cfg


def load_config(text: Optional[str] = None, overrides=()) -> TrainConfig:
    """Parse INI text (may be ``None``) plus ``key=value`` overrides.

    ``train.preset`` is resolved first, then file values, then overrides.
    """
    parser = configparser.ConfigParser()
    if text:
        parser.read_string(text)
    pairs = []
    for section in parser.sections():
        for k, v in parser.items(section):
            pairs.append((k if section == "train" else f"{section}.{k}", v))
    for item in overrides:
        if "=" not in item:
            raise ConfigError(f"override {item!r} is not key=value")
        k, v = item.split("=", 1)
        pairs.append((k.strip(), v))
    name = "dcgan-toy"
    for k, v in pairs:
        if k in ("preset", "train.preset"):
            name = v.strip()
    cfg = preset(name)
    for k, v in pairs:
        if k in ("preset", "train.preset"):
            continue
        apply_setting(cfg, k, v)
    return cfg.validate()


def to_ini(cfg: TrainConfig) -> str:
    def fmt(v):
        if isinstance(v, (tuple, list)):
            return ",".join(str(x) for x in v)
        return "none" if v is None else str(v)

    lines = ["[train]"]
    for f in fields(cfg):
        if f.name not in SECTIONS:
            lines.append(f"{f.name} = {fmt(getattr(cfg, f.name))}")
    for section in SECTIONS:
        lines += ["", f"[{section}]"]
        obj = getattr(cfg, section)
        for f in fields(obj):
            key = "lambda" if (section, f.name) == ("mix", "lambda_fsmr") else f.name
            lines.append(f"{key} = {fmt(getattr(obj, f.name))}")
    return "\n".join(lines) + "\n"


def from_dict(d: dict) -> TrainConfig:
    cfg = TrainConfig()
    for f in fields(cfg):
        if f.name in SECTIONS:
            sub = getattr(cfg, f.name)
            kw = {}
            for sf in fields(sub):
                if sf.name in d[f.name]:
                    v = d[f.name][sf.name]
                    kw[sf.name] = tuple(v) if isinstance(v, list) else v
            setattr(cfg, f.name, replace(sub, **kw))
        elif f.name in d:
            setattr(cfg, f.name, d[f.name])
    return cfg
