"""Image-level AdaIN stylization and the decoder that renders FSM-mixed
discriminator features back into images."""

from __future__ import annotations

import math

import torch
import torch.nn as nn
import torch.nn.functional as F

from .core import EPSILON, _adain, _broadcast_alpha, _check_alpha, adain, resolve_taps
from .errors import ConfigError, ShapeError
from .networks import Discriminator, _init_orthogonal, register


def pixel_adain_fallback(c: torch.Tensor, s: torch.Tensor, epsilon=EPSILON) -> torch.Tensor:
    """Transfer per-color-channel mean and std of ``s`` onto ``c``.

    Training-free stand-in for a learned stylizer; outputs are not clipped
    so the transferred moments are exact.
    """
    if c.shape != s.shape:
        raise ShapeError(f"content {tuple(c.shape)} and style {tuple(s.shape)} differ")
    return adain(c, s, epsilon)


def _moment_vector(x):
    mu = x.mean(dim=(-2, -1))
    sigma = x.std(dim=(-2, -1), unbiased=False)
    return torch.cat([mu, sigma], dim=-1)


@register
class Stylizer(nn.Module):
    """Convolutional encoder/decoder with AdaIN mixing in between.

    ``stylizer(c, s)`` decodes ``FSM(enc(c), enc(s), alpha=1 - strength)``,
    so ``strength=0`` is a plain reconstruction of ``c``.
    """

    def __init__(self, channels=3, width=32, strength=1.0, epsilon=EPSILON, seed=None):
        super().__init__()
        self.channels = channels
        self.width = width
        self.strength = float(strength)
        self.epsilon = epsilon
        self.encoder = nn.Sequential(
            nn.Conv2d(channels, width, 3, 1, 1), nn.ReLU(),
            nn.Conv2d(width, 2 * width, 4, 2, 1), nn.ReLU(),
            nn.Conv2d(2 * width, 2 * width, 3, 1, 1), nn.ReLU(),
        )
        self.decoder = nn.Sequential(
            nn.Upsample(scale_factor=2, mode="nearest"),
            nn.Conv2d(2 * width, width, 3, 1, 1), nn.ReLU(),
            nn.Conv2d(width, width, 3, 1, 1), nn.ReLU(),
            nn.Conv2d(width, channels, 3, 1, 1),
        )
        if seed is not None:
            with torch.random.fork_rng():
                torch.manual_seed(seed)
                _init_orthogonal(self)
        else:
            _init_orthogonal(self)
        self.history = []

    def config(self):
        return dict(channels=self.channels, width=self.width, strength=self.strength,
                    epsilon=self.epsilon)

    def reconstruct(self, c):
        return self.decoder(self.encoder(c))

    def forward(self, c, s, strength=None):
        if c.shape != s.shape:
            raise ShapeError(f"content {tuple(c.shape)} and style {tuple(s.shape)} differ")
        strength = self.strength if strength is None else float(strength)
        if not 0.0 <= strength <= 1.0:
            raise ConfigError(f"strength must lie in [0, 1], got {strength}")
        fc, fs = self.encoder(c), self.encoder(s)
        mixed = (1 - strength) * fc + strength * _adain(fc, fs, self.epsilon)
        return self.decoder(mixed)


def stylize(sty, c, s):
    """``T(c, s)`` for a :class:`Stylizer` or any ``(c, s) -> image`` callable."""
    return sty(c, s)


def _sample_batch(images, batch_size, gen):
    idx = torch.randint(0, len(images), (batch_size,), generator=gen)
    return images[idx]


def train_stylizer(contents: torch.Tensor, styles: torch.Tensor, steps=200, batch_size=16,
                   lr=1e-3, style_weight=1.0, width=32, seed=0) -> Stylizer:
    """Fit encoder and decoder jointly.

    The objective is pixel reconstruction of the content plus matching of
    the stylized output's pixel and encoder-feature moments to the style's.
    Per-step losses land in ``stylizer.history`` as dicts.
    """
    if len(contents) == 0 or len(styles) == 0:
        raise ConfigError("train_stylizer needs nonempty content and style sets")
    gen = torch.Generator().manual_seed(seed)
    sty = Stylizer(channels=contents.shape[1], width=width, seed=seed)
    opt = torch.optim.Adam(sty.parameters(), lr=lr)
    for _ in range(steps):
        c = _sample_batch(contents, batch_size, gen)
        s = _sample_batch(styles, batch_size, gen)
        fc, fs = sty.encoder(c), sty.encoder(s)
        recon = F.mse_loss(sty.decoder(fc), c)
        out = sty.decoder(_adain(fc, fs, sty.epsilon))
        pixel = F.mse_loss(_moment_vector(out), _moment_vector(s))
        feat = F.mse_loss(_moment_vector(sty.encoder(out)), _moment_vector(fs).detach())
        loss = recon + style_weight * (pixel + feat)
        opt.zero_grad(set_to_none=True)
        loss.backward()
        opt.step()
        sty.history.append({"loss": loss.item(), "recon": recon.item(),
                            "pixel": pixel.item(), "feat": feat.item()})
    sty.eval()
    return sty


def reconstruction_loss(sty: Stylizer, images):
    with torch.no_grad():
        return F.mse_loss(sty.reconstruct(images), images).item()


# -- FSM visualization --------------------------------------------------------

def default_tap_layer(disc: Discriminator) -> int:
    """1-based layer whose maps are 1/8 of the input resolution (or layer 1)."""
    for i, (_, h, _) in enumerate(disc.feature_shapes(), start=1):
        if h * 8 == disc.resolution:
            return i
    return 1


@register
class FSMDecoder(nn.Module):
    """Upsampling decoder from one discriminator layer's features to images."""

    def __init__(self, in_channels, in_size, resolution, out_channels=3, tap_layer=1,
                 width=64, seed=None):
        super().__init__()
        n_up = int(round(math.log2(resolution // in_size)))
        if in_size * 2 ** n_up != resolution:
            raise ConfigError(f"cannot upsample {in_size} to {resolution} by powers of two")
        self.in_channels, self.in_size, self.resolution = in_channels, in_size, resolution
        self.out_channels, self.tap_layer, self.width = out_channels, tap_layer, width
        blocks = [nn.Conv2d(in_channels, width, 3, 1, 1), nn.ReLU()]
        for _ in range(n_up):
            blocks += [nn.Upsample(scale_factor=2, mode="nearest"),
                       nn.Conv2d(width, width, 3, 1, 1), nn.ReLU()]
        blocks.append(nn.Conv2d(width, out_channels, 3, 1, 1))
        self.net = nn.Sequential(*blocks)
        if seed is not None:
            with torch.random.fork_rng():
                torch.manual_seed(seed)
                _init_orthogonal(self)
        else:
            _init_orthogonal(self)
        self.history = []

    def config(self):
        return dict(in_channels=self.in_channels, in_size=self.in_size,
                    resolution=self.resolution, out_channels=self.out_channels,
                    tap_layer=self.tap_layer, width=self.width)

    @classmethod
    def for_discriminator(cls, disc: Discriminator, tap_layer=None, **kw):
        tap_layer = tap_layer or default_tap_layer(disc)
        c, h, _ = disc.feature_shapes()[tap_layer - 1]
        return cls(c, h, disc.resolution, disc.in_channels, tap_layer, **kw)

    def forward(self, features):
        return self.net(features)


def fsm_features(disc: Discriminator, c, s, alpha, tap_layer, taps=None):
    """Features at ``tap_layer`` after the mixed recurrence, FSM applied
    at every selected boundary up to and including ``tap_layer``."""
    if c.shape != s.shape:
        raise ShapeError(f"content {tuple(c.shape)} and style {tuple(s.shape)} differ")
    if not 1 <= tap_layer <= disc.n_layers:
        raise ConfigError(f"tap layer {tap_layer} outside 1..{disc.n_layers}")
    _check_alpha(alpha)
    if taps is None:
        taps = range(1, tap_layer + 1)
    else:
        taps = resolve_taps(disc.n_layers + 1, taps)
    taps = set(taps)
    disc.check_input(c)
    x, y = disc.layers[0](c), disc.layers[0](s)
    for i in range(1, tap_layer + 1):
        if i in taps:
            a = _broadcast_alpha(alpha, x)
            x, y = (a * x + (1 - a) * _adain(x, y, disc.epsilon),
                    a * y + (1 - a) * _adain(y, x, disc.epsilon))
        if i < tap_layer:
            x, y = disc.layers[i](x), disc.layers[i](y)
    return x


def _check_decoder(dec: FSMDecoder, disc: Discriminator):
    if not 1 <= dec.tap_layer <= disc.n_layers:
        raise ConfigError(f"decoder tap layer {dec.tap_layer} not in discriminator")
    c, h, _ = disc.feature_shapes()[dec.tap_layer - 1]
    if (c, h) != (dec.in_channels, dec.in_size):
        raise ConfigError(f"decoder expects {dec.in_channels}x{dec.in_size}x{dec.in_size} "
                          f"features, layer {dec.tap_layer} gives {c}x{h}x{h}")


def decode_plain(dec: FSMDecoder, disc: Discriminator, c):
    _check_decoder(dec, disc)
    return dec(disc.features(c)[dec.tap_layer - 1])


def decode_fsm_features(dec: FSMDecoder, disc: Discriminator, c, s, alpha=0.0, taps=None):
    _check_decoder(dec, disc)
    return dec(fsm_features(disc, c, s, alpha, dec.tap_layer, taps))


def train_fsm_decoder(disc: Discriminator, images: torch.Tensor, tap_layer=None, steps=300,
                      batch_size=16, lr=1e-3, width=64, seed=0) -> FSMDecoder:
    """Fit a decoder reconstructing images from the frozen discriminator's
    (un-mixed) features at ``tap_layer``."""
    if len(images) == 0:
        raise ConfigError("train_fsm_decoder needs a nonempty image set")
    gen = torch.Generator().manual_seed(seed)
    dec = FSMDecoder.for_discriminator(disc, tap_layer, width=width, seed=seed)
    opt = torch.optim.Adam(dec.parameters(), lr=lr)
    for _ in range(steps):
        x = _sample_batch(images, batch_size, gen)
        with torch.no_grad():
            feat = disc.features(x)[dec.tap_layer - 1]
        loss = F.mse_loss(dec(feat), x)
        opt.zero_grad(set_to_none=True)
        loss.backward()
        opt.step()
        dec.history.append({"loss": loss.item()})
    dec.eval()
    return dec
