import numpy as np
import pytest
import torch

import oracles
from fsmr.data import normalize, style_pack, synthetic_dataset
from fsmr.errors import ConfigError, ShapeError
from fsmr.networks import Discriminator, load_archive, save_archive
from fsmr.stylizer import (FSMDecoder, Stylizer, decode_fsm_features, decode_plain,
                           default_tap_layer, fsm_features, pixel_adain_fallback,
                           reconstruction_loss, stylize, train_fsm_decoder, train_stylizer)


def pixel_moments(img):
    """Per-channel (mean, std) of one [C, H, W] image via the loop oracle."""
    arr = img.detach().double().numpy()
    return np.array([oracles.moments(arr[ch], eps=0.0) for ch in range(arr.shape[0])]).ravel()


@pytest.fixture(scope="module")
def data():
    contents = normalize(synthetic_dataset("colored-shapes", 500, seed=0).images)
    styles = normalize(style_pack(16, seed=1).images)
    return contents, styles


@pytest.fixture(scope="module")
def trained(data):
    contents, styles = data
    return train_stylizer(contents, styles, steps=200, seed=0)


# -- pixel fallback -------------------------------------------------------------

def test_fallback_fixed_point_and_moments(data):
    contents, styles = data
    c, s = contents[:4], styles[:4]
    assert torch.allclose(pixel_adain_fallback(c, c), c, atol=1e-4)
    out = pixel_adain_fallback(c, s)
    for o, ref in zip(out, s):
        np.testing.assert_allclose(pixel_moments(o), pixel_moments(ref), atol=1e-4)


def test_fallback_constant_image_fixed_point():
    c = torch.ones(2, 3, 8, 8) * torch.tensor([0.2, -0.4, 0.9]).view(1, 3, 1, 1)
    assert torch.equal(pixel_adain_fallback(c, c), c)


def test_fallback_gray_to_red():
    g = torch.Generator().manual_seed(0)
    gray = (torch.rand(1, 1, 16, 16, generator=g) * 0.4 - 0.2).repeat(1, 3, 1, 1)
    red = torch.stack([torch.full((16, 16), 0.9), torch.full((16, 16), -0.8),
                       torch.full((16, 16), -0.8)])[None] + 0.05 * torch.randn(1, 3, 16, 16,
                                                                               generator=g)
    out = pixel_adain_fallback(gray, red)
    m = pixel_moments(out[0])[0::2]
    m_in = pixel_moments(gray[0])[0::2]
    assert m[0] - max(m[1], m[2]) > m_in[0] - max(m_in[1], m_in[2]) + 1.0


def test_fallback_shape_check():
    with pytest.raises(ShapeError):
        pixel_adain_fallback(torch.randn(1, 3, 8, 8), torch.randn(1, 3, 16, 16))


# -- learned stylizer ---------------------------------------------------------

def test_untrained_stylizer_contracts(data):
    contents, styles = data
    sty = Stylizer(seed=0)
    c, s = contents[:4], styles[:4]
    with torch.no_grad():
        recon = sty.reconstruct(c)
        assert (stylize(sty, c, c) - recon).abs().max() < 1e-4
        assert torch.equal(sty(c, s, strength=0.0), recon)
        assert sty(c, s).shape == c.shape
    with pytest.raises(ShapeError):
        sty(c, s[:, :, :16, :16])
    with pytest.raises(ConfigError):
        sty(c, s, strength=1.5)


def test_training_lowers_reconstruction(data, trained):
    contents, styles = data
    held = contents[-32:]
    assert reconstruction_loss(trained, held) < reconstruction_loss(Stylizer(seed=0), held)


def test_training_deterministic(data):
    contents, styles = data
    a = train_stylizer(contents, styles, steps=20, seed=3)
    b = train_stylizer(contents, styles, steps=20, seed=3)
    assert b.history[-1]["loss"] == pytest.approx(a.history[-1]["loss"], abs=1e-6)


def test_trained_stylizer_moves_color_moments(data, trained):
    contents, styles = data
    c, s = contents[-16:], styles[torch.arange(16) % len(styles)]
    with torch.no_grad():
        out = trained(c, s)
    to_style = np.mean([np.linalg.norm(pixel_moments(o) - pixel_moments(r)) for o, r in zip(out, s)])
    to_content = np.mean([np.linalg.norm(pixel_moments(o) - pixel_moments(r))
                          for o, r in zip(out, c)])
    assert to_style < to_content


def test_strength_sweep_monotone(data, trained):
    contents, styles = data
    c, s = contents[-16:], styles[torch.arange(16) % len(styles)]
    errors = []
    with torch.no_grad():
        for k in np.linspace(0, 1, 5):
            errors.append(torch.mean((trained(c, s, strength=float(k)) - c) ** 2).item())
    assert all(b >= a - 1e-7 for a, b in zip(errors, errors[1:]))


def test_empty_training_set():
    with pytest.raises(ConfigError):
        train_stylizer(torch.zeros(0, 3, 32, 32), torch.zeros(2, 3, 32, 32))


def test_stylizer_archive(tmp_path, trained, data):
    path = save_archive(tmp_path / "sty.npz", {"stylizer": trained})
    loaded = load_archive(path)[0]["stylizer"]
    c, s = data[0][:2], data[1][:2]
    with torch.no_grad():
        assert torch.equal(loaded(c, s), trained(c, s))


# -- FSM decoder --------------------------------------------------------------

@pytest.fixture(scope="module")
def frozen_disc():
    return Discriminator(32, 3, seed=4).eval()


@pytest.fixture(scope="module")
def decoder(frozen_disc, data):
    return train_fsm_decoder(frozen_disc, data[0][:400], steps=300, seed=0)


def test_default_tap_is_resolution_proportional(frozen_disc):
    assert default_tap_layer(frozen_disc) == 3
    assert frozen_disc.feature_shapes()[2][1] == 32 // 8


def test_decoder_identities(frozen_disc, decoder, data):
    c, s = data[0][-8:], data[1][:8]
    with torch.no_grad():
        plain = decode_plain(decoder, frozen_disc, c)
        assert torch.allclose(decode_fsm_features(decoder, frozen_disc, c, c, 0.0), plain,
                              atol=1e-4)
        assert torch.equal(decode_fsm_features(decoder, frozen_disc, c, s, 1.0), plain)


def test_decoder_alpha_zero_moves_toward_style(frozen_disc, decoder, data):
    c, s = data[0][-16:], data[1][torch.arange(16) % 16]
    with torch.no_grad():
        plain = decode_plain(decoder, frozen_disc, c)
        mixed = decode_fsm_features(decoder, frozen_disc, c, s, 0.0)
    d_mixed = np.mean([np.linalg.norm(pixel_moments(m) - pixel_moments(r))
                       for m, r in zip(mixed, s)])
    d_plain = np.mean([np.linalg.norm(pixel_moments(p) - pixel_moments(r))
                       for p, r in zip(plain, s)])
    assert d_mixed < d_plain


def test_decoder_training_contracts(frozen_disc, decoder, data):
    images = data[0][:400]
    a = train_fsm_decoder(frozen_disc, images, steps=20, seed=2)
    b = train_fsm_decoder(frozen_disc, images, steps=20, seed=2)
    assert b.history[-1]["loss"] == pytest.approx(a.history[-1]["loss"], abs=1e-6)
    assert decoder.history[-1]["loss"] < decoder.history[0]["loss"]
    held = data[0][-32:]
    random_dec = FSMDecoder.for_discriminator(frozen_disc, seed=0)

    def psnr(dec):
        with torch.no_grad():
            mse = torch.mean((decode_plain(dec, frozen_disc, held) - held) ** 2).item()
        return 10 * np.log10(4.0 / mse)

    assert psnr(decoder) > psnr(random_dec)
    assert not any(p.grad is not None for p in frozen_disc.parameters())
    assert all(p.requires_grad for p in frozen_disc.parameters())


def test_decoder_layer_mismatch(frozen_disc):
    other = Discriminator(32, 3, widths=(16, 32, 64, 128), seed=0)
    dec = FSMDecoder.for_discriminator(other, tap_layer=2)
    with pytest.raises(ConfigError):
        decode_plain(dec, frozen_disc, torch.zeros(1, 3, 32, 32))


def test_fsm_features_taps_prefix(frozen_disc, data):
    c, s = data[0][:2], data[1][:2]
    with torch.no_grad():
        a = fsm_features(frozen_disc, c, s, 0.3, tap_layer=2)
        only_first = fsm_features(frozen_disc, c, s, 0.3, tap_layer=2, taps=(1,))
    assert a.shape == (2, *frozen_disc.feature_shapes()[1])
    assert not torch.allclose(a, only_first)
