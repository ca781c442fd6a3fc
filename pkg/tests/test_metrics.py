import csv
import json

import numpy as np
import pytest
import torch
from hypothesis import given, settings
from hypothesis import strategies as st

import oracles
from fsmr.data import normalize, style_pack, synthetic_dataset
from fsmr.errors import DegenerateMetricError, ShapeError, ConfigError
from fsmr.metrics import (REPORT_COLUMNS, GaussianSummary, content_distance, cosine_distance,
                          frechet_between, frechet_distance, relative_distance, style_distance,
                          summarize_embeddings, write_reports)
from fsmr.stylizer import pixel_adain_fallback


def channel_means(x):
    return x.mean(dim=(-2, -1))


def instance_normalized(x):
    mu = x.mean(dim=(-2, -1), keepdim=True)
    sd = x.std(dim=(-2, -1), keepdim=True, unbiased=False)
    return ((x - mu) / (sd + 1e-8)).flatten(1)


def color_histogram(x, bins=16):
    """Orderless soft histogram per channel: reads color, ignores layout."""
    centers = torch.linspace(-3, 3, bins, dtype=x.dtype)
    v = x.flatten(2)[..., None]
    return torch.exp(-((v - centers) ** 2) / (2 * 0.2 ** 2)).mean(2).flatten(1)


def raw_pixels(x):
    return x.flatten(1)


@pytest.fixture(scope="module")
def sets():
    contents = normalize(synthetic_dataset("colored-shapes", 64, seed=1).images)
    styles = normalize(style_pack(8, seed=2).images)
    return contents, styles


# -- cosine -------------------------------------------------------------------

def test_cosine_basics():
    u = np.array([1.0, 2.0, -0.5])
    assert cosine_distance(u, u) == pytest.approx(0.0, abs=1e-12)
    assert cosine_distance(u, -u) == pytest.approx(2.0)
    assert cosine_distance([1.0, 0.0], [0.0, 3.0]) == pytest.approx(1.0)
    with pytest.raises(DegenerateMetricError):
        cosine_distance([0.0, 0.0], [1.0, 0.0])
    with pytest.raises(ShapeError):
        cosine_distance([1.0], [1.0, 2.0])


def test_cosine_matches_oracle_rows():
    g = np.random.default_rng(0)
    u, v = g.normal(size=(5, 7)), g.normal(size=(5, 7))
    got = cosine_distance(u, v)
    for i in range(5):
        assert got[i] == pytest.approx(oracles.cosine_distance(u[i], v[i]), abs=1e-12)


# -- style / content distances ----------------------------------------------------

def test_style_distance_zero_cases(sets):
    contents, styles = sets
    c, s = contents[0], styles[0]
    assert style_distance(raw_pixels, pixel_adain_fallback, c, s, s) == pytest.approx(0, abs=1e-9)
    identity = lambda a, b: a  # noqa: E731
    assert style_distance(raw_pixels, identity, c, styles[1], s) == pytest.approx(0, abs=1e-12)


def test_style_distance_channel_mean_embedding(sets):
    contents, styles = sets
    c, s1, s2 = contents[3].double(), styles[1].double(), styles[4].double()
    got = style_distance(channel_means, pixel_adain_fallback, c, s1, s2)
    means = [[oracles.moments(img[ch].numpy())[0] for ch in range(3)] for img in (s1, s2)]
    assert got == pytest.approx(oracles.cosine_distance(*means), abs=1e-9)


def test_content_distance_moment_invariant_embedding(sets):
    contents, styles = sets
    c1, c2, s = contents[0].double(), contents[5].double(), styles[2].double()
    got = content_distance(instance_normalized, pixel_adain_fallback, c1, c2, s)
    plain = oracles.cosine_distance(instance_normalized(c1[None]).numpy(),
                                    instance_normalized(c2[None]).numpy())
    assert got == pytest.approx(plain, abs=1e-6)
    assert content_distance(raw_pixels, pixel_adain_fallback, c1, c1, s) == pytest.approx(
        0, abs=1e-9)


def test_batched_distances_in_range(sets):
    contents, styles = sets
    d = content_distance(raw_pixels, pixel_adain_fallback, contents[:4], contents[4:8], styles[:4])
    assert d.shape == (4,) and np.all((d >= 0) & (d <= 2))


# -- relative distance ------------------------------------------------------------

def test_invariant_embedding_rho_near_zero(sets):
    contents, styles = sets
    r = relative_distance(instance_normalized, pixel_adain_fallback, contents, styles, 256, seed=0)
    assert r.rho < 0.01


def test_pixel_embedding_rho_positive(sets):
    contents, styles = sets
    r = relative_distance(raw_pixels, pixel_adain_fallback, contents, styles, 256, seed=0)
    assert r.rho > 0
    assert r.d_s_mean > 0 and r.d_c_mean > 0


def test_style_only_embedding_rho_above_half(sets):
    contents, styles = sets
    r = relative_distance(color_histogram, pixel_adain_fallback, contents, styles, 256, seed=0)
    assert r.rho > 0.5


def test_moment_only_embedding_is_degenerate(sets):
    # the fallback fixes every channel moment, so d_c vanishes for all tuples
    contents, styles = sets
    with pytest.raises(DegenerateMetricError):
        relative_distance(channel_means, pixel_adain_fallback, contents, styles, 16, seed=0)


def test_relative_distance_deterministic(sets, small_disc):
    contents, styles = sets
    contents16 = torch.nn.functional.avg_pool2d(contents, 2)
    styles16 = torch.nn.functional.avg_pool2d(styles, 2)
    a = relative_distance(small_disc, pixel_adain_fallback, contents16, styles16, 64, seed=3)
    b = relative_distance(small_disc, pixel_adain_fallback, contents16, styles16, 64, seed=3)
    assert a == b


@settings(max_examples=10, deadline=None)
@given(st.floats(0.01, 100.0))
def test_rho_scale_invariant(scale):
    contents = normalize(synthetic_dataset("colored-shapes", 16, seed=1).images)
    styles = normalize(style_pack(4, seed=2).images)
    a = relative_distance(raw_pixels, pixel_adain_fallback, contents, styles, 32, seed=1)
    b = relative_distance(lambda x: scale * raw_pixels(x), pixel_adain_fallback, contents, styles,
                          32, seed=1)
    assert b.rho == pytest.approx(a.rho, rel=1e-6)


def test_ratio_of_means_flag(sets):
    contents, styles = sets
    r = relative_distance(raw_pixels, pixel_adain_fallback, contents, styles, 64, seed=0,
                          ratio_of_means=True)
    assert r.rho == pytest.approx(r.d_s_mean / r.d_c_mean)


def test_degenerate_content_set():
    contents = torch.ones(4, 3, 8, 8) * torch.linspace(-1, 1, 8)
    styles = normalize(style_pack(3, seed=0, resolution=8).images)
    with pytest.raises(DegenerateMetricError):
        relative_distance(raw_pixels, pixel_adain_fallback, contents, styles, 8, seed=0)


def test_relative_distance_validation(sets):
    contents, styles = sets
    with pytest.raises(ConfigError):
        relative_distance(raw_pixels, pixel_adain_fallback, contents[:1], styles, 8)
    with pytest.raises(ConfigError):
        relative_distance(raw_pixels, pixel_adain_fallback, contents, styles, 0)


def test_report_files(tmp_path, sets):
    contents, styles = sets
    r = relative_distance(raw_pixels, pixel_adain_fallback, contents, styles, 16, seed=0,
                          model_id="m")
    write_reports([r, r], tmp_path / "r.csv", tmp_path / "r.jsonl")
    with open(tmp_path / "r.csv") as f:
        rows = list(csv.DictReader(f))
    assert tuple(rows[0]) == REPORT_COLUMNS and len(rows) == 2
    assert float(rows[0]["rho"]) == pytest.approx(r.rho)
    lines = (tmp_path / "r.jsonl").read_text().splitlines()
    assert json.loads(lines[1])["model_id"] == "m"


# -- Fréchet ------------------------------------------------------------------

def test_frechet_identical_is_zero():
    g = np.random.default_rng(0)
    x = g.normal(size=(50, 4))
    s = summarize_embeddings(None, x)
    assert frechet_distance(s, s) == pytest.approx(0.0, abs=1e-6)


def test_frechet_scalar_closed_form():
    a = GaussianSummary(np.array([0.0]), np.array([[1.0]]))
    b = GaussianSummary(np.array([1.0]), np.array([[1.0]]))
    assert frechet_distance(a, b) == pytest.approx(1.0, abs=1e-12)


def test_frechet_diagonal_against_eig_oracle():
    va, vb = np.array([1.0, 4.0, 0.25]), np.array([2.0, 1.0, 9.0])
    ma, mb = np.array([0.0, 1.0, -1.0]), np.array([0.5, 0.5, 0.5])
    a, b = GaussianSummary(ma, np.diag(va)), GaussianSummary(mb, np.diag(vb))
    closed = float(np.sum((ma - mb) ** 2) + np.sum(va + vb - 2 * np.sqrt(va * vb)))
    assert oracles.frechet_eig(ma, np.diag(va), mb, np.diag(vb)) == pytest.approx(closed, abs=1e-9)
    assert frechet_distance(a, b) == pytest.approx(closed, abs=1e-6)


def test_frechet_full_covariance_against_eig_oracle():
    g = np.random.default_rng(5)
    x, y = g.normal(size=(200, 6)), g.normal(size=(200, 6)) @ g.normal(size=(6, 6)) + 0.3
    a, b = summarize_embeddings(None, x), summarize_embeddings(None, y)
    ref = oracles.frechet_eig(a.mean, a.cov, b.mean, b.cov)
    assert frechet_distance(a, b) == pytest.approx(ref, abs=1e-6)
    assert frechet_distance(b, a) == pytest.approx(frechet_distance(a, b), abs=1e-6)


def test_frechet_dimension_mismatch():
    with pytest.raises(ShapeError):
        frechet_distance(GaussianSummary(np.zeros(2), np.eye(2)),
                         GaussianSummary(np.zeros(3), np.eye(3)))


def test_summary_conventions():
    same = summarize_embeddings(None, np.ones((5, 3)))
    assert np.all(same.cov == 0)
    g = np.random.default_rng(1)
    s = summarize_embeddings(None, g.normal(size=(30, 4)))
    assert np.allclose(s.cov, s.cov.T, atol=1e-8)
    two = summarize_embeddings(None, np.array([[1.0], [4.0]]))
    assert two.cov[0, 0] == pytest.approx(oracles.sample_variance([1.0, 4.0]))
    assert two.cov[0, 0] == pytest.approx(0.5 * (4.0 - 1.0) ** 2)
    with pytest.raises(ConfigError):
        summarize_embeddings(raw_pixels, torch.zeros(0, 3, 4, 4))


def test_rank_deficiency_warns():
    with pytest.warns(UserWarning, match="rank deficient"):
        summarize_embeddings(None, np.random.default_rng(0).normal(size=(3, 5)))


def test_frechet_split_half_ordering():
    reals = normalize(synthetic_dataset("colored-shapes", 400, seed=0).images)
    noise = torch.rand(200, 3, 32, 32, generator=torch.Generator().manual_seed(0)) * 2 - 1
    half = frechet_between(channel_means, reals[:200], reals[200:])
    vs_noise = frechet_between(channel_means, reals[:200], noise)
    assert 0 < half < vs_noise
