import numpy as np
import pytest
import torch
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

import oracles
from fsmr.core import (EPSILON, MixPolicy, adain, channel_stats, fsm, mixed_forward,
                       paired_mixed_forward, random_pairing, resolve_taps, sample_alpha,
                       tie_alpha)
from fsmr.errors import ConfigError, InvalidInputError, ShapeError
from fsmr.networks import Discriminator

# Logits of the pinned 3-layer network (tests/conftest.py) computed by the
# loop-based oracle in tests/oracles.py and frozen here.
PINNED_PLAIN = -3.6322060853600666
PINNED_MIXED_HALF = -7.989358475173376
PINNED_MIXED_ZERO = -4.785601167509171
PINNED_MIXED_HALF_TAP2 = -6.112387796971207


def t(values):
    return torch.tensor(values, dtype=torch.float64)


# -- channel statistics ---------------------------------------------------------

def test_constant_channel_has_epsilon_sigma():
    st_ = channel_stats(torch.full((1, 3, 4), 5.0, dtype=torch.float64))
    assert st_.mu.tolist() == [5.0]
    assert st_.sigma.item() == pytest.approx(EPSILON, rel=1e-12)


def test_two_value_channel_matches_oracle():
    st_ = channel_stats(t([[[0.0, 2.0]]]))
    mu, sigma = oracles.moments(np.array([[0.0, 2.0]]))
    assert st_.mu.item() == pytest.approx(mu) == 1.0
    assert st_.sigma.item() == pytest.approx(sigma, abs=1e-12)
    assert st_.sigma.item() == pytest.approx(1.0, abs=1e-9)


def test_shifted_channel_stats():
    base = torch.randn(1, 5, 6, generator=torch.Generator().manual_seed(0), dtype=torch.float64)
    x = torch.cat([base, base + 3])
    st_ = channel_stats(x)
    assert st_.mu[1].item() == pytest.approx(st_.mu[0].item() + 3, abs=1e-12)
    assert st_.sigma[1].item() == pytest.approx(st_.sigma[0].item(), abs=1e-12)


def test_batched_stats_shape():
    st_ = channel_stats(torch.randn(4, 3, 5, 5))
    assert st_.mu.shape == st_.sigma.shape == (4, 3)


@pytest.mark.parametrize("bad", [torch.zeros(3, 0, 4), torch.zeros(0, 4, 4), torch.zeros(4, 4)])
def test_bad_shapes_rejected(bad):
    with pytest.raises(ShapeError):
        channel_stats(bad)


def test_non_finite_rejected():
    x = torch.zeros(1, 2, 2)
    x[0, 0, 0] = float("nan")
    with pytest.raises(InvalidInputError):
        channel_stats(x)


def test_stats_are_differentiable():
    x = torch.randn(2, 4, 4, dtype=torch.float64, requires_grad=True)
    st_ = channel_stats(x)
    (st_.mu.sum() + st_.sigma.sum()).backward()
    assert x.grad is not None and torch.isfinite(x.grad).all()


# -- AdaIN / FSM --------------------------------------------------------------

def test_adain_two_values():
    out = adain(t([[[0.0, 2.0]]]), t([[[3.0, 7.0]]]))
    ref = oracles.adain(np.array([[[0.0, 2.0]]]), np.array([[[3.0, 7.0]]]))
    np.testing.assert_allclose(out.numpy(), ref, atol=1e-9)
    np.testing.assert_allclose(out.numpy(), [[[3.0, 7.0]]], atol=1e-8)


def test_fsm_half_mix():
    out = fsm(t([[[0.0, 2.0]]]), t([[[3.0, 7.0]]]), 0.5)
    np.testing.assert_allclose(out.numpy(), [[[1.5, 4.5]]], atol=1e-8)


def test_adain_spatial_sizes_may_differ():
    x = torch.randn(2, 3, 5, 5)
    y = torch.randn(2, 3, 2, 7)
    out = adain(x, y)
    assert out.shape == x.shape
    np.testing.assert_allclose(channel_stats(out).mu, channel_stats(y).mu, atol=1e-5)


def test_adain_channel_mismatch():
    with pytest.raises(ShapeError):
        adain(torch.randn(3, 4, 4), torch.randn(2, 4, 4))


def test_adain_matches_oracle_random():
    g = np.random.default_rng(1)
    x = g.normal(size=(3, 4, 5))
    y = g.normal(2, 3, size=(3, 6, 2))
    np.testing.assert_allclose(adain(t(x), t(y)).numpy(), oracles.adain(x, y), atol=1e-10)


def test_fsm_endpoints():
    g = torch.Generator().manual_seed(2)
    x, y = torch.randn(2, 3, 4, 4, generator=g), torch.randn(2, 3, 4, 4, generator=g)
    assert torch.equal(fsm(x, y, 1.0), x)
    assert torch.allclose(fsm(x, y, 0.0), adain(x, y), atol=0, rtol=0)


@pytest.mark.parametrize("alpha", [-0.1, 1.5])
def test_fsm_alpha_range(alpha):
    with pytest.raises(InvalidInputError):
        fsm(torch.randn(3, 4, 4), torch.randn(3, 4, 4), alpha)


def test_fsm_per_sample_alpha():
    g = torch.Generator().manual_seed(3)
    x, y = torch.randn(3, 2, 4, 4, generator=g), torch.randn(3, 2, 4, 4, generator=g)
    a = torch.tensor([0.0, 0.5, 1.0])
    out = fsm(x, y, a)
    for i in range(3):
        assert torch.allclose(out[i], fsm(x[i], y[i], float(a[i])), atol=1e-6)


def test_fsm_gradients_flow_to_both_inputs():
    x = torch.randn(2, 4, 4, dtype=torch.float64, requires_grad=True)
    y = torch.randn(2, 4, 4, dtype=torch.float64, requires_grad=True)
    (fsm(x, y, 0.3) ** 2).sum().backward()
    assert x.grad.abs().sum() > 0 and y.grad.abs().sum() > 0


maps = arrays(np.float64, st.tuples(st.integers(1, 3), st.integers(2, 5), st.integers(2, 5)),
              elements=st.floats(-50, 50, allow_nan=False, width=64))


def _spread_enough(x):
    return np.all(x.reshape(x.shape[0], -1).std(axis=1) >= 0.1)


@settings(max_examples=200, deadline=None)
@given(maps, st.floats(0.1, 10.0), st.floats(-5, 5))
def test_adain_identity_and_stat_transfer(x, scale, shift):
    if not _spread_enough(x):
        return
    xt = torch.from_numpy(x).float()
    yt = xt.flip(-1) * scale + shift
    assert torch.allclose(adain(xt, xt), xt, atol=1e-4 * max(1.0, float(xt.abs().max())))
    out = channel_stats(adain(xt, yt))
    ref = channel_stats(yt)
    tol = 1e-4 * max(1.0, float(yt.abs().max()))
    assert torch.allclose(out.mu, ref.mu, atol=tol)
    assert torch.allclose(out.sigma, ref.sigma, atol=tol)


@settings(max_examples=100, deadline=None)
@given(maps, st.floats(0.0, 1.0))
def test_fsm_is_convex_combination(x, alpha):
    xt = torch.from_numpy(x)
    yt = xt * 2 + 1
    out = fsm(xt, yt, alpha)
    expected = alpha * xt + (1 - alpha) * adain(xt, yt)
    assert torch.allclose(out, expected, atol=1e-9)


# -- alpha sampling -----------------------------------------------------------

def test_sample_alpha_deterministic():
    a = sample_alpha(torch.Generator().manual_seed(5), size=20)
    b = sample_alpha(torch.Generator().manual_seed(5), size=20)
    assert torch.equal(a, b)


def test_sample_alpha_mean():
    draws = sample_alpha(torch.Generator().manual_seed(0), size=100_000, dtype=torch.float64)
    assert 0.49 <= draws.mean().item() <= 0.51
    assert draws.min() >= 0 and draws.max() <= 1


def test_sample_alpha_fixed():
    draws = sample_alpha(torch.Generator().manual_seed(0), MixPolicy(alpha_fixed=0.3), size=50)
    assert torch.all(draws == 0.3)


def test_mix_policy_validation():
    with pytest.raises(ConfigError):
        MixPolicy(lambda_fsmr=-1)
    with pytest.raises(ConfigError):
        MixPolicy(target="everything")
    with pytest.raises(ConfigError):
        MixPolicy(alpha_fixed=2.0)
    with pytest.raises(ConfigError):
        MixPolicy(reference_rule="nearest")


# -- mixed forward ------------------------------------------------------------

def test_pinned_plain_logit(pinned):
    disc, convs, head, c, s = pinned
    assert oracles.plain_logit(convs, head, c[0].numpy()) == pytest.approx(PINNED_PLAIN, abs=1e-12)
    assert disc(c).item() == pytest.approx(PINNED_PLAIN, abs=1e-10)


@pytest.mark.parametrize("alpha,taps,expected", [
    (0.5, None, PINNED_MIXED_HALF),
    (0.0, None, PINNED_MIXED_ZERO),
    (0.5, (2,), PINNED_MIXED_HALF_TAP2),
])
def test_pinned_mixed_logit(pinned, alpha, taps, expected):
    disc, convs, head, c, s = pinned
    ref = oracles.mixed_logit(convs, head, c[0].numpy(), s[0].numpy(), alpha, taps)
    assert ref == pytest.approx(expected, abs=1e-12)
    assert mixed_forward(disc, c, s, alpha, taps).item() == pytest.approx(expected, abs=1e-9)


def test_pinned_mixed_logit_float32(pinned):
    disc, _, _, c, s = pinned
    got = mixed_forward(disc.float(), c.float(), s.float(), 0.5).item()
    assert got == pytest.approx(PINNED_MIXED_HALF, abs=1e-5)


def test_mixed_forward_self_reference(small_disc):
    g = torch.Generator().manual_seed(0)
    c = torch.randn(4, 3, 16, 16, generator=g)
    plain = small_disc(c)
    for alpha in (0.0, 0.3, torch.rand(4, generator=g)):
        assert torch.allclose(mixed_forward(small_disc, c, c, alpha), plain, atol=1e-5)


def test_mixed_forward_alpha_one_is_plain(small_disc):
    g = torch.Generator().manual_seed(1)
    c, s = torch.randn(3, 3, 16, 16, generator=g), torch.randn(3, 3, 16, 16, generator=g)
    assert torch.equal(mixed_forward(small_disc, c, s, 1.0), small_disc(c))


def test_mixed_forward_output_shape_and_grads(double_disc):
    g = torch.Generator().manual_seed(2)
    c = torch.randn(3, 2, 8, 8, generator=g, dtype=torch.float64, requires_grad=True)
    s = torch.randn(3, 2, 8, 8, generator=g, dtype=torch.float64, requires_grad=True)
    out = mixed_forward(double_disc, c, s, 0.4)
    assert out.shape == (3,)
    out.sum().backward()
    assert c.grad.abs().sum() > 0 and s.grad.abs().sum() > 0
    assert all(p.grad is not None for p in double_disc.parameters())


def test_mixed_forward_shape_errors(small_disc):
    with pytest.raises(ShapeError):
        mixed_forward(small_disc, torch.randn(2, 3, 16, 16), torch.randn(3, 3, 16, 16), 0.5)
    with pytest.raises(ConfigError):
        mixed_forward(small_disc, torch.randn(2, 3, 16, 16), torch.randn(2, 3, 16, 16), 0.5,
                      taps=(3,))


def test_resolve_taps():
    assert resolve_taps(4, None) == (1, 2, 3)
    assert resolve_taps(4, [3, 1, 1]) == (1, 3)
    with pytest.raises(ConfigError):
        resolve_taps(4, [0])


def test_per_tap_alpha_list(pinned):
    disc, convs, head, c, s = pinned
    # an alpha of 1 at a tap switches that tap off
    both = mixed_forward(disc, c, s, [1.0, 0.5]).item()
    assert both == pytest.approx(PINNED_MIXED_HALF_TAP2, abs=1e-9)


# -- paired single-branch pass ---------------------------------------------------

@pytest.mark.parametrize("batch", [1, 2, 5, 8])
def test_random_pairing_is_involution(batch):
    g = torch.Generator().manual_seed(batch)
    for _ in range(20):
        p = random_pairing(batch, g)
        assert torch.equal(p[p], torch.arange(batch))
        assert int((p == torch.arange(batch)).sum()) == batch % 2


def test_random_pairing_partner_frequencies():
    g = torch.Generator().manual_seed(0)
    counts = np.zeros((6, 6))
    for _ in range(6000):
        p = random_pairing(6, g).numpy()
        counts[np.arange(6), p] += 1
    off = counts[~np.eye(6, dtype=bool)] / 6000
    assert np.all(np.abs(off - 0.2) < 0.02)


@pytest.mark.parametrize("taps", [None, (1,), (2,)])
def test_paired_pass_equals_two_branch_recurrence(double_disc, taps):
    g = torch.Generator().manual_seed(4)
    c = torch.randn(7, 2, 8, 8, generator=g, dtype=torch.float64)
    p = random_pairing(7, g)
    a = tie_alpha(torch.rand(7, generator=g, dtype=torch.float64), p)
    assert torch.equal(a, a[p])
    ref = mixed_forward(double_disc, c, c[p], a, taps)
    got = paired_mixed_forward(double_disc, c, p, a, taps)
    assert torch.allclose(got, ref, atol=1e-12)


def test_mixed_forward_self_reference_bulk():
    g = torch.Generator().manual_seed(9)
    for i in range(10):
        widths = tuple(int(w) for w in torch.randint(2, 9, (3,), generator=g))
        disc = Discriminator(16, 3, widths, seed=i)
        c = torch.randn(2, 3, 16, 16, generator=g) * 2
        n = torch.randint(1, 3, (1,), generator=g).item()
        taps = tuple(torch.randperm(2, generator=g)[:n].add(1).tolist())
        alpha = torch.rand(2, generator=g)
        assert torch.allclose(mixed_forward(disc, c, c, alpha, taps), disc(c), atol=1e-5)
