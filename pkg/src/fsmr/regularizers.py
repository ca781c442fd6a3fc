"""Discriminator regularizers: FSMR, on-the-fly stylization consistency,
balanced consistency (bCR), R1, plus the non-saturating adversarial losses."""

from __future__ import annotations

import torch
import torch.nn.functional as F

from .core import (MixPolicy, mixed_forward, paired_mixed_forward, random_pairing, resolve_taps,
                   sample_alpha, tie_alpha)
from .errors import ConfigError, ShapeError

__all__ = [
    "MixPolicy", "shuffle_references", "fsmr_loss", "onthefly_consistency_loss", "bcr_loss",
    "r1_penalty", "total_disc_loss", "disc_adv_loss", "gen_adv_loss",
]


def shuffle_references(batch: torch.Tensor, rng: torch.Generator, return_index=False):
    """Reorder ``batch`` by a uniform random permutation (self-pairs allowed)."""
    if len(batch) == 0:
        raise ConfigError("cannot draw references from an empty batch")
    perm = torch.randperm(len(batch), generator=rng)
    if return_index:
        return batch[perm], perm
    return batch[perm]


def draw_alpha(disc, policy: MixPolicy, batch_size, rng, dtype=torch.float32):
    """One alpha per sample, or one per tap and sample with ``per_layer_alpha``."""
    if policy.per_layer_alpha:
        taps = resolve_taps(disc.n_layers, policy.taps)
        return [sample_alpha(rng, policy, batch_size, dtype) for _ in taps]
    return sample_alpha(rng, policy, batch_size, dtype)


def fsmr_loss(disc, contents, refs=None, policy: MixPolicy = None, rng=None, logits=None,
              stats_fn=None, alpha=None, features=None):
    """Mean squared gap between plain and FSM-mixed logits.

    With ``refs=None`` references come from the batch itself following
    ``policy.reference_rule``; the pairing/permutation is drawn from ``rng``
    before alpha. ``logits`` may carry an already computed
    ``disc(contents)`` and ``features`` the per-layer outputs of that pass,
    which spares recomputing the first layer. ``alpha`` overrides the draw.
    """
    policy = policy or MixPolicy()
    if refs is not None and refs.shape != contents.shape:
        raise ShapeError(f"contents {tuple(contents.shape)} and refs {tuple(refs.shape)} differ")
    if logits is None:
        logits = disc.head(features[-1]).squeeze(1) if features is not None else disc(contents)

    if refs is None and policy.reference_rule == "pairs":
        partner = random_pairing(len(contents), rng)
        if alpha is None:
            alpha = draw_alpha(disc, policy, len(contents), rng, contents.dtype)
        if isinstance(alpha, (list, tuple)):
            alpha = [tie_alpha(a, partner) for a in alpha]
        elif isinstance(alpha, torch.Tensor) and alpha.dim() == 1:
            alpha = tie_alpha(alpha, partner)
        first = features[0] if features is not None else None
        mixed = paired_mixed_forward(disc, contents, partner, alpha, policy.taps,
                                     stats_fn=stats_fn, first_features=first)
        return (logits - mixed).pow(2).mean()

    first = None
    if refs is None:
        refs, perm = shuffle_references(contents, rng, return_index=True)
        if features is not None:
            first = (features[0], features[0][perm])
    if alpha is None:
        alpha = draw_alpha(disc, policy, len(contents), rng, contents.dtype)
    mixed = mixed_forward(disc, contents, refs, alpha, policy.taps, stats_fn=stats_fn,
                          first_features=first)
    return (logits - mixed).pow(2).mean()


def onthefly_consistency_loss(disc, contents, styles, stylizer, logits=None):
    """Mean squared gap between ``D(c)`` and ``D(T(c, s))``.

    ``stylizer`` is any callable ``(c, s) -> images``; the stylizer itself
    receives no gradient.
    """
    if logits is None:
        logits = disc(contents)
    with torch.no_grad():
        stylized = stylizer(contents, styles)
    if stylized.shape != contents.shape:
        raise ShapeError(f"stylizer returned {tuple(stylized.shape)} for "
                         f"{tuple(contents.shape)} inputs")
    return (logits - disc(stylized)).pow(2).mean()


def bcr_loss(disc, reals, fakes, augment_fn, lambda_real=10.0, lambda_fake=10.0,
             real_logits=None, fake_logits=None):
    """Balanced consistency regularization on real and fake batches."""
    if real_logits is None:
        real_logits = disc(reals)
    if fake_logits is None:
        fake_logits = disc(fakes)
    real_term = (real_logits - disc(augment_fn(reals))).pow(2).mean()
    fake_term = (fake_logits - disc(augment_fn(fakes))).pow(2).mean()
    return lambda_real * real_term + lambda_fake * fake_term


def r1_penalty(disc, reals, gamma=0.1, logits=None):
    """``gamma / 2 * E ||grad_x D(x)||^2`` at real samples.

    When ``logits`` is given, ``reals`` must already require grad and the
    logits must have been computed from it.
    """
    if logits is None:
        reals = reals.detach().requires_grad_(True)
        logits = disc(reals)
    if not logits.requires_grad:
        return logits.new_zeros(())
    (grad,) = torch.autograd.grad(logits.sum(), reals, create_graph=True, allow_unused=True)
    if grad is None:  # the logits do not depend on the input at all
        return logits.sum() * 0
    return 0.5 * gamma * grad.pow(2).flatten(1).sum(1).mean()


def total_disc_loss(adv, components=()):
    """``adv + sum(weight * value)`` over ``(value, weight)`` pairs."""
    total = adv
    for value, weight in components:
        if weight < 0:
            raise ConfigError(f"regularizer weight must be >= 0, got {weight}")
        if weight:
            total = total + weight * value
    return total


def disc_adv_loss(real_logits, fake_logits):
    """Non-saturating logistic loss for the discriminator."""
    return F.softplus(-real_logits).mean() + F.softplus(fake_logits).mean()


def gen_adv_loss(fake_logits):
    return F.softplus(-fake_logits).mean()
