"""Channel statistics, AdaIN, feature statistics mixing and the mixed
discriminator forward pass.

All functions operate on torch tensors shaped ``[C, H, W]`` or batched
``[B, C, H, W]`` and are differentiable with respect to every tensor input.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Optional, Sequence, Union

import torch

from .errors import ConfigError, InvalidInputError, ShapeError

EPSILON = 1e-5

TARGETS = ("real_only", "fake_only", "both")
REFERENCE_RULES = ("pairs", "permutation")

Alpha = Union[float, torch.Tensor]
# (tap index, mixed content features, mixed reference features) -> (mu, sigma)
StatsFn = Callable[[int, torch.Tensor, torch.Tensor], tuple]


@dataclass
class ChannelStats:
    mu: torch.Tensor
    sigma: torch.Tensor


@dataclass
class MixPolicy:
    """Configuration of feature statistics mixing regularization.

    ``alpha_fixed`` replaces the Uniform(0, 1) draw with a constant.
    ``taps=None`` means every layer boundary of the discriminator.
    ``reference_rule`` picks in-batch references either as a random pairing
    (partners reference each other and share alpha, which lets the mixed
    pass run a single branch) or as a uniform random permutation.
    """

    alpha_fixed: Optional[float] = None
    per_layer_alpha: bool = False
    taps: Optional[tuple] = None
    target: str = "both"
    lambda_fsmr: float = 10.0
    reference_rule: str = "pairs"

    def __post_init__(self):
        if self.lambda_fsmr < 0:
            raise ConfigError(f"lambda_fsmr must be >= 0, got {self.lambda_fsmr}")
        if self.target not in TARGETS:
            raise ConfigError(f"target must be one of {TARGETS}, got {self.target!r}")
        if self.reference_rule not in REFERENCE_RULES:
            raise ConfigError(f"reference_rule must be one of {REFERENCE_RULES}")
        if self.alpha_fixed is not None and not 0.0 <= self.alpha_fixed <= 1.0:
            raise ConfigError(f"alpha_fixed must lie in [0, 1], got {self.alpha_fixed}")
        if self.taps is not None:
            self.taps = tuple(int(t) for t in self.taps)


def _check_feature_map(x: torch.Tensor) -> None:
    if x.dim() not in (3, 4):
        raise ShapeError(f"expected [C,H,W] or [B,C,H,W], got shape {tuple(x.shape)}")
    if x.shape[-1] == 0 or x.shape[-2] == 0 or x.shape[-3] == 0:
        raise ShapeError(f"zero-sized feature map {tuple(x.shape)}")
    if not torch.isfinite(x).all():
        raise InvalidInputError("feature map contains non-finite values")


def _moments(x: torch.Tensor, epsilon: float):
    mu = x.mean(dim=(-2, -1), keepdim=True)
    var = (x - mu).pow(2).mean(dim=(-2, -1), keepdim=True)
    return mu, torch.sqrt(var + epsilon * epsilon)


def channel_stats(x: torch.Tensor, epsilon: float = EPSILON) -> ChannelStats:
    """Per-channel spatial mean and standard deviation of ``x``.

    The variance is the population variance over ``H * W`` entries and
    ``epsilon**2`` is added before the square root, so a constant channel
    has ``sigma == epsilon``. Output shapes are ``[C]`` or ``[B, C]``.
    """
    if epsilon <= 0:
        raise InvalidInputError("epsilon must be positive")
    _check_feature_map(x)
    mu, sigma = _moments(x, epsilon)
    return ChannelStats(mu[..., 0, 0], sigma[..., 0, 0])


def adain_with_stats(x: torch.Tensor, mu: torch.Tensor, sigma: torch.Tensor,
                     epsilon: float = EPSILON) -> torch.Tensor:
    """Renormalize ``x`` to per-channel statistics ``mu``/``sigma`` (shape ``[..., C]``)."""
    x_mu, x_sigma = _moments(x, epsilon)
    return sigma[..., None, None] * (x - x_mu) / x_sigma + mu[..., None, None]


def adain(x: torch.Tensor, y: torch.Tensor, epsilon: float = EPSILON) -> torch.Tensor:
    """Adaptive instance normalization of ``x`` towards the statistics of ``y``.

    Spatial sizes of ``x`` and ``y`` may differ; only the channel counts (and
    batch sizes, when batched) have to agree.
    """
    if x.dim() != y.dim() or x.shape[:-2] != y.shape[:-2]:
        raise ShapeError(
            f"adain needs matching leading dims, got {tuple(x.shape)} and {tuple(y.shape)}")
    _check_feature_map(x)
    _check_feature_map(y)
    return _adain(x, y, epsilon)


def _adain(x, y, epsilon):
    y_mu, y_sigma = _moments(y, epsilon)
    x_mu, x_sigma = _moments(x, epsilon)
    return y_sigma * (x - x_mu) / x_sigma + y_mu


def _check_alpha(alpha: Alpha) -> None:
    if isinstance(alpha, torch.Tensor):
        if alpha.numel() and (alpha.min() < 0 or alpha.max() > 1):
            raise InvalidInputError("alpha must lie in [0, 1]")
    elif not 0.0 <= float(alpha) <= 1.0:
        raise InvalidInputError(f"alpha must lie in [0, 1], got {alpha}")


def _broadcast_alpha(alpha: Alpha, x: torch.Tensor) -> Alpha:
    if isinstance(alpha, torch.Tensor) and alpha.dim() == 1 and x.dim() == 4:
        return alpha.to(x.dtype).view(-1, 1, 1, 1)
    return alpha


def fsm(x: torch.Tensor, y: torch.Tensor, alpha: Alpha, epsilon: float = EPSILON) -> torch.Tensor:
    """Feature statistics mixing: ``alpha * x + (1 - alpha) * adain(x, y)``.

    ``alpha`` is a float or a per-sample tensor of shape ``[B]``.
    """
    _check_alpha(alpha)
    a = _broadcast_alpha(alpha, x)
    return a * x + (1 - a) * adain(x, y, epsilon)


def fsm_with_stats(x, mu, sigma, alpha: Alpha, epsilon: float = EPSILON):
    _check_alpha(alpha)
    a = _broadcast_alpha(alpha, x)
    return a * x + (1 - a) * adain_with_stats(x, mu, sigma, epsilon)


def sample_alpha(rng: torch.Generator, policy: Optional[MixPolicy] = None, size: int = 1,
                 dtype=torch.float32) -> torch.Tensor:
    """Draw mixing coefficients, one per sample.

    Uniform(0, 1) unless the policy fixes a constant.
    """
    if policy is not None and policy.alpha_fixed is not None:
        return torch.full((size,), float(policy.alpha_fixed), dtype=dtype)
    return torch.rand(size, generator=rng, dtype=dtype)


def resolve_taps(n_layers: int, taps: Optional[Sequence[int]]) -> tuple:
    """Validate tap indices; ``None`` selects every boundary ``1..n-1``."""
    if taps is None:
        return tuple(range(1, n_layers))
    taps = tuple(sorted(set(int(t) for t in taps)))
    for t in taps:
        if not 1 <= t <= n_layers - 1:
            raise ConfigError(f"tap {t} outside valid range 1..{n_layers - 1}")
    return taps


def _alpha_per_tap(alpha, taps):
    if isinstance(alpha, (list, tuple)):
        if len(alpha) != len(taps):
            raise ConfigError(f"got {len(alpha)} alphas for {len(taps)} taps")
        alphas = dict(zip(taps, alpha))
    else:
        alphas = {t: alpha for t in taps}
    for a in alphas.values():
        _check_alpha(a)
    return alphas


def _mix_affine(x, x_mu, x_sigma, t_mu, t_sigma, a):
    # a*x + (1-a)*(t_sigma*(x-x_mu)/x_sigma + t_mu) folded into one scale and shift
    scale = t_sigma / x_sigma
    return x * (a + (1 - a) * scale) + (1 - a) * (t_mu - x_mu * scale)


def mixed_forward(disc, c: torch.Tensor, s: torch.Tensor, alpha, taps=None,
                  stats_fn: Optional[StatsFn] = None, first_features=None) -> torch.Tensor:
    """Discriminator logit of ``c`` with feature statistics mixed towards ``s``.

    Both branches of the cross-mixing recurrence are propagated: at every
    tapped boundary ``i`` the content branch becomes ``FSM(x_i, y_i)`` and the
    reference branch ``FSM(y_i, x_i)``. Only the content branch reaches the
    linear head.

    ``alpha`` is a float, a per-sample tensor, or a sequence with one entry
    per tap. ``stats_fn`` overrides the statistics the content branch is
    mixed towards. ``first_features`` may carry precomputed first-layer
    outputs ``(x_1, y_1)`` to skip recomputing them.
    """
    if c.shape != s.shape:
        raise ShapeError(f"content {tuple(c.shape)} and reference {tuple(s.shape)} differ")
    if first_features is None and hasattr(disc, "check_input"):
        disc.check_input(c)
    layers = disc.layers
    alphas = _alpha_per_tap(alpha, resolve_taps(len(layers), taps))

    if first_features is None:
        x, y = layers[0](c), layers[0](s)
    else:
        x, y = first_features
    eps = disc.epsilon
    last = len(layers) - 1
    for i in range(1, len(layers)):
        if i in alphas:
            a = _broadcast_alpha(alphas[i], x)
            x_mu, x_sigma = _moments(x, eps)
            y_mu, y_sigma = _moments(y, eps)
            if stats_fn is None:
                t_mu, t_sigma = y_mu, y_sigma
            else:
                mu, sigma = stats_fn(i, x, y)
                t_mu, t_sigma = mu[..., None, None], sigma[..., None, None]
            x_in = _mix_affine(x, x_mu, x_sigma, t_mu, t_sigma, a)
            if i < last:
                y_in = _mix_affine(y, y_mu, y_sigma, x_mu, x_sigma, a)
        else:
            x_in, y_in = x, y
        # the reference branch past the last layer never reaches the logit
        x = layers[i](x_in)
        if i < last:
            y = layers[i](y_in)
    return disc.head(x).squeeze(1)


def random_pairing(batch_size: int, rng: torch.Generator) -> torch.Tensor:
    """Partner index of a uniformly random pairing; with odd batch sizes one
    sample is paired with itself. ``partner[partner[b]] == b``."""
    perm = torch.randperm(batch_size, generator=rng)
    partner = torch.arange(batch_size)
    n = batch_size - batch_size % 2
    partner[perm[0:n:2]] = perm[1:n:2]
    partner[perm[1:n:2]] = perm[0:n:2]
    return partner


def tie_alpha(alpha: torch.Tensor, partner: torch.Tensor) -> torch.Tensor:
    """Give both members of every pair the alpha of the lower index."""
    idx = torch.arange(len(partner))
    return alpha[torch.minimum(idx, partner)]


def paired_mixed_forward(disc, c: torch.Tensor, partner: torch.Tensor, alpha, taps=None,
                         stats_fn: Optional[StatsFn] = None, first_features=None):
    """:func:`mixed_forward` with references ``c[partner]`` for an involutive
    ``partner`` and pair-tied ``alpha``.

    Under those conditions the reference branch at every layer equals the
    content branch re-indexed by ``partner``, so one branch suffices and the
    result matches ``mixed_forward(disc, c, c[partner], alpha)``.
    """
    if first_features is None:
        disc.check_input(c)
    layers = disc.layers
    alphas = _alpha_per_tap(alpha, resolve_taps(len(layers), taps))
    x = layers[0](c) if first_features is None else first_features
    eps = disc.epsilon
    for i in range(1, len(layers)):
        if i in alphas:
            a = _broadcast_alpha(alphas[i], x)
            x_mu, x_sigma = _moments(x, eps)
            if stats_fn is None:
                t_mu, t_sigma = x_mu[partner], x_sigma[partner]
            else:
                mu, sigma = stats_fn(i, x, x[partner])
                t_mu, t_sigma = mu[..., None, None], sigma[..., None, None]
            x = _mix_affine(x, x_mu, x_sigma, t_mu, t_sigma, a)
        x = layers[i](x)
    return disc.head(x).squeeze(1)
