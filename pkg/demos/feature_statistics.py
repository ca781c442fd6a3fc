"""
Channel statistics, AdaIN and feature statistics mixing
=======================================================

Every operation in ``fsmr`` starts from per-channel spatial moments. This
walk-through builds two small feature maps, looks at their moments, and
shows how AdaIN and its interpolated form move one map's moments onto the
other's.
"""

import torch

from fsmr import core

torch.manual_seed(0)

# %%
# Two feature maps with very different channel moments: ``x`` is centred
# and narrow, ``y`` is shifted and wide.
x = torch.randn(1, 3, 8, 8) * 0.5
y = torch.randn(1, 3, 8, 8) * torch.tensor([2.0, 0.2, 4.0]).view(1, 3, 1, 1) + 3.0

sx, sy = core.channel_stats(x), core.channel_stats(y)
print("x  mu:", sx.mu.numpy().round(3), " sigma:", sx.sigma.numpy().round(3))
print("y  mu:", sy.mu.numpy().round(3), " sigma:", sy.sigma.numpy().round(3))

# %%
# AdaIN keeps the normalized layout of ``x`` and borrows the moments of ``y``.
out = core.adain(x, y)
so = core.channel_stats(out)
print("adain(x, y) mu:", so.mu.numpy().round(3), " sigma:", so.sigma.numpy().round(3))

# the normalized content is untouched
norm = lambda t: (t - t.mean((-2, -1), keepdim=True)) / t.std((-2, -1), keepdim=True)  # noqa
print("layout preserved:", torch.allclose(norm(out), norm(x), atol=1e-4))

# %%
# The mixing operator interpolates between the original map (alpha = 1) and
# the fully restyled one (alpha = 0). Moments move smoothly in between.
for a in (1.0, 0.75, 0.5, 0.25, 0.0):
    m = core.channel_stats(core.fsm(x, y, a))
    print(f"alpha={a:.2f}  mu={m.mu.numpy().round(2)}  sigma={m.sigma.numpy().round(2)}")

# %%
# During training alpha is drawn per sample from U(0, 1). A policy object
# collects that choice together with the taps and the loss weight.
policy = core.MixPolicy()
rng = torch.Generator().manual_seed(1)
print("alpha draws:", core.sample_alpha(rng, policy, 6).numpy().round(3))
print("fixed alpha:", core.sample_alpha(rng, core.MixPolicy(alpha_fixed=0.3), 3).numpy())
