"""
Mixing statistics inside a discriminator
========================================

FSMR runs a second forward pass in which each intermediate feature map has
its channel statistics mixed towards those of another image in the batch,
then penalizes the change in the logit. This script shows the pieces.
"""

import torch

from fsmr.core import MixPolicy, mixed_forward, paired_mixed_forward, random_pairing, tie_alpha
from fsmr.data import normalize, style_pack, synthetic_dataset
from fsmr.networks import Discriminator
from fsmr.regularizers import fsmr_loss

disc = Discriminator(32, 3, seed=0)
contents = normalize(synthetic_dataset("colored-shapes", 8, seed=0).images)
styles = normalize(style_pack(8, seed=1).images)

# %%
# Mixing an image with itself is a no-op, whatever alpha is.
with torch.no_grad():
    print("identity gap:", (mixed_forward(disc, contents, contents, 0.3) - disc(contents))
          .abs().max().item())

# %%
# Against a style image the logit drifts further as alpha goes from 1 to 0.
with torch.no_grad():
    plain = disc(contents)
    for a in (1.0, 0.5, 0.0):
        gap = (mixed_forward(disc, contents, styles, a) - plain).pow(2).mean().item()
        print(f"alpha={a:.1f}  mean squared logit change {gap:.5f}")

# %%
# Only some layer boundaries can be tapped. Here only the first one is.
with torch.no_grad():
    first_only = mixed_forward(disc, contents, styles, 0.0, taps=(1,))
    print("tap 1 only:", (first_only - plain).pow(2).mean().item())

# %%
# In training the references come from the batch itself. Pairing images
# and sharing alpha inside each pair lets a single branch carry both sides
# of the exchange, and the result matches the two-branch pass exactly.
rng = torch.Generator().manual_seed(0)
partner = random_pairing(len(contents), rng)
alpha = tie_alpha(torch.rand(len(contents), generator=rng), partner)
with torch.no_grad():
    one = paired_mixed_forward(disc, contents, partner, alpha)
    two = mixed_forward(disc, contents, contents[partner], alpha)
print("partner:", partner.tolist(), " max difference:", (one - two).abs().max().item())

# %%
# The regularizer itself is a scalar with gradients for the discriminator.
loss = fsmr_loss(disc, contents, policy=MixPolicy(), rng=torch.Generator().manual_seed(2))
loss.backward()
print("fsmr loss:", loss.item(), " grad norm of first conv:",
      disc.layers[0][0].weight.grad.norm().item())
