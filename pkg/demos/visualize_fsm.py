"""
Looking at mixed discriminator features
=======================================

A small decoder learns to invert one intermediate layer of a frozen
discriminator. Decoding features whose statistics were mixed towards a
style image then shows what the mixing does in image space. alpha = 1 gives
back the plain reconstruction and alpha = 0 the fully mixed one.
"""

import os
from pathlib import Path

import torch

from fsmr.cli import ALPHA_SWEEP, fsm_grid
from fsmr.data import normalize, save_grid, style_pack, synthetic_dataset
from fsmr.networks import Discriminator
from fsmr.stylizer import decode_plain, train_fsm_decoder

out = Path(os.environ.get("FSMR_OUTPUT_ROOT", "fsmr-runs")) / "demo-visualize"
out.mkdir(parents=True, exist_ok=True)

disc = Discriminator(32, 3, seed=4).eval()
images = normalize(synthetic_dataset("colored-shapes", 512, seed=0).images)
styles = normalize(style_pack(4, seed=1).images)

# %%
# Fit the decoder. The discriminator stays frozen throughout.
decoder = train_fsm_decoder(disc, images, steps=300, seed=0)
print("decoder loss: first", round(decoder.history[0]["loss"], 4),
      " last", round(decoder.history[-1]["loss"], 4))

# %%
# One grid per alpha: rows are contents and columns are styles.
contents = images[-4:]
with torch.no_grad():
    save_grid(decode_plain(decoder, disc, contents).clamp(-1, 1), out / "reconstruction.png",
              nrow=4)
    for a in ALPHA_SWEEP:
        grid = fsm_grid(decoder, disc, contents, styles, a)
        save_grid(grid.clamp(-1, 1), out / f"fsm_alpha{a:.2f}.png", nrow=len(styles))
print("grids written to", out)
