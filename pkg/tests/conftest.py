import os
import sys

import numpy as np
import pytest
import torch

sys.path.insert(0, os.path.dirname(__file__))
torch.set_num_threads(1)

from fsmr.networks import Discriminator  # noqa: E402

PINNED_SEED = 20240607


def pinned_numpy_net():
    """Three conv layers (2 -> 3 -> 4 -> 5 channels) on 8x8 inputs, plus a
    content/reference pair; drawn from a fixed numpy stream."""
    rng = np.random.default_rng(PINNED_SEED)
    shapes = [(3, 2), (4, 3), (5, 4)]
    convs = [(rng.normal(0, 0.35, (oc, ic, 4, 4)), rng.normal(0, 0.1, oc)) for oc, ic in shapes]
    head = (rng.normal(0, 0.5, (5,)), float(rng.normal(0, 0.1)))
    c = rng.normal(0, 1, (2, 8, 8))
    s = rng.normal(0.5, 2, (2, 8, 8))
    return convs, head, c, s


def torch_from_numpy_net(convs, head):
    disc = Discriminator(resolution=8, in_channels=2, widths=(3, 4, 5)).double()
    with torch.no_grad():
        for layer, (w, b) in zip(disc.layers, convs):
            layer[0].weight.copy_(torch.from_numpy(w))
            layer[0].bias.copy_(torch.from_numpy(b))
        disc.head[1].weight.copy_(torch.from_numpy(head[0]).view(1, -1))
        disc.head[1].bias.fill_(head[1])
    return disc


@pytest.fixture
def pinned():
    convs, head, c, s = pinned_numpy_net()
    disc = torch_from_numpy_net(convs, head)
    return disc, convs, head, torch.from_numpy(c)[None], torch.from_numpy(s)[None]


@pytest.fixture
def small_disc():
    return Discriminator(resolution=16, in_channels=3, widths=(8, 16, 16), seed=3)


@pytest.fixture
def double_disc():
    return Discriminator(resolution=8, in_channels=2, widths=(3, 4, 4), seed=11).double()
