import numpy as np
import pytest

from denoisefuse.backbone import make_toy_backbone
from denoisefuse.denoiser import DenoiseLayer, layer_timesteps
from denoisefuse.numerics import Rng
from denoisefuse.schedule import build_schedule

EQUIV_DIMS = [16, 32, 32, 32, 32]


@pytest.fixture
def default_schedule():
    return build_schedule(1000, 1e-4, 0.02)


@pytest.fixture
def strong_schedule():
    # beta large enough that the 1/sqrt(a_t) gain and c1 are far from trivial
    return build_schedule(16, 0.05, 0.3)


def random_denoisers(bb, seed, scale=0.3, steps_per_layer=1):
    rngs = Rng(seed).split(bb.N)
    ts = layer_timesteps(bb.N, steps_per_layer)
    return [DenoiseLayer(r.standard_normal((blk.d_in, blk.d_in)) * scale / np.sqrt(blk.d_in), k, t)
            for k, (r, blk, t) in enumerate(zip(rngs, bb.blocks, ts))]


@pytest.fixture
def linear_backbone():
    return make_toy_backbone(7, EQUIV_DIMS, "none")
