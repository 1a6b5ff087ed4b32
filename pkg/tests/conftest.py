import copy

import numpy as np
import pytest

from hybridcam import paper_like
from hybridcam.config import RunConfig


@pytest.fixture()
def paper_cfg() -> RunConfig:
    return paper_like(seed=1)


@pytest.fixture()
def render_cfg() -> RunConfig:
    """Paper-like physics mapped onto a 512x512 channel grid for rendering."""
    cfg = paper_like(seed=1)
    cfg.render = True
    cfg.frame_size = (512, 512)
    cfg.intensifier.channels_x = 512
    cfg.intensifier.channels_y = 512
    cfg.optics.k_to_pixel_scale = 0.5
    cfg.optics.center_x = 256.0
    cfg.optics.center_y = 256.0
    cfg.validate()
    return cfg


@pytest.fixture()
def lossless_cfg() -> RunConfig:
    """No losses, no noise: qe 1, thresholds far below any amplitude.

    The frame period is stretched so that a pair arrives in essentially
    every Fire-All window while a second pair inside the 150 ns latency
    window stays overwhelmingly unlikely.
    """
    cfg = paper_like(seed=1)
    cfg.intensifier.qe = 1.0
    cfg.intensifier.crosstalk_prob = 0.0
    cfg.source.pair_rate = 20.0
    cfg.source.noise_rate = 0.0
    cfg.readout.pmt_false_pulse_rate = 0.0
    cfg.readout.pmt_mult_sigma = 0.0
    cfg.readout.cmos_mult_sigma = 0.0
    cfg.readout.pmt_noise_sigma = 0.0
    cfg.readout.discriminator_threshold = 1e-9
    cfg.extraction.detect_threshold = 1e-9
    cfg.gating.mode = "adaptive"
    cfg.gating.n_target = 1
    cfg.gating.fire_all_duration_ns = 0.9e9
    cfg.gating.frame_period_ns = 1.0e9
    cfg.validate()
    return cfg


def rng(seed: int = 0) -> np.random.Generator:
    return np.random.default_rng(seed)


@pytest.fixture()
def fixed_cfg(paper_cfg) -> RunConfig:
    cfg = copy.deepcopy(paper_cfg)
    cfg.gating.mode = "fixed"
    cfg.gating.gate_ns = 150.0
    return cfg
