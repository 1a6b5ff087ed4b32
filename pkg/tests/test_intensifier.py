import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from scipy import stats

from hybridcam.intensifier import (
    DetectCounters,
    IntensifierParams,
    OpticsMap,
    apply_crosstalk,
    detect,
    map_momentum_to_pixel,
    map_pixel_to_momentum,
)
from hybridcam.source import (
    PhotonEvent,
    SourceParams,
    TransverseMomentum,
    sample_pair_momenta,
)


def photon(kx=0.0, ky=0.0, t=0.0):
    return PhotonEvent(t=t, k=TransverseMomentum(kx, ky), origin="noise")


def test_unit_qe_detects_everything():
    p = IntensifierParams(qe=1.0)
    optics = OpticsMap()
    rng = np.random.default_rng(0)
    for _ in range(500):
        assert detect(photon(), p, optics, rng) is not None


def test_qe_thinning_fraction():
    p = IntensifierParams(qe=0.2)
    optics = OpticsMap()
    rng = np.random.default_rng(1)
    hits = sum(
        detect(photon(), p, optics, rng) is not None for _ in range(100_000)
    )
    assert hits / 100_000 == pytest.approx(0.200, abs=0.004)


def test_origin_maps_to_center_channel():
    p = IntensifierParams(qe=1.0)
    optics = OpticsMap(k_to_pixel_scale=3.0, center_x=1500.0, center_y=1500.0)
    flash = detect(photon(0.0, 0.0), p, optics, np.random.default_rng(2))
    assert (flash.x, flash.y) == (1500, 1500)
    assert (flash.true_x, flash.true_y) == (1500.0, 1500.0)


def test_map_linearity():
    optics = OpticsMap(k_to_pixel_scale=2.5, center_x=100.0, center_y=80.0)
    px, py = map_momentum_to_pixel(TransverseMomentum(1.0, 0.0), optics)
    assert (px, py) == (102.5, 80.0)


@given(
    kx=st.floats(-400, 400),
    ky=st.floats(-400, 400),
    scale=st.floats(0.1, 10.0),
)
def test_map_round_trip(kx, ky, scale):
    optics = OpticsMap(k_to_pixel_scale=scale, center_x=321.0, center_y=123.0)
    px, py = map_momentum_to_pixel(TransverseMomentum(kx, ky), optics)
    k = map_pixel_to_momentum(px, py, optics)
    assert k.kx == pytest.approx(kx, rel=1e-9, abs=1e-9)
    assert k.ky == pytest.approx(ky, rel=1e-9, abs=1e-9)


def test_quantization_within_half_channel():
    p = IntensifierParams(qe=1.0)
    optics = OpticsMap()
    rng = np.random.default_rng(3)
    src = SourceParams()
    for _ in range(2000):
        k1, _ = sample_pair_momenta(src, rng)
        flash = detect(photon(k1.kx, k1.ky), p, optics, rng)
        assert abs(flash.x - flash.true_x) <= 0.5
        assert abs(flash.y - flash.true_y) <= 0.5


def test_off_grid_rejected_with_counter():
    p = IntensifierParams(qe=1.0, channels_x=100, channels_y=100)
    optics = OpticsMap(k_to_pixel_scale=1.0, center_x=50.0, center_y=50.0)
    counters = DetectCounters()
    out = detect(photon(200.0, 0.0), p, optics,
                 np.random.default_rng(4), counters)
    assert out is None
    assert counters.off_grid == 1


def test_thinning_preserves_momentum_distribution():
    # detected-photon kx distribution must match the source distribution
    p = IntensifierParams(qe=0.3)
    optics = OpticsMap()
    rng = np.random.default_rng(5)
    src = SourceParams()
    all_kx, detected_kx = [], []
    while len(detected_kx) < 10_000:
        k1, _ = sample_pair_momenta(src, rng)
        all_kx.append(k1.kx)
        if detect(photon(k1.kx, k1.ky), p, optics, rng) is not None:
            detected_kx.append(k1.kx)
    res = stats.ks_2samp(np.asarray(all_kx), np.asarray(detected_kx))
    assert res.pvalue > 0.01


def test_brightness_gamma_moments():
    p = IntensifierParams(qe=1.0, brightness_shape=1.3, brightness_scale=100.0)
    optics = OpticsMap()
    rng = np.random.default_rng(6)
    b = np.array([
        detect(photon(), p, optics, rng).brightness for _ in range(100_000)
    ])
    assert (b > 0).all()
    mean = p.brightness_shape * p.brightness_scale
    var = p.brightness_shape * p.brightness_scale**2
    se_mean = math.sqrt(var / b.size)
    assert abs(b.mean() - mean) < 3 * se_mean
    # variance of the sample variance for Gamma, via the fourth moment
    kurt_excess = 6.0 / p.brightness_shape
    se_var = var * math.sqrt((kurt_excess + 2.0) / b.size)
    assert abs(b.var() - var) < 3 * se_var


def test_crosstalk_disabled_returns_input():
    p = IntensifierParams(qe=1.0, crosstalk_prob=0.0)
    optics = OpticsMap()
    rng = np.random.default_rng(7)
    flash = detect(photon(), p, optics, rng)
    assert apply_crosstalk(flash, p, rng) == [flash]


def test_crosstalk_radius_bound():
    p = IntensifierParams(qe=1.0, crosstalk_prob=1.0, crosstalk_radius=50.0)
    optics = OpticsMap()
    rng = np.random.default_rng(8)
    for _ in range(10_000):
        flash = detect(photon(), p, optics, rng)
        out = apply_crosstalk(flash, p, rng)
        assert len(out) == 2
        primary, secondary = out
        assert primary is flash
        assert secondary.is_crosstalk
        d = math.hypot(secondary.x - primary.x, secondary.y - primary.y)
        # quantization can push the channel distance just past the radius
        assert d <= p.crosstalk_radius + math.sqrt(0.5)
        assert secondary.t == primary.t
        assert secondary.brightness > 0


def test_crosstalk_fraction():
    p = IntensifierParams(qe=1.0, crosstalk_prob=0.05)
    optics = OpticsMap()
    rng = np.random.default_rng(9)
    n = 100_000
    secondaries = 0
    for _ in range(n):
        flash = detect(photon(), p, optics, rng)
        secondaries += len(apply_crosstalk(flash, p, rng)) - 1
    assert secondaries / n == pytest.approx(0.05, abs=0.005)


def test_crosstalk_never_cascades():
    p = IntensifierParams(qe=1.0, crosstalk_prob=1.0)
    optics = OpticsMap()
    rng = np.random.default_rng(10)
    flash = detect(photon(), p, optics, rng)
    secondary = apply_crosstalk(flash, p, rng)[1]
    with pytest.raises(ValueError):
        apply_crosstalk(secondary, p, rng)


def test_crosstalk_off_grid_secondary_dropped():
    p = IntensifierParams(
        qe=1.0, channels_x=40, channels_y=40,
        crosstalk_prob=1.0, crosstalk_radius=500.0,
    )
    optics = OpticsMap(k_to_pixel_scale=1.0, center_x=20.0, center_y=20.0)
    rng = np.random.default_rng(11)
    counters = DetectCounters()
    dropped = 0
    for _ in range(200):
        flash = detect(photon(), p, optics, rng, counters)
        out = apply_crosstalk(flash, p, rng, counters)
        dropped += len(out) == 1
    assert dropped == counters.crosstalk_dropped
    assert dropped > 0
