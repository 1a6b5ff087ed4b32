import math

import numpy as np
import pytest
from scipy import stats

from hybridcam.config import ConfigError
from hybridcam.source import (
    SourceParams,
    sample_event_stream,
    sample_pair,
    sample_pair_momenta,
)


def make_params(**kw) -> SourceParams:
    p = SourceParams(**kw)
    p.validate()
    return p


def test_perfect_anticorrelation_limit():
    p = make_params(sum_sigma_x=1e-12, sum_sigma_y=1e-12, pair_time_jitter=0.0)
    rng = np.random.default_rng(0)
    for i in range(100):
        s, idl = sample_pair(p, rng, pair_id=i)
        assert s.k.kx + idl.k.kx == pytest.approx(0.0, abs=1e-9)
        assert s.k.ky + idl.k.ky == pytest.approx(0.0, abs=1e-9)
        assert s.t == idl.t
        assert s.pair_id == idl.pair_id == i


def test_sum_width_matches_configuration():
    # published sum widths: sample std of kx1 + kx2 within 0.3 of 24.43
    p = make_params(sum_sigma_x=24.43, sum_sigma_y=22.67)
    rng = np.random.default_rng(1)
    sums_x = np.empty(100_000)
    sums_y = np.empty(100_000)
    for i in range(100_000):
        k1, k2 = sample_pair_momenta(p, rng)
        sums_x[i] = k1.kx + k2.kx
        sums_y[i] = k1.ky + k2.ky
    assert sums_x.std() == pytest.approx(24.43, abs=0.3)
    assert sums_y.std() == pytest.approx(22.67, abs=0.3)


def test_pair_difference_lies_on_ring():
    p = make_params()
    rng = np.random.default_rng(2)
    for _ in range(10_000):
        k1, k2 = sample_pair_momenta(p, rng)
        r = 0.5 * math.hypot(k1.kx - k2.kx, k1.ky - k2.ky)
        assert abs(r - p.ring_radius) < 5.0 * p.ring_radial_sigma


def test_event_stream_empty_when_rates_zero():
    p = make_params(pair_rate=0.0, noise_rate=0.0)
    assert sample_event_stream(p, 1e6, np.random.default_rng(0)) == []


def test_event_stream_poisson_mean():
    # 10^6/s pairs in a 10^6 ns window: two photons each, mean 2000
    p = make_params(pair_rate=1e6, noise_rate=0.0)
    rng = np.random.default_rng(3)
    counts = [len(sample_event_stream(p, 1e6, rng)) for _ in range(1000)]
    assert abs(np.mean(counts) - 2000) < 3.0 * math.sqrt(2000)


def test_event_stream_sorted():
    p = make_params(pair_rate=2e6, noise_rate=1e6)
    events = sample_event_stream(p, 1e5, np.random.default_rng(4))
    ts = [e.t for e in events]
    assert ts == sorted(ts)


def test_momentum_conservation():
    p = make_params()
    rng = np.random.default_rng(5)
    n = 20_000
    sx = sy = 0.0
    for _ in range(n):
        k1, k2 = sample_pair_momenta(p, rng)
        sx += k1.kx + k2.kx
        sy += k1.ky + k2.ky
    bound_x = 3.0 * p.sum_sigma_x / math.sqrt(n)
    bound_y = 3.0 * p.sum_sigma_y / math.sqrt(n)
    assert abs(sx / n) < bound_x
    assert abs(sy / n) < bound_y


def test_pair_simultaneity_with_jitter():
    p = make_params(pair_time_jitter=0.4)
    rng = np.random.default_rng(6)
    for i in range(1000):
        s, idl = sample_pair(p, rng, pair_id=i, t=50.0)
        assert abs(s.t - idl.t) <= p.pair_time_jitter


def test_ring_angle_uniformity():
    p = make_params()
    rng = np.random.default_rng(7)
    angles = np.empty(100_000)
    for i in range(angles.size):
        k1, k2 = sample_pair_momenta(p, rng)
        angles[i] = math.atan2(k1.ky - k2.ky, k1.kx - k2.kx)
    binned, _ = np.histogram(angles, bins=36, range=(-math.pi, math.pi))
    res = stats.chisquare(binned)
    assert res.pvalue > 0.01


def test_stream_determinism():
    p = make_params()
    a = sample_event_stream(p, 1e5, np.random.default_rng(42))
    b = sample_event_stream(p, 1e5, np.random.default_rng(42))
    assert len(a) == len(b)
    for ea, eb in zip(a, b):
        assert ea == eb


def test_noise_photons_within_acceptance():
    p = make_params(pair_rate=0.0, noise_rate=5e6)
    events = sample_event_stream(p, 1e5, np.random.default_rng(8))
    assert events
    for e in events:
        assert math.hypot(e.k.kx, e.k.ky) <= p.k_max
        assert e.origin == "noise"


@pytest.mark.parametrize(
    "kw",
    [
        {"ring_radial_sigma": -1.0},
        {"sum_sigma_x": 0.0},
        {"ring_radius": 10.0, "ring_radial_sigma": 5.0},
        {"pair_rate": -1.0},
        {"pair_time_jitter": -0.1},
        {"k_max": 0.0},
    ],
)
def test_invalid_params_rejected(kw):
    with pytest.raises(ConfigError):
        SourceParams(**kw).validate()
