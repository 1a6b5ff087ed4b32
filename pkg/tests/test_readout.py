import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from hybridcam.intensifier import FlashEvent
from hybridcam.readout import (
    PmtPulse,
    ReadoutParams,
    discriminate,
    pmt_pulse_train,
    render_frame,
    trace_waveform,
)


def noiseless_params(**kw) -> ReadoutParams:
    base = dict(
        cmos_noise_sigma=0.0,
        cmos_mult_sigma=0.0,
        pmt_mult_sigma=0.0,
        pmt_noise_sigma=0.0,
        pmt_false_pulse_rate=0.0,
    )
    base.update(kw)
    return ReadoutParams(**base)


def flash(x=50, y=60, brightness=100.0, t=10.0) -> FlashEvent:
    return FlashEvent(x=x, y=y, brightness=brightness, t=t,
                      true_x=float(x), true_y=float(y))


def test_empty_noiseless_frame_is_zero():
    image, truths = render_frame([], noiseless_params(), (64, 64),
                                 np.random.default_rng(0))
    assert not truths
    assert not image.any()


def test_single_flash_peak_position_and_value():
    p = noiseless_params()
    image, truths = render_frame([flash()], p, (128, 128),
                                 np.random.default_rng(0))
    iy, ix = np.unravel_index(np.argmax(image), image.shape)
    assert (ix, iy) == (50, 60)
    expected_peak = (1 - p.pmt_fraction) * p.cmos_gain * 100.0
    assert float(image[iy, ix]) == pytest.approx(expected_peak, rel=1e-5)
    assert truths[0].true_amplitude == pytest.approx(expected_peak)


def test_spot_integral_matches_gaussian_area():
    p = noiseless_params()
    image, truths = render_frame([flash()], p, (128, 128),
                                 np.random.default_rng(0))
    area = float(image.sum())
    expected = 2 * math.pi * p.psf_sigma**2 * truths[0].true_amplitude
    assert area == pytest.approx(expected, rel=0.01)


def test_truth_flash_bijection():
    p = noiseless_params()
    flashes = [flash(x=20 + 15 * i, y=30, brightness=50.0 + i) for i in range(5)]
    _, truths = render_frame(flashes, p, (128, 128), np.random.default_rng(0))
    assert len(truths) == len(flashes)
    assert [t.flash for t in truths] == flashes


def test_empty_pulse_train():
    assert pmt_pulse_train([], noiseless_params(), 150.0,
                           np.random.default_rng(0)) == []


def test_single_pulse_amplitude():
    p = noiseless_params()
    train = pmt_pulse_train([flash(brightness=80.0)], p, 150.0,
                            np.random.default_rng(0))
    assert len(train) == 1
    assert train[0].t == 10.0
    assert train[0].amplitude == pytest.approx(
        p.pmt_fraction * p.pmt_gain * 80.0
    )


def test_false_pulse_poisson_mean():
    p = noiseless_params(pmt_false_pulse_rate=1e4)
    rng = np.random.default_rng(1)
    total = sum(
        len(pmt_pulse_train([], p, 150.0, rng)) for _ in range(1_000_000)
    )
    mean = total / 1_000_000
    assert mean == pytest.approx(1.5e-3, rel=0.10)


def test_brightness_linearity_across_detectors():
    # the same flash drives both detectors proportionally (noiseless)
    p = noiseless_params()
    expected = (p.pmt_fraction * p.pmt_gain) / (
        (1 - p.pmt_fraction) * p.cmos_gain
    )
    rng = np.random.default_rng(2)
    for b in (3.0, 47.0, 210.0, 1234.5):
        f = flash(brightness=b)
        image, truths = render_frame([f], p, (128, 128), rng)
        train = pmt_pulse_train([f], p, 150.0, rng)
        ratio = train[0].amplitude / truths[0].true_amplitude
        assert ratio == pytest.approx(expected, rel=1e-9)


def test_discriminator_threshold_filters_everything():
    p = noiseless_params(discriminator_threshold=10.0)
    train = [PmtPulse(5.0, 1.0), PmtPulse(9.0, 2.0)]
    assert discriminate(train, p) == []


def test_discriminator_merges_close_pulses():
    p = noiseless_params(discriminator_threshold=0.5,
                         pulse_pair_resolution=5.0)
    train = [PmtPulse(10.0, 1.0), PmtPulse(11.0, 1.0)]
    assert discriminate(train, p) == [10.0]


def _discriminate_oracle(train, threshold, resolution):
    """Direct scan: a trigger at t kills later pulses within resolution."""
    triggers = []
    for pulse in train:
        if pulse.amplitude < threshold:
            continue
        if any(0 <= pulse.t - t0 < resolution for t0 in triggers):
            continue
        triggers.append(pulse.t)
    return triggers


def test_discriminator_against_bruteforce():
    p = noiseless_params(discriminator_threshold=0.4,
                         pulse_pair_resolution=4.0)
    rng = np.random.default_rng(3)
    for _ in range(300):
        n = rng.integers(0, 25)
        ts = np.sort(rng.uniform(0, 100, n))
        amps = rng.uniform(0, 1, n)
        train = [PmtPulse(float(t), float(a)) for t, a in zip(ts, amps)]
        assert discriminate(train, p) == _discriminate_oracle(
            train, p.discriminator_threshold, p.pulse_pair_resolution
        )


@settings(deadline=None, max_examples=60)
@given(st.data())
def test_discriminator_monotone_in_threshold(data):
    rng = np.random.default_rng(data.draw(st.integers(0, 10_000)))
    n = data.draw(st.integers(0, 20))
    ts = np.sort(rng.uniform(0, 60, n))
    amps = rng.uniform(0, 1, n)
    train = [PmtPulse(float(t), float(a)) for t, a in zip(ts, amps)]
    counts = []
    for thr in (0.1, 0.3, 0.5, 0.7, 0.9):
        p = noiseless_params(discriminator_threshold=thr,
                             pulse_pair_resolution=5.0)
        counts.append(len(discriminate(train, p)))
    assert counts == sorted(counts, reverse=True)


def test_discriminator_rejects_unsorted():
    p = noiseless_params()
    with pytest.raises(ValueError):
        discriminate([PmtPulse(5.0, 1.0), PmtPulse(1.0, 1.0)], p)


def test_trace_waveform_peaks_at_pulses():
    grid = np.linspace(0, 100, 2001)
    v = trace_waveform([PmtPulse(40.0, 2.0)], grid, pulse_width_ns=3.0)
    assert grid[np.argmax(v)] == pytest.approx(40.0, abs=0.1)
    assert v.max() == pytest.approx(2.0, rel=1e-3)
