"""Brightness-correlation time tagging.

Both detectors see the same flash brightness through independent gain
scatter, so sorting a frame's camera spots and PMT pulses by amplitude and
pairing them rank-by-rank assigns a timestamp to every spot.  Tuples whose
amplitudes are nearly degenerate in either detector can be rejected to
trade acquisition time for accuracy.  Multi-photon frames are synthesized
by drawing tuples of measured single-photon frames, which gives exact
ground truth for the accuracy sweep.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Iterable, Optional, Sequence

import numpy as np

from .gating import FrameRecord


class TimetagError(RuntimeError):
    pass


@dataclass
class TimetagParams:
    n_values: tuple[int, ...] = (2, 3, 4, 5, 6)
    thresholds: tuple[float, ...] = tuple(np.linspace(0.0, 0.6, 25))
    m_tuples: int = 20000

    def validate(self, path: str = "timetag") -> None:
        from .config import ConfigError

        if any(n < 2 for n in self.n_values):
            raise ConfigError(f"{path}.n_values: every n must be >= 2")
        if any(t < 0 for t in self.thresholds):
            raise ConfigError(f"{path}.thresholds: must be >= 0")
        if self.m_tuples < 1:
            raise ConfigError(f"{path}.m_tuples: must be >= 1")


@dataclass(slots=True)
class BrightnessPair:
    b_pmt: float
    b_cmos: float
    true_time: float
    frame_id: int


STATUS_ACCEPTED = "accepted"
REASON_TOO_CLOSE = "too_close"
REASON_COUNT_MISMATCH = "count_mismatch"


@dataclass
class TagAssignment:
    status: str                          # accepted | rejected
    reason: Optional[str] = None
    # spot index -> pulse index, only for accepted assignments
    mapping: Optional[tuple[int, ...]] = None
    correct: Optional[bool] = None


@dataclass
class AccuracyCurve:
    n: int
    points: list[tuple[float, float]]    # (rejected_fraction, accuracy)
    thresholds: list[float]
    accepted: list[int]
    correct: list[int]
    total: int


@dataclass
class CollectStats:
    frames_seen: int = 0
    skipped_spots: int = 0
    skipped_pulses: int = 0


def collect_single_photon_pairs(
    frames: Iterable[FrameRecord],
    discriminator_threshold: float,
    stats: Optional[CollectStats] = None,
) -> list[BrightnessPair]:
    """Brightness pairs from frames with one spot and one usable pulse."""
    out: list[BrightnessPair] = []
    for frame in frames:
        if stats is not None:
            stats.frames_seen += 1
        if len(frame.spots) != 1:
            if stats is not None:
                stats.skipped_spots += 1
            continue
        pulses = [p for p in frame.pulses
                  if p.amplitude >= discriminator_threshold]
        if len(pulses) != 1:
            if stats is not None:
                stats.skipped_pulses += 1
            continue
        out.append(
            BrightnessPair(
                b_pmt=pulses[0].amplitude,
                b_cmos=frame.spots[0].amplitude,
                true_time=pulses[0].t,
                frame_id=frame.frame_id,
            )
        )
    return out


def synthesize_tuples(
    pairs: Sequence[BrightnessPair],
    n: int,
    m_tuples: int,
    rng: np.random.Generator,
) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Draw m n-element tuples (without replacement within each tuple).

    Returns (pmt_amps, cmos_amps, ranks), each of shape (m, n).  ranks is
    a uniformly random permutation per tuple giving the synthetic arrival
    order of the tuple members.
    """
    if n < 2:
        raise TimetagError("tuples need n >= 2")
    if len(pairs) < n:
        raise TimetagError(
            f"need at least {n} single-photon pairs, have {len(pairs)}"
        )
    pool = len(pairs)
    idx = rng.integers(0, pool, size=(m_tuples, n))
    # redraw rows with an internal collision (without-replacement draw)
    while True:
        sorted_idx = np.sort(idx, axis=1)
        bad = (np.diff(sorted_idx, axis=1) == 0).any(axis=1)
        if not bad.any():
            break
        idx[bad] = rng.integers(0, pool, size=(int(bad.sum()), n))
    b_pmt = np.asarray([p.b_pmt for p in pairs])
    b_cmos = np.asarray([p.b_cmos for p in pairs])
    ranks = np.argsort(rng.random(size=(m_tuples, n)), axis=1)
    return b_pmt[idx], b_cmos[idx], ranks


def _too_close(amps: np.ndarray, threshold: float) -> np.ndarray:
    """Rows where any two amplitudes differ by less than the relative bound."""
    s = np.sort(amps, axis=1)
    rel = np.abs(np.diff(s, axis=1)) / (0.5 * (s[:, 1:] + s[:, :-1]))
    return (rel < threshold).any(axis=1)


def match_by_brightness(
    pmt_amps: Sequence[float],
    cmos_amps: Sequence[float],
    closeness_threshold: float,
) -> TagAssignment:
    """Rank-match one tuple's spots to its pulses by brightness.

    Rejects when the two lists have different lengths or when any two
    amplitudes within either list are closer (relative to their mean)
    than closeness_threshold.
    """
    p = np.asarray(pmt_amps, dtype=np.float64)
    c = np.asarray(cmos_amps, dtype=np.float64)
    if p.shape != c.shape:
        return TagAssignment("rejected", REASON_COUNT_MISMATCH)
    if closeness_threshold > 0 and (
        _too_close(p[None, :], closeness_threshold)[0]
        or _too_close(c[None, :], closeness_threshold)[0]
    ):
        return TagAssignment("rejected", REASON_TOO_CLOSE)
    pulse_rank = np.argsort(np.argsort(p))
    spot_order = np.argsort(np.argsort(c))
    # spot i inherits the pulse holding the same brightness rank
    pulse_by_rank = np.argsort(p)
    mapping = tuple(int(pulse_by_rank[r]) for r in spot_order)
    correct = all(m == i for i, m in enumerate(mapping))
    return TagAssignment("accepted", mapping=mapping, correct=correct)


def _evaluate(
    pmt: np.ndarray, cmos: np.ndarray, threshold: float
) -> tuple[int, int, int]:
    """(rejected, accepted, correct) tuple counts for one threshold."""
    m = pmt.shape[0]
    if threshold > 0:
        rejected = _too_close(pmt, threshold) | _too_close(cmos, threshold)
    else:
        rejected = np.zeros(m, dtype=bool)
    keep = ~rejected
    order_p = np.argsort(np.argsort(pmt[keep], axis=1), axis=1)
    order_c = np.argsort(np.argsort(cmos[keep], axis=1), axis=1)
    correct = (order_p == order_c).all(axis=1)
    return int(rejected.sum()), int(keep.sum()), int(correct.sum())


def accuracy_sweep(
    pairs: Sequence[BrightnessPair],
    params: TimetagParams,
    rng: np.random.Generator,
) -> list[AccuracyCurve]:
    """Frame-level accuracy versus rejected fraction for each n.

    Accuracy is the fraction of accepted tuples whose full assignment is
    correct.  Thresholds rejecting every tuple are omitted with a warning
    counter in the curve (fewer points than thresholds).
    """
    curves: list[AccuracyCurve] = []
    for n in params.n_values:
        pmt, cmos, _ = synthesize_tuples(pairs, n, params.m_tuples, rng)
        points: list[tuple[float, float]] = []
        ths: list[float] = []
        acc_list: list[int] = []
        cor_list: list[int] = []
        for th in params.thresholds:
            rejected, accepted, correct = _evaluate(pmt, cmos, th)
            if accepted == 0:
                continue
            points.append((rejected / params.m_tuples, correct / accepted))
            ths.append(float(th))
            acc_list.append(accepted)
            cor_list.append(correct)
        order = np.argsort([p[0] for p in points], kind="stable")
        curves.append(
            AccuracyCurve(
                n=n,
                points=[points[i] for i in order],
                thresholds=[ths[i] for i in order],
                accepted=[acc_list[i] for i in order],
                correct=[cor_list[i] for i in order],
                total=params.m_tuples,
            )
        )
    return curves


def per_photon_accuracy(
    pmt: np.ndarray, cmos: np.ndarray, threshold: float
) -> float:
    """Fraction of individual photons tagged correctly (accepted tuples)."""
    if threshold > 0:
        keep = ~(_too_close(pmt, threshold) | _too_close(cmos, threshold))
    else:
        keep = np.ones(pmt.shape[0], dtype=bool)
    if not keep.any():
        return math.nan
    order_p = np.argsort(np.argsort(pmt[keep], axis=1), axis=1)
    order_c = np.argsort(np.argsort(cmos[keep], axis=1), axis=1)
    return float((order_p == order_c).mean())


def brightness_map(
    pairs: Sequence[BrightnessPair], bins: int = 64
) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Log-binned 2D histogram of (camera, PMT) brightness for plotting."""
    if not pairs:
        raise TimetagError("no brightness pairs to map")
    b_c = np.asarray([p.b_cmos for p in pairs])
    b_p = np.asarray([p.b_pmt for p in pairs])
    ce = np.geomspace(b_c.min(), b_c.max() * (1 + 1e-12), bins + 1)
    pe = np.geomspace(b_p.min(), b_p.max() * (1 + 1e-12), bins + 1)
    counts, _, _ = np.histogram2d(b_c, b_p, bins=(ce, pe))
    return counts, ce, pe
