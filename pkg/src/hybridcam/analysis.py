"""Momentum-correlation analysis: joint histograms, background subtraction,
peak and ring fits, spatial mode count, and gating statistics.

Coincidences are counted per frame after a cross-talk filter that excludes
photon pairs closer than min_sep_px channels.  The accidental background
is estimated from consecutive-frame pairs with the same filter and
symmetrization, scaled by the ratio of accepted same-frame to accepted
cross-frame pair samples (the scale is recorded; with a correlated source
the ratio slightly over-subtracts, which the constant-offset term of the
peak fit absorbs).
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Iterable, Optional, Sequence

import numpy as np

from .extraction import (
    gaussian_elliptical_residual,
    gaussian_radial_residual,
    levenberg_marquardt,
)
from .gating import FrameRecord
from .intensifier import OpticsMap, map_pixel_to_momentum
from .source import SourceParams, TransverseMomentum

AXIS_XX = "x_vs_x"
AXIS_YY = "y_vs_y"
AXIS_SUM = "sum_plane"
AXIS_INTENSITY = "intensity"


class AnalysisError(RuntimeError):
    pass


@dataclass
class AnalysisParams:
    joint_bins: int = 128
    sum_bins: int = 128
    intensity_bins: int = 256
    crosstalk_min_sep_px: float = 100.0
    drop_close_photons: bool = False    # exclude pairs only by default
    joint_range_factor: float = 1.5     # +- factor * (k_r + 5 * sigma_sum)
    sum_range_sigmas: float = 8.0       # +- sigmas * max(sum_sigma)
    ring_profile_bins: int = 120

    def validate(self, path: str = "analysis") -> None:
        from .config import ConfigError

        if min(self.joint_bins, self.sum_bins, self.intensity_bins) < 8:
            raise ConfigError(f"{path}.*_bins: must be >= 8")
        if self.crosstalk_min_sep_px < 0:
            raise ConfigError(f"{path}.crosstalk_min_sep_px: must be >= 0")
        if self.joint_range_factor <= 0 or self.sum_range_sigmas <= 0:
            raise ConfigError(f"{path}: range factors must be > 0")


@dataclass
class HistogramGeometry:
    bins: int
    lo: float
    hi: float

    def centers(self) -> np.ndarray:
        edges = np.linspace(self.lo, self.hi, self.bins + 1)
        return 0.5 * (edges[:-1] + edges[1:])

    def edges(self) -> np.ndarray:
        return np.linspace(self.lo, self.hi, self.bins + 1)

    @property
    def bin_width(self) -> float:
        return (self.hi - self.lo) / self.bins


def joint_geometry(source: SourceParams, params: AnalysisParams) -> HistogramGeometry:
    span = params.joint_range_factor * (
        source.ring_radius + 5.0 * max(source.sum_sigma_x, source.sum_sigma_y)
    )
    return HistogramGeometry(params.joint_bins, -span, span)


def sum_geometry(source: SourceParams, params: AnalysisParams) -> HistogramGeometry:
    span = params.sum_range_sigmas * max(source.sum_sigma_x, source.sum_sigma_y)
    return HistogramGeometry(params.sum_bins, -span, span)


def intensity_geometry(source: SourceParams, params: AnalysisParams) -> HistogramGeometry:
    span = 1.05 * source.k_max
    return HistogramGeometry(params.intensity_bins, -span, span)


@dataclass
class JointHistogram:
    axis: str
    geometry: HistogramGeometry
    counts: np.ndarray
    overflow: float = 0.0
    accepted_pairs: int = 0
    excluded_pairs: int = 0
    kind: str = "same"                  # same | consecutive | subtracted
    scale: Optional[float] = None       # recorded by subtract()

    def same_geometry(self, other: "JointHistogram") -> bool:
        g, o = self.geometry, other.geometry
        return g.bins == o.bins and g.lo == o.lo and g.hi == o.hi


@dataclass
class CorrelationFit:
    center: TransverseMomentum
    sigma_x: float
    sigma_y: float
    peak_amplitude: float
    fit_residual: float


@dataclass
class RingFit:
    k_radius: float
    radial_width: float
    center: TransverseMomentum
    fit_residual: float = 0.0


@dataclass
class GatingStats:
    counts: np.ndarray                  # index photon count, last is >= max
    n_frames: int
    success_rate: float
    empty_fraction: float
    max_count: int


# ---------------------------------------------------------------------------
# Spot table and pair enumeration


@dataclass
class SpotTable:
    """Flat per-run spot storage with frame boundaries, for fast pairing."""

    offsets: np.ndarray                 # (n_frames + 1,) int64
    x: np.ndarray
    y: np.ndarray
    kx: np.ndarray
    ky: np.ndarray

    @property
    def n_frames(self) -> int:
        return len(self.offsets) - 1

    def frame_counts(self) -> np.ndarray:
        return np.diff(self.offsets)


def build_spot_table(
    frames: Iterable[FrameRecord], optics: OpticsMap
) -> SpotTable:
    offsets = [0]
    xs: list[float] = []
    ys: list[float] = []
    for frame in frames:
        for spot in frame.spots:
            xs.append(spot.x)
            ys.append(spot.y)
        offsets.append(len(xs))
    x = np.asarray(xs, dtype=np.float64)
    y = np.asarray(ys, dtype=np.float64)
    kx = (x - optics.center_x) / optics.k_to_pixel_scale
    ky = (y - optics.center_y) / optics.k_to_pixel_scale
    return SpotTable(np.asarray(offsets, dtype=np.int64), x, y, kx, ky)


def _prune_close_photons(table: SpotTable, min_sep_px: float) -> SpotTable:
    """Drop every photon that belongs to a close same-frame pair."""
    keep = np.ones(len(table.x), dtype=bool)
    min2 = min_sep_px * min_sep_px
    for f in range(table.n_frames):
        a, b = table.offsets[f], table.offsets[f + 1]
        n = b - a
        if n < 2:
            continue
        for i in range(a, b):
            for j in range(i + 1, b):
                d2 = (table.x[i] - table.x[j]) ** 2 + (table.y[i] - table.y[j]) ** 2
                if d2 < min2:
                    keep[i] = keep[j] = False
    counts = np.diff(table.offsets)
    kept_per_frame = np.add.reduceat(
        keep.astype(np.int64), table.offsets[:-1]
    ) * (counts > 0)
    offsets = np.concatenate([[0], np.cumsum(kept_per_frame)])
    return SpotTable(
        offsets,
        table.x[keep], table.y[keep], table.kx[keep], table.ky[keep],
    )


def _pairs_same_frame(offsets: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Global index arrays (i, j), i < j within each frame."""
    counts = np.diff(offsets)
    mask = counts >= 2
    if not mask.any():
        return np.empty(0, np.int64), np.empty(0, np.int64)
    starts = offsets[:-1][mask]
    cs = counts[mask]
    m = cs * cs
    pair_start = np.repeat(starts, m)
    c_of = np.repeat(cs, m)
    total = int(m.sum())
    within = np.arange(total) - np.repeat(np.cumsum(m) - m, m)
    i = within // c_of
    j = within % c_of
    sel = i < j
    return (pair_start + i)[sel], (pair_start + j)[sel]


def _pairs_consecutive_frames(offsets: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Global index arrays pairing each spot of frame f with each of f+1."""
    counts = np.diff(offsets)
    a = counts[:-1]
    b = counts[1:]
    mask = (a > 0) & (b > 0)
    if not mask.any():
        return np.empty(0, np.int64), np.empty(0, np.int64)
    starts1 = offsets[:-2][mask]
    starts2 = offsets[1:-1][mask]
    ap = a[mask]
    bp = b[mask]
    m = ap * bp
    total = int(m.sum())
    within = np.arange(total) - np.repeat(np.cumsum(m) - m, m)
    b_of = np.repeat(bp, m)
    i = within // b_of
    j = within % b_of
    return (np.repeat(starts1, m) + i), (np.repeat(starts2, m) + j)


@dataclass
class PairSet:
    """Accepted pair coordinates after the cross-talk filter."""

    kx1: np.ndarray
    ky1: np.ndarray
    kx2: np.ndarray
    ky2: np.ndarray
    accepted: int
    excluded: int


def crosstalk_filter(
    table: SpotTable,
    min_sep_px: float,
    mode: str = "same",
) -> PairSet:
    """Form same-frame or consecutive-frame pairs, excluding close ones.

    Pairs with channel-plane separation strictly below min_sep_px are
    excluded; both photons stay available for their other pairings.
    """
    if mode == "same":
        i, j = _pairs_same_frame(table.offsets)
    elif mode == "consecutive":
        i, j = _pairs_consecutive_frames(table.offsets)
    else:
        raise ValueError(f"unknown pairing mode {mode!r}")
    dx = table.x[i] - table.x[j]
    dy = table.y[i] - table.y[j]
    ok = dx * dx + dy * dy >= min_sep_px * min_sep_px
    return PairSet(
        kx1=table.kx[i][ok],
        ky1=table.ky[i][ok],
        kx2=table.kx[j][ok],
        ky2=table.ky[j][ok],
        accepted=int(ok.sum()),
        excluded=int((~ok).sum()),
    )


# ---------------------------------------------------------------------------
# Histogram accumulation


def _hist2d(
    v1: np.ndarray, v2: np.ndarray, geometry: HistogramGeometry
) -> tuple[np.ndarray, int]:
    edges = geometry.edges()
    in_range = (
        (v1 >= geometry.lo) & (v1 <= geometry.hi)
        & (v2 >= geometry.lo) & (v2 <= geometry.hi)
    )
    counts, _, _ = np.histogram2d(
        v1[in_range], v2[in_range], bins=(edges, edges)
    )
    return counts, int((~in_range).sum())


def _accumulate_axis(
    pairs: PairSet, axis: str, geometry: HistogramGeometry, kind: str
) -> JointHistogram:
    if axis == AXIS_XX:
        a, b = pairs.kx1, pairs.kx2
    elif axis == AXIS_YY:
        a, b = pairs.ky1, pairs.ky2
    else:
        raise ValueError(f"axis {axis!r} is not a joint axis")
    # symmetrize: both ordered assignments of every unordered pair
    v1 = np.concatenate([a, b])
    v2 = np.concatenate([b, a])
    counts, overflow = _hist2d(v1, v2, geometry)
    return JointHistogram(
        axis=axis,
        geometry=geometry,
        counts=counts,
        overflow=overflow,
        accepted_pairs=pairs.accepted,
        excluded_pairs=pairs.excluded,
        kind=kind,
    )


def _prepare_table(table: SpotTable, params: AnalysisParams) -> SpotTable:
    if params.drop_close_photons:
        return _prune_close_photons(table, params.crosstalk_min_sep_px)
    return table


def accumulate_joint(
    table: SpotTable,
    axis: str,
    geometry: HistogramGeometry,
    params: AnalysisParams,
) -> JointHistogram:
    table = _prepare_table(table, params)
    pairs = crosstalk_filter(table, params.crosstalk_min_sep_px, "same")
    return _accumulate_axis(pairs, axis, geometry, "same")


def accumulate_accidentals(
    table: SpotTable,
    axis: str,
    geometry: HistogramGeometry,
    params: AnalysisParams,
) -> JointHistogram:
    table = _prepare_table(table, params)
    pairs = crosstalk_filter(table, params.crosstalk_min_sep_px, "consecutive")
    return _accumulate_axis(pairs, axis, geometry, "consecutive")


def subtract(h_same: JointHistogram, h_acc: JointHistogram) -> JointHistogram:
    """Bin-wise h_same - scale * h_acc with the recorded effort scale."""
    if not h_same.same_geometry(h_acc) or h_same.axis != h_acc.axis:
        raise AnalysisError("histogram geometries differ; cannot subtract")
    if h_acc.accepted_pairs > 0:
        scale = h_same.accepted_pairs / h_acc.accepted_pairs
    else:
        scale = 0.0
    return JointHistogram(
        axis=h_same.axis,
        geometry=h_same.geometry,
        counts=h_same.counts - scale * h_acc.counts,
        overflow=h_same.overflow,
        accepted_pairs=h_same.accepted_pairs,
        excluded_pairs=h_same.excluded_pairs,
        kind="subtracted",
        scale=scale,
    )


def _accumulate_sum(
    pairs: PairSet, geometry: HistogramGeometry, kind: str
) -> JointHistogram:
    sx = pairs.kx1 + pairs.kx2
    sy = pairs.ky1 + pairs.ky2
    counts, overflow = _hist2d(sx, sy, geometry)
    return JointHistogram(
        axis=AXIS_SUM,
        geometry=geometry,
        counts=counts,
        overflow=overflow,
        accepted_pairs=pairs.accepted,
        excluded_pairs=pairs.excluded,
        kind=kind,
    )


def sum_projection(
    table: SpotTable,
    geometry: HistogramGeometry,
    params: AnalysisParams,
    subtract_accidentals: bool = True,
) -> JointHistogram:
    """Accidental-subtracted histogram of pair momentum sums."""
    table = _prepare_table(table, params)
    same = _accumulate_sum(
        crosstalk_filter(table, params.crosstalk_min_sep_px, "same"),
        geometry, "same",
    )
    if not subtract_accidentals:
        return same
    acc = _accumulate_sum(
        crosstalk_filter(table, params.crosstalk_min_sep_px, "consecutive"),
        geometry, "consecutive",
    )
    out = subtract(same, acc)
    out.axis = AXIS_SUM
    return out


def accumulate_intensity(
    table: SpotTable, geometry: HistogramGeometry
) -> JointHistogram:
    """Single-photon momentum histogram (the far-field intensity image)."""
    counts, overflow = _hist2d(table.kx, table.ky, geometry)
    return JointHistogram(
        axis=AXIS_INTENSITY,
        geometry=geometry,
        counts=counts,
        overflow=overflow,
        accepted_pairs=len(table.kx),
        kind="intensity",
    )


# ---------------------------------------------------------------------------
# Fits


def fit_peak(hist: JointHistogram) -> CorrelationFit:
    """Gaussian fit of the central correlation peak of a sum histogram."""
    counts = hist.counts
    med = float(np.median(np.abs(counts)))
    peak = float(counts.max())
    if not (peak > 5.0 * med) or peak <= 0:
        raise AnalysisError("no significant peak in sum histogram")
    centers = hist.geometry.centers()
    xg, yg = np.meshgrid(centers, centers, indexing="ij")
    iy, ix = np.unravel_index(np.argmax(counts), counts.shape)
    x0 = centers[iy]                    # counts[i, j]: i bins v1=x, j bins v2=y
    y0 = centers[ix]
    offset0 = float(np.median(counts))
    amp0 = peak - offset0
    w = np.clip(counts - offset0, 0.0, None)
    wsum = w.sum()
    sx0 = math.sqrt(max(float((w * (xg - x0) ** 2).sum() / wsum), 1e-6))
    sy0 = math.sqrt(max(float((w * (yg - y0) ** 2).sum() / wsum), 1e-6))
    p0 = np.array([amp0, x0, y0, sx0, sy0, offset0])

    def rj(p: np.ndarray, need_jac: bool) -> tuple:
        return gaussian_elliptical_residual(p, xg, yg, counts, need_jac)

    p, costs, converged = levenberg_marquardt(rj, p0, max_iterations=200,
                                              convergence_tol=1e-8)
    amp, cx, cy, sx, sy, _ = p
    sx, sy = abs(float(sx)), abs(float(sy))
    if amp <= 0 or sx <= 0 or sy <= 0:
        raise AnalysisError("peak fit failed to converge to a peak")
    return CorrelationFit(
        center=TransverseMomentum(float(cx), float(cy)),
        sigma_x=sx,
        sigma_y=sy,
        peak_amplitude=float(amp),
        fit_residual=math.sqrt(costs[-1]),
    )


def radial_profile(
    hist: JointHistogram, n_bins: int
) -> tuple[np.ndarray, np.ndarray, TransverseMomentum]:
    """Area-normalized radial intensity profile about the centroid."""
    counts = hist.counts
    total = counts.sum()
    if total <= 0:
        raise AnalysisError("empty intensity histogram")
    centers = hist.geometry.centers()
    xg, yg = np.meshgrid(centers, centers, indexing="ij")
    cx = float((counts * xg).sum() / total)
    cy = float((counts * yg).sum() / total)
    r = np.hypot(xg - cx, yg - cy).ravel()
    v = counts.ravel()
    r_max = float(r.max())
    edges = np.linspace(0.0, r_max, n_bins + 1)
    idx = np.clip(np.digitize(r, edges) - 1, 0, n_bins - 1)
    sums = np.bincount(idx, weights=v, minlength=n_bins)
    areas = math.pi * np.diff(edges**2) / hist.geometry.bin_width**2
    profile = sums / areas
    mids = 0.5 * (edges[:-1] + edges[1:])
    return mids, profile, TransverseMomentum(cx, cy)


def fit_ring(
    hist: JointHistogram, n_profile_bins: int = 120
) -> RingFit:
    """Gaussian fit of the radial intensity profile of the momentum ring."""
    mids, profile, center = radial_profile(hist, n_profile_bins)
    imax = int(np.argmax(profile))
    if imax < 2:
        raise AnalysisError("radial profile has no off-center maximum")
    offset0 = float(np.median(profile[profile > 0])) if (profile > 0).any() else 0.0
    offset0 = min(offset0, float(profile[imax]) * 0.5)
    amp0 = float(profile[imax]) - offset0
    r0 = float(mids[imax])
    above = profile > offset0 + 0.5 * amp0
    width0 = max(float(np.ptp(mids[above])) / 2.355, mids[1] - mids[0]) \
        if above.sum() >= 2 else (mids[1] - mids[0])
    p0 = np.array([amp0, r0, width0, offset0])

    def rj(p: np.ndarray, need_jac: bool) -> tuple:
        return gaussian_radial_residual(p, mids, profile, need_jac)

    p, costs, _ = levenberg_marquardt(rj, p0, max_iterations=200,
                                      convergence_tol=1e-8)
    amp, r_fit, w_fit, _ = p
    r_fit, w_fit = float(r_fit), abs(float(w_fit))
    if amp <= 0 or r_fit <= w_fit or w_fit <= 0:
        raise AnalysisError("no ring structure found in intensity histogram")
    return RingFit(
        k_radius=r_fit,
        radial_width=w_fit,
        center=center,
        fit_residual=math.sqrt(costs[-1]),
    )


MODE_COUNT_CONVENTION = (
    "N = 2*pi*k_radius*sqrt(2*pi)*radial_width / (sigma_x*sigma_y); the "
    "annulus area uses the Gaussian-equivalent width sqrt(2*pi)*w and the "
    "squared correlation length is the product of the two fitted sigmas"
)


def mode_count(ring: RingFit, fit: CorrelationFit) -> tuple[float, dict]:
    """Spatial mode count: ring area over squared correlation length."""
    w_eff = math.sqrt(2.0 * math.pi) * ring.radial_width
    n = 2.0 * math.pi * ring.k_radius * w_eff / (fit.sigma_x * fit.sigma_y)
    meta = {
        "convention": MODE_COUNT_CONVENTION,
        "k_radius": ring.k_radius,
        "radial_width": ring.radial_width,
        "sigma_x": fit.sigma_x,
        "sigma_y": fit.sigma_y,
    }
    return n, meta


def closed_form_mode_count(source: SourceParams) -> float:
    """Mode count predicted directly from generator parameters.

    The measured ring width convolves the pair-center radial spread with
    the per-photon half-sum blur, whose radial variance averages to
    (sum_sigma_x^2 + sum_sigma_y^2) / 8 around the ring.
    """
    w = math.sqrt(
        source.ring_radial_sigma**2
        + (source.sum_sigma_x**2 + source.sum_sigma_y**2) / 8.0
    )
    return (
        2.0 * math.pi * source.ring_radius * math.sqrt(2.0 * math.pi) * w
        / (source.sum_sigma_x * source.sum_sigma_y)
    )


# ---------------------------------------------------------------------------
# Gating statistics


def gating_stats(
    photon_counts: Iterable[int], max_count: int = 8
) -> GatingStats:
    """Per-frame photon count histogram with the success figures.

    Success counts frames holding exactly one or two photons; the last
    histogram bucket aggregates frames with >= max_count photons.
    """
    counts = np.zeros(max_count + 1, dtype=np.int64)
    n = 0
    for c in photon_counts:
        counts[min(c, max_count)] += 1
        n += 1
    if n == 0:
        raise AnalysisError("no frames to summarize")
    return GatingStats(
        counts=counts,
        n_frames=n,
        success_rate=float((counts[1] + counts[2]) / n),
        empty_fraction=float(counts[0] / n),
        max_count=max_count,
    )


def stats_from_frames(
    frames: Iterable[FrameRecord], max_count: int = 8
) -> GatingStats:
    return gating_stats((len(f.spots) for f in frames), max_count)
