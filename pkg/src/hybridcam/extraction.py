"""Spot recovery from camera frames: peak detection and sub-pixel fitting.

Candidates are strict-threshold local maxima, non-maximum suppressed
within min_peak_separation.  Each candidate ROI is fitted with an
isotropic 2D Gaussian plus constant offset by damped Gauss-Newton
(Levenberg-Marquardt damping): steps are accepted only when the summed
squared residual decreases, so the cost sequence is non-increasing by
construction.  The same engine also serves the elliptical histogram-peak
and radial ring fits in the analysis stage.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Callable, Optional

import numpy as np

from .intensifier import OpticsMap, map_pixel_to_momentum
from .source import TransverseMomentum


@dataclass
class ExtractionParams:
    detect_threshold: float = 24.0      # counts
    roi_half_size: int = 6              # px; ROI is (2h+1) x (2h+1)
    max_iterations: int = 60
    convergence_tol: float = 1e-5       # relative parameter step
    sigma_min: float = 0.3              # px
    sigma_max: float = 6.0              # px
    min_peak_separation: float = 4.0    # px
    sigma_init: float = 1.5             # px, fit seed (camera spot width)

    def validate(self, path: str = "extraction") -> None:
        from .config import ConfigError

        if self.detect_threshold <= 0:
            raise ConfigError(f"{path}.detect_threshold: must be > 0")
        if self.roi_half_size < 2:
            raise ConfigError(f"{path}.roi_half_size: must be >= 2")
        if self.max_iterations < 1:
            raise ConfigError(f"{path}.max_iterations: must be >= 1")
        if self.convergence_tol <= 0:
            raise ConfigError(f"{path}.convergence_tol: must be > 0")
        if not (0 < self.sigma_min < self.sigma_max):
            raise ConfigError(f"{path}.sigma_min/max: need 0 < min < max")
        if self.min_peak_separation <= 0:
            raise ConfigError(f"{path}.min_peak_separation: must be > 0")


@dataclass(slots=True)
class DetectedSpot:
    x: float
    y: float
    amplitude: float
    sigma: float
    residual_norm: float = 0.0
    roi_x: int = 0
    roi_y: int = 0


@dataclass(slots=True)
class FitFailure:
    reason: str


@dataclass
class ExtractionCounters:
    candidates: int = 0
    fitted: int = 0
    failed_no_peak: int = 0
    failed_diverged: int = 0
    failed_sigma_bounds: int = 0
    failed_amplitude: int = 0
    failed_roi_bounds: int = 0


# ---------------------------------------------------------------------------
# Levenberg-Marquardt engine


def levenberg_marquardt(
    residual_jacobian: Callable[..., tuple[np.ndarray, Optional[np.ndarray]]],
    p0: np.ndarray,
    max_iterations: int = 60,
    convergence_tol: float = 1e-6,
    lambda0: float = 1e-3,
    lambda_factor: float = 10.0,
    lambda_max: float = 1e10,
) -> tuple[np.ndarray, list[float], bool]:
    """Minimize ||r(p)||^2 with damped Gauss-Newton steps.

    residual_jacobian(p, need_jac) returns (r, J) with J[i, j] = dr_i/dp_j;
    J may be None when need_jac is False (trial points only need the
    cost).  Only cost-decreasing steps are accepted, so the returned cost
    history is non-increasing.  Returns (p, costs, converged); converged
    is False when the damping blows past lambda_max or iterations run out.
    """
    p = np.asarray(p0, dtype=np.float64).copy()
    r, jac = residual_jacobian(p, True)
    cost = float(r @ r)
    costs = [cost]
    lam = lambda0
    converged = False
    for _ in range(max_iterations):
        g = jac.T @ r
        hess = jac.T @ jac
        n_par = hess.shape[0]
        diag = hess.diagonal().copy()
        diag[diag <= 0] = 1e-12
        accepted = False
        while lam <= lambda_max:
            damped = hess.copy()
            damped.flat[:: n_par + 1] += lam * diag
            try:
                step = np.linalg.solve(damped, -g)
            except np.linalg.LinAlgError:
                lam *= lambda_factor
                continue
            p_try = p + step
            r_try, _ = residual_jacobian(p_try, False)
            cost_try = float(r_try @ r_try)
            if cost_try < cost:
                rel_step = np.max(np.abs(step) / (np.abs(p) + 1e-12))
                p, cost = p_try, cost_try
                r, jac = residual_jacobian(p, True)
                costs.append(cost)
                lam = max(lam / lambda_factor, 1e-12)
                accepted = True
                if rel_step < convergence_tol:
                    converged = True
                break
            lam *= lambda_factor
        if not accepted:
            # cannot improve further: treat a tiny gradient as converged
            converged = bool(np.max(np.abs(g)) <= 1e-8 * (1.0 + cost))
            break
        if converged:
            break
    return p, costs, converged


# ---------------------------------------------------------------------------
# Model functions (residuals and analytic Jacobians)


def gaussian_spot_residual(
    params: np.ndarray,
    xg: np.ndarray,
    yg: np.ndarray,
    data: np.ndarray,
    need_jac: bool = True,
) -> tuple[np.ndarray, Optional[np.ndarray]]:
    """Isotropic spot model A*exp(-(dx^2+dy^2)/(2 s^2)) + c."""
    amp, x0, y0, sig, off = params
    dx = xg - x0
    dy = yg - y0
    rho2 = dx * dx + dy * dy
    e = np.exp(-0.5 * rho2 / (sig * sig))
    r = (amp * e + off - data).ravel()
    if not need_jac:
        return r, None
    jac = np.empty((r.size, 5))
    jac[:, 0] = e.ravel()
    jac[:, 1] = (amp * e * dx / (sig * sig)).ravel()
    jac[:, 2] = (amp * e * dy / (sig * sig)).ravel()
    jac[:, 3] = (amp * e * rho2 / (sig ** 3)).ravel()
    jac[:, 4] = 1.0
    return r, jac


def gaussian_elliptical_residual(
    params: np.ndarray,
    xg: np.ndarray,
    yg: np.ndarray,
    data: np.ndarray,
    need_jac: bool = True,
) -> tuple[np.ndarray, Optional[np.ndarray]]:
    """Axis-aligned model A*exp(-dx^2/(2 sx^2) - dy^2/(2 sy^2)) + c."""
    amp, x0, y0, sx, sy, off = params
    dx = xg - x0
    dy = yg - y0
    e = np.exp(-0.5 * (dx / sx) ** 2 - 0.5 * (dy / sy) ** 2)
    r = (amp * e + off - data).ravel()
    if not need_jac:
        return r, None
    jac = np.empty((r.size, 6))
    jac[:, 0] = e.ravel()
    jac[:, 1] = (amp * e * dx / (sx * sx)).ravel()
    jac[:, 2] = (amp * e * dy / (sy * sy)).ravel()
    jac[:, 3] = (amp * e * dx * dx / (sx ** 3)).ravel()
    jac[:, 4] = (amp * e * dy * dy / (sy ** 3)).ravel()
    jac[:, 5] = 1.0
    return r, jac


def gaussian_radial_residual(
    params: np.ndarray,
    r_axis: np.ndarray,
    data: np.ndarray,
    need_jac: bool = True,
) -> tuple[np.ndarray, Optional[np.ndarray]]:
    """1D model A*exp(-(r-r0)^2/(2 w^2)) + c for radial ring profiles."""
    amp, r0, width, off = params
    dr = r_axis - r0
    e = np.exp(-0.5 * (dr / width) ** 2)
    r = amp * e + off - data
    if not need_jac:
        return r, None
    jac = np.empty((r.size, 4))
    jac[:, 0] = e
    jac[:, 1] = amp * e * dr / (width * width)
    jac[:, 2] = amp * e * dr * dr / (width ** 3)
    jac[:, 3] = 1.0
    return r, jac


# ---------------------------------------------------------------------------
# Detection and fitting on images


def detect_candidates(
    image: np.ndarray, params: ExtractionParams
) -> list[tuple[int, int]]:
    """Above-threshold local maxima, non-maximum suppressed.

    Returns (x, y) integer pixel positions.  Suppression keeps the higher
    peak; exact ties resolve by lexicographic (y, x) order.  A per-row
    maximum prefilter keeps the scan cheap on frames that are mostly read
    noise.
    """
    h, w = image.shape
    thr = params.detect_threshold
    hot_rows = np.nonzero(image.max(axis=1) > thr)[0]
    raw: list[tuple[float, int, int]] = []
    for y in hot_rows:
        if y == 0 or y == h - 1:
            continue
        row = image[y]
        for x in np.nonzero(row > thr)[0]:
            if x == 0 or x == w - 1:
                continue
            v = row[x]
            if v >= image[y - 1 : y + 2, x - 1 : x + 2].max():
                raw.append((float(v), int(y), int(x)))
    raw.sort(key=lambda t: (-t[0], t[1], t[2]))
    kept: list[tuple[int, int]] = []
    min_sep2 = params.min_peak_separation ** 2
    for _, y, x in raw:
        if all((x - kx) ** 2 + (y - ky) ** 2 >= min_sep2 for kx, ky in kept):
            kept.append((x, y))
    return kept


_ROI_GRIDS: dict[int, tuple[np.ndarray, np.ndarray]] = {}


def _roi_grid(half: int) -> tuple[np.ndarray, np.ndarray]:
    got = _ROI_GRIDS.get(half)
    if got is None:
        ys, xs = np.mgrid[0 : 2 * half + 1, 0 : 2 * half + 1].astype(np.float64)
        got = _ROI_GRIDS[half] = (ys, xs)
    return got


def fit_gaussian(
    image: np.ndarray,
    candidate: tuple[int, int],
    params: ExtractionParams,
) -> DetectedSpot | FitFailure:
    """Sub-pixel fit of one candidate; returns FitFailure on a bad fit."""
    cx, cy = candidate
    half = params.roi_half_size
    h, w = image.shape
    if cx - half < 0 or cy - half < 0 or cx + half >= w or cy + half >= h:
        return FitFailure("roi_bounds")
    roi = image[cy - half : cy + half + 1, cx - half : cx + half + 1].astype(
        np.float64
    )
    ys, xs = _roi_grid(half)
    offset0 = float(np.median(roi))
    amp0 = float(roi.max() - offset0)
    if amp0 <= 0:
        return FitFailure("no_peak")
    weights = np.clip(roi - offset0, 0.0, None)
    wsum = float(weights.sum())
    if wsum <= 0:
        return FitFailure("no_peak")
    x0 = float((weights * xs).sum() / wsum)
    y0 = float((weights * ys).sum() / wsum)
    p0 = np.array([amp0, x0, y0, params.sigma_init, offset0])

    def rj(p: np.ndarray, need_jac: bool) -> tuple:
        return gaussian_spot_residual(p, xs, ys, roi, need_jac)

    p, costs, converged = levenberg_marquardt(
        rj, p0, params.max_iterations, params.convergence_tol
    )
    amp, fx, fy, sig, off = p
    sig = abs(sig)
    if not converged and costs[-1] > 0.5 * costs[0]:
        return FitFailure("diverged")
    if amp <= 0:
        return FitFailure("amplitude")
    if not (params.sigma_min <= sig <= params.sigma_max):
        return FitFailure("sigma_bounds")
    if not (0 <= fx <= 2 * half and 0 <= fy <= 2 * half):
        return FitFailure("diverged")
    return DetectedSpot(
        x=fx + cx - half,
        y=fy + cy - half,
        amplitude=float(amp),
        sigma=float(sig),
        residual_norm=math.sqrt(costs[-1]),
        roi_x=cx - half,
        roi_y=cy - half,
    )


def extract_events(
    image: np.ndarray,
    params: ExtractionParams,
    optics: OpticsMap,
    counters: Optional[ExtractionCounters] = None,
) -> list[tuple[DetectedSpot, TransverseMomentum]]:
    """Detect, fit, and map each recovered spot to transverse momentum."""
    if counters is None:
        counters = ExtractionCounters()
    out: list[tuple[DetectedSpot, TransverseMomentum]] = []
    for cand in detect_candidates(image, params):
        counters.candidates += 1
        result = fit_gaussian(image, cand, params)
        if isinstance(result, FitFailure):
            attr = f"failed_{result.reason}"
            if result.reason == "roi_bounds":
                counters.failed_roi_bounds += 1
            elif hasattr(counters, attr):
                setattr(counters, attr, getattr(counters, attr) + 1)
            continue
        counters.fitted += 1
        out.append((result, map_pixel_to_momentum(result.x, result.y, optics)))
    return out
