"""Image intensifier model: QE thinning, channel mapping, flashes, cross-talk.

A photon reaching the photocathode survives a Bernoulli quantum-efficiency
test, is assigned the micro-channel nearest to its mapped focal-plane
position (the channel grid, not the camera, limits spatial resolution) and
produces a phosphor flash with Gamma-distributed brightness.  Electrons
back-scattered off the channel plate are modeled as at most one secondary
flash per primary, displaced by up to crosstalk_radius channels.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from .source import PhotonEvent, TransverseMomentum


@dataclass
class IntensifierParams:
    qe: float = 0.20
    channels_x: int = 3000
    channels_y: int = 3000
    brightness_shape: float = 1.3       # Gamma shape; mass at low brightness
    brightness_scale: float = 100.0     # arbitrary brightness units
    crosstalk_prob: float = 0.05        # placeholder, not a measured value
    crosstalk_radius: float = 50.0      # channels
    crosstalk_brightness_factor: float = 0.3
    phosphor_delay_ns: float = 0.0

    def validate(self, path: str = "intensifier") -> None:
        from .config import ConfigError

        if not (0.0 <= self.qe <= 1.0):
            raise ConfigError(f"{path}.qe: must be in [0, 1]")
        if self.channels_x <= 0 or self.channels_y <= 0:
            raise ConfigError(f"{path}.channels_x/y: must be > 0")
        if self.brightness_shape <= 0 or self.brightness_scale <= 0:
            raise ConfigError(f"{path}.brightness_shape/scale: must be > 0")
        if not (0.0 <= self.crosstalk_prob <= 1.0):
            raise ConfigError(f"{path}.crosstalk_prob: must be in [0, 1]")
        if self.crosstalk_radius <= 0:
            raise ConfigError(f"{path}.crosstalk_radius: must be > 0")
        if not (0.0 < self.crosstalk_brightness_factor <= 1.0):
            raise ConfigError(
                f"{path}.crosstalk_brightness_factor: must be in (0, 1]"
            )


@dataclass
class OpticsMap:
    """Affine map between transverse momentum and channel coordinates."""

    k_to_pixel_scale: float = 3.0       # channels per 1/mm
    center_x: float = 1500.0
    center_y: float = 1500.0

    def validate(self, path: str = "optics") -> None:
        from .config import ConfigError

        if self.k_to_pixel_scale <= 0:
            raise ConfigError(f"{path}.k_to_pixel_scale: must be > 0")


@dataclass(slots=True)
class FlashEvent:
    """One phosphor burst at an integer channel center.

    true_x/true_y retain the unquantized mapped position as ground truth;
    the physical flash (what both detectors see) is at (x, y).
    """

    x: int
    y: int
    brightness: float
    t: float
    is_crosstalk: bool = False
    parent_pair_id: Optional[int] = None
    true_x: float = 0.0
    true_y: float = 0.0
    origin: str = "noise"


@dataclass
class DetectCounters:
    undetected: int = 0
    off_grid: int = 0
    crosstalk_dropped: int = 0


def map_momentum_to_pixel(
    k: TransverseMomentum, optics: OpticsMap
) -> tuple[float, float]:
    return (
        optics.center_x + optics.k_to_pixel_scale * k.kx,
        optics.center_y + optics.k_to_pixel_scale * k.ky,
    )


def map_pixel_to_momentum(
    px: float, py: float, optics: OpticsMap
) -> TransverseMomentum:
    return TransverseMomentum(
        (px - optics.center_x) / optics.k_to_pixel_scale,
        (py - optics.center_y) / optics.k_to_pixel_scale,
    )


def flash_from_photon(
    photon: PhotonEvent,
    params: IntensifierParams,
    optics: OpticsMap,
    rng: np.random.Generator,
    counters: Optional[DetectCounters] = None,
) -> Optional[FlashEvent]:
    """Channel assignment and brightness draw for a photon that already
    passed the quantum-efficiency test; None when off the channel grid."""
    px = optics.center_x + optics.k_to_pixel_scale * photon.k[0]
    py = optics.center_y + optics.k_to_pixel_scale * photon.k[1]
    cx = int(round(px))
    cy = int(round(py))
    if not (0 <= cx < params.channels_x and 0 <= cy < params.channels_y):
        if counters is not None:
            counters.off_grid += 1
        return None
    brightness = rng.gamma(params.brightness_shape, params.brightness_scale)
    return FlashEvent(
        x=cx,
        y=cy,
        brightness=brightness,
        t=photon.t + params.phosphor_delay_ns,
        is_crosstalk=False,
        parent_pair_id=photon.pair_id,
        true_x=px,
        true_y=py,
        origin=photon.origin,
    )


def detect(
    photon: PhotonEvent,
    params: IntensifierParams,
    optics: OpticsMap,
    rng: np.random.Generator,
    counters: Optional[DetectCounters] = None,
) -> Optional[FlashEvent]:
    """Photon-to-flash conversion; None when thinned away or off grid."""
    if rng.uniform() >= params.qe:
        if counters is not None:
            counters.undetected += 1
        return None
    return flash_from_photon(photon, params, optics, rng, counters)


def apply_crosstalk(
    flash: FlashEvent,
    params: IntensifierParams,
    rng: np.random.Generator,
    counters: Optional[DetectCounters] = None,
) -> list[FlashEvent]:
    """Primary flash plus at most one displaced secondary.

    Secondaries never spawn further secondaries; a secondary landing off
    the channel grid is dropped.
    """
    if flash.is_crosstalk:
        raise ValueError("cross-talk cannot cascade from a secondary flash")
    out = [flash]
    if params.crosstalk_prob <= 0.0 or rng.uniform() >= params.crosstalk_prob:
        return out
    # uniform in (0, radius]: avoid zero displacement
    dist = params.crosstalk_radius * (1.0 - rng.uniform())
    ang = rng.uniform(0.0, 2.0 * math.pi)
    sx = int(round(flash.x + dist * math.cos(ang)))
    sy = int(round(flash.y + dist * math.sin(ang)))
    gain_noise = rng.gamma(2.0, 0.5)  # mean 1 multiplicative spread
    if not (0 <= sx < params.channels_x and 0 <= sy < params.channels_y):
        if counters is not None:
            counters.crosstalk_dropped += 1
        return out
    out.append(
        FlashEvent(
            x=sx,
            y=sy,
            brightness=flash.brightness
            * params.crosstalk_brightness_factor
            * gain_noise,
            t=flash.t,
            is_crosstalk=True,
            parent_pair_id=flash.parent_pair_id,
            true_x=float(sx),
            true_y=float(sy),
            origin=flash.origin,
        )
    )
    return out
