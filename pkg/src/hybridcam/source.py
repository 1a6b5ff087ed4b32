"""SPDC pair source: momentum-anti-correlated photon pairs on a ring.

A pair is built as k1 = k_center + d/2, k2 = -k_center + d/2, where
k_center sits on a ring (uniform angle, Gaussian radial spread) and the
momentum sum d is a small anisotropic Gaussian, so k1 + k2 = d has per-axis
standard deviations (sum_sigma_x, sum_sigma_y) by construction.  Pair
creation epochs and uncorrelated noise photons follow homogeneous Poisson
statistics; noise momenta are uniform over the acceptance disk.

All times are nanoseconds, all momenta inverse millimeters.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import NamedTuple, Optional

import numpy as np


class TransverseMomentum(NamedTuple):
    kx: float
    ky: float


ORIGIN_SIGNAL = "signal"
ORIGIN_IDLER = "idler"
ORIGIN_NOISE = "noise"


@dataclass(slots=True)
class PhotonEvent:
    """One true photon: arrival time, transverse momentum, origin tag."""

    t: float
    k: TransverseMomentum
    origin: str
    pair_id: Optional[int] = None


@dataclass
class SourceParams:
    ring_radius: float = 330.0          # 1/mm, pair-center ring
    ring_radial_sigma: float = 17.0     # 1/mm
    sum_sigma_x: float = 24.43          # 1/mm, std of k1x + k2x
    sum_sigma_y: float = 22.67          # 1/mm
    pair_rate: float = 2.4e6            # pairs / s
    noise_rate: float = 7.0e5           # photons / s
    pair_time_jitter: float = 0.0       # ns
    k_max: float = 480.0                # 1/mm, acceptance disk radius

    def validate(self, path: str = "source") -> None:
        from .config import ConfigError

        if not (self.ring_radial_sigma > 0):
            raise ConfigError(f"{path}.ring_radial_sigma: must be > 0")
        if not (self.sum_sigma_x > 0 and self.sum_sigma_y > 0):
            raise ConfigError(f"{path}.sum_sigma_x/y: must be > 0")
        if self.ring_radius <= 3.0 * self.ring_radial_sigma:
            raise ConfigError(
                f"{path}.ring_radius: must exceed 3*ring_radial_sigma "
                f"(got {self.ring_radius} vs {3 * self.ring_radial_sigma})"
            )
        if self.pair_rate < 0 or self.noise_rate < 0:
            raise ConfigError(f"{path}.pair_rate/noise_rate: must be >= 0")
        if self.pair_time_jitter < 0:
            raise ConfigError(f"{path}.pair_time_jitter: must be >= 0")
        if not (self.k_max > 0):
            raise ConfigError(f"{path}.k_max: must be > 0")


def sample_pair_momenta(
    params: SourceParams, rng: np.random.Generator
) -> tuple[TransverseMomentum, TransverseMomentum]:
    """Draw one anti-correlated momentum pair (no timing)."""
    angle = rng.uniform(0.0, 2.0 * math.pi)
    radius = params.ring_radius + rng.normal(0.0, params.ring_radial_sigma)
    cx = radius * math.cos(angle)
    cy = radius * math.sin(angle)
    dx = rng.normal(0.0, params.sum_sigma_x)
    dy = rng.normal(0.0, params.sum_sigma_y)
    k1 = TransverseMomentum(cx + 0.5 * dx, cy + 0.5 * dy)
    k2 = TransverseMomentum(-cx + 0.5 * dx, -cy + 0.5 * dy)
    return k1, k2


def sample_pair(
    params: SourceParams,
    rng: np.random.Generator,
    pair_id: int = 0,
    t: float = 0.0,
) -> tuple[PhotonEvent, PhotonEvent]:
    """Draw one photon pair created at epoch t.

    Signal and idler share the pair_id and are simultaneous up to
    pair_time_jitter.  Momentum tails are not truncated here; the
    acceptance disk is enforced by the intensifier mapping.
    """
    k1, k2 = sample_pair_momenta(params, rng)
    if params.pair_time_jitter > 0:
        t2 = t + params.pair_time_jitter * rng.uniform(-1.0, 1.0)
    else:
        t2 = t
    signal = PhotonEvent(t=t, k=k1, origin=ORIGIN_SIGNAL, pair_id=pair_id)
    idler = PhotonEvent(t=t2, k=k2, origin=ORIGIN_IDLER, pair_id=pair_id)
    return signal, idler


def sample_noise_momentum(
    params: SourceParams, rng: np.random.Generator
) -> TransverseMomentum:
    """Uniform momentum over the acceptance disk."""
    r = params.k_max * math.sqrt(rng.uniform())
    a = rng.uniform(0.0, 2.0 * math.pi)
    return TransverseMomentum(r * math.cos(a), r * math.sin(a))


def sample_event_stream(
    params: SourceParams,
    window_ns: float,
    rng: np.random.Generator,
    first_pair_id: int = 0,
) -> list[PhotonEvent]:
    """All photons arriving in [0, window_ns), sorted by time.

    Pair epochs are Poisson with rate pair_rate, noise photons Poisson
    with rate noise_rate; pair ids are sequential from first_pair_id so
    identical seeds give identical streams.
    """
    if window_ns <= 0:
        raise ValueError("window_ns must be > 0")
    events: list[PhotonEvent] = []
    n_pairs = rng.poisson(params.pair_rate * 1e-9 * window_ns)
    epochs = np.sort(rng.uniform(0.0, window_ns, size=n_pairs))
    for i, t in enumerate(epochs):
        s, idl = sample_pair(params, rng, pair_id=first_pair_id + i, t=float(t))
        events.append(s)
        events.append(idl)
    n_noise = rng.poisson(params.noise_rate * 1e-9 * window_ns)
    for t in np.sort(rng.uniform(0.0, window_ns, size=n_noise)):
        events.append(
            PhotonEvent(t=float(t), k=sample_noise_momentum(params, rng),
                        origin=ORIGIN_NOISE)
        )
    events.sort(key=lambda e: e.t)
    return events
