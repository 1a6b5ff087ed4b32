"""Gate controller state machine and per-frame simulation loop.

The controller is a deterministic Mealy machine driven by four event
kinds: the camera's Fire-All rise and fall, discriminator triggers from
the fast detector, and the expiry of a scheduled close timer.  In
adaptive mode the gate closes feedback_latency_ns after the trigger that
reaches n_target; triggers arriving inside that latency window still hit
an open intensifier and are counted.  Fixed mode replaces the trigger
logic with a timer of fixed length started at Fire-All rise.

run_frame() drives one frame on a single event-ordered timeline: photon
arrivals are drawn lazily (exponential inter-arrival gaps) so a frame
costs work proportional to the realized gate length, not the Fire-All
window.  Simultaneous events resolve with the fixed priority
Fire-All fall > close timer > photon/false-pulse arrivals.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from enum import Enum
from typing import Iterator, NamedTuple, Optional

import numpy as np

from . import intensifier as itf
from . import readout as ro
from . import source as src
from .extraction import DetectedSpot, ExtractionCounters, extract_events


class Phase(Enum):
    IDLE = "idle"
    WAIT_FIRE_ALL = "wait_fire_all"
    OPEN = "open"
    CLOSE_PENDING = "close_pending"
    CLOSED = "closed"


CAUSE_TARGET = "target_reached"
CAUSE_FIRE_ALL = "fire_all_ended"
CAUSE_FIXED = "fixed_expiry"

MODE_ADAPTIVE = "adaptive"
MODE_FIXED = "fixed"


@dataclass
class GatingConfig:
    mode: str = MODE_ADAPTIVE
    n_target: int = 1                   # adaptive: photons before closing
    gate_ns: float = 150.0              # fixed-mode gate length
    feedback_latency_ns: float = 150.0  # trigger-to-close delay
    fire_all_duration_ns: float = 9.0e6
    frame_period_ns: float = 1.0e7

    def validate(self, path: str = "gating") -> None:
        from .config import ConfigError

        if self.mode not in (MODE_ADAPTIVE, MODE_FIXED):
            raise ConfigError(f"{path}.mode: must be 'adaptive' or 'fixed'")
        if self.mode == MODE_ADAPTIVE and self.n_target < 1:
            raise ConfigError(f"{path}.n_target: must be >= 1")
        if self.mode == MODE_FIXED and self.gate_ns <= 0:
            raise ConfigError(f"{path}.gate_ns: must be > 0")
        if self.feedback_latency_ns < 0:
            raise ConfigError(f"{path}.feedback_latency_ns: must be >= 0")
        if not (0 < self.fire_all_duration_ns <= self.frame_period_ns):
            raise ConfigError(
                f"{path}.fire_all_duration_ns: must be in (0, frame_period_ns]"
            )


class Event(NamedTuple):
    kind: str  # fire_all_rise | fire_all_fall | trigger | timer
    t: float


class Action(NamedTuple):
    kind: str  # open | close
    t: float
    cause: Optional[str] = None


class ControllerState(NamedTuple):
    phase: Phase = Phase.WAIT_FIRE_ALL
    trigger_count: int = 0
    first_trigger_t: float = math.nan
    target_trigger_t: float = math.nan
    close_scheduled_t: float = math.nan
    last_event_t: float = -math.inf
    ignored_triggers: int = 0


class ProtocolError(RuntimeError):
    """An event arrived that the gate protocol cannot have produced."""


_GATE_OPEN_PHASES = (Phase.OPEN, Phase.CLOSE_PENDING)


def controller_step(
    state: ControllerState, event: Event, config: GatingConfig
) -> tuple[ControllerState, Optional[Action]]:
    """Advance the Mealy machine by one event; pure, raises on misuse."""
    if event.t < state.last_event_t:
        raise ProtocolError(
            f"out-of-order event {event.kind} at t={event.t} "
            f"(last was {state.last_event_t})"
        )
    phase = state.phase

    if event.kind == "trigger":
        if phase not in _GATE_OPEN_PHASES:
            return state._replace(
                ignored_triggers=state.ignored_triggers + 1,
                last_event_t=event.t,
            ), None
        count = state.trigger_count + 1
        if (
            config.mode == MODE_ADAPTIVE
            and phase is Phase.OPEN
            and count >= config.n_target
        ):
            return state._replace(
                phase=Phase.CLOSE_PENDING,
                trigger_count=count,
                first_trigger_t=event.t if count == 1 else state.first_trigger_t,
                target_trigger_t=event.t,
                close_scheduled_t=event.t + config.feedback_latency_ns,
                last_event_t=event.t,
            ), None
        return state._replace(
            trigger_count=count,
            first_trigger_t=event.t if count == 1 else state.first_trigger_t,
            last_event_t=event.t,
        ), None

    if event.kind == "fire_all_rise":
        if phase is not Phase.WAIT_FIRE_ALL:
            raise ProtocolError(f"fire_all_rise in phase {phase.value}")
        close_at = (
            event.t + config.gate_ns if config.mode == MODE_FIXED else math.nan
        )
        return state._replace(
            phase=Phase.OPEN,
            close_scheduled_t=close_at,
            last_event_t=event.t,
        ), Action("open", event.t)

    if event.kind == "fire_all_fall":
        if phase in _GATE_OPEN_PHASES:
            return state._replace(
                phase=Phase.CLOSED, last_event_t=event.t
            ), Action("close", event.t, CAUSE_FIRE_ALL)
        if phase is Phase.CLOSED:
            return state._replace(
                phase=Phase.IDLE, last_event_t=event.t
            ), None
        raise ProtocolError(f"fire_all_fall in phase {phase.value}")

    if event.kind == "timer":
        if phase in _GATE_OPEN_PHASES and not math.isnan(
            state.close_scheduled_t
        ):
            cause = CAUSE_FIXED if config.mode == MODE_FIXED else CAUSE_TARGET
            return state._replace(
                phase=Phase.CLOSED, last_event_t=event.t
            ), Action("close", event.t, cause)
        raise ProtocolError(f"timer expiry in phase {phase.value}")

    raise ProtocolError(f"unknown event kind {event.kind!r}")


# ---------------------------------------------------------------------------
# Per-frame random streams


def frame_rng(seed: int, frame_id: int) -> np.random.Generator:
    """Independent per-frame stream: Philox keyed by (seed, frame_id).

    The two 64-bit key words are (frame_id, seed), so any worker layout
    reproduces the same frame from the same (seed, frame_id).
    """
    if seed < 0 or frame_id < 0:
        raise ValueError("seed and frame_id must be non-negative")
    return np.random.Generator(np.random.Philox(key=(seed << 64) + frame_id))


class FrameRngPool:
    """Recycles one Philox generator across frames by resetting its state.

    Streams are bit-identical to frame_rng(seed, frame_id); resetting the
    counter and key in place just skips the per-frame object construction.
    """

    def __init__(self, seed: int):
        if seed < 0:
            raise ValueError("seed must be non-negative")
        self.seed = seed
        self._bitgen = np.random.Philox(key=0)
        self._gen = np.random.Generator(self._bitgen)
        self._counter = np.zeros(4, dtype=np.uint64)
        self._buffer = np.zeros(4, dtype=np.uint64)

    def for_frame(self, frame_id: int) -> np.random.Generator:
        if frame_id < 0:
            raise ValueError("frame_id must be non-negative")
        self._bitgen.state = {
            "bit_generator": "Philox",
            "state": {
                "counter": self._counter,
                "key": np.array(
                    [frame_id & 0xFFFFFFFFFFFFFFFF, self.seed],
                    dtype=np.uint64,
                ),
            },
            "buffer": self._buffer,
            "buffer_pos": 4,
            "has_uint32": 0,
            "uinteger": 0,
        }
        return self._gen


# ---------------------------------------------------------------------------
# Frame records and the per-frame simulation


class GateTrace(NamedTuple):
    open_t: float
    close_t: float
    cause: str


@dataclass
class FrameCounters:
    detect: itf.DetectCounters
    extraction: ExtractionCounters
    ignored_triggers: int = 0
    merged_pulses: int = 0


@dataclass
class FrameRecord:
    frame_id: int
    gate: GateTrace
    spots: list[DetectedSpot]
    pulses: list[ro.PmtPulse]
    truth: Optional[list[src.PhotonEvent]]
    trigger_count: int
    counters: Optional[FrameCounters] = None


def run_frame(config, frame_id: int = 0,
              rng: Optional[np.random.Generator] = None) -> FrameRecord:
    """Simulate one acquisition cycle of a RunConfig.

    Only photons arriving while the gate is open reach the intensifier;
    the resulting PMT triggers feed back into the controller, closing the
    loop.  With config.render the camera image is synthesized and spots
    are recovered by the fitting pipeline; otherwise spots sit at the
    flash channel positions with the same amplitude model (fast path).
    """
    if rng is None:
        rng = frame_rng(config.seed, frame_id)
    sp = config.source
    ip = config.intensifier
    rp = config.readout
    gp = config.gating
    optics = config.optics

    uniform = rng.uniform
    exponential = rng.exponential
    qe = ip.qe
    pair_scale = 1e9 / sp.pair_rate if sp.pair_rate > 0 else 0.0
    noise_scale = 1e9 / sp.noise_rate if sp.noise_rate > 0 else 0.0
    false_scale = (
        1e9 / rp.pmt_false_pulse_rate if rp.pmt_false_pulse_rate > 0 else 0.0
    )
    fire_all_end = gp.fire_all_duration_ns

    state, action = controller_step(
        ControllerState(), Event("fire_all_rise", 0.0), gp
    )
    assert action is not None and action.kind == "open"
    open_t = action.t
    close_t = math.nan
    cause = ""

    next_pair = exponential(pair_scale) if pair_scale else math.inf
    next_noise = exponential(noise_scale) if noise_scale else math.inf
    next_false = exponential(false_scale) if false_scale else math.inf

    det_counters = itf.DetectCounters()
    flashes: list[itf.FlashEvent] = []
    amps_cmos: list[float] = []
    pulses: list[ro.PmtPulse] = []
    truth: Optional[list[src.PhotonEvent]] = [] if config.keep_truth else None
    last_trigger_t = -math.inf
    merged = 0
    local_triggers = 0  # fixed mode counts triggers without FSM dispatch
    pair_seq = 0
    adaptive = gp.mode == MODE_ADAPTIVE
    threshold = rp.discriminator_threshold
    resolution = rp.pulse_pair_resolution

    def on_trigger(t: float) -> None:
        nonlocal state, last_trigger_t, merged, local_triggers
        if t - last_trigger_t >= resolution:
            last_trigger_t = t
            if adaptive:
                state, _ = controller_step(state, Event("trigger", t), gp)
            else:
                local_triggers += 1
        else:
            merged += 1

    def feed_photon(photon: src.PhotonEvent) -> None:
        flash = itf.flash_from_photon(photon, ip, optics, rng, det_counters)
        if flash is None:
            return
        if truth is not None:
            truth.append(photon)
        for f in itf.apply_crosstalk(flash, ip, rng, det_counters):
            flashes.append(f)
            amps_cmos.append(ro.cmos_amplitude(f.brightness, rp, rng))
            amp = ro.pmt_amplitude(f.brightness, rp, rng)
            if amp <= 0:
                continue
            pulses.append(ro.PmtPulse(f.t, amp))
            if amp >= threshold:
                on_trigger(f.t)

    while True:
        t_timer = state.close_scheduled_t  # nan when no close scheduled
        t_next = min(next_pair, next_noise, next_false)
        # priority at equal times: fall > timer > arrivals
        if fire_all_end <= t_next and not t_timer < fire_all_end:
            state, action = controller_step(
                state, Event("fire_all_fall", fire_all_end), gp
            )
            if action is not None:
                close_t, cause = action.t, action.cause
            break
        if t_timer <= t_next:  # nan compares False
            state, action = controller_step(state, Event("timer", t_timer), gp)
            assert action is not None
            close_t, cause = action.t, action.cause
            break

        if t_next == next_pair:
            t = next_pair
            next_pair = t + exponential(pair_scale)
            det1 = uniform() < qe
            det2 = uniform() < qe
            pair_id = pair_seq
            pair_seq += 1
            if not (det1 or det2):
                det_counters.undetected += 2
                continue
            det_counters.undetected += (not det1) + (not det2)
            k1, k2 = src.sample_pair_momenta(sp, rng)
            if sp.pair_time_jitter > 0:
                t2 = t + sp.pair_time_jitter * uniform(-1.0, 1.0)
            else:
                t2 = t
            if det1:
                feed_photon(src.PhotonEvent(t, k1, src.ORIGIN_SIGNAL, pair_id))
            if det2:
                feed_photon(src.PhotonEvent(t2, k2, src.ORIGIN_IDLER, pair_id))
        elif t_next == next_noise:
            t = next_noise
            next_noise = t + exponential(noise_scale)
            if uniform() < qe:
                feed_photon(
                    src.PhotonEvent(t, src.sample_noise_momentum(sp, rng),
                                    src.ORIGIN_NOISE)
                )
            else:
                det_counters.undetected += 1
        else:
            t = next_false
            next_false = t + exponential(false_scale)
            amp = ro.false_pulse_amplitude(rp, rng)
            pulses.append(ro.PmtPulse(t, amp))
            if amp >= threshold:
                on_trigger(t)

    # consume the fall event when a timer closed the gate early, so the
    # controller ends every frame in IDLE
    if state.phase is Phase.CLOSED:
        state, _ = controller_step(
            state, Event("fire_all_fall", fire_all_end), gp
        )

    ext_counters = ExtractionCounters()
    if config.render:
        h, w = config.frame_size
        visible = [
            (f, a)
            for f, a in zip(flashes, amps_cmos)
            if 0 <= f.x < w and 0 <= f.y < h
        ]
        image, _ = ro.render_frame(
            [f for f, _ in visible], rp, (h, w), rng,
            amplitudes=[a for _, a in visible],
        )
        spots = [s for s, _ in
                 extract_events(image, config.extraction, optics, ext_counters)]
    else:
        thr = config.extraction.detect_threshold
        spots = [
            DetectedSpot(x=float(f.x), y=float(f.y), amplitude=a,
                         sigma=rp.psf_sigma)
            for f, a in zip(flashes, amps_cmos)
            if a >= thr
        ]
    spots.sort(key=lambda s: (s.x, s.y))
    pulses.sort(key=lambda p: p.t)

    return FrameRecord(
        frame_id=frame_id,
        gate=GateTrace(open_t, close_t, cause),
        spots=spots,
        pulses=pulses,
        truth=truth,
        trigger_count=state.trigger_count + local_triggers,
        counters=FrameCounters(det_counters, ext_counters,
                               state.ignored_triggers, merged),
    )


def run_batch(config, n_frames: int, seed: Optional[int] = None,
              first_frame_id: int = 0) -> Iterator[FrameRecord]:
    """Stream n_frames independent frames from seed-derived streams."""
    if n_frames < 1:
        raise ValueError("n_frames must be >= 1")
    if seed is None:
        seed = config.seed
    pool = FrameRngPool(seed)
    for frame_id in range(first_frame_id, first_frame_id + n_frames):
        yield run_frame(config, frame_id, pool.for_frame(frame_id))
