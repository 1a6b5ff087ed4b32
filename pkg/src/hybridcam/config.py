"""Run configuration: one seed, one block per pipeline stage.

The paper_like() profile carries the committed calibration: quantum
efficiency pinned at 0.20, ring geometry solving the spatial-mode-count
equation, and rates/noise tuned so the adaptive and fixed gating runs
reproduce the headline success rates and the n=2 time-tag accuracy.
"""

from __future__ import annotations

import dataclasses
import json
from dataclasses import dataclass, field, fields
from pathlib import Path
from typing import Any, Optional

from .analysis import AnalysisParams
from .extraction import ExtractionParams
from .gating import GatingConfig
from .intensifier import IntensifierParams, OpticsMap
from .readout import ReadoutParams
from .source import SourceParams
from .timetag import TimetagParams


class ConfigError(ValueError):
    """Invalid configuration; the message names the offending field."""


@dataclass
class RunConfig:
    seed: int = 0
    n_frames: int = 1000
    source: SourceParams = field(default_factory=SourceParams)
    intensifier: IntensifierParams = field(default_factory=IntensifierParams)
    optics: OpticsMap = field(default_factory=OpticsMap)
    readout: ReadoutParams = field(default_factory=ReadoutParams)
    gating: GatingConfig = field(default_factory=GatingConfig)
    extraction: ExtractionParams = field(default_factory=ExtractionParams)
    analysis: AnalysisParams = field(default_factory=AnalysisParams)
    timetag: TimetagParams = field(default_factory=TimetagParams)
    render: bool = False
    frame_size: tuple[int, int] = (512, 512)  # (height, width), render only
    keep_truth: bool = True

    def validate(self) -> None:
        if not isinstance(self.seed, int) or self.seed < 0:
            raise ConfigError("seed: must be a non-negative integer")
        if self.n_frames < 1:
            raise ConfigError("n_frames: must be >= 1")
        self.source.validate("source")
        self.intensifier.validate("intensifier")
        self.optics.validate("optics")
        self.readout.validate("readout")
        self.gating.validate("gating")
        self.extraction.validate("extraction")
        self.analysis.validate("analysis")
        self.timetag.validate("timetag")
        # cross-block constraints
        if self.extraction.roi_half_size < 2.0 * self.readout.psf_sigma:
            raise ConfigError(
                "extraction.roi_half_size: must be >= 2 * readout.psf_sigma"
            )
        reach = self.optics.k_to_pixel_scale * self.source.k_max
        if (
            self.optics.center_x - reach < 0
            or self.optics.center_y - reach < 0
            or self.optics.center_x + reach > self.intensifier.channels_x
            or self.optics.center_y + reach > self.intensifier.channels_y
        ):
            raise ConfigError(
                "optics: acceptance disk does not fit inside the channel grid"
            )
        if self.render and (self.frame_size[0] < 16 or self.frame_size[1] < 16):
            raise ConfigError("frame_size: render frames must be >= 16 px")

    # -- serialization ------------------------------------------------------

    def to_dict(self) -> dict[str, Any]:
        def as_plain(obj: Any) -> Any:
            if dataclasses.is_dataclass(obj) and not isinstance(obj, type):
                return {
                    f.name: as_plain(getattr(obj, f.name))
                    for f in fields(obj)
                }
            if isinstance(obj, tuple):
                return list(obj)
            return obj

        return as_plain(self)

    @classmethod
    def from_dict(cls, data: dict[str, Any]) -> "RunConfig":
        def build(klass, block: dict[str, Any], path: str):
            known = {f.name: f for f in fields(klass)}
            kwargs = {}
            for key, value in block.items():
                if key not in known:
                    raise ConfigError(f"{path}.{key}: unknown field")
                kwargs[key] = value
            return klass(**kwargs)

        blocks = {
            "source": SourceParams,
            "intensifier": IntensifierParams,
            "optics": OpticsMap,
            "readout": ReadoutParams,
            "gating": GatingConfig,
            "extraction": ExtractionParams,
            "analysis": AnalysisParams,
            "timetag": TimetagParams,
        }
        kwargs: dict[str, Any] = {}
        for key, value in data.items():
            if key in blocks:
                if not isinstance(value, dict):
                    raise ConfigError(f"{key}: must be an object")
                kwargs[key] = build(blocks[key], value, key)
            elif key in ("seed", "n_frames", "render", "keep_truth"):
                kwargs[key] = value
            elif key == "frame_size":
                kwargs[key] = tuple(value)
            else:
                raise ConfigError(f"{key}: unknown field")
        cfg = cls(**kwargs)
        # tuples survive JSON as lists
        for name in ("n_values", "thresholds"):
            val = getattr(cfg.timetag, name)
            if isinstance(val, list):
                setattr(cfg.timetag, name, tuple(val))
        cfg.validate()
        return cfg

    def save(self, path: str | Path) -> None:
        Path(path).write_text(json.dumps(self.to_dict(), indent=2) + "\n")

    @classmethod
    def load(cls, path: str | Path) -> "RunConfig":
        try:
            data = json.loads(Path(path).read_text())
        except json.JSONDecodeError as exc:
            raise ConfigError(f"config file {path}: invalid JSON ({exc})")
        if not isinstance(data, dict):
            raise ConfigError(f"config file {path}: must hold a JSON object")
        return cls.from_dict(data)


def paper_like(seed: int = 1) -> RunConfig:
    """Committed calibration reproducing the headline figures.

    Ring radius and radial spread solve the mode-count equation for 194
    modes at the published sum widths; pair, noise, and false-pulse rates
    with the detector noise levels were fixed by the calibration scan in
    scripts/calibrate.py (the measured rates are unpublished, so these are
    reproduction targets, not predictions).
    """
    cfg = RunConfig(
        seed=seed,
        n_frames=10000,
        source=SourceParams(
            ring_radius=330.0,
            ring_radial_sigma=17.0,
            sum_sigma_x=24.43,
            sum_sigma_y=22.67,
            pair_rate=2.4e6,
            noise_rate=7.0e5,
            pair_time_jitter=0.0,
            k_max=480.0,
        ),
        intensifier=IntensifierParams(
            qe=0.20,
            channels_x=3000,
            channels_y=3000,
            brightness_shape=1.3,
            brightness_scale=100.0,
            crosstalk_prob=0.05,
            crosstalk_radius=50.0,
            crosstalk_brightness_factor=0.3,
        ),
        optics=OpticsMap(k_to_pixel_scale=3.0, center_x=1500.0, center_y=1500.0),
        readout=ReadoutParams(
            psf_sigma=1.5,
            cmos_gain=10.0,
            cmos_noise_sigma=2.0,
            cmos_mult_sigma=0.19,
            pmt_fraction=0.10,
            pmt_gain=0.01,
            pmt_mult_sigma=0.19,
            pmt_noise_sigma=0.0,
            pmt_false_pulse_rate=3.0e5,
            pmt_false_amp_scale=0.05,
            discriminator_threshold=0.012,
            pulse_pair_resolution=5.0,
        ),
        gating=GatingConfig(
            mode="adaptive",
            n_target=1,
            gate_ns=150.0,
            feedback_latency_ns=150.0,
            fire_all_duration_ns=9.0e6,
            frame_period_ns=1.0e7,
        ),
        extraction=ExtractionParams(
            detect_threshold=24.0,
            roi_half_size=6,
            max_iterations=60,
            convergence_tol=1e-5,
            sigma_min=0.3,
            sigma_max=6.0,
            min_peak_separation=4.0,
            sigma_init=1.5,
        ),
    )
    cfg.validate()
    return cfg
