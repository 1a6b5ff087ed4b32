"""Simulator and analysis pipeline for an adaptively gated hybrid
intensified single-photon camera with dual PMT / sCMOS readout."""

from .config import ConfigError, RunConfig, paper_like
from .gating import FrameRecord, GatingConfig, frame_rng, run_batch, run_frame
from .source import PhotonEvent, SourceParams, TransverseMomentum

__version__ = "0.1.0"

__all__ = [
    "ConfigError",
    "FrameRecord",
    "GatingConfig",
    "PhotonEvent",
    "RunConfig",
    "SourceParams",
    "TransverseMomentum",
    "frame_rng",
    "paper_like",
    "run_batch",
    "run_frame",
    "__version__",
]
