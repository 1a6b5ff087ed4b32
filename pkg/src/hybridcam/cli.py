"""Command-line pipeline: simulate, analyze, compare-gating, timetag.

Frames are stored as JSON lines (header line with config echo and format
version, then one frame per line) so streams can be sharded and merged by
frame id.  All randomness derives from the run seed through the per-frame
stream derivation in gating.frame_rng, which makes output byte-identical
for any worker count.  Results documents confine wall-clock data to a
"meta" section; everything else is deterministic under a fixed seed.
"""

from __future__ import annotations

import argparse
import json
import math
import multiprocessing
import sys
import time
from dataclasses import asdict
from pathlib import Path
from typing import Any, Iterable, Iterator, Optional

import numpy as np

from . import analysis as ana
from . import timetag as tt
from .config import ConfigError, RunConfig, paper_like
from .extraction import DetectedSpot
from .gating import FrameRecord, GateTrace, frame_rng, run_frame
from .readout import PmtPulse
from .source import PhotonEvent, TransverseMomentum

FRAME_FORMAT_VERSION = "1.0"
RESULTS_FORMAT_VERSION = "1.0"

EXIT_OK = 0
EXIT_VALIDATION = 1
EXIT_IO = 2
EXIT_ANALYSIS = 3


class FormatError(RuntimeError):
    """Frame or results file violates the declared format."""


# ---------------------------------------------------------------------------
# Frame persistence


def frame_to_line(frame: FrameRecord) -> str:
    rec: dict[str, Any] = {
        "frame_id": frame.frame_id,
        "gate": {
            "open_ns": frame.gate.open_t,
            "close_ns": frame.gate.close_t,
            "cause": frame.gate.cause,
        },
        "spots": [
            {"x": s.x, "y": s.y, "amplitude": s.amplitude, "sigma": s.sigma}
            for s in frame.spots
        ],
        "pulses": [
            {"t_ns": p.t, "amplitude": p.amplitude} for p in frame.pulses
        ],
    }
    if frame.truth is not None:
        rec["truth"] = [
            {
                "t_ns": ph.t,
                "kx": ph.k.kx,
                "ky": ph.k.ky,
                "origin": ph.origin,
                "pair_id": ph.pair_id,
            }
            for ph in frame.truth
        ]
    return json.dumps(rec, separators=(",", ":"))


def line_to_frame(rec: dict[str, Any]) -> FrameRecord:
    gate = rec["gate"]
    spots = [
        DetectedSpot(
            x=s["x"], y=s["y"], amplitude=s["amplitude"], sigma=s["sigma"]
        )
        for s in rec["spots"]
    ]
    pulses = [PmtPulse(p["t_ns"], p["amplitude"]) for p in rec["pulses"]]
    truth = None
    if "truth" in rec:
        truth = [
            PhotonEvent(
                t=ph["t_ns"],
                k=TransverseMomentum(ph["kx"], ph["ky"]),
                origin=ph["origin"],
                pair_id=ph["pair_id"],
            )
            for ph in rec["truth"]
        ]
    return FrameRecord(
        frame_id=rec["frame_id"],
        gate=GateTrace(gate["open_ns"], gate["close_ns"], gate["cause"]),
        spots=spots,
        pulses=pulses,
        truth=truth,
        trigger_count=rec.get("trigger_count", 0),
    )


def _check_version(version: str, expected: str, what: str) -> None:
    major = str(version).split(".", 1)[0]
    if major != expected.split(".", 1)[0]:
        raise FormatError(
            f"{what}: unsupported major format version {version!r}"
        )


def _render_chunk(args: tuple[RunConfig, int, int, int]) -> list[str]:
    config, seed, start, count = args
    return [
        frame_to_line(run_frame(config, fid, frame_rng(seed, fid)))
        for fid in range(start, start + count)
    ]


def write_frames(
    config: RunConfig,
    path: str | Path,
    n_frames: Optional[int] = None,
    workers: int = 1,
) -> int:
    """Simulate and persist a frame stream; returns the frame count."""
    if n_frames is None:
        n_frames = config.n_frames
    if n_frames < 1:
        raise ConfigError("n_frames: must be >= 1")
    header = {
        "format_version": FRAME_FORMAT_VERSION,
        "kind": "hybridcam-frames",
        "config": config.to_dict(),
    }
    seed = config.seed
    with open(path, "w", encoding="utf-8") as sink:
        sink.write(json.dumps(header, separators=(",", ":")) + "\n")
        if workers <= 1:
            for fid in range(n_frames):
                sink.write(
                    frame_to_line(run_frame(config, fid, frame_rng(seed, fid)))
                    + "\n"
                )
        else:
            chunk = max(1, math.ceil(n_frames / (workers * 8)))
            jobs = [
                (config, seed, start, min(chunk, n_frames - start))
                for start in range(0, n_frames, chunk)
            ]
            with multiprocessing.Pool(workers) as pool:
                for lines in pool.imap(_render_chunk, jobs):
                    sink.write("\n".join(lines) + "\n")
    return n_frames


def read_frames(path: str | Path) -> tuple[dict[str, Any], Iterator[FrameRecord]]:
    """Open a frame stream; returns (header, frame iterator).

    Corrupt lines are skipped and counted; more than 1% corrupt lines
    raises FormatError when the iterator is exhausted.
    """
    handle = open(path, "r", encoding="utf-8")
    header_line = handle.readline()
    try:
        header = json.loads(header_line)
    except json.JSONDecodeError as exc:
        handle.close()
        raise FormatError(f"{path}: missing or corrupt header line ({exc})")
    if header.get("kind") != "hybridcam-frames":
        handle.close()
        raise FormatError(f"{path}: not a frame stream file")
    _check_version(header.get("format_version", "?"), FRAME_FORMAT_VERSION,
                   str(path))

    def frames() -> Iterator[FrameRecord]:
        corrupt = 0
        total = 0
        try:
            for line in handle:
                if not line.strip():
                    continue
                total += 1
                try:
                    yield line_to_frame(json.loads(line))
                except (json.JSONDecodeError, KeyError, TypeError):
                    corrupt += 1
        finally:
            handle.close()
        if total and corrupt / total > 0.01:
            raise FormatError(
                f"{path}: {corrupt}/{total} corrupt frame lines (> 1%)"
            )

    return header, frames()


# ---------------------------------------------------------------------------
# Result emission helpers


def histogram_to_csv(hist: ana.JointHistogram, path: Path) -> None:
    centers = hist.geometry.centers()
    with open(path, "w", encoding="utf-8") as f:
        f.write(f"# axis={hist.axis} kind={hist.kind} bins={hist.geometry.bins}"
                f" lo={hist.geometry.lo} hi={hist.geometry.hi}"
                f" accepted={hist.accepted_pairs} excluded={hist.excluded_pairs}"
                f" overflow={hist.overflow} scale={hist.scale}\n")
        f.write("i,j,c1,c2,count\n")
        for i in range(hist.geometry.bins):
            for j in range(hist.geometry.bins):
                f.write(f"{i},{j},{centers[i]!r},{centers[j]!r},"
                        f"{hist.counts[i, j]!r}\n")


def _stats_dict(stats: ana.GatingStats) -> dict[str, Any]:
    return {
        "counts": {str(i): int(c) for i, c in enumerate(stats.counts)},
        "max_count": stats.max_count,
        "n_frames": stats.n_frames,
        "success_rate": stats.success_rate,
        "empty_fraction": stats.empty_fraction,
    }


def _write_json(doc: dict[str, Any], path: Path) -> None:
    path.write_text(json.dumps(doc, indent=2, sort_keys=False) + "\n")


def analyze_frames(
    frames: Iterable[FrameRecord], config: RunConfig
) -> tuple[dict[str, Any], dict[str, ana.JointHistogram]]:
    """Full correlation analysis; returns (results document, histograms)."""
    params = config.analysis
    table = ana.build_spot_table(frames, config.optics)
    if table.n_frames == 0:
        raise ana.AnalysisError("frame stream holds no frames")
    jg = ana.joint_geometry(config.source, params)
    sg = ana.sum_geometry(config.source, params)
    ig = ana.intensity_geometry(config.source, params)

    hists: dict[str, ana.JointHistogram] = {}
    for axis, name in ((ana.AXIS_XX, "joint_xx"), (ana.AXIS_YY, "joint_yy")):
        same = ana.accumulate_joint(table, axis, jg, params)
        acc = ana.accumulate_accidentals(table, axis, jg, params)
        hists[name] = ana.subtract(same, acc)
    hists["sum_plane"] = ana.sum_projection(table, sg, params)
    hists["intensity"] = ana.accumulate_intensity(table, ig)

    peak = ana.fit_peak(hists["sum_plane"])
    ring = ana.fit_ring(hists["intensity"], params.ring_profile_bins)
    n_modes, mode_meta = ana.mode_count(ring, peak)
    stats = ana.gating_stats(
        np.diff(table.offsets).tolist(), max_count=8
    )

    doc = {
        "format_version": RESULTS_FORMAT_VERSION,
        "kind": "hybridcam-results",
        "config": config.to_dict(),
        "counters": {
            "frames": table.n_frames,
            "photons": int(len(table.x)),
            "accepted_pairs": hists["sum_plane"].accepted_pairs,
            "excluded_pairs": hists["sum_plane"].excluded_pairs,
            "subtraction_scale": hists["sum_plane"].scale,
            "sum_overflow": hists["sum_plane"].overflow,
        },
        "fits": {
            "sum_peak": {
                "center_kx": peak.center.kx,
                "center_ky": peak.center.ky,
                "sigma_x": peak.sigma_x,
                "sigma_y": peak.sigma_y,
                "peak_amplitude": peak.peak_amplitude,
                "fit_residual": peak.fit_residual,
            },
            "ring": {
                "k_radius": ring.k_radius,
                "radial_width": ring.radial_width,
                "center_kx": ring.center.kx,
                "center_ky": ring.center.ky,
            },
        },
        "mode_count": {
            "pipeline": n_modes,
            "closed_form": ana.closed_form_mode_count(config.source),
            **mode_meta,
        },
        "gating": _stats_dict(stats),
    }
    return doc, hists


# ---------------------------------------------------------------------------
# Subcommands


def cmd_simulate(args: argparse.Namespace) -> int:
    config = _load_config(args)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    path = out / "frames.jsonl"
    n = write_frames(config, path, args.frames, workers=args.workers)
    print(f"wrote {n} frames to {path}")
    return EXIT_OK


def cmd_analyze(args: argparse.Namespace) -> int:
    config = _load_config(args)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    header, frames = read_frames(args.frames_file)
    doc, hists = analyze_frames(frames, config)
    doc["meta"] = {"created_unix": time.time()}
    for name, hist in hists.items():
        histogram_to_csv(hist, out / f"{name}.csv")
    _write_json(doc, out / "results.json")
    print(f"sigma_x={doc['fits']['sum_peak']['sigma_x']:.3f} "
          f"sigma_y={doc['fits']['sum_peak']['sigma_y']:.3f} "
          f"modes={doc['mode_count']['pipeline']:.1f}")
    return EXIT_OK


DEFAULT_COMPARISON = ("adaptive:1", "fixed:150", "fixed:500", "fixed:5000")


def compare_gating_configs(
    config: RunConfig, specs: Iterable[str], n_frames: int
) -> dict[str, Any]:
    import copy

    specs = list(specs)
    if len(specs) < 2:
        raise ConfigError("compare-gating: need at least two configurations")
    runs: dict[str, Any] = {}
    for spec in specs:
        kind, _, value = spec.partition(":")
        cfg = copy.deepcopy(config)
        if kind == "adaptive":
            cfg.gating.mode = "adaptive"
            cfg.gating.n_target = int(value or 1)
            label = f"adaptive_n{cfg.gating.n_target}"
        elif kind == "fixed":
            cfg.gating.mode = "fixed"
            cfg.gating.gate_ns = float(value)
            label = f"fixed_{value}ns"
        else:
            raise ConfigError(f"compare-gating: bad spec {spec!r}")
        cfg.validate()
        counts = (
            len(run_frame(cfg, fid, frame_rng(cfg.seed, fid)).spots)
            for fid in range(n_frames)
        )
        runs[label] = _stats_dict(ana.gating_stats(counts, max_count=8))
    labels = list(runs)
    first, second = labels[0], labels[1]
    ratios = {
        "success_ratio": (
            runs[first]["success_rate"] / runs[second]["success_rate"]
            if runs[second]["success_rate"] > 0 else math.inf
        ),
        "empty_frame_ratio": (
            runs[second]["empty_fraction"] / runs[first]["empty_fraction"]
            if runs[first]["empty_fraction"] > 0 else math.inf
        ),
        "numerator": first,
        "denominator": second,
    }
    return {
        "format_version": RESULTS_FORMAT_VERSION,
        "kind": "hybridcam-gating-comparison",
        "config": config.to_dict(),
        "n_frames": n_frames,
        "runs": runs,
        "ratios": ratios,
    }


def cmd_compare_gating(args: argparse.Namespace) -> int:
    config = _load_config(args)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    doc = compare_gating_configs(
        config, args.gates or DEFAULT_COMPARISON,
        args.frames or config.n_frames,
    )
    doc["meta"] = {"created_unix": time.time()}
    _write_json(doc, out / "gating_comparison.json")
    with open(out / "gating_counts.csv", "w", encoding="utf-8") as f:
        f.write("configuration,photons,frames\n")
        for label, stats in doc["runs"].items():
            for k, v in stats["counts"].items():
                f.write(f"{label},{k},{v}\n")
    for label, stats in doc["runs"].items():
        print(f"{label}: success={stats['success_rate']:.3f} "
              f"empty={stats['empty_fraction']:.3f}")
    return EXIT_OK


def cmd_timetag(args: argparse.Namespace) -> int:
    config = _load_config(args)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    if args.frames_file:
        _, frames = read_frames(args.frames_file)
    else:
        n = args.frames or config.n_frames
        frames = (
            run_frame(config, fid, frame_rng(config.seed, fid))
            for fid in range(n)
        )
    stats = tt.CollectStats()
    pairs = tt.collect_single_photon_pairs(
        frames, config.readout.discriminator_threshold, stats
    )
    need = 10 * max(config.timetag.n_values)
    if len(pairs) < need:
        raise tt.TimetagError(
            f"need at least {need} single-photon frames for the sweep, "
            f"collected {len(pairs)} from {stats.frames_seen} frames"
        )
    rng = np.random.default_rng(config.seed)
    curves = tt.accuracy_sweep(pairs, config.timetag, rng)
    with open(out / "accuracy_curves.csv", "w", encoding="utf-8") as f:
        f.write("n,threshold,rejected_fraction,accuracy,accepted,correct,total\n")
        for curve in curves:
            for (rej, acc), th, na, nc in zip(
                curve.points, curve.thresholds, curve.accepted, curve.correct
            ):
                f.write(f"{curve.n},{th!r},{rej!r},{acc!r},{na},{nc},"
                        f"{curve.total}\n")
    counts, ce, pe = tt.brightness_map(pairs)
    with open(out / "brightness_map.csv", "w", encoding="utf-8") as f:
        f.write("# log-binned camera (rows) vs pmt (cols) brightness counts\n")
        f.write("cmos_lo,cmos_hi,pmt_lo,pmt_hi,count\n")
        for i in range(counts.shape[0]):
            for j in range(counts.shape[1]):
                f.write(f"{ce[i]!r},{ce[i+1]!r},{pe[j]!r},{pe[j+1]!r},"
                        f"{int(counts[i, j])}\n")
    doc = {
        "format_version": RESULTS_FORMAT_VERSION,
        "kind": "hybridcam-timetag",
        "config": config.to_dict(),
        "meta": {"created_unix": time.time()},
        "single_photon_frames": len(pairs),
        "frames_seen": stats.frames_seen,
        "curves": {
            str(c.n): {"points": c.points, "thresholds": c.thresholds}
            for c in curves
        },
    }
    _write_json(doc, out / "timetag.json")
    for c in curves:
        if c.points:
            print(f"n={c.n}: accuracy at 0% rejection = {c.points[0][1]:.3f}")
    return EXIT_OK


def cmd_end_to_end(args: argparse.Namespace) -> int:
    config = _load_config(args)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    frames_path = out / "frames.jsonl"
    write_frames(config, frames_path, args.frames, workers=args.workers)
    ns = argparse.Namespace(**vars(args))
    ns.frames_file = str(frames_path)
    cmd_analyze(ns)
    cmd_compare_gating(argparse.Namespace(**{**vars(args), "gates": None}))
    cmd_timetag(ns)
    return EXIT_OK


# ---------------------------------------------------------------------------
# Entry point


def _load_config(args: argparse.Namespace) -> RunConfig:
    if getattr(args, "config", None):
        config = RunConfig.load(args.config)
    else:
        config = paper_like()
    if getattr(args, "seed", None) is not None:
        config.seed = args.seed
    if getattr(args, "frames", None) is not None:
        config.n_frames = args.frames
    config.validate()
    return config


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="hybridcam",
        description="Adaptively gated hybrid single-photon camera simulator",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p: argparse.ArgumentParser) -> None:
        p.add_argument("--config", help="JSON run configuration path")
        p.add_argument("--seed", type=int, help="override the config seed")
        p.add_argument("--out", default="out", help="output directory")
        p.add_argument("--frames", type=int, help="override frame count")
        p.add_argument("--workers", type=int, default=1)

    p_sim = sub.add_parser("simulate", help="write a frame stream")
    common(p_sim)
    p_sim.set_defaults(func=cmd_simulate)

    p_ana = sub.add_parser("analyze", help="correlation analysis of a stream")
    common(p_ana)
    p_ana.add_argument("frames_file", help="frames.jsonl from simulate")
    p_ana.set_defaults(func=cmd_analyze)

    p_cmp = sub.add_parser("compare-gating", help="adaptive vs fixed gating")
    common(p_cmp)
    p_cmp.add_argument(
        "--gates", nargs="+",
        help="configurations like adaptive:1 fixed:150 (default set of four)",
    )
    p_cmp.set_defaults(func=cmd_compare_gating)

    p_tt = sub.add_parser("timetag", help="brightness time-tag sweep")
    common(p_tt)
    p_tt.add_argument("--frames-file", dest="frames_file",
                      help="reuse an existing frame stream")
    p_tt.set_defaults(func=cmd_timetag)

    p_e2e = sub.add_parser("end-to-end", help="simulate then run all analyses")
    common(p_e2e)
    p_e2e.set_defaults(func=cmd_end_to_end)
    return parser


def main(argv: Optional[list[str]] = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except ConfigError as exc:
        print(f"configuration error: {exc}", file=sys.stderr)
        return EXIT_VALIDATION
    except (OSError, FormatError) as exc:
        print(f"i/o error: {exc}", file=sys.stderr)
        return EXIT_IO
    except (ana.AnalysisError, tt.TimetagError) as exc:
        print(f"analysis error: {exc}", file=sys.stderr)
        return EXIT_ANALYSIS


if __name__ == "__main__":
    sys.exit(main())
