"""Command-line entry point: reconstruct, simulate, evaluate and fit-crf.

Exit codes: 0 success, 1 invalid input or configuration, 2 numerical failure.
"""
from __future__ import annotations

import argparse
import hashlib
import logging
import sys
import time
from pathlib import Path

import numpy as np

from . import __version__
from .config import ConfigError, RunConfig, load_config
from .events import StreamOrderError
from .frames import CrfFitError, CrfTable, fit_crf
from .io import (FormatError, read_crf, read_events, read_exposure_stack, read_float_sequence,
                 read_frame_manifest, to_us, tone_map, write_crf, write_events,
                 write_float_sequence, write_frame_manifest)
from .metrics import MetricError, evaluate_sequence
from .report import plot_frame_panels, plot_metrics, plot_sequence_strip

logger = logging.getLogger("akfhdr")

EXIT_OK, EXIT_INVALID, EXIT_NUMERICAL = 0, 1, 2
INCOMPLETE = "INCOMPLETE"


class NumericalError(RuntimeError):
    pass


# shared plumbing ----------------------------------------------------------------------

def _require(cfg: RunConfig, *keys):
    for key in keys:
        value = getattr(cfg, key)
        if value is None:
            raise ConfigError(f"missing required setting '{key}'")
        if key != "output" and not Path(value).exists():
            raise ConfigError(f"{key} file not found: {value}")


def _sha256(path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


def _start_output(out: Path) -> Path:
    out.mkdir(parents=True, exist_ok=True)
    marker = out / INCOMPLETE
    marker.write_text("run did not finish; outputs in this directory are partial\n")
    return marker


def _write_run_log(out: Path, command: str, cfg: RunConfig, inputs: dict, extra: str = ""):
    lines = [f"# akfhdr {__version__} {command}",
             f"# started {time.strftime('%Y-%m-%dT%H:%M:%S')}",
             f"# numpy {np.__version__}"]
    for key, path in inputs.items():
        lines.append(f"# input {key} {path} sha256={_sha256(path)}")
    text = "\n".join(lines) + "\n" + cfg.to_text() + extra
    (out / "run_log.txt").write_text(text, encoding="utf-8")


def _check_finite(*arrays):
    for a in arrays:
        if not np.all(np.isfinite(a)):
            raise NumericalError("non-finite values in the result")


# commands -----------------------------------------------------------------------------

def cmd_reconstruct(cfg: RunConfig) -> int:
    from .filter import reconstruct

    _require(cfg, "events", "frames", "crf", "output")
    crf = read_crf(cfg.crf)
    frames = read_frame_manifest(cfg.frames)
    events = read_events(cfg.events)
    height, width = frames[0].raw.shape
    events.validate(width, height)
    if len(frames) < 2:
        raise ConfigError("reconstruction needs at least two frames")
    for a, b in zip(frames[:-1], frames[1:]):
        if a.end > b.start:
            raise ConfigError(f"exposures of frames at {a.tau} s and {b.tau} s overlap")
    if cfg.r_max is not None:
        crf = CrfTable(crf.response, crf.irradiance, crf.weight, cfg.r_max)

    out = Path(cfg.output)
    marker = _start_output(out)
    t0 = time.perf_counter()
    rec = reconstruct(events, frames, crf, cfg.filter_config(), cfg.event_params(),
                      cfg.frame_params(), cfg.augment_params(), threads=cfg.threads)
    elapsed = time.perf_counter() - t0
    _check_finite(rec.log_intensity, rec.covariance)
    linear = rec.linear()
    scale = cfg.tone_scale if cfg.tone_scale is not None else 255.0 / np.log(256.0 + cfg.i_offset)
    preview = tone_map(rec.log_intensity, scale=scale, offset=0.0)
    write_float_sequence(out, to_us(rec.times), linear, preview)
    plot_sequence_strip(linear, out / "reconstruction.png", title=f"{cfg.mode} reconstruction")
    _write_run_log(out, "reconstruct", cfg,
                   {"events": cfg.events, "frames": cfg.frames, "crf": cfg.crf},
                   f"# events {len(events)} frames_out {len(rec.times)} seconds {elapsed:.3f}\n")
    marker.unlink()
    logger.info("reconstructed %d frames from %d events in %.2f s", len(rec.times), len(events),
                elapsed)
    return EXIT_OK


def _load_video(cfg: RunConfig):
    from .synth import SCENES, GroundTruthVideo

    if cfg.video is not None:
        _require(cfg, "video")
        seq = read_float_sequence(cfg.video)
        if seq.frames.min() < 0:
            raise ConfigError("ground-truth irradiance must be non-negative")
        return GroundTruthVideo(seq.frames, seq.timestamps)
    if cfg.scene not in SCENES:
        raise ConfigError(f"unknown scene {cfg.scene!r}; choose from {sorted(SCENES)}")
    if cfg.scene == "translate":
        return SCENES["translate"](cfg.width, cfg.height, cfg.duration, cfg.samples, cfg.speed,
                                   cfg.low, cfg.high, cfg.flicker, cfg.seed)
    return SCENES[cfg.scene](cfg.width, cfg.height, cfg.duration, cfg.samples, low=cfg.low,
                             high=cfg.high, seed=cfg.seed)


def cmd_simulate(cfg: RunConfig) -> int:
    from .synth import SimParams, frame_schedule, generate_events, render_ldr_frames

    _require(cfg, "output")
    crf_model = read_crf(cfg.crf) if cfg.crf is not None else CrfTable.linear()
    if cfg.crf is not None:
        _require(cfg, "crf")
    try:
        params = SimParams(c_true=cfg.c_true, refractory=cfg.refractory,
                           event_noise_rate=cfg.event_noise_rate, crf_model=crf_model,
                           exposure=cfg.exposure,
                           saturation_bounds=((cfg.saturation_low, cfg.saturation_high)
                                              if cfg.saturate else None),
                           i_offset=cfg.i_offset)
    except ValueError as exc:
        raise ConfigError(str(exc)) from None
    video = _load_video(cfg)
    if cfg.n_frames < 2:
        raise ConfigError("n_frames must be at least 2")
    taus = frame_schedule(video.timestamps[0], video.timestamps[-1], cfg.n_frames, cfg.exposure)
    if np.min(np.diff(taus)) < cfg.exposure:
        raise ConfigError("exposure exceeds the frame period")

    out = Path(cfg.output)
    marker = _start_output(out)
    events = generate_events(video, params, seed=cfg.seed)
    frames = render_ldr_frames(video, params, taus)
    write_events(out / "events.csv", events)
    write_frame_manifest(out, frames)
    gt = np.stack([video.irradiance_at(t, cfg.i_offset) for t in taus])
    write_float_sequence(out / "gt", to_us(taus), gt)
    write_crf(out / "crf.csv", params.effective_crf())
    manifest = [f"seed = {cfg.seed}", f"c_true = {params.c_true}",
                f"refractory = {params.refractory}",
                f"event_noise_rate = {params.event_noise_rate}",
                f"exposure = {params.exposure}",
                f"saturation_bounds = {params.saturation_bounds}",
                f"i_offset = {params.i_offset}",
                f"crf_model = {cfg.crf if cfg.crf is not None else 'linear'}",
                f"video = {cfg.video if cfg.video is not None else 'scene:' + cfg.scene}",
                f"width = {video.shape[1]}", f"height = {video.shape[0]}",
                f"n_events = {len(events)}", f"n_frames = {len(frames)}"]
    (out / "sim_manifest.txt").write_text("\n".join(manifest) + "\n", encoding="utf-8")
    plot_sequence_strip(gt, out / "ground_truth.png", title="ground truth")
    inputs = {k: getattr(cfg, k) for k in ("video", "crf") if getattr(cfg, k) is not None}
    _write_run_log(out, "simulate", cfg, inputs)
    marker.unlink()
    logger.info("simulated %d events and %d frames", len(events), len(frames))
    return EXIT_OK


def cmd_evaluate(cfg: RunConfig) -> int:
    _require(cfg, "reconstruction", "reference", "output")
    rec = read_float_sequence(cfg.reconstruction)
    ref = read_float_sequence(cfg.reference)
    if rec.frames.shape[1:] != ref.frames.shape[1:]:
        raise MetricError(f"frame size {rec.frames.shape[1:]} differs from reference "
                          f"{ref.frames.shape[1:]}")
    n = min(len(rec.frames), len(ref.frames))
    if len(rec.frames) != len(ref.frames):
        logger.warning("frame counts differ (%d vs %d); comparing the first %d",
                       len(rec.frames), len(ref.frames), n)
    keep = []
    for i in range(n):
        gap = abs(int(rec.timestamps_us[i]) - int(ref.timestamps_us[i]))
        if gap > cfg.tolerance_us:
            logger.warning("skipping frame %d: timestamps %d and %d us differ by %d us", i,
                           rec.timestamps_us[i], ref.timestamps_us[i], gap)
        else:
            keep.append(i)
    skipped = n - len(keep)

    out = Path(cfg.output)
    marker = _start_output(out)
    if keep:
        report = evaluate_sequence(rec.frames[keep], ref.frames[keep], rec.timestamps_us[keep],
                                   align=cfg.align)
        report.frames = keep
    else:
        from .metrics import MetricReport
        report = MetricReport()
    report.skipped = skipped
    _check_finite(np.asarray(report.mse, dtype=float), np.asarray(report.ssim, dtype=float))
    (out / "metrics.csv").write_text(report.to_csv(), encoding="utf-8")
    if keep:
        plot_metrics(report, out / "metrics.png")
        plot_frame_panels(rec.frames[keep], ref.frames[keep], out / "frames.png")
    _write_run_log(out, "evaluate", cfg,
                   {"reconstruction": cfg.reconstruction, "reference": cfg.reference})
    marker.unlink()
    print(f"{'frames':>8} {'MSE(x1e-2)':>12} {'SSIM':>8}")
    print(f"{report.count:>8d} {report.mean_mse * 100:>12.4f} {report.mean_ssim:>8.4f}")
    return EXIT_OK


def cmd_fit_crf(cfg: RunConfig) -> int:
    _require(cfg, "stack", "output")
    stack = read_exposure_stack(cfg.stack)
    if len(stack) < 3:
        raise CrfFitError(f"need at least 3 exposures, got {len(stack)}")
    shapes = {img.shape for _, img in stack}
    if len(shapes) != 1:
        raise ConfigError("exposure stack images differ in size")
    crf = fit_crf(stack)
    _check_finite(crf.irradiance, crf.weight)
    out = Path(cfg.output)
    marker = _start_output(out)
    write_crf(out / "crf.csv", crf)
    _write_run_log(out, "fit-crf", cfg, {"stack": cfg.stack})
    marker.unlink()
    logger.info("wrote %s", out / "crf.csv")
    return EXIT_OK


COMMANDS = {"reconstruct": cmd_reconstruct, "simulate": cmd_simulate,
            "evaluate": cmd_evaluate, "fit-crf": cmd_fit_crf}


# argument parsing ---------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="akfhdr", description=__doc__.splitlines()[0])
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    parser.add_argument("-v", "--verbose", action="store_true", help="debug logging")
    shared = argparse.ArgumentParser(add_help=False)
    shared.add_argument("--config", metavar="PATH", help="key = value configuration file")
    shared.add_argument("--output", metavar="DIR", help="output directory")
    shared.add_argument("--threads", type=int, metavar="N", help="worker threads")
    shared.add_argument("--seed", type=int, metavar="U64", help="random seed")
    shared.add_argument("--set", action="append", default=[], metavar="KEY=VALUE",
                        help="override any configuration key (repeatable)")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("reconstruct", parents=[shared], help="fuse events and frames")
    p.add_argument("--events", metavar="CSV")
    p.add_argument("--frames", metavar="CSV", help="frame manifest")
    p.add_argument("--crf", metavar="CSV")
    p.add_argument("--mode", choices=["akf", "constant-gain"])
    p.add_argument("--k", type=float, help="gain of constant-gain mode (1/s)")
    p.add_argument("--output-rate", type=float, metavar="HZ",
                   help="output frame rate (default: one output per input frame)")

    p = sub.add_parser("simulate", parents=[shared], help="synthesise an event/frame dataset")
    p.add_argument("--video", metavar="CSV", help="ground-truth float frame manifest")
    p.add_argument("--scene", help="procedural scene when no video is given")
    p.add_argument("--crf", metavar="CSV", help="sensor response (default linear)")
    p.add_argument("--c-true", type=float)
    p.add_argument("--event-noise-rate", type=float)
    p.add_argument("--refractory", type=float)
    p.add_argument("--exposure", type=float)
    p.add_argument("--n-frames", type=int)

    p = sub.add_parser("evaluate", parents=[shared], help="MSE and SSIM against a reference")
    p.add_argument("--reconstruction", metavar="CSV")
    p.add_argument("--reference", metavar="CSV")
    p.add_argument("--align", action="store_true", default=None,
                   help="fit a global log-affine gain/offset before scoring")

    p = sub.add_parser("fit-crf", parents=[shared], help="estimate a CRF from an exposure stack")
    p.add_argument("--stack", metavar="CSV", help="exposure_us,filename manifest")
    return parser


def _overrides(args) -> dict:
    skip = {"command", "config", "set", "verbose"}
    values = {k: v for k, v in vars(args).items() if k not in skip and v is not None}
    from .config import _convert, _TYPES
    for item in args.set:
        if "=" not in item:
            raise ConfigError(f"--set expects KEY=VALUE, got {item!r}")
        key, value = (s.strip() for s in item.split("=", 1))
        key = key.replace("-", "_")
        if key not in _TYPES:
            raise ConfigError(f"unknown key {key!r}")
        values.setdefault(key, _convert(key, value))
    return values


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.INFO,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        cfg = load_config(args.config, _overrides(args))
        return COMMANDS[args.command](cfg)
    except (ConfigError, FormatError, StreamOrderError, CrfFitError, MetricError) as exc:
        logger.error("%s", exc)
        return EXIT_INVALID
    except (NumericalError, np.linalg.LinAlgError, ArithmeticError) as exc:
        logger.error("numerical failure: %s", exc)
        return EXIT_NUMERICAL
    except ValueError as exc:
        logger.error("%s", exc)
        return EXIT_INVALID


if __name__ == "__main__":
    sys.exit(main())
