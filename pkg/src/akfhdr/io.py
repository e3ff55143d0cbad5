"""Readers and writers for events, frame manifests, float frames and CRF tables.

All timestamps in files are integer microseconds.
"""
from __future__ import annotations

import csv
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from PIL import Image

from .events import EventArray
from .frames import N_SAMPLES, CrfTable, FrameObservation

US_PER_S = 1_000_000


class FormatError(ValueError):
    """Malformed input file; the message names the file and line."""

    def __init__(self, path, line, message):
        super().__init__(f"{path}:{line}: {message}")
        self.path = path
        self.line = line


def to_us(t_seconds) -> np.ndarray:
    return np.round(np.asarray(t_seconds, dtype=np.float64) * US_PER_S).astype(np.int64)


def _rows(path: Path):
    """Non-comment, non-blank CSV rows with their 1-based line numbers."""
    with open(path, newline="", encoding="utf-8") as fh:
        for n, line in enumerate(fh, start=1):
            s = line.strip()
            if not s or s.startswith("#"):
                continue
            yield n, [c.strip() for c in next(csv.reader([s]))]


def _int(path, n, text, what):
    try:
        return int(text)
    except ValueError:
        raise FormatError(path, n, f"{what} is not an integer: {text!r}") from None


# events -------------------------------------------------------------------------------

def read_events(path) -> EventArray:
    """Parse ``t_us,x,y,p`` lines; ``p`` is 0 or 1. An optional header row is allowed."""
    path = Path(path)
    t, x, y, p = [], [], [], []
    prev = -1
    for n, row in _rows(path):
        if row[0] == "t_us":
            continue
        if len(row) != 4:
            raise FormatError(path, n, f"expected 4 fields, got {len(row)}")
        tu, xi, yi, pi = (_int(path, n, v, k) for v, k in zip(row, ("t_us", "x", "y", "p")))
        if tu < 0:
            raise FormatError(path, n, "negative timestamp")
        if tu < prev:
            raise FormatError(path, n, "events not sorted by t_us")
        if pi not in (0, 1):
            raise FormatError(path, n, f"polarity must be 0 or 1, got {pi}")
        if xi < 0 or yi < 0:
            raise FormatError(path, n, "negative pixel coordinate")
        prev = tu
        t.append(tu)
        x.append(xi)
        y.append(yi)
        p.append(1 if pi else -1)
    return EventArray(np.array(t, dtype=np.int64), np.array(x, dtype=np.int32),
                      np.array(y, dtype=np.int32), np.array(p, dtype=np.int8))


def write_events(path, events: EventArray):
    path = Path(path)
    pol = (events.polarity > 0).astype(np.int64)
    data = np.column_stack([events.t_us, events.x, events.y, pol]).astype(np.int64)
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        fh.write("# t_us,x,y,p\n")
        if len(data):
            np.savetxt(fh, data, fmt="%d", delimiter=",")


# 8-bit images -------------------------------------------------------------------------

def read_gray8(path) -> np.ndarray:
    path = Path(path)
    try:
        with Image.open(path) as im:
            if im.mode not in ("L", "P", "I", "I;16"):
                raise FormatError(path, 0, f"expected 8-bit grayscale, got mode {im.mode}")
            arr = np.asarray(im.convert("L"), dtype=np.uint8)
    except (OSError, SyntaxError) as exc:
        raise FormatError(path, 0, f"cannot read image: {exc}") from None
    return arr


def write_gray8(path, image):
    Image.fromarray(np.asarray(image, dtype=np.uint8), mode="L").save(path)


# LDR frame manifest -------------------------------------------------------------------

def read_frame_manifest(path) -> list[FrameObservation]:
    """Frames listed as ``timestamp_us,exposure_us,filename`` (paths relative to the manifest)."""
    path = Path(path)
    frames = []
    shape = None
    for n, row in _rows(path):
        if row[0] == "timestamp_us":
            continue
        if len(row) != 3:
            raise FormatError(path, n, f"expected 3 fields, got {len(row)}")
        t_us = _int(path, n, row[0], "timestamp_us")
        e_us = _int(path, n, row[1], "exposure_us")
        if e_us <= 0:
            raise FormatError(path, n, "exposure must be positive")
        img_path = path.parent / row[2]
        if not img_path.exists():
            raise FormatError(path, n, f"missing frame file {img_path}")
        raw = read_gray8(img_path)
        if shape is not None and raw.shape != shape:
            raise FormatError(path, n, f"frame size {raw.shape} differs from {shape}")
        shape = raw.shape
        if frames and t_us * 1e-6 <= frames[-1].tau:
            raise FormatError(path, n, "frame timestamps must be strictly increasing")
        frames.append(FrameObservation(t_us / US_PER_S, e_us / US_PER_S, raw))
    if not frames:
        raise FormatError(path, 0, "manifest lists no frames")
    return frames


def write_frame_manifest(directory, frames, subdir: str = "frames",
                         name: str = "frames.csv") -> Path:
    directory = Path(directory)
    (directory / subdir).mkdir(parents=True, exist_ok=True)
    lines = ["timestamp_us,exposure_us,filename"]
    for i, f in enumerate(frames):
        fname = f"{subdir}/frame_{i:05d}.pgm"
        write_gray8(directory / fname, f.raw)
        lines.append(f"{int(to_us(f.tau))},{int(to_us(f.exposure))},{fname}")
    out = directory / name
    out.write_text("\n".join(lines) + "\n", encoding="utf-8")
    return out


# float frames -------------------------------------------------------------------------

@dataclass
class FloatSequence:
    """Linear intensity frames with microsecond timestamps."""

    timestamps_us: np.ndarray
    frames: np.ndarray

    @property
    def timestamps(self) -> np.ndarray:
        return self.timestamps_us / US_PER_S


def tone_map(log_frames, scale: float | None = None, offset: float | None = None) -> np.ndarray:
    """Linear map of log intensity to 8 bits; defaults span the data range."""
    lf = np.asarray(log_frames, dtype=np.float64)
    lo = lf.min() if offset is None else offset
    if scale is None:
        span = lf.max() - lo
        scale = 255.0 / span if span > 0 else 1.0
    return np.clip(np.round((lf - lo) * scale), 0, 255).astype(np.uint8)


def write_float_sequence(directory, timestamps_us, frames, preview=None, stem: str = "frame",
                         name: str = "manifest.csv") -> Path:
    """Write ``.f32`` frames (little-endian, row-major), PGM previews and the manifest."""
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    frames = np.asarray(frames)
    if preview is None:
        preview = tone_map(np.log1p(np.maximum(frames, 0) * 255.0))
    lines = ["timestamp_us,filename_pgm,filename_f32"]
    for i, (t, f, p) in enumerate(zip(timestamps_us, frames, preview)):
        pgm, f32 = f"{stem}_{i:05d}.pgm", f"{stem}_{i:05d}.f32"
        write_gray8(directory / pgm, p)
        np.ascontiguousarray(f, dtype="<f4").tofile(directory / f32)
        lines.append(f"{int(t)},{pgm},{f32}")
    out = directory / name
    out.write_text("\n".join(lines) + "\n", encoding="utf-8")
    return out


def read_float_sequence(path) -> FloatSequence:
    """Read a ``timestamp_us,filename_pgm,filename_f32`` manifest; PGMs give the frame size."""
    path = Path(path)
    ts, frames = [], []
    for n, row in _rows(path):
        if row[0] == "timestamp_us":
            continue
        if len(row) != 3:
            raise FormatError(path, n, f"expected 3 fields, got {len(row)}")
        t = _int(path, n, row[0], "timestamp_us")
        pgm, f32 = path.parent / row[1], path.parent / row[2]
        for p in (pgm, f32):
            if not p.exists():
                raise FormatError(path, n, f"missing file {p}")
        shape = read_gray8(pgm).shape
        data = np.fromfile(f32, dtype="<f4")
        if data.size != shape[0] * shape[1]:
            raise FormatError(path, n, f"{f32.name} has {data.size} values, expected "
                                       f"{shape[0]}x{shape[1]}")
        if ts and t <= ts[-1]:
            raise FormatError(path, n, "timestamps must be strictly increasing")
        ts.append(t)
        frames.append(data.reshape(shape).astype(np.float64))
    if not frames:
        raise FormatError(path, 0, "manifest lists no frames")
    return FloatSequence(np.array(ts, dtype=np.int64), np.stack(frames))


# CRF tables ---------------------------------------------------------------------------

def read_crf(path) -> CrfTable:
    """CSV with header ``response,irradiance[,weight]`` and 256 rows."""
    path = Path(path)
    if not path.exists():
        raise FormatError(path, 0, "CRF file not found")
    header = None
    rows = []
    for n, row in _rows(path):
        if header is None:
            header = row
            if header[:2] != ["response", "irradiance"] or header[2:] not in ([], ["weight"]):
                raise FormatError(path, n, "header must be response,irradiance[,weight]")
            continue
        if len(row) != len(header):
            raise FormatError(path, n, f"expected {len(header)} fields, got {len(row)}")
        try:
            rows.append([float(v) for v in row])
        except ValueError:
            raise FormatError(path, n, "non-numeric value") from None
    if len(rows) != N_SAMPLES:
        raise FormatError(path, 0, f"expected {N_SAMPLES} rows, got {len(rows)}")
    data = np.array(rows)
    response, irradiance = data[:, 0], data[:, 1]
    if not np.allclose(response, np.linspace(0, 1, N_SAMPLES), atol=1e-6):
        raise FormatError(path, 0, "response column must be the uniform grid on [0, 1]")
    if np.any(np.diff(irradiance) < 0):
        raise FormatError(path, 0, "irradiance column must be non-decreasing")
    table = CrfTable.from_inverse_curve(irradiance)
    if data.shape[1] == 3:
        w = data[:, 2]
        if np.any(w < 0) or np.any(w > 1):
            raise FormatError(path, 0, "weights must lie in [0, 1]")
        table = CrfTable(response=table.response, irradiance=irradiance, weight=w)
    return table


def write_crf(path, crf: CrfTable):
    grid = np.linspace(0, 1, N_SAMPLES)
    irr = crf.inverse_response(grid)
    w = np.interp(grid, np.linspace(0, 1, len(crf.weight)), crf.weight)
    lines = ["response,irradiance,weight"]
    lines += [f"{r:.9f},{i:.9f},{x:.9f}" for r, i, x in zip(grid, irr, w)]
    Path(path).write_text("\n".join(lines) + "\n", encoding="utf-8")


def read_exposure_stack(path):
    """Manifest ``exposure_us,filename``; returns ``[(exposure_s, uint8 image), ...]``."""
    path = Path(path)
    stack = []
    for n, row in _rows(path):
        if row[0] == "exposure_us":
            continue
        if len(row) != 2:
            raise FormatError(path, n, f"expected 2 fields, got {len(row)}")
        e = _int(path, n, row[0], "exposure_us")
        if e <= 0:
            raise FormatError(path, n, "exposure must be positive")
        img = path.parent / row[1]
        if not img.exists():
            raise FormatError(path, n, f"missing image {img}")
        stack.append((e / US_PER_S, read_gray8(img)))
    return stack
