"""Synthetic hybrid event/frame data with ground truth.

The ground-truth video is piecewise linear in log intensity between its
samples, so threshold crossings and exposure averages are computed exactly on
that signal rather than by numerical supersampling.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numba
import numpy as np

from .events import EventArray
from .frames import IRRADIANCE_SCALE, CrfTable, FrameObservation, log_intensity

SATURATION_BOUNDS = (100, 160)


@dataclass
class GroundTruthVideo:
    """Linear irradiance in [0, 1], shape ``(n, height, width)``, at ``timestamps`` (s)."""

    frames: np.ndarray
    timestamps: np.ndarray

    def __post_init__(self):
        self.frames = np.asarray(self.frames, dtype=np.float64)
        self.timestamps = np.asarray(self.timestamps, dtype=np.float64)
        if self.frames.ndim != 3 or len(self.frames) != len(self.timestamps):
            raise ValueError("frames must be (n, height, width) matching timestamps")
        if np.any(np.diff(self.timestamps) <= 0):
            raise ValueError("timestamps must be strictly increasing")
        if self.frames.min() < 0:
            raise ValueError("irradiance must be non-negative")

    @property
    def shape(self):
        return self.frames.shape[1:]

    def log_frames(self, i_offset: float = 1.0) -> np.ndarray:
        return log_intensity(self.frames, i_offset)

    def log_at(self, t: float, i_offset: float = 1.0) -> np.ndarray:
        """Ground-truth log intensity at ``t`` (linear interpolation in log)."""
        ts = self.timestamps
        if t < ts[0] or t > ts[-1]:
            raise ValueError(f"t={t} outside video span")
        j = min(int(np.searchsorted(ts, t, side="right")) - 1, len(ts) - 2)
        a = (t - ts[j]) / (ts[j + 1] - ts[j])
        lf = log_intensity(self.frames[j:j + 2], i_offset)
        return (1 - a) * lf[0] + a * lf[1]

    def irradiance_at(self, t: float, i_offset: float = 1.0) -> np.ndarray:
        return (np.exp(self.log_at(t, i_offset)) - i_offset) / IRRADIANCE_SCALE


@dataclass
class SimParams:
    c_true: float = 0.1
    threshold_scale_map: np.ndarray | None = None
    refractory: float = 0.0
    event_noise_rate: float = 0.0
    crf_model: CrfTable = field(default_factory=CrfTable.linear)
    exposure: float = 0.01
    saturation_bounds: tuple | None = SATURATION_BOUNDS
    i_offset: float = 1.0

    def __post_init__(self):
        if self.c_true <= 0:
            raise ValueError("c_true must be positive")
        if self.refractory < 0:
            raise ValueError("refractory must be non-negative")
        if self.event_noise_rate < 0:
            raise ValueError("event_noise_rate must be non-negative")
        if self.saturation_bounds is not None:
            low, high = self.saturation_bounds
            if not low < high:
                raise ValueError("saturation bounds must satisfy low < high")

    def effective_crf(self) -> CrfTable:
        """The sensor response including the artificial saturation clamp."""
        if self.saturation_bounds is None:
            return self.crf_model
        low, high = self.saturation_bounds
        return self.crf_model.clipped(low / 255.0, high / 255.0)


@numba.njit(cache=True)
def _crossings(log_v, ts, thresholds, rho_us, count_only, out_t, out_pix, out_pol):
    n_t, n_pix = log_v.shape
    n = 0
    for p in range(n_pix):
        c = thresholds[p]
        ref = log_v[0, p]
        last_us = -(1 << 62)
        for j in range(n_t - 1):
            l0 = log_v[j, p]
            l1 = log_v[j + 1, p]
            if l1 == l0:
                continue
            sign = 1 if l1 > l0 else -1
            while (l1 - ref) * sign >= c:
                level = ref + sign * c
                ref = level
                tc = ts[j] + (level - l0) / (l1 - l0) * (ts[j + 1] - ts[j])
                t_us = np.int64(np.round(tc * 1e6))
                if t_us - last_us < rho_us:
                    continue
                if t_us <= last_us:
                    t_us = last_us + 1
                last_us = t_us
                if not count_only:
                    out_t[n] = t_us
                    out_pix[n] = p
                    out_pol[n] = sign
                n += 1
    return n


def generate_events(video: GroundTruthVideo, params: SimParams, seed: int = 0) -> EventArray:
    """Threshold-crossing events of the ground-truth log intensity.

    Each pixel keeps a reference level starting at the first sample; a crossing
    of ``reference +- s_p * c_true`` moves the reference by one step and emits
    an event unless it falls within the refractory period of the previous
    emitted event. Spurious events (uniform times, random polarity) are added
    at ``event_noise_rate`` per pixel per second.
    """
    height, width = video.shape
    n_pix = width * height
    log_v = video.log_frames(params.i_offset).reshape(len(video.frames), n_pix)
    log_v = np.ascontiguousarray(log_v)
    scale = (np.ones(n_pix) if params.threshold_scale_map is None
             else np.asarray(params.threshold_scale_map, dtype=np.float64).ravel())
    if scale.shape != (n_pix,) or np.any(scale <= 0):
        raise ValueError("threshold_scale_map must be positive with the video's shape")
    thresholds = params.c_true * scale
    rho_us = int(round(params.refractory * 1e6))
    dummy_i = np.zeros(0, np.int64)
    n = _crossings(log_v, video.timestamps, thresholds, rho_us, True, dummy_i, dummy_i,
                   np.zeros(0, np.int8))
    t_us = np.empty(n, np.int64)
    pix = np.empty(n, np.int64)
    pol = np.empty(n, np.int8)
    _crossings(log_v, video.timestamps, thresholds, rho_us, False, t_us, pix, pol)

    if params.event_noise_rate > 0:
        rng = np.random.default_rng(seed)
        t_lo = int(np.ceil(video.timestamps[0] * 1e6))
        t_hi = int(np.floor(video.timestamps[-1] * 1e6))
        counts = rng.poisson(params.event_noise_rate * (t_hi - t_lo) * 1e-6, size=n_pix)
        n_noise = int(counts.sum())
        noise_pix = np.repeat(np.arange(n_pix), counts)
        noise_t = rng.integers(t_lo, t_hi + 1, size=n_noise)
        noise_pol = rng.choice(np.array([-1, 1], dtype=np.int8), size=n_noise)
        t_us = np.concatenate([t_us, noise_t])
        pix = np.concatenate([pix, noise_pix])
        pol = np.concatenate([pol, noise_pol])
        # one event per pixel per microsecond; crossings come first so they win ties
        order = np.lexsort((np.arange(len(t_us)), t_us, pix))
        dup = np.zeros(len(order), dtype=bool)
        dup[1:] = (np.diff(pix[order]) == 0) & (np.diff(t_us[order]) == 0)
        keep = np.sort(order[~dup])
        t_us, pix, pol = t_us[keep], pix[keep], pol[keep]

    order = np.lexsort((pix, t_us))
    t_us, pix, pol = t_us[order], pix[order], pol[order]
    return EventArray(t_us, pix % width, pix // width, pol)


def _mean_exp(log_v, ts, a, b):
    """Exact time average of exp(L) over [a, b] for L piecewise linear in time."""
    j0 = max(int(np.searchsorted(ts, a, side="right")) - 1, 0)
    j1 = min(int(np.searchsorted(ts, b, side="left")), len(ts) - 1)
    total = np.zeros(log_v.shape[1:])
    for j in range(j0, j1):
        s0, s1 = max(ts[j], a), min(ts[j + 1], b)
        if s1 <= s0:
            continue
        slope = (log_v[j + 1] - log_v[j]) / (ts[j + 1] - ts[j])
        l0 = log_v[j] + slope * (s0 - ts[j])
        l1 = log_v[j] + slope * (s1 - ts[j])
        d = l1 - l0
        small = np.abs(d) < 1e-8
        safe = np.where(small, 1.0, d)
        seg = np.where(small, np.exp(0.5 * (l0 + l1)) * (1 + d * d / 24),
                       (np.exp(l1) - np.exp(l0)) / safe)
        total += seg * (s1 - s0)
    return total / (b - a)


def render_ldr_frames(video: GroundTruthVideo, params: SimParams, frame_times) -> list:
    """Motion-blurred, quantised, saturated 8-bit frames centred on ``frame_times``."""
    log_v = video.log_frames(params.i_offset)
    frames = []
    for tau in frame_times:
        a, b = tau - params.exposure / 2, tau + params.exposure / 2
        if a < video.timestamps[0] - 1e-12 or b > video.timestamps[-1] + 1e-12:
            raise ValueError(f"exposure around {tau} exceeds the video span")
        blurred = (_mean_exp(log_v, video.timestamps, a, b) - params.i_offset) / IRRADIANCE_SCALE
        response = params.crf_model.response_of_irradiance(np.clip(blurred, 0.0, 1.0))
        codes = np.round(response * 255.0)
        if params.saturation_bounds is not None:
            codes = np.clip(codes, *params.saturation_bounds)
        frames.append(FrameObservation(float(tau), params.exposure, codes.astype(np.uint8)))
    return frames


def frame_schedule(t_first: float, t_last: float, n_frames: int, exposure: float) -> np.ndarray:
    """Evenly spaced mid-exposure times whose exposures fit inside the span.

    Times are rounded to whole microseconds so they survive file round trips.
    """
    start = t_first + exposure / 2
    stop = t_last - exposure / 2
    return np.round(np.linspace(start, stop, n_frames) * 1e6) / 1e6


# procedural scenes ------------------------------------------------------------------

def _texture(width, height, rng, n_blobs=12):
    yy, xx = np.mgrid[0:height, 0:width].astype(np.float64)
    img = np.zeros((height, width))
    for _ in range(n_blobs):
        cx, cy = rng.uniform(0, width), rng.uniform(0, height)
        s = rng.uniform(0.08, 0.25) * min(width, height)
        img += rng.uniform(-1, 1) * np.exp(-((xx - cx) ** 2 + (yy - cy) ** 2) / (2 * s * s))
    return img


def translating_scene(width=64, height=64, duration=2.0, n_samples=2001, speed=8.0,
                      low=0.15, high=0.9, flicker=0.0, seed=0) -> GroundTruthVideo:
    """Smooth periodic texture drifting horizontally at ``speed`` pixels/s.

    Intensities span ``[low, high]``; ``flicker`` adds a global sinusoidal gain
    (relative amplitude) at 1 Hz.
    """
    rng = np.random.default_rng(seed)
    ts = np.linspace(0.0, duration, n_samples)
    base = _texture(3 * width, height, rng)
    base = (base - base.min()) / (base.max() - base.min())
    frames = np.empty((n_samples, height, width))
    xs = np.arange(3 * width)
    for i, t in enumerate(ts):
        shift = speed * t
        x = (np.arange(width) + shift) % (3 * width)
        x0 = np.floor(x).astype(int)
        f = x - x0
        img = base[:, x0] * (1 - f) + base[:, (x0 + 1) % len(xs)] * f
        frames[i] = low + (high - low) * img
        if flicker:
            frames[i] *= 1 + flicker * np.sin(2 * np.pi * t)
    return GroundTruthVideo(np.clip(frames, 0.0, None), ts)


def ramp_scene(width=32, height=32, duration=2.0, n_samples=201, rate=0.5, low=0.1, high=0.3,
               seed=0) -> GroundTruthVideo:
    """Static texture whose brightness grows as exp(rate * t); every pixel brightens steadily."""
    rng = np.random.default_rng(seed)
    base = _texture(width, height, rng)
    base = low + (high - low) * (base - base.min()) / (base.max() - base.min())
    ts = np.linspace(0.0, duration, n_samples)
    # brightening is exponential in the offset irradiance so log steps are uniform
    shifted = IRRADIANCE_SCALE * base + 1.0
    frames = (shifted[None] * np.exp(rate * ts)[:, None, None] - 1.0) / IRRADIANCE_SCALE
    return GroundTruthVideo(frames, ts)


SCENES = {"translate": translating_scene, "ramp": ramp_scene}
