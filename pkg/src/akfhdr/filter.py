"""Per-pixel asynchronous Kalman filter with closed-form inter-event updates.

Between events the state relaxes toward the augmented frame signal with gain
``P / R``; the Riccati equation has the harmonic solution
``P(t) = 1 / (1/P0 + dt/R)``. Events add their log step to the state and their
noise covariance to ``P``.
"""
from __future__ import annotations

import logging
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field, replace

import numba
import numpy as np

from .augment import AugmentedFrame, AugmentParams, EventIndex, augment_sequence
from .events import EventArray, EventNoiseParams, event_covariances
from .frames import CrfTable, FrameNoiseParams, linear_intensity, to_log_frame

logger = logging.getLogger(__name__)

P_FLOOR = 1e-12
MODES = ("akf", "constant-gain")


@dataclass(frozen=True)
class PixelFilterState:
    l_hat: float
    p_cov: float
    t_last: float

    def __post_init__(self):
        if not self.p_cov > 0:
            raise ValueError("state covariance must be positive")


@dataclass(frozen=True)
class FilterConfig:
    p0: float = 1.0
    mode: str = "akf"
    k_const: float = 2.0
    output_times: tuple | None = None
    output_rate: float | None = None
    calibrated_events: bool = True

    def __post_init__(self):
        if self.p0 <= 0:
            raise ValueError("p0 must be positive")
        if self.mode not in MODES:
            raise ValueError(f"mode must be one of {MODES}")
        if self.mode == "constant-gain" and self.k_const <= 0:
            raise ValueError("k_const must be positive in constant-gain mode")
        if self.output_rate is not None and self.output_rate <= 0:
            raise ValueError("output_rate must be positive")


def decay_state(state: PixelFilterState, l_a: float, l_a_now: float, r: float,
                t: float) -> PixelFilterState:
    """Advance the state to ``t`` with no events in between.

    ``l_a`` is the augmented signal at ``state.t_last`` and ``l_a_now`` at ``t``;
    ``r`` is the log-intensity frame covariance used for the whole step.
    """
    if t < state.t_last:
        raise ValueError(f"cannot decay backwards from {state.t_last} to {t}")
    if not r > 0:
        raise ValueError("frame covariance must be positive")
    p_inv = 1.0 / max(state.p_cov, P_FLOOR)
    den = p_inv + (t - state.t_last) / r
    l_hat = (state.l_hat - l_a) * p_inv / den + l_a_now
    return PixelFilterState(l_hat, 1.0 / den, t)


def decay_constant_gain(state: PixelFilterState, l_a: float, l_a_now: float, k: float,
                        t: float) -> PixelFilterState:
    """Fixed-gain relaxation: exponential decay toward the augmented signal."""
    if t < state.t_last:
        raise ValueError(f"cannot decay backwards from {state.t_last} to {t}")
    l_hat = (state.l_hat - l_a) * math.exp(-k * (t - state.t_last)) + l_a_now
    return PixelFilterState(l_hat, state.p_cov, t)


def event_update(state: PixelFilterState, event_increment: float, q: float) -> PixelFilterState:
    return PixelFilterState(state.l_hat + event_increment, state.p_cov + q, state.t_last)


def kalman_gain(state: PixelFilterState, r: float) -> float:
    if not r > 0:
        raise ValueError("frame covariance must be positive")
    return state.p_cov / r


BP_FRAME, BP_SEGMENT, BP_OUTPUT = 0, 1, 2


@numba.njit(cache=True, nogil=True)
def _augmented_value(k, p, s, t, ld_start, ld_end, cscale, net_total, blend_end, exposure):
    fwd = ld_start[k, p] + cscale[k, p] * s
    bwd = ld_end[k, p] - cscale[k, p] * (net_total[k, p] - s)
    if t < blend_end[k]:
        w = (blend_end[k] - t) / exposure[k]
        return w * fwd + (1.0 - w) * bwd
    return bwd


@numba.njit(cache=True, nogil=True)
def _frame_cov(p, t, tau, r_frames):
    n = len(tau)
    if t <= tau[0]:
        return r_frames[0, p]
    if t >= tau[n - 1]:
        return r_frames[n - 1, p]
    j = np.searchsorted(tau, t, side="right") - 1
    a = (t - tau[j]) / (tau[j + 1] - tau[j])
    return a * r_frames[j + 1, p] + ((tau[j + 1] - t) / (tau[j + 1] - tau[j])) * r_frames[j, p]


@numba.njit(cache=True, nogil=True)
def _filter_pixels(p_begin, p_end, ev_t, ev_pol, ev_q, offsets, bp_t, bp_kind, bp_out,
                   t0, ld_start, ld_end, cscale, net_total, blend_end, exposure, tau, r_frames,
                   constant_gain, k_const, p0, ev_scale, out_l, out_p):
    n_bp = len(bp_t)
    for p in range(p_begin, p_end):
        e = offsets[p]
        e_end = offsets[p + 1]
        seg = 0
        s = 0.0
        t_last = t0
        l_hat = ld_start[0, p]
        cov = p0
        b = 0
        while True:
            te = ev_t[e] if e < e_end else np.inf
            tb = bp_t[b] if b < n_bp else np.inf
            tn = te if te < tb else tb
            if tn == np.inf:
                break
            # relax toward the augmented signal over (t_last, tn)
            la_last = _augmented_value(seg, p, s, t_last, ld_start, ld_end, cscale, net_total,
                                       blend_end, exposure)
            la_now = _augmented_value(seg, p, s, tn, ld_start, ld_end, cscale, net_total,
                                      blend_end, exposure)
            dt = tn - t_last
            if constant_gain:
                l_hat = (l_hat - la_last) * math.exp(-k_const * dt) + la_now
            else:
                r = _frame_cov(p, tn, tau, r_frames)
                p_inv = 1.0 / max(cov, 1e-12)
                den = p_inv + dt / r
                l_hat = (l_hat - la_last) * p_inv / den + la_now
                cov = 1.0 / den
            t_last = tn
            if te == tn:
                l_hat += ev_scale[seg, p] * ev_pol[e]
                cov += ev_q[e]
                s += ev_pol[e]
                e += 1
            while b < n_bp and bp_t[b] == tn:
                kind = bp_kind[b]
                if kind == 1:
                    seg += 1
                    s = 0.0
                elif kind == 2:
                    out_l[bp_out[b], p] = l_hat
                    out_p[bp_out[b], p] = cov
                b += 1


@dataclass
class Reconstruction:
    times: np.ndarray
    log_intensity: np.ndarray
    covariance: np.ndarray
    i_offset: float = 1.0
    augmented: list = field(default_factory=list, repr=False)

    def linear(self) -> np.ndarray:
        """Normalised linear irradiance of every output frame."""
        return linear_intensity(self.log_intensity, self.i_offset)


def output_times_for(frames, config: FilterConfig) -> np.ndarray:
    if config.output_times is not None:
        return np.asarray(config.output_times, dtype=np.float64)
    if config.output_rate is not None:
        start, end = frames[0].start, frames[-1].end
        n = int(math.floor((end - start) * config.output_rate + 1e-9)) + 1
        return start + np.arange(n) / config.output_rate
    return np.array([f.tau for f in frames])


def reconstruct(events: EventArray, frames, crf: CrfTable, config: FilterConfig = FilterConfig(),
                event_params: EventNoiseParams = EventNoiseParams(),
                frame_params: FrameNoiseParams = FrameNoiseParams(),
                augment_params: AugmentParams = AugmentParams(), threads: int = 1,
                keep_augmented: bool = False) -> Reconstruction:
    """Fuse events and frames into log-intensity frames at the output times.

    ``frames`` is a time-ordered list of :class:`FrameObservation`. Events
    outside the augmented span (start of the first exposure to the end of the
    last) are ignored; output times outside it are skipped with a warning.
    """
    frames = list(frames)
    if len(frames) < 2:
        raise ValueError("reconstruction needs at least two frames")
    taus = np.array([f.tau for f in frames])
    if np.any(np.diff(taus) <= 0):
        raise ValueError("frames must be strictly increasing in time")
    shape = np.asarray(frames[0].raw).shape
    height, width = shape
    events.validate(width, height)

    t0, t_end = frames[0].start, frames[-1].end
    t = events.t
    events = events.select((t > t0) & (t <= t_end))
    q = event_covariances(events, width, height, event_params, t_start=t0)

    log_frames = [to_log_frame(f, crf, frame_params) for f in frames]
    index = EventIndex(events, width, height)
    augmented = augment_sequence(frames, log_frames, index, augment_params)

    times = output_times_for(frames, config)
    inside = (times >= t0) & (times <= t_end)
    if not np.all(inside):
        logger.warning("skipping %d output timestamps outside [%g, %g]",
                       int((~inside).sum()), t0, t_end)
    times = times[inside]

    out_l, out_p = _run_filter(index, q[index.order], augmented, frames, log_frames, times,
                               config, threads, augment_params.c_nominal)
    return Reconstruction(times, out_l.reshape(len(times), height, width),
                          out_p.reshape(len(times), height, width), frame_params.i_offset,
                          augmented if keep_augmented else [])


def _breakpoints(augmented, frames, times):
    bp = [(f.tau, BP_FRAME, -1) for f in frames]
    bp += [(a.t_start, BP_SEGMENT, -1) for a in augmented[1:]]
    bp += [(float(t), BP_OUTPUT, i) for i, t in enumerate(times)]
    bp.sort(key=lambda r: (r[0], r[1]))
    return (np.array([r[0] for r in bp], dtype=np.float64),
            np.array([r[1] for r in bp], dtype=np.int64),
            np.array([r[2] for r in bp], dtype=np.int64))


def _run_filter(index: EventIndex, q_sorted, augmented: list[AugmentedFrame], frames, log_frames,
                times, config: FilterConfig, threads: int, nominal_c: float):
    n_pix = index.n_pixels
    ld_start = np.ascontiguousarray(np.stack([a.deblurred_start for a in augmented]))
    ld_end = np.ascontiguousarray(np.stack([a.deblurred_end for a in augmented]))
    cscale = np.ascontiguousarray(np.stack([a.contrast_scale for a in augmented]))
    net_total = np.ascontiguousarray(np.stack([a.net_total for a in augmented]).astype(np.float64))
    blend_end = np.array([a.blend_end for a in augmented])
    exposure = np.array([a.exposure for a in augmented])
    tau = np.array([f.tau for f in frames])
    r_frames = np.ascontiguousarray(np.stack([np.ravel(lf.covariance) for lf in log_frames]))
    bp_t, bp_kind, bp_out = _breakpoints(augmented, frames, times)
    out_l = np.zeros((len(times), n_pix))
    out_p = np.zeros((len(times), n_pix))
    pol = index.polarity.astype(np.float64)
    q_sorted = np.ascontiguousarray(q_sorted, dtype=np.float64)
    ev_scale = cscale if config.calibrated_events else np.full_like(cscale, nominal_c)

    def run(bounds):
        _filter_pixels(bounds[0], bounds[1], index.t, pol, q_sorted, index.offsets, bp_t, bp_kind,
                       bp_out, augmented[0].t_start, ld_start, ld_end, cscale, net_total,
                       blend_end, exposure, tau, r_frames, config.mode == "constant-gain",
                       float(config.k_const), float(config.p0), ev_scale, out_l, out_p)

    threads = max(1, int(threads))
    edges = np.linspace(0, n_pix, min(threads * 4, n_pix) + 1).astype(np.int64) \
        if threads > 1 else np.array([0, n_pix])
    chunks = list(zip(edges[:-1], edges[1:]))
    if threads == 1:
        for c in chunks:
            run(c)
    else:
        with ThreadPoolExecutor(max_workers=threads) as pool:
            list(pool.map(run, chunks))
    return out_l, out_p


def with_mode(config: FilterConfig, mode: str, k_const: float | None = None) -> FilterConfig:
    return replace(config, mode=mode, k_const=config.k_const if k_const is None else k_const)
