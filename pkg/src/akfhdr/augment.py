"""Frame augmentation: event-based deblurring and interframe interpolation.

Between frames k and k+1 the augmented signal is anchored by two deblurred
images, one at the start of exposure k and one at the end of exposure k+1.
Events integrate forward from the first and backward from the second, with a
per-pixel contrast threshold chosen so that both integrations meet.
"""
from __future__ import annotations

import math
from dataclasses import dataclass

import numba
import numpy as np

from .events import EventArray
from .frames import FrameObservation, LogFrame


class EventIndex:
    """Events regrouped per pixel with prefix sums of polarity.

    Every query takes a time (or a pair of times) and answers for all pixels at
    once. Sums use half-open windows ``(a, b]``.
    """

    def __init__(self, events: EventArray, width: int, height: int):
        self.width = width
        self.height = height
        n_pix = width * height
        pix = events.pixel_index(width)
        order, self.offsets = _group_by_pixel(pix, n_pix)
        self.order = order
        self.t = events.t[order]
        self.polarity = events.polarity[order].astype(np.int64)
        self.psum = np.zeros(len(self.t) + 1, dtype=np.int64)
        np.cumsum(self.polarity, out=self.psum[1:])
        self._cache: dict[float, np.ndarray] = {}

    @property
    def n_pixels(self) -> int:
        return self.width * self.height

    def position(self, t: float) -> np.ndarray:
        """Per-pixel global index one past the last event with time <= t."""
        hit = self._cache.get(t)
        if hit is not None:
            return hit
        pos = _positions(self.t, self.offsets, float(t))
        if len(self._cache) > 64:
            self._cache.clear()
        self._cache[t] = pos
        return pos

    def net(self, a: float, b: float) -> np.ndarray:
        """Signed event count per pixel over ``(a, b]``."""
        return self.psum[self.position(b)] - self.psum[self.position(a)]

    def pixel_events(self, pixel: int):
        lo, hi = self.offsets[pixel], self.offsets[pixel + 1]
        return self.t[lo:hi], self.polarity[lo:hi]

    def mean_exp_integral(self, a: float, b: float, c) -> np.ndarray:
        """Per-pixel ``(1/(b-a)) * integral_a^b exp(c * S(a, t]) dt``.

        The integrand is piecewise constant between event timestamps, so the
        integral is a finite sum.
        """
        if not b > a:
            raise ValueError("exposure window must have positive length")
        c = np.ascontiguousarray(np.broadcast_to(np.asarray(c, dtype=np.float64),
                                                 (self.n_pixels,)))
        return _mean_exp(self.t, self.polarity, self.position(a), self.position(b), float(a),
                         float(b), c)


@numba.njit(cache=True)
def _mean_exp(t, polarity, lo, hi, a, b, c):
    n_pix = len(lo)
    out = np.empty(n_pix)
    for p in range(n_pix):
        total = 0.0
        level = 0.0
        t_prev = a
        for e in range(lo[p], hi[p]):
            total += math.exp(level) * (t[e] - t_prev)
            level += c[p] * polarity[e]
            t_prev = t[e]
        total += math.exp(level) * (b - t_prev)
        out[p] = total / (b - a)
    return out


@numba.njit(cache=True)
def _group_by_pixel(pix, n_pix):
    """Stable counting sort of event indices by pixel, with per-pixel offsets."""
    offsets = np.zeros(n_pix + 1, dtype=np.int64)
    for i in range(len(pix)):
        offsets[pix[i] + 1] += 1
    for p in range(n_pix):
        offsets[p + 1] += offsets[p]
    fill = offsets[:-1].copy()
    order = np.empty(len(pix), dtype=np.int64)
    for i in range(len(pix)):
        order[fill[pix[i]]] = i
        fill[pix[i]] += 1
    return order, offsets


@numba.njit(cache=True)
def _positions(t, offsets, query):
    n_pix = len(offsets) - 1
    out = np.empty(n_pix, dtype=np.int64)
    for p in range(n_pix):
        lo, hi = offsets[p], offsets[p + 1]
        while lo < hi:
            mid = (lo + hi) // 2
            if t[mid] <= query:
                lo = mid + 1
            else:
                hi = mid
        out[p] = lo
    return out


def edi_deblur(log_frame: LogFrame, exposure: float, index: EventIndex, c):
    """Sharp log images at the start and end of a blurred exposure.

    ``log_frame.t`` is the mid-exposure time. Returns two flat per-pixel
    arrays ``(L(start), L(end))``.
    """
    if exposure <= 0:
        raise ValueError("exposure must be positive")
    a = log_frame.t - exposure / 2
    b = log_frame.t + exposure / 2
    c = np.broadcast_to(np.asarray(c, dtype=np.float64), (index.n_pixels,))
    blurred = np.asarray(log_frame.log_intensity, dtype=np.float64).ravel()
    start = blurred - np.log(index.mean_exp_integral(a, b, c))
    return start, start + c * index.net(a, b)


@dataclass(frozen=True)
class AugmentParams:
    c_nominal: float = 0.1
    n_min: int = 1
    eps_l: float = 1e-4
    iterations: int = 3
    min_weight: float = 0.1

    def __post_init__(self):
        if self.c_nominal <= 0:
            raise ValueError("c_nominal must be positive")
        if self.iterations < 1:
            raise ValueError("iterations must be >= 1")


def calibrate_contrast(ld_start, ld_end, net_total, params: AugmentParams, reliable=None):
    """Per-pixel contrast threshold fitting the event integral to the deblurred ends.

    Falls back to ``params.c_nominal`` where the net event count is below
    ``n_min``, where a change smaller than ``eps_l`` opposes the events, where
    the ratio is not positive, or where ``reliable`` (if given) is False.
    Returns ``(c, calibrated_mask)``.
    """
    num = np.asarray(ld_end, dtype=np.float64) - np.asarray(ld_start, dtype=np.float64)
    den = np.asarray(net_total, dtype=np.float64)
    ok = np.abs(den) >= params.n_min
    ok &= ~((num * den < 0) & (np.abs(num) < params.eps_l))
    with np.errstate(divide="ignore", invalid="ignore"):
        c = np.where(ok, num / np.where(ok, den, 1.0), params.c_nominal)
    ok &= c > 0
    if reliable is not None:
        ok &= np.asarray(reliable, dtype=bool)
    return np.where(ok, c, params.c_nominal), ok


@dataclass
class AugmentedFrame:
    """Augmented log intensity between frames k and k+1.

    Valid on ``[t_start, t_end]`` where ``t_start`` is the start of exposure k
    and ``t_end`` the end of exposure k+1. Per-pixel arrays are flat
    (row-major).
    """

    t_start: float
    t_end: float
    tau: float
    exposure: float
    deblurred_start: np.ndarray
    deblurred_end: np.ndarray
    contrast_scale: np.ndarray
    net_total: np.ndarray
    calibrated: np.ndarray
    index: EventIndex

    @property
    def blend_end(self) -> float:
        return self.tau + self.exposure / 2

    def _check(self, t: float):
        if t < self.t_start or t > self.t_end:
            raise ValueError(f"t={t} outside augmented interval [{self.t_start}, {self.t_end}]")

    def forward(self, t: float) -> np.ndarray:
        self._check(t)
        return self.deblurred_start + self.contrast_scale * self.index.net(self.t_start, t)

    def backward(self, t: float) -> np.ndarray:
        self._check(t)
        return self.deblurred_end - self.contrast_scale * self.index.net(t, self.t_end)

    def evaluate(self, t: float) -> np.ndarray:
        self._check(t)
        if t < self.blend_end:
            w = (self.blend_end - t) / self.exposure
            return w * self.forward(t) + (1.0 - w) * self.backward(t)
        return self.backward(t)


def _pixel_net(aug: AugmentedFrame, pixel: int, a: float, b: float) -> int:
    t, pol = aug.index.pixel_events(pixel)
    lo = np.searchsorted(t, a, side="right")
    hi = np.searchsorted(t, b, side="right")
    return int(pol[lo:hi].sum())


def integrate_forward(aug: AugmentedFrame, pixel: int, t: float) -> float:
    aug._check(t)
    return float(aug.deblurred_start[pixel]
                 + aug.contrast_scale[pixel] * _pixel_net(aug, pixel, aug.t_start, t))


def integrate_backward(aug: AugmentedFrame, pixel: int, t: float) -> float:
    aug._check(t)
    return float(aug.deblurred_end[pixel]
                 - aug.contrast_scale[pixel] * _pixel_net(aug, pixel, t, aug.t_end))


def evaluate_augmented(aug: AugmentedFrame, pixel: int, t: float) -> float:
    aug._check(t)
    backward = integrate_backward(aug, pixel, t)
    if t < aug.blend_end:
        w = (aug.blend_end - t) / aug.exposure
        return w * integrate_forward(aug, pixel, t) + (1.0 - w) * backward
    return backward


def augment_interval(frame_k: FrameObservation, log_k: LogFrame, frame_k1: FrameObservation,
                     log_k1: LogFrame, index: EventIndex, params: AugmentParams) -> AugmentedFrame:
    """Deblur both bounding frames and calibrate the contrast threshold.

    Deblurring and calibration alternate ``params.iterations`` times, each
    deblur using the thresholds from the previous calibration (the first uses
    the nominal threshold).
    """
    t_start, t_end = frame_k.start, frame_k1.end
    net_total = index.net(t_start, t_end)
    reliable = None
    if log_k.weight is not None and log_k1.weight is not None:
        reliable = ((np.ravel(log_k.weight) >= params.min_weight)
                    & (np.ravel(log_k1.weight) >= params.min_weight))
    c = np.full(index.n_pixels, params.c_nominal)
    for _ in range(params.iterations):
        ld_start, _ = edi_deblur(log_k, frame_k.exposure, index, c)
        _, ld_end = edi_deblur(log_k1, frame_k1.exposure, index, c)
        c, calibrated = calibrate_contrast(ld_start, ld_end, net_total, params, reliable)
    if reliable is not None:
        # a saturated anchor carries no level information; carry the other one across by events
        ok_k = np.ravel(log_k.weight) >= params.min_weight
        ok_k1 = np.ravel(log_k1.weight) >= params.min_weight
        ld_end = np.where(ok_k & ~ok_k1, ld_start + c * net_total, ld_end)
        ld_start = np.where(ok_k1 & ~ok_k, ld_end - c * net_total, ld_start)
    return AugmentedFrame(t_start, t_end, frame_k.tau, frame_k.exposure, ld_start, ld_end, c,
                          net_total, calibrated, index)


def augment_sequence(frames, log_frames, index: EventIndex, params: AugmentParams):
    if len(frames) < 2:
        raise ValueError("augmentation needs at least two frames")
    for a, b in zip(frames[:-1], frames[1:]):
        if a.end > b.start:
            raise ValueError(f"exposures of frames at {a.tau} and {b.tau} overlap")
    return [augment_interval(frames[k], log_frames[k], frames[k + 1], log_frames[k + 1], index,
                             params)
            for k in range(len(frames) - 1)]


def sample_augmented(augmented, times) -> np.ndarray:
    """L^A at each time, piecewise across intervals; shape ``(len(times), n_pixels)``."""
    out = np.empty((len(times), augmented[0].index.n_pixels))
    starts = [a.t_start for a in augmented]
    for i, t in enumerate(times):
        k = max(0, int(np.searchsorted(starts, t, side="right")) - 1)
        out[i] = augmented[k].evaluate(t)
    return out
