"""Camera response handling and the frame uncertainty model.

Irradiance inside the CRF table is normalised to [0, 1]. Frame arithmetic
(covariances, log intensities) happens on the *scaled* irradiance, i.e. the
normalised value multiplied by ``IRRADIANCE_SCALE`` so that it spans the same
range as 8-bit responses. The log offset ``i_offset`` and the base noise
``sigma2_im`` are expressed in those scaled units.
"""
from __future__ import annotations

import logging
from dataclasses import dataclass

import numpy as np
from scipy.interpolate import make_lsq_spline

logger = logging.getLogger(__name__)

N_SAMPLES = 256
IRRADIANCE_SCALE = 255.0
WEIGHT_FLOOR = 1e-3


class CrfFitError(ValueError):
    pass


@dataclass(frozen=True)
class FrameNoiseParams:
    sigma2_im: float = 1.0
    i_offset: float = 1.0

    def __post_init__(self):
        if self.sigma2_im <= 0:
            raise ValueError("sigma2_im must be positive")
        if self.i_offset <= 0:
            raise ValueError("i_offset must be positive")


def _grid(n: int) -> np.ndarray:
    return np.linspace(0.0, 1.0, n)


@dataclass(frozen=True)
class CrfTable:
    """Sampled camera response function.

    ``response`` is the CRF sampled on a uniform irradiance grid over [0, 1];
    ``irradiance`` and ``weight`` are sampled on a uniform response grid over
    [0, 1]. ``r_max`` caps the irradiance covariance; ``None`` means
    ``sigma2_im / WEIGHT_FLOOR``.
    """

    response: np.ndarray
    irradiance: np.ndarray
    weight: np.ndarray
    r_max: float | None = None

    @property
    def n(self) -> int:
        return len(self.irradiance)

    def response_of_irradiance(self, irradiance):
        return np.interp(irradiance, _grid(len(self.response)), self.response)

    def inverse_response(self, response):
        return np.interp(response, _grid(self.n), self.irradiance)

    def covariance_cap(self, params: FrameNoiseParams) -> float:
        return params.sigma2_im / WEIGHT_FLOOR if self.r_max is None else self.r_max

    @classmethod
    def from_response_curve(cls, response, r_max=None, n: int = N_SAMPLES) -> "CrfTable":
        """Build a table from a non-decreasing response curve sampled on [0, 1].

        The inverse maps a flat response level to its preimage edge next to
        the increasing region (a clipped level reads as the clip point) and an
        interior flat level to its preimage midpoint. The weighting function
        is the CRF slope at the inverse point, renormalised so the interior
        maximum is one and floored at ``WEIGHT_FLOOR``. Responses 0 and 1 are
        treated as saturated.
        """
        response = np.asarray(response, dtype=np.float64)
        if np.any(np.diff(response) < 0):
            raise ValueError("response curve must be non-decreasing")
        x = _grid(len(response))
        y = _grid(n)
        _, first = np.unique(response, return_index=True)
        _, last_rev = np.unique(response[::-1], return_index=True)
        last = len(response) - 1 - last_rev
        lo = np.interp(y, response[first], x[first])
        hi = np.interp(y, response[last], x[last])
        inverse = 0.5 * (lo + hi)
        inverse = np.where(lo <= x[0], hi, np.where(hi >= x[-1], lo, inverse))
        slope = np.gradient(response, x)
        w = np.interp(inverse, x, slope)
        flat = (hi - lo) > 1e-12
        w[flat] = 0.0
        w[(y < response[0]) | (y > response[-1])] = 0.0
        w[0] = w[-1] = 0.0
        peak = w[1:-1].max() if n > 2 else w.max()
        if peak <= 0:
            raise ValueError("response curve has no increasing region")
        w = np.clip(w / peak, WEIGHT_FLOOR, 1.0)
        return cls(response=response, irradiance=inverse, weight=w, r_max=r_max)

    @classmethod
    def from_inverse_curve(cls, irradiance, slope=None, r_max=None) -> "CrfTable":
        """Build a table from a non-decreasing inverse response sampled on [0, 1].

        The weighting function is the reciprocal slope of the inverse, which is
        the CRF slope composed with the inverse. ``slope`` overrides the finite
        difference estimate (e.g. with the derivative of a fitted spline).
        """
        irradiance = np.asarray(irradiance, dtype=np.float64)
        y = _grid(len(irradiance))
        if np.any(np.diff(irradiance) < 0):
            raise ValueError("inverse response must be non-decreasing")
        if slope is None:
            slope = np.gradient(irradiance, y)
        slope = np.asarray(slope, dtype=np.float64)
        w = np.where(slope > 0, 1.0 / np.maximum(slope, 1e-300), 0.0)
        w[0] = w[-1] = 0.0
        w = np.clip(w / w[1:-1].max(), WEIGHT_FLOOR, 1.0)
        strict = np.concatenate([[True], np.diff(irradiance) > 0])
        response = np.interp(_grid(N_SAMPLES), irradiance[strict], y[strict])
        return cls(response=response, irradiance=irradiance, weight=w, r_max=r_max)

    @classmethod
    def from_function(cls, fn, r_max=None, n: int = N_SAMPLES) -> "CrfTable":
        return cls.from_response_curve(fn(_grid(n)), r_max=r_max, n=n)

    @classmethod
    def linear(cls, r_max=None) -> "CrfTable":
        return cls.from_function(lambda i: i, r_max=r_max)

    def clipped(self, low: float, high: float) -> "CrfTable":
        """The same sensor followed by clamping responses to ``[low, high]``."""
        return CrfTable.from_response_curve(np.clip(self.response, low, high), r_max=self.r_max,
                                            n=self.n)


def weighting_at(crf: CrfTable, response):
    """Interpolated weighting function, floored at ``WEIGHT_FLOOR``.

    Responses outside [0, 1] are clamped to the nearest endpoint.
    """
    response = np.asarray(response, dtype=np.float64)
    if np.any((response < 0) | (response > 1)):
        logger.warning("response outside [0, 1] clamped to table domain")
        response = np.clip(response, 0.0, 1.0)
    w = np.interp(response, _grid(crf.n), crf.weight)
    return np.maximum(w, WEIGHT_FLOOR)


def frame_covariance(crf: CrfTable, response, params: FrameNoiseParams):
    """Covariance of the scaled irradiance recovered from ``response``."""
    return np.minimum(params.sigma2_im / weighting_at(crf, response), crf.covariance_cap(params))


def interpolate_covariance(r_k, r_k1, tau_k: float, tau_k1: float, t: float):
    if not tau_k < tau_k1:
        raise ValueError("frame timestamps must be increasing")
    if t < tau_k or t > tau_k1:
        raise ValueError(f"t={t} outside [{tau_k}, {tau_k1}]")
    a = (t - tau_k) / (tau_k1 - tau_k)
    return a * np.asarray(r_k1) + ((tau_k1 - t) / (tau_k1 - tau_k)) * np.asarray(r_k)


@dataclass
class FrameObservation:
    """Raw frame: ``raw`` is uint8 (0-255) or normalised float responses."""

    tau: float
    exposure: float
    raw: np.ndarray

    def __post_init__(self):
        if self.exposure <= 0:
            raise ValueError("exposure must be positive")
        if self.tau - self.exposure / 2 < -1e-12:
            raise ValueError("exposure starts before t=0")

    @property
    def start(self) -> float:
        return self.tau - self.exposure / 2

    @property
    def end(self) -> float:
        return self.tau + self.exposure / 2

    def normalized(self) -> np.ndarray:
        raw = np.asarray(self.raw)
        if np.issubdtype(raw.dtype, np.integer):
            return raw.astype(np.float64) / 255.0
        raw = raw.astype(np.float64)
        if raw.min() < 0 or raw.max() > 1:
            raise ValueError("float frame responses must lie in [0, 1]")
        return raw


@dataclass
class LogFrame:
    t: float
    log_intensity: np.ndarray
    covariance: np.ndarray
    weight: np.ndarray | None = None


def biased_log(irradiance, r_bar, i_offset: float):
    """Log of offset irradiance with second-order bias removed, and its covariance."""
    shifted = np.asarray(irradiance, dtype=np.float64) + i_offset
    r_bar = np.asarray(r_bar, dtype=np.float64)
    return np.log(shifted) - r_bar / (2 * shifted ** 2), r_bar / shifted ** 2


def to_log_frame(frame: FrameObservation, crf: CrfTable, params: FrameNoiseParams) -> LogFrame:
    y = frame.normalized()
    irradiance = IRRADIANCE_SCALE * crf.inverse_response(y)
    r_bar = frame_covariance(crf, y, params)
    log_i, r = biased_log(irradiance, r_bar, params.i_offset)
    return LogFrame(frame.tau, log_i, r, weighting_at(crf, y))


def log_intensity(normalized_irradiance, i_offset: float = 1.0):
    """Log of the scaled irradiance plus offset; the state space of the filter."""
    return np.log(IRRADIANCE_SCALE * np.asarray(normalized_irradiance, dtype=np.float64) + i_offset)


def linear_intensity(log_i, i_offset: float = 1.0):
    """Inverse of :func:`log_intensity`, back to normalised irradiance."""
    return (np.exp(np.asarray(log_i, dtype=np.float64)) - i_offset) / IRRADIANCE_SCALE


def _robertson_weights() -> np.ndarray:
    m = np.arange(256, dtype=np.float64)
    w = np.exp(-4.0 * (m - 127.5) ** 2 / 127.5 ** 2)
    w[0] = w[255] = 0.0
    return w


def _moving_average(v: np.ndarray, width: int) -> np.ndarray:
    pad = width // 2
    padded = np.pad(v, pad, mode="edge")
    return np.convolve(padded, np.ones(width) / width, mode="valid")


def fit_crf(exposure_stack, n_iter: int = 500, tol: float = 1e-7, max_gap: int = 8,
            smooth: int = 5, spline_knots: int = 6) -> CrfTable:
    """Estimate a CRF from a static scene captured at several exposures.

    Alternates between per-pixel irradiance and the per-code inverse response,
    weighting samples by a hat function that ignores clipped codes. The
    exposure times scale the irradiance; the result is normalised so the
    brightest code maps to irradiance 1.

    ``exposure_stack`` is a sequence of ``(exposure_time, uint8 frame)`` pairs.
    Exposure ratios that are exact powers of the CRF's own scaling (e.g. a
    doubling series on a power-law sensor) converge slowly.
    """
    stack = list(exposure_stack)
    if len(stack) < 3:
        raise CrfFitError(f"need at least 3 exposures, got {len(stack)}")
    times = np.array([float(t) for t, _ in stack])
    if np.any(times <= 0):
        raise CrfFitError("exposure times must be positive")
    if len(np.unique(times)) < 2:
        raise CrfFitError("exposures must differ")
    z = np.stack([np.asarray(f).ravel() for _, f in stack]).astype(np.int64)
    if z.min() < 0 or z.max() > 255:
        raise CrfFitError("frames must be 8-bit")

    observed = np.zeros(256, dtype=bool)
    observed[np.unique(z)] = True
    missing = ~observed[1:255]
    gaps = _runs(missing)
    wide = [(a + 1, b + 1) for a, b in gaps if b - a + 1 > max_gap]
    if wide:
        desc = ", ".join(f"{a}-{b}" for a, b in wide)
        raise CrfFitError(f"exposures leave response codes uncovered: {desc}")

    w = _robertson_weights()[z]
    tcol = times[:, None]
    g = np.arange(256, dtype=np.float64) / 128.0
    counts = np.bincount(z.ravel(), minlength=256)
    for _ in range(n_iter):
        num = (w * tcol * g[z]).sum(axis=0)
        den = (w * tcol ** 2).sum(axis=0)
        valid = den > 0
        e = np.where(valid, num / np.where(valid, den, 1.0), 0.0)
        te = tcol * e[None, :]
        keep = np.broadcast_to(valid, z.shape)
        sums = np.bincount(z[keep], weights=te[keep], minlength=256)
        n_keep = np.bincount(z[keep], minlength=256)
        has = n_keep > 0
        g_new = g.copy()
        g_new[has] = sums[has] / n_keep[has]
        if g_new[128] > 0:
            g_new /= g_new[128]
        change = np.max(np.abs(g_new - g)[1:255])
        g = g_new
        if change < tol:
            break

    codes = np.arange(256)
    interior = (codes >= 1) & (codes <= 254) & (counts > 0)
    g = np.interp(codes, codes[interior], g[interior])
    lo, hi = codes[interior][:2], codes[interior][-2:]
    g[0] = g[lo[0]] - (g[lo[1]] - g[lo[0]]) / (lo[1] - lo[0]) * lo[0]
    g[255] = g[hi[1]] + (g[hi[1]] - g[hi[0]]) / (hi[1] - hi[0]) * (255 - hi[1])
    g = np.maximum.accumulate(np.maximum(g, 0.0))
    if smooth > 1:
        g = _moving_average(g, smooth)
    g = g / g[255]
    # per-code noise makes finite differences useless; differentiate a cubic LSQ spline
    y = codes / 255.0
    inner = np.linspace(0.0, 1.0, spline_knots + 2)[1:-1]
    knots = np.concatenate([[y[1]] * 4, inner, [y[254]] * 4])
    spline = make_lsq_spline(y[1:255], g[1:255], knots, k=3)
    slope = spline.derivative()(np.clip(y, y[1], y[254]))
    return CrfTable.from_inverse_curve(g, slope=slope)


def _runs(mask: np.ndarray):
    """Inclusive index ranges of consecutive True values."""
    runs = []
    start = None
    for i, v in enumerate(mask):
        if v and start is None:
            start = i
        elif not v and start is not None:
            runs.append((start, i - 1))
            start = None
    if start is not None:
        runs.append((start, len(mask) - 1))
    return runs
