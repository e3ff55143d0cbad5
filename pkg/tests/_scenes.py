"""Exact staircase scenes shared by the augmentation and filter tests.

Each pixel's log intensity is a staircase: it jumps by exactly +-c at its own
event times and is constant otherwise. Frames are float responses of a linear
sensor, computed as the exact exposure average of the staircase, so every
quantity in the augmentation chain has a closed form.
"""
import numpy as np

from akfhdr.events import EventArray
from akfhdr.frames import IRRADIANCE_SCALE, FrameObservation


class Staircase:
    def __init__(self, width, height, c, taus, exposure, rng, rate=40.0, level=(3.5, 4.5),
                 thresholds=None):
        self.width, self.height, self.c = width, height, c
        self.taus = np.asarray(taus, dtype=float)
        self.exposure = exposure
        n_pix = width * height
        self.c_map = np.full(n_pix, c) if thresholds is None else np.asarray(thresholds).ravel()
        self.l0 = rng.uniform(*level, size=n_pix)
        t_end_us = int(round((self.taus[-1] + exposure / 2) * 1e6))
        self.steps = []
        t_all, x_all, y_all, p_all = [], [], [], []
        for p in range(n_pix):
            n = rng.poisson(rate * t_end_us * 1e-6)
            t_us = np.unique(rng.integers(1, t_end_us, size=n))
            pol = rng.choice([-1, 1], size=len(t_us))
            self.steps.append((t_us, pol))
            t_all.append(t_us)
            x_all.append(np.full(len(t_us), p % width))
            y_all.append(np.full(len(t_us), p // width))
            p_all.append(pol)
        t = np.concatenate(t_all)
        order = np.lexsort((np.concatenate(y_all) * width + np.concatenate(x_all), t))
        self.events = EventArray(t[order], np.concatenate(x_all)[order],
                                 np.concatenate(y_all)[order], np.concatenate(p_all)[order])

    def log_at(self, t):
        """Ground-truth log intensity of every pixel at ``t`` (right-continuous)."""
        out = self.l0.copy()
        t_us = int(round(t * 1e6)) if np.isscalar(t) else None
        for p, (ts, pol) in enumerate(self.steps):
            out[p] += self.c_map[p] * pol[ts <= t_us].sum()
        return out

    def _mean_exp(self, a, b):
        out = np.empty(len(self.l0))
        a_us, b_us = a * 1e6, b * 1e6
        for p, (ts, pol) in enumerate(self.steps):
            inside = (ts > a_us) & (ts <= b_us)
            level = self.l0[p] + self.c_map[p] * pol[ts <= a_us].sum()
            edges = np.concatenate([[a_us], ts[inside], [b_us]])
            levels = level + self.c_map[p] * np.concatenate([[0], np.cumsum(pol[inside])])
            out[p] = np.sum(np.exp(levels) * np.diff(edges)) / (b_us - a_us)
        return out

    def frames(self, i_offset=1.0):
        out = []
        for tau in self.taus:
            mean = self._mean_exp(tau - self.exposure / 2, tau + self.exposure / 2)
            raw = ((mean - i_offset) / IRRADIANCE_SCALE).reshape(self.height, self.width)
            if raw.min() < 0 or raw.max() > 1:
                raise ValueError("staircase leaves the sensor range")
            out.append(FrameObservation(float(tau), self.exposure, raw))
        return out
