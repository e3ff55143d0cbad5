"""Run configuration: defaults, ``key = value`` files and command-line overrides.

Precedence is command line over config file over defaults.
"""
from __future__ import annotations

import dataclasses
from dataclasses import dataclass, fields
from pathlib import Path

from .augment import AugmentParams
from .events import EventNoiseParams
from .filter import FilterConfig
from .frames import FrameNoiseParams


class ConfigError(ValueError):
    pass


@dataclass
class RunConfig:
    # paths
    events: str | None = None
    frames: str | None = None
    crf: str | None = None
    output: str | None = None
    reference: str | None = None
    reconstruction: str | None = None
    stack: str | None = None
    video: str | None = None
    # event noise
    sigma2_proc: float = 0.01
    sigma2_iso: float = 0.01
    sigma2_ref: float = 0.01
    rho_bar: float = 0.01
    neighborhood_radius: int = 1
    q_cap: float = 1.0
    # frame noise
    sigma2_im: float = 1.0
    i_offset: float = 1.0
    r_max: float | None = None
    # augmentation
    c_nominal: float = 0.1
    n_min: int = 1
    eps_l: float = 1e-4
    iterations: int = 3
    min_weight: float = 0.1
    # filter
    p0: float = 1.0
    mode: str = "akf"
    k: float = 2.0
    output_rate: float | None = None
    calibrated_events: bool = True
    tone_scale: float | None = None
    # simulation
    scene: str = "translate"
    width: int = 64
    height: int = 64
    duration: float = 2.0
    samples: int = 2001
    speed: float = 32.0
    low: float = 0.2
    high: float = 0.8
    flicker: float = 0.0
    c_true: float = 0.1
    refractory: float = 0.0
    event_noise_rate: float = 0.0
    exposure: float = 0.01
    n_frames: int = 20
    saturation_low: int = 100
    saturation_high: int = 160
    saturate: bool = True
    # evaluation
    tolerance_us: int = 1000
    align: bool = False
    # run
    seed: int = 0
    threads: int = 1

    def event_params(self) -> EventNoiseParams:
        return EventNoiseParams(self.sigma2_proc, self.sigma2_iso, self.sigma2_ref, self.rho_bar,
                                self.neighborhood_radius, self.q_cap)

    def frame_params(self) -> FrameNoiseParams:
        return FrameNoiseParams(self.sigma2_im, self.i_offset)

    def augment_params(self) -> AugmentParams:
        return AugmentParams(self.c_nominal, self.n_min, self.eps_l, self.iterations,
                             self.min_weight)

    def filter_config(self) -> FilterConfig:
        return FilterConfig(p0=self.p0, mode=self.mode, k_const=self.k,
                            output_rate=self.output_rate,
                            calibrated_events=self.calibrated_events)

    def validate(self):
        """Check every parameter against its module's invariants."""
        try:
            self.event_params()
            self.frame_params()
            self.augment_params()
            self.filter_config()
        except ValueError as exc:
            raise ConfigError(str(exc)) from None
        if self.threads < 1:
            raise ConfigError("threads must be >= 1")
        if not 0 <= self.seed < 2 ** 64:
            raise ConfigError("seed must be an unsigned 64-bit integer")
        if not 0 <= self.saturation_low < self.saturation_high <= 255:
            raise ConfigError("saturation bounds must satisfy 0 <= low < high <= 255")
        if self.tolerance_us < 0:
            raise ConfigError("tolerance_us must be non-negative")
        if self.r_max is not None and self.r_max <= 0:
            raise ConfigError("r_max must be positive")
        if self.tone_scale is not None and self.tone_scale <= 0:
            raise ConfigError("tone_scale must be positive")
        return self

    def to_text(self) -> str:
        lines = []
        for f in fields(self):
            v = getattr(self, f.name)
            lines.append(f"{f.name} = {'' if v is None else v}")
        return "\n".join(lines) + "\n"


_TYPES = {f.name: f.type for f in fields(RunConfig)}


def _convert(key: str, text: str):
    kind = _TYPES[key]
    text = text.strip()
    optional = "None" in kind
    if text == "" or text.lower() == "none":
        if optional:
            return None
        raise ConfigError(f"{key} requires a value")
    try:
        if kind.startswith("bool"):
            low = text.lower()
            if low in ("1", "true", "yes", "on"):
                return True
            if low in ("0", "false", "no", "off"):
                return False
            raise ValueError(text)
        if kind.startswith("int"):
            return int(text)
        if kind.startswith("float"):
            return float(text)
    except ValueError:
        raise ConfigError(f"{key}: cannot parse {text!r} as {kind}") from None
    return text


def parse_config_text(text: str, source: str = "<config>") -> dict:
    values = {}
    for n, line in enumerate(text.splitlines(), start=1):
        s = line.split("#", 1)[0].strip()
        if not s:
            continue
        if "=" not in s:
            raise ConfigError(f"{source}:{n}: expected 'key = value'")
        key, value = (p.strip() for p in s.split("=", 1))
        key = key.replace("-", "_")
        if key not in _TYPES:
            raise ConfigError(f"{source}:{n}: unknown key {key!r}")
        values[key] = _convert(key, value)
    return values


def load_config(path=None, overrides: dict | None = None) -> RunConfig:
    """Defaults, then the file at ``path``, then non-None ``overrides``."""
    values = {}
    if path is not None:
        p = Path(path)
        if not p.exists():
            raise ConfigError(f"config file not found: {p}")
        values.update(parse_config_text(p.read_text(encoding="utf-8"), str(p)))
    for k, v in (overrides or {}).items():
        if v is not None:
            if k not in _TYPES:
                raise ConfigError(f"unknown key {k!r}")
            values[k] = v
    return dataclasses.replace(RunConfig(), **values).validate()
