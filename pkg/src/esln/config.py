"""Flat ``key = value`` run configuration shared by the ensemble and the CLI."""

from __future__ import annotations

import dataclasses
import math
from dataclasses import dataclass, field, fields

from .kernels import BathSpec, TimeGrid
from .noise import ScalingSpec
from .propagate import SchemeSpec, SpinBosonDrive

__all__ = ["ConfigError", "RunConfig", "load_config", "parse_overrides"]

SCENARIOS = ("correlations", "stationary", "decay", "lz", "calibrate", "variance-scan")
INITS = ("thermal", "pure_up")


class ConfigError(ValueError):
    """Invalid configuration; ``key`` names the offending field."""

    def __init__(self, key: str, message: str):
        super().__init__(f"{key}: {message}")
        self.key = key


def _floats(text: str) -> tuple[float, ...]:
    return tuple(float(x) for x in text.replace(",", " ").split())


@dataclass(frozen=True)
class RunConfig:
    # bath
    alpha: float = 0.05
    omega_c: float = 20.0
    beta_hbar: float = 1.0
    # drive
    delta: float = 1.0
    epsilon0: float = -1.0
    kappa: float = 0.0
    # grids
    t0: float = 0.0
    t_max: float = 6.0
    dt: float = 1e-3
    dtau: float = 1e-3
    # scheme
    stepper: str = "heun"
    variant: str = "original"
    representation: str = "density"
    stratonovich: bool = True
    init: str = "thermal"
    # sampling
    n_samples: int = 1000
    seed: int = 0
    workers: int = 1
    batches: int = 12
    chunk: int = 64
    # variance reduction
    r_nu_eta: float = 0.5
    r_mu_eta: float = 1.0
    # scenario
    scenario: str = "stationary"
    out: str = "out"
    window_start: float = math.nan
    window_end: float = math.nan
    t0_list: tuple = (-5.0, -10.0, -10.06, -20.0, -40.0)
    r_values: tuple = (0.1, 0.5, 5.0)
    n_lags: int = 20

    def __post_init__(self):
        positive = ("omega_c", "beta_hbar", "dt", "dtau", "r_nu_eta", "r_mu_eta")
        for key in positive:
            v = getattr(self, key)
            if not (math.isfinite(v) and v > 0):
                raise ConfigError(key, "must be a positive finite number")
        if not (math.isfinite(self.alpha) and self.alpha >= 0):
            raise ConfigError("alpha", "must be non-negative")
        if not self.t_max > self.t0:
            raise ConfigError("t_max", "must exceed t0")
        for key in ("n_samples", "workers", "chunk"):
            if getattr(self, key) < 1:
                raise ConfigError(key, "must be at least 1")
        if self.batches < 2:
            raise ConfigError("batches", "must be at least 2")
        if self.scenario not in SCENARIOS:
            raise ConfigError("scenario", f"unknown scenario {self.scenario!r}")
        if self.init not in INITS:
            raise ConfigError("init", f"must be one of {INITS}")
        try:
            self.scheme()
        except ValueError as exc:
            raise ConfigError("scheme", str(exc)) from None
        try:
            self.grid()
        except ValueError as exc:
            raise ConfigError("dtau", str(exc)) from None

    def bath(self) -> BathSpec:
        return BathSpec(self.alpha, self.omega_c, self.beta_hbar)

    def drive(self) -> SpinBosonDrive:
        return SpinBosonDrive(self.delta, self.epsilon0, self.kappa)

    def grid(self) -> TimeGrid:
        return TimeGrid.from_span(self.t0, self.t_max, self.dt, self.beta_hbar, self.dtau)

    def scheme(self) -> SchemeSpec:
        return SchemeSpec(self.stepper, self.variant, self.representation,
                          self.stratonovich)

    def scaling(self) -> ScalingSpec:
        return ScalingSpec(self.r_nu_eta, self.r_mu_eta)

    def replace(self, **changes) -> "RunConfig":
        return dataclasses.replace(self, **changes)

    def to_text(self) -> str:
        lines = []
        for f in fields(self):
            v = getattr(self, f.name)
            if isinstance(v, tuple):
                v = ",".join(repr(float(x)) for x in v)
            elif isinstance(v, float):
                v = repr(v)
            lines.append(f"{f.name} = {v}")
        return "\n".join(lines) + "\n"


_FIELDS = {f.name: f for f in fields(RunConfig)}


def _coerce(key: str, text: str):
    if key not in _FIELDS:
        raise ConfigError(key, "unknown configuration key")
    default = _FIELDS[key].default
    text = text.strip()
    try:
        if isinstance(default, bool):
            low = text.lower()
            if low in ("1", "true", "yes", "on"):
                return True
            if low in ("0", "false", "no", "off"):
                return False
            raise ValueError(text)
        if isinstance(default, int):
            return int(text)
        if isinstance(default, float):
            return float(text)
        if isinstance(default, tuple):
            return _floats(text)
    except ValueError:
        raise ConfigError(key, f"cannot parse {text!r}") from None
    return text


def parse_overrides(pairs) -> dict:
    """Parse ``key=value`` strings (or ``key = value`` lines)."""
    out = {}
    for raw in pairs:
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(line, "expected key=value")
        key, value = line.split("=", 1)
        key = key.strip().replace("-", "_")
        out[key] = _coerce(key, value)
    return out


def load_config(path=None, overrides=(), **explicit) -> RunConfig:
    """Defaults, then the file at ``path``, then ``overrides``, then ``explicit``."""
    values = {}
    if path is not None:
        with open(path, encoding="utf-8") as fh:
            values.update(parse_overrides(fh.read().splitlines()))
    values.update(parse_overrides(overrides))
    values.update({k: v for k, v in explicit.items() if v is not None})
    for key in values:
        if key not in _FIELDS:
            raise ConfigError(key, "unknown configuration key")
    return RunConfig(**values)
