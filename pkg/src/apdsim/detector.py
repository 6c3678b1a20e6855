"""Stochastic model of the InGaAs/InP APD.

Bias-dependent detection probability, dark-count rate, trapped-carrier
afterpulsing and Gaussian timing jitter.
"""
from __future__ import annotations

import bisect
import dataclasses
from dataclasses import dataclass
from enum import Enum
from pathlib import Path

import numba
import numpy as np
import yaml

from .sources import FWHM_PER_SIGMA, PS_PER_S, ParameterError

T_REF = 223.0  # K, reference temperature of the dark and trap models
JITTER_CLIP_SIGMA = 6.0


@dataclass(frozen=True)
class DetectorParams:
    v_breakdown: float = 55.0
    eta_max: float = 0.35
    eta_slope: float = 0.2          # 1/V
    dark_n0: float = 1100.0         # counts/s at breakdown, T_REF
    dark_slope: float = 0.25        # 1/V
    dark_activation: float = 3000.0  # K
    temperature: float = T_REF
    trap_fill_per_ns: float = 2.9
    tau_ref: float = 4.8e-6         # s, detrapping time at T_REF
    trap_activation: float = 1000.0  # K
    p_trigger: float = 0.5
    jitter_fwhm: float = 400e-12    # s

    def __post_init__(self):
        if not 0.0 <= self.eta_max <= 1.0:
            raise ParameterError(f"eta_max must lie in [0, 1], got {self.eta_max}")
        if not 0.0 <= self.p_trigger <= 1.0:
            raise ParameterError(f"p_trigger must lie in [0, 1], got {self.p_trigger}")
        if not self.temperature > 0:
            raise ParameterError("temperature must be > 0")
        if not self.tau_ref > 0:
            raise ParameterError("tau_ref must be > 0")
        # zero is allowed where it switches a mechanism off
        for name in ("eta_slope", "dark_n0", "dark_slope", "dark_activation",
                     "trap_fill_per_ns", "trap_activation", "jitter_fwhm"):
            if getattr(self, name) < 0:
                raise ParameterError(f"{name} must be >= 0, got {getattr(self, name)}")
        if self.v_breakdown <= 0:
            raise ParameterError("v_breakdown must be > 0")

    def tau_trap(self, temperature: float | None = None) -> float:
        """Detrapping time constant; longer when colder."""
        T = self.temperature if temperature is None else temperature
        return self.tau_ref * np.exp(self.trap_activation * (1.0 / T - 1.0 / T_REF))

    @property
    def jitter_sigma(self) -> float:
        return self.jitter_fwhm / FWHM_PER_SIGMA

    @property
    def traps_enabled(self) -> bool:
        return self.trap_fill_per_ns > 0 and self.p_trigger > 0

    def without_traps(self) -> "DetectorParams":
        return dataclasses.replace(self, trap_fill_per_ns=0.0)

    def replace(self, **changes) -> "DetectorParams":
        return dataclasses.replace(self, **changes)

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "DetectorParams":
        known = {f.name for f in dataclasses.fields(cls)}
        unknown = sorted(set(d) - known)
        if unknown:
            raise ParameterError(f"unknown detector parameter(s): {', '.join(unknown)}")
        return cls(**{k: float(v) for k, v in d.items()})


def load_detector_params(path) -> DetectorParams:
    with open(path) as fh:
        d = yaml.safe_load(fh) or {}
    if not isinstance(d, dict):
        raise ParameterError(f"{path}: expected a flat key-value mapping")
    return DetectorParams.from_dict(d)


def save_detector_params(params: DetectorParams, path) -> None:
    lines = [f"{k}: {v!r}" for k, v in params.to_dict().items()]
    Path(path).write_text("\n".join(lines) + "\n")


class BiasLevel(str, Enum):
    V_REF = "v_ref"
    V_ON = "v_on"


def detection_probability(v_bias: float, params: DetectorParams) -> float:
    excess = v_bias - params.v_breakdown
    if excess <= 0:
        return 0.0
    return params.eta_max * -np.expm1(-params.eta_slope * excess)


def bias_for_efficiency(eta: float, params: DetectorParams) -> float:
    """Inverse of :func:`detection_probability` on the rising branch."""
    if not 0 < eta < params.eta_max:
        raise ParameterError(f"efficiency {eta} not reachable below eta_max={params.eta_max}")
    return params.v_breakdown - np.log1p(-eta / params.eta_max) / params.eta_slope


def dark_rate(v_bias: float, temperature: float, params: DetectorParams) -> float:
    excess = v_bias - params.v_breakdown
    return (params.dark_n0 * np.exp(params.dark_slope * excess)
            * np.exp(-params.dark_activation * (1.0 / temperature - 1.0 / T_REF)))


@numba.njit(cache=True)
def draw_traps(rng, mean_traps, tau_ps, p_trigger, now_ps):
    """Fill traps after one avalanche.

    Returns (release_ps, triggers).  Draw order is fixed: the trap count,
    then one (delay, trigger-uniform) pair per trap, so every caller that
    replays a generator sees the same traps.
    """
    k = rng.poisson(mean_traps) if mean_traps > 0 else 0
    release = np.empty(k, dtype=np.int64)
    triggers = np.empty(k, dtype=np.bool_)
    for i in range(k):
        d = np.int64(np.rint(rng.exponential(tau_ps)))
        if d < 1:
            d = 1
        release[i] = now_ps + d
        triggers[i] = rng.random() < p_trigger
    return release, triggers


@dataclass(frozen=True)
class TrapState:
    """Occupied traps as sorted release times (int ps)."""
    occupied: tuple = ()
    triggers: tuple = ()
    filled: int = 0
    released: int = 0

    def __len__(self):
        return len(self.occupied)

    def release_until(self, t_ps: int) -> tuple["TrapState", list]:
        """Release every trap with release time <= t_ps."""
        i = bisect.bisect_right(self.occupied, t_ps)
        out = list(zip(self.occupied[:i], self.triggers[:i]))
        return dataclasses.replace(self, occupied=self.occupied[i:], triggers=self.triggers[i:],
                                   released=self.released + i), out


def fill_traps(avalanche_duration: float, trap_state: TrapState, params: DetectorParams,
               now_ps: int, rng: np.random.Generator) -> TrapState:
    """Add Poisson(trap_fill_per_ns * duration_ns) traps released after ``now_ps``."""
    if avalanche_duration < 0:
        raise ParameterError("avalanche_duration must be >= 0")
    mean = params.trap_fill_per_ns * avalanche_duration * 1e9
    if mean == 0:
        return trap_state
    release, triggers = draw_traps(rng, mean, params.tau_trap() * PS_PER_S, params.p_trigger, int(now_ps))
    pairs = sorted(zip(trap_state.occupied + tuple(int(r) for r in release),
                       trap_state.triggers + tuple(bool(x) for x in triggers)))
    return TrapState(occupied=tuple(p[0] for p in pairs), triggers=tuple(p[1] for p in pairs),
                     filled=trap_state.filled + len(release), released=trap_state.released)


def next_trap_release(trap_state: TrapState, after: int):
    """Earliest release time strictly greater than ``after``, or None."""
    i = bisect.bisect_right(trap_state.occupied, after)
    return trap_state.occupied[i] if i < len(trap_state.occupied) else None


def sample_jitter(params: DetectorParams, rng: np.random.Generator, size=None):
    """Gaussian timing offsets in seconds, clipped at 6 sigma."""
    sigma = params.jitter_sigma
    if sigma == 0:
        return 0.0 if size is None else np.zeros(size)
    x = rng.normal(0.0, sigma, size=size)
    return np.clip(x, -JITTER_CLIP_SIGMA * sigma, JITTER_CLIP_SIGMA * sigma)
