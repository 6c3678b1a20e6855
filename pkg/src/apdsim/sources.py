"""Optical input processes, simulation clock and seeded random sub-streams.

All internal timestamps are integer picoseconds (int64).  Public
constructors take seconds and Hz.
"""
from __future__ import annotations

import dataclasses
from dataclasses import dataclass
from enum import Enum

import numpy as np

PS_PER_S = 10**12
FWHM_PER_SIGMA = 2.0 * np.sqrt(2.0 * np.log(2.0))

# Fixed sub-stream keys.  Adding a process means adding a key, never
# renumbering, so existing streams keep their draws.
STREAM_PHOTON = 1
STREAM_PHOTON_DETECT = 2
STREAM_DARK = 3
STREAM_TRAP = 4
STREAM_JITTER = 5


class ParameterError(ValueError):
    """Invalid physical or configuration parameter."""


def to_ps(seconds: float) -> int:
    return int(round(seconds * PS_PER_S))


def ps_to_seconds(ps) -> float:
    return ps / PS_PER_S


def format_seconds(ps: int) -> str:
    """Exact decimal rendering of an integer-picosecond timestamp."""
    ps = int(ps)
    sign = "-" if ps < 0 else ""
    ps = abs(ps)
    return f"{sign}{ps // PS_PER_S}.{ps % PS_PER_S:012d}"


def period_ps(f_trig: float) -> int:
    return to_ps(1.0 / f_trig)


def substream(seed: int, key: int) -> np.random.Generator:
    """Independent generator for one random process of a run."""
    return np.random.default_rng(np.random.SeedSequence(entropy=int(seed), spawn_key=(int(key),)))


class SourceKind(str, Enum):
    CW = "cw"
    PULSED = "pulsed"
    DARK = "dark"


@dataclass(frozen=True)
class PhotonStream:
    kind: SourceKind = SourceKind.DARK
    rate_n: float = 0.0
    f_trig: float = 0.0
    mean_photons_per_pulse: float = 0.0
    shutter_open: bool = True
    envelope: str = "delta"
    envelope_fwhm: float = 0.0

    def __post_init__(self):
        object.__setattr__(self, "kind", SourceKind(self.kind))
        if self.rate_n < 0:
            raise ParameterError(f"rate_n must be >= 0, got {self.rate_n}")
        if self.kind is SourceKind.PULSED and not self.f_trig > 0:
            raise ParameterError(f"pulsed source needs f_trig > 0, got {self.f_trig}")
        if self.mean_photons_per_pulse < 0:
            raise ParameterError("mean_photons_per_pulse must be >= 0")
        if self.envelope not in ("delta", "gaussian"):
            raise ParameterError(f"unknown pulse envelope {self.envelope!r}")
        if self.envelope == "gaussian" and not self.envelope_fwhm > 0:
            raise ParameterError("gaussian envelope needs envelope_fwhm > 0")

    @property
    def mean_rate(self) -> float:
        """Incident photons per second with the shutter state applied."""
        if not self.shutter_open or self.kind is SourceKind.DARK:
            return 0.0
        if self.kind is SourceKind.CW:
            return self.rate_n
        return self.f_trig * self.mean_photons_per_pulse

    def to_dict(self) -> dict:
        d = dataclasses.asdict(self)
        d["kind"] = self.kind.value
        return d


def make_cw_source(rate_n: float) -> PhotonStream:
    return PhotonStream(kind=SourceKind.CW, rate_n=float(rate_n))


def make_pulsed_source(f_trig: float, mean_photons_per_pulse: float,
                       envelope: str = "delta", envelope_fwhm: float = 0.0) -> PhotonStream:
    if not f_trig > 0:
        raise ParameterError(f"f_trig must be > 0, got {f_trig}")
    return PhotonStream(kind=SourceKind.PULSED, f_trig=float(f_trig),
                        mean_photons_per_pulse=float(mean_photons_per_pulse),
                        envelope=envelope, envelope_fwhm=float(envelope_fwhm))


def make_dark_source() -> PhotonStream:
    return PhotonStream(kind=SourceKind.DARK)


def set_shutter(stream: PhotonStream, open: bool) -> PhotonStream:
    return dataclasses.replace(stream, shutter_open=bool(open))


@dataclass(frozen=True)
class SimClock:
    duration: float
    seed: int = 0
    t: float = 0.0

    def __post_init__(self):
        if self.duration < 0:
            raise ParameterError("duration must be >= 0")

    @property
    def duration_ps(self) -> int:
        return to_ps(self.duration)


def poisson_arrivals(rate: float, duration_ps: int, rng: np.random.Generator) -> np.ndarray:
    """Homogeneous Poisson process on [0, duration_ps) as sorted int64 ps.

    Draws the total count, then places the points uniformly (order
    statistics of the uniform distribution).
    """
    if rate <= 0 or duration_ps <= 0:
        return np.empty(0, dtype=np.int64)
    n = rng.poisson(rate * duration_ps / PS_PER_S)
    t = rng.integers(0, duration_ps, size=n, dtype=np.int64)
    t.sort()
    return t


def pulse_epochs(f_trig: float, duration_ps: int) -> np.ndarray:
    p = period_ps(f_trig)
    n = -(-duration_ps // p) if duration_ps > 0 else 0
    return np.arange(n, dtype=np.int64) * p


def photon_arrivals(stream: PhotonStream, duration_ps: int, rng: np.random.Generator) -> np.ndarray:
    """Photon arrival times of ``stream`` over one run, sorted int64 ps."""
    if stream.mean_rate == 0.0:
        return np.empty(0, dtype=np.int64)
    if stream.kind is SourceKind.CW:
        return poisson_arrivals(stream.rate_n, duration_ps, rng)
    epochs = pulse_epochs(stream.f_trig, duration_ps)
    counts = rng.poisson(stream.mean_photons_per_pulse, size=epochs.size)
    t = np.repeat(epochs, counts)
    if stream.envelope == "gaussian" and t.size:
        sigma = stream.envelope_fwhm / FWHM_PER_SIGMA * PS_PER_S
        t = t + np.rint(rng.normal(0.0, sigma, size=t.size)).astype(np.int64)
        t = t[(t >= 0) & (t < duration_ps)]
        t.sort()
    return t
