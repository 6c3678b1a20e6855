"""Event engine: one deterministic run of source + detector + controller."""
from __future__ import annotations

import hashlib
import heapq
import json
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from enum import IntEnum
from pathlib import Path
from typing import Iterable, Iterator, NamedTuple

import numpy as np

from . import _kernel as K
from .detector import DetectorParams, detection_probability, dark_rate, sample_jitter
from .quench import ConfigError, EngineFault, EventKind, Phase, QuenchConfig, decode_actions
from .sources import (PS_PER_S, STREAM_DARK, STREAM_JITTER, STREAM_PHOTON, STREAM_PHOTON_DETECT,
                      STREAM_TRAP, PhotonStream, SimClock, format_seconds, photon_arrivals,
                      poisson_arrivals, substream)


class Cause(IntEnum):
    PHOTON = 0
    DARK = 1
    AFTERPULSE = 2


class DetectionRecord(NamedTuple):
    t_physical: int   # ps, avalanche start
    t_recorded: int   # ps, with jitter
    cause: Cause
    armed_at: int     # ps, start of the armed interval the avalanche ended


def config_digest(**parts) -> str:
    """Stable short hash of canonicalized config objects."""
    def canon(x):
        if hasattr(x, "to_dict"):
            return canon(x.to_dict())
        if isinstance(x, dict):
            return {str(k): canon(v) for k, v in sorted(x.items())}
        if isinstance(x, (list, tuple)):
            return [canon(v) for v in x]
        if isinstance(x, float):
            return repr(x)
        return x
    blob = json.dumps(canon(parts), sort_keys=True, separators=(",", ":"))
    return hashlib.sha256(blob.encode()).hexdigest()[:16]


@dataclass
class Candidates:
    """Realized candidate avalanche causes for one run."""
    photon_t: np.ndarray
    photon_mark: np.ndarray   # True: would convert if armed
    dark_t: np.ndarray


def draw_candidates(source: PhotonStream, det: DetectorParams, quench: QuenchConfig,
                    clock: SimClock) -> Candidates:
    dur = clock.duration_ps
    photon_t = photon_arrivals(source, dur, substream(clock.seed, STREAM_PHOTON))
    eta = detection_probability(quench.v_on, det)
    photon_mark = substream(clock.seed, STREAM_PHOTON_DETECT).random(photon_t.size) < eta
    dark_t = poisson_arrivals(dark_rate(quench.v_on, det.temperature, det), dur,
                              substream(clock.seed, STREAM_DARK))
    return Candidates(photon_t, photon_mark, dark_t)


@dataclass
class EventLog:
    t_recorded: np.ndarray
    t_physical: np.ndarray
    cause: np.ndarray
    armed_at: np.ndarray
    meta: dict = field(default_factory=dict)
    trace: np.ndarray | None = None

    def __len__(self):
        return self.t_recorded.size

    def __iter__(self) -> Iterator[DetectionRecord]:
        for tp, tr, c, a in zip(self.t_physical.tolist(), self.t_recorded.tolist(),
                                self.cause.tolist(), self.armed_at.tolist()):
            yield DetectionRecord(tp, tr, Cause(c), a)

    @property
    def records(self) -> list[DetectionRecord]:
        return list(self)

    @property
    def duration(self) -> float:
        return self.meta["duration"]

    @property
    def armed_time(self) -> float:
        return self.meta["armed_time_ps"] / PS_PER_S

    def count(self, cause: Cause | None = None) -> int:
        if cause is None:
            return len(self)
        return int(np.count_nonzero(self.cause == int(cause)))

    def counts_by_cause(self) -> dict[str, int]:
        return {c.name.lower(): self.count(c) for c in Cause}

    def rate(self) -> float:
        return len(self) / self.duration if self.duration > 0 else 0.0

    def to_csv(self) -> str:
        lines = ["t_recorded_s,t_physical_s,cause"]
        names = [c.name.lower() for c in Cause]
        for tr, tp, c in zip(self.t_recorded.tolist(), self.t_physical.tolist(), self.cause.tolist()):
            lines.append(f"{format_seconds(tr)},{format_seconds(tp)},{names[c]}")
        return "\n".join(lines) + "\n"

    def meta_text(self) -> str:
        return "".join(f"{k} = {v}\n" for k, v in self.meta.items())

    def write(self, path) -> tuple[Path, Path]:
        """Write the CSV and its ``.meta`` key-value sidecar."""
        path = Path(path)
        path.write_text(self.to_csv())
        side = path.with_suffix(path.suffix + ".meta")
        side.write_text(self.meta_text())
        return path, side

    def trace_csv(self) -> str:
        if self.trace is None:
            raise ValueError("run was not traced")
        return format_trace(self.trace, self.meta)


def format_trace(trace: np.ndarray, meta: dict) -> str:
    quench = QuenchConfig(**meta["quench"])
    lines = ["t,phase_from,phase_to,event,actions"]
    for t, a, b, kind, bits in trace.tolist():
        acts = ";".join(_action_label(x) for x in decode_actions(bits, t, quench))
        lines.append(f"{format_seconds(t)},{Phase(a).name.lower()},{Phase(b).name.lower()},"
                     f"{EventKind(kind).name.lower()},{acts}")
    return "\n".join(lines) + "\n"


def _action_label(action) -> str:
    if action.name == "schedule":
        return f"schedule:{action.arg.kind.name.lower()}@{format_seconds(action.arg.t)}"
    if action.name == "set_bias":
        return f"set_bias:{action.arg.value}"
    return action.name


def validate(source: PhotonStream, det: DetectorParams, quench: QuenchConfig, clock: SimClock) -> None:
    quench.check_detector(det)
    if clock.duration <= 0:
        raise ConfigError("duration must be > 0")
    if clock.duration_ps >= 2**61:
        raise ConfigError("duration too long for picosecond clock")


def run(source: PhotonStream, det: DetectorParams, quench: QuenchConfig, clock: SimClock,
        trace: bool = False, fast_forward: bool = True, candidates: Candidates | None = None) -> EventLog:
    """Simulate one run and return its time-ordered detection log.

    ``fast_forward`` lets gated runs jump over gates that cannot contain a
    candidate; it is disabled when a full controller trace is requested.
    """
    validate(source, det, quench, clock)
    if candidates is None:
        candidates = draw_candidates(source, det, quench, clock)
    dur = clock.duration_ps
    trap_mean = det.trap_fill_per_ns * quench.quench_latency * 1e9 if det.traps_enabled else 0.0
    det_t, det_c, det_a, tallies, tr = K.run_kernel(
        candidates.photon_t, candidates.photon_mark, candidates.dark_t,
        quench.gated, np.int64(quench.period_ps), np.int64(quench.gate_width_ps),
        np.int64(quench.dead_ps), np.int64(quench.latency_ps), np.int64(dur),
        float(trap_mean), float(det.tau_trap() * PS_PER_S), float(det.p_trigger),
        substream(clock.seed, STREAM_TRAP), bool(trace), bool(fast_forward and not trace))

    jitter = np.rint(np.asarray(sample_jitter(det, substream(clock.seed, STREAM_JITTER),
                                              size=det_t.size)) * PS_PER_S).astype(np.int64)
    t_rec = np.clip(det_t + jitter, 0, dur - 1)
    order = np.lexsort((det_c, det_t, t_rec))
    cause = det_c[order].astype(np.int8)

    meta = {
        "seed": clock.seed,
        "duration": clock.duration,
        "digest": config_digest(source=source, det=det, quench=quench, duration=clock.duration,
                                seed=clock.seed),
        "mode": quench.mode.label,
        "dead_time": quench.effective_dead_time,
        "photons_generated": int(candidates.photon_t.size),
        "photons_detected": int(tallies[K.T_PHOTON_DET]),
        "photons_lost_unarmed": int(tallies[K.T_PHOTON_LOST]),
        "photons_not_converted": int(tallies[K.T_PHOTON_FAIL]),
        "dark_generated": int(candidates.dark_t.size),
        "dark_lost_unarmed": int(tallies[K.T_DARK_LOST]),
        "traps_filled": int(tallies[K.T_TRAP_FILLED]),
        "traps_released_no_trigger": int(tallies[K.T_TRAP_NO_TRIGGER]),
        "traps_discarded_unarmed": int(tallies[K.T_TRAP_DISCARDED]),
        "traps_remaining": int(tallies[K.T_TRAP_REMAINING]),
        "armed_time_ps": int(tallies[K.T_ARMED_PS]),
        "count_photon": int(tallies[K.T_PHOTON_DET]),
        "count_dark": int(tallies[K.T_DARK_DET]),
        "count_afterpulse": int(tallies[K.T_AP_DET]),
        "quench": quench.to_dict(),
    }
    return EventLog(t_recorded=t_rec[order], t_physical=det_t[order], cause=cause,
                    armed_at=det_a[order], meta=meta, trace=tr if trace else None)


def _run_job(job):
    return run(*job)


def run_batch(jobs: Iterable[tuple], workers: int | None = None) -> list[EventLog]:
    """Run independent (source, det, quench, clock) jobs; result order follows input order."""
    jobs = list(jobs)
    if not workers or workers <= 1 or len(jobs) <= 1:
        return [run(*job) for job in jobs]
    with ProcessPoolExecutor(max_workers=workers) as pool:
        return list(pool.map(_run_job, jobs))


def merge_streams(generators: Iterable[Iterable]) -> Iterator:
    """Merge timestamp-ordered streams into one non-decreasing sequence.

    Items are timestamps or tuples whose first element is the timestamp.
    Ties keep generator order.  A stream that goes backwards raises
    :class:`EngineFault`.
    """
    def checked(i, gen):
        last = None
        for item in gen:
            t = item[0] if isinstance(item, tuple) else item
            if last is not None and t < last:
                raise EngineFault(f"stream {i} not monotone: {t} after {last}")
            last = t
            yield (t, i, item)

    for _, _, item in heapq.merge(*(checked(i, g) for i, g in enumerate(generators))):
        yield item
