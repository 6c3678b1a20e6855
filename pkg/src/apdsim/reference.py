"""Brute-force time-stepped reference simulator (1 ns grid).

Used only as an oracle for the event engine.  It walks every nanosecond,
decides armed/unarmed from elapsed timers and gate arithmetic, and never
touches the controller state machine.  It consumes the same realized
candidates and the same trap generator as the engine, so the two runs
differ only by time discretization.
"""
import numba
import numpy as np

from .detector import DetectorParams, draw_traps
from .engine import Candidates, draw_candidates
from .quench import ConfigError, QuenchConfig
from .sources import PS_PER_S, STREAM_TRAP, PhotonStream, SimClock, substream

NS = 1000  # ps


@numba.njit(cache=True)
def _stepped(photon_t, photon_mark, dark_t, gated, period_ns, width_ns, dead_ns, latency_ns,
             n_steps, trap_mean, tau_ps, p_trigger, trap_rng):
    counts = np.zeros(3, dtype=np.int64)  # photon, dark, afterpulse
    rel = np.empty(0, dtype=np.int64)      # pending trap releases, sorted
    trg = np.empty(0, dtype=np.bool_)
    head = 0
    ip, idk = 0, 0
    np_, nd = photon_t.size, dark_t.size
    ready_at = 0         # free-running: first step at which the diode is armed again
    first_gate = 0       # gated: first gate index allowed to arm
    big = np.int64(2**62)
    nxt = 0
    for s in range(n_steps):
        lo = s * NS
        hi = lo + NS
        if nxt >= hi:
            continue
        if gated:
            gi = s // period_ns
            armed = (s - gi * period_ns) < width_ns and gi >= first_gate
        else:
            armed = s >= ready_at
        while True:
            tp = photon_t[ip] if ip < np_ else big
            td = dark_t[idk] if idk < nd else big
            tt = rel[head] if head < rel.size else big
            t = min(tp, td, tt)
            if t >= hi:
                nxt = t
                break
            cause = -1
            if tp == t:
                if photon_mark[ip]:
                    cause = 0
                ip += 1
            elif td == t:
                cause = 1
                idk += 1
            else:
                if trg[head]:
                    cause = 2
                head += 1
            if cause < 0 or not armed:
                continue
            counts[cause] += 1
            armed = False
            if gated:
                first_gate = s // period_ns + 2
            else:
                ready_at = s + latency_ns + dead_ns
            r, g = draw_traps(trap_rng, trap_mean, tau_ps, p_trigger, t)
            if r.size:
                keep = rel.size - head
                allr = np.empty(keep + r.size, dtype=np.int64)
                allg = np.empty(keep + r.size, dtype=np.bool_)
                allr[:keep] = rel[head:]
                allg[:keep] = trg[head:]
                allr[keep:] = r
                allg[keep:] = g
                order = np.argsort(allr, kind="mergesort")
                rel = allr[order]
                trg = allg[order]
                head = 0
    return counts


def reference_counts(source: PhotonStream, det: DetectorParams, quench: QuenchConfig, clock: SimClock,
                     candidates: Candidates | None = None) -> dict[str, int]:
    """Detections by cause from the time-stepped simulator."""
    for name, ps in (("duration", clock.duration_ps), ("quench_latency", quench.latency_ps),
                     ("dead_time", quench.dead_ps), ("period", quench.period_ps),
                     ("gate_width", quench.gate_width_ps)):
        if ps % NS:
            raise ConfigError(f"{name} must be a whole number of nanoseconds for the stepped reference")
    if candidates is None:
        candidates = draw_candidates(source, det, quench, clock)
    trap_mean = det.trap_fill_per_ns * quench.quench_latency * 1e9 if det.traps_enabled else 0.0
    counts = _stepped(candidates.photon_t, candidates.photon_mark, candidates.dark_t, quench.gated,
                      quench.period_ps // NS, quench.gate_width_ps // NS, quench.dead_ps // NS,
                      quench.latency_ps // NS, clock.duration_ps // NS, float(trap_mean),
                      float(det.tau_trap() * PS_PER_S), float(det.p_trigger),
                      substream(clock.seed, STREAM_TRAP))
    return {"photon": int(counts[0]), "dark": int(counts[1]), "afterpulse": int(counts[2])}
