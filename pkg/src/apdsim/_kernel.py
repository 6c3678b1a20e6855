"""Compiled discrete-event loop behind :func:`apdsim.engine.run`.

Candidate avalanche causes (photons, dark carriers, trap releases) are
merged in time order with controller events.  Controller events win ties
against candidates; among candidates photon < dark < afterpulse.
"""
import numba
import numpy as np

from .detector import draw_traps
from .quench import ACT_SCHED_DEAD, fsm_step

INF = np.int64(2**62)

ARMED = 1
IDLE_REF = 0
K_QUENCH, K_DEAD, K_REARM, K_FALL, K_RISE, K_AVAL = 0, 1, 2, 3, 4, 5
C_PHOTON, C_DARK, C_AFTERPULSE = 0, 1, 2

# tally slots
T_PHOTON_DET = 0
T_PHOTON_LOST = 1      # arrived while not armed
T_PHOTON_FAIL = 2      # arrived armed, not converted
T_DARK_DET = 3
T_DARK_LOST = 4
T_AP_DET = 5
T_TRAP_FILLED = 6
T_TRAP_NO_TRIGGER = 7  # released while armed, no avalanche
T_TRAP_DISCARDED = 8   # released while not armed
T_TRAP_REMAINING = 9
T_ARMED_PS = 10
N_TALLIES = 11


@numba.njit(cache=True)
def _grow(a, n):
    b = np.empty(max(n, 2 * a.size), dtype=a.dtype)
    b[:a.size] = a
    return b


@numba.njit(cache=True)
def _less(ht, hk, hs, i, j):
    if ht[i] != ht[j]:
        return ht[i] < ht[j]
    if hk[i] != hk[j]:
        return hk[i] < hk[j]
    return hs[i] < hs[j]


@numba.njit(cache=True)
def _swap(ht, hk, hs, hp, i, j):
    ht[i], ht[j] = ht[j], ht[i]
    hk[i], hk[j] = hk[j], hk[i]
    hs[i], hs[j] = hs[j], hs[i]
    hp[i], hp[j] = hp[j], hp[i]


@numba.njit(cache=True)
def heap_push(ht, hk, hs, hp, n, t, k, s, p):
    """Push onto a heap keyed by (t, k, s); caller guarantees capacity."""
    ht[n], hk[n], hs[n], hp[n] = t, k, s, p
    i = n
    while i > 0:
        parent = (i - 1) // 2
        if _less(ht, hk, hs, i, parent):
            _swap(ht, hk, hs, hp, i, parent)
            i = parent
        else:
            break
    return n + 1


@numba.njit(cache=True)
def heap_pop(ht, hk, hs, hp, n):
    """Remove the minimum; returns the new size (item left at index n-1)."""
    n -= 1
    _swap(ht, hk, hs, hp, 0, n)
    i = 0
    while True:
        left = 2 * i + 1
        if left >= n:
            break
        c = left
        if left + 1 < n and _less(ht, hk, hs, left + 1, left):
            c = left + 1
        if _less(ht, hk, hs, c, i):
            _swap(ht, hk, hs, hp, i, c)
            i = c
        else:
            break
    return n


@numba.njit(cache=True)
def _consume_photons(pt, mark, ip, t, armed, tallies):
    while ip < pt.size and pt[ip] < t:
        if armed and not mark[ip]:
            tallies[T_PHOTON_FAIL] += 1
        else:
            tallies[T_PHOTON_LOST] += 1
        ip += 1
    return ip


@numba.njit(cache=True)
def _consume_photons_gated(pt, mark, ip, t, period, width, tallies):
    # photons over a stretch of detection-free gates
    while ip < pt.size and pt[ip] < t:
        if pt[ip] % period < width and not mark[ip]:
            tallies[T_PHOTON_FAIL] += 1
        else:
            tallies[T_PHOTON_LOST] += 1
        ip += 1
    return ip


@numba.njit(cache=True)
def _consume_dark(dt, idk, t, tallies):
    while idk < dt.size and dt[idk] < t:
        tallies[T_DARK_LOST] += 1
        idk += 1
    return idk


@numba.njit(cache=True)
def run_kernel(photon_t, photon_mark, dark_t, gated, period, width, dead, latency, duration,
               trap_mean, tau_ps, p_trigger, trap_rng, trace, fast_forward):
    tallies = np.zeros(N_TALLIES, dtype=np.int64)
    marked = np.flatnonzero(photon_mark)

    det_t = np.empty(1024, dtype=np.int64)
    det_c = np.empty(1024, dtype=np.int8)
    det_a = np.empty(1024, dtype=np.int64)
    nd = 0

    tr = np.empty((1024, 5), dtype=np.int64)  # t, from, to, kind, action bits
    ntr = 0

    # controller event queue
    ft = np.empty(8, dtype=np.int64)
    fk = np.empty(8, dtype=np.int64)
    fs = np.empty(8, dtype=np.int64)
    fp = np.empty(8, dtype=np.int64)
    fn = 0
    # trap release queue; payload = triggers-on-release flag
    qt = np.empty(1024, dtype=np.int64)
    qk = np.zeros(1024, dtype=np.int64)
    qs = np.empty(1024, dtype=np.int64)
    qp = np.empty(1024, dtype=np.int64)
    qn = 0
    seq = 0

    phase, entered, armed_since = IDLE_REF, np.int64(0), np.int64(0)
    ip, im, idk = 0, 0, 0
    g = 0
    n_gates = (duration + period - 1) // period if gated else 0
    if not gated:
        fn = heap_push(ft, fk, fs, fp, fn, np.int64(0), K_REARM, seq, 0)
        seq += 1

    while True:
        while im < marked.size and marked[im] < ip:
            im += 1
        tp = photon_t[marked[im]] if im < marked.size else INF
        td = dark_t[idk] if idk < dark_t.size else INF
        tt = qt[0] if qn > 0 else INF

        tf, kf, from_gate = INF, 99, False
        if fn > 0:
            tf, kf = ft[0], fk[0]
        if g < 2 * n_gates:
            tg = (g // 2) * period + (width if g % 2 else 0)
            kg = K_FALL if g % 2 else K_RISE
            if tg >= duration:
                g = 2 * n_gates
            elif tg < tf or (tg == tf and kg < kf):
                tf, kf, from_gate = tg, kg, True

        if (fast_forward and from_gate and kf == K_RISE and phase == IDLE_REF and fn == 0):
            tn = min(tp, td, tt)
            k_target = tn // period
            if tn - k_target * period >= width:
                k_target += 1
            k_now = g // 2
            if k_target > k_now:
                k_stop = min(k_target, n_gates)
                add = (k_stop - k_now) * width
                last_rise = (n_gates - 1) * period
                if k_stop == n_gates and last_rise + width > duration:
                    add -= last_rise + width - duration
                tallies[T_ARMED_PS] += add
                t_skip = k_stop * period if k_stop < n_gates else duration
                ip = _consume_photons_gated(photon_t, photon_mark, ip, t_skip, period, width, tallies)
                idk = _consume_dark(dark_t, idk, t_skip, tallies)
                while qn > 0 and qt[0] < t_skip:
                    qn = heap_pop(qt, qk, qs, qp, qn)
                    tallies[T_TRAP_DISCARDED] += 1
                g = 2 * k_stop
                continue

        if phase == ARMED:
            tc, cause = tp, C_PHOTON
            if td < tc:
                tc, cause = td, C_DARK
            if tt < tc:
                tc, cause = tt, C_AFTERPULSE
        else:
            tc, cause = INF, -1

        if tf >= duration and tc >= duration:
            break

        if tf <= tc:
            armed = phase == ARMED
            ip = _consume_photons(photon_t, photon_mark, ip, tf, armed, tallies)
            if not armed:
                idk = _consume_dark(dark_t, idk, tf, tallies)
                while qn > 0 and qt[0] < tf:
                    qn = heap_pop(qt, qk, qs, qp, qn)
                    tallies[T_TRAP_DISCARDED] += 1
            if from_gate:
                g += 1
            else:
                fn = heap_pop(ft, fk, fs, fp, fn)
            new_phase, new_entered, bits = fsm_step(phase, entered, kf, tf, gated)
            if trace:
                if ntr == tr.shape[0]:
                    tr2 = np.empty((2 * ntr, 5), dtype=np.int64)
                    tr2[:ntr] = tr
                    tr = tr2
                tr[ntr, 0], tr[ntr, 1], tr[ntr, 2], tr[ntr, 3], tr[ntr, 4] = tf, phase, new_phase, kf, bits
                ntr += 1
            if phase == ARMED and new_phase != ARMED:
                tallies[T_ARMED_PS] += tf - armed_since
            if new_phase == ARMED and phase != ARMED:
                armed_since = tf
            if bits & ACT_SCHED_DEAD:
                fn = heap_push(ft, fk, fs, fp, fn, tf + dead, K_DEAD, seq, 0)
                seq += 1
            phase, entered = new_phase, new_entered
            continue

        # candidate while armed
        ip = _consume_photons(photon_t, photon_mark, ip, tc, True, tallies)
        if cause == C_AFTERPULSE:
            qn = heap_pop(qt, qk, qs, qp, qn)
            if qp[qn] == 0:
                tallies[T_TRAP_NO_TRIGGER] += 1
                continue
            tallies[T_AP_DET] += 1
        elif cause == C_PHOTON:
            # same-instant photons ahead of the converting one failed to convert
            tallies[T_PHOTON_FAIL] += marked[im] - ip
            ip = marked[im] + 1
            im += 1
            tallies[T_PHOTON_DET] += 1
        else:
            idk += 1
            tallies[T_DARK_DET] += 1

        new_phase, new_entered, bits = fsm_step(phase, entered, K_AVAL, tc, gated)
        if trace:
            if ntr == tr.shape[0]:
                tr2 = np.empty((2 * ntr, 5), dtype=np.int64)
                tr2[:ntr] = tr
                tr = tr2
            tr[ntr, 0], tr[ntr, 1], tr[ntr, 2], tr[ntr, 3], tr[ntr, 4] = tc, phase, new_phase, K_AVAL, bits
            ntr += 1
        tallies[T_ARMED_PS] += tc - armed_since
        if nd == det_t.size:
            det_t = _grow(det_t, nd + 1)
            det_c = _grow(det_c, nd + 1)
            det_a = _grow(det_a, nd + 1)
        det_t[nd], det_c[nd], det_a[nd] = tc, cause, armed_since
        nd += 1
        fn = heap_push(ft, fk, fs, fp, fn, tc + latency, K_QUENCH, seq, 0)
        seq += 1
        phase, entered = new_phase, new_entered

        release, trig = draw_traps(trap_rng, trap_mean, tau_ps, p_trigger, tc)
        k = release.size
        if k:
            tallies[T_TRAP_FILLED] += k
            if qn + k > qt.size:
                qt = _grow(qt, qn + k)
                qk = _grow(qk, qn + k)
                qs = _grow(qs, qn + k)
                qp = _grow(qp, qn + k)
            for i in range(k):
                qn = heap_push(qt, qk, qs, qp, qn, release[i], 0, seq, 1 if trig[i] else 0)
                seq += 1

    armed = phase == ARMED
    ip = _consume_photons(photon_t, photon_mark, ip, duration, armed, tallies)
    idk = _consume_dark(dark_t, idk, duration, tallies)
    if armed:
        tallies[T_ARMED_PS] += duration - armed_since
    else:
        while qn > 0 and qt[0] < duration:
            qn = heap_pop(qt, qk, qs, qp, qn)
            tallies[T_TRAP_DISCARDED] += 1
    tallies[T_TRAP_REMAINING] = qn
    return det_t[:nd], det_c[:nd], det_a[:nd], tallies, tr[:ntr]
