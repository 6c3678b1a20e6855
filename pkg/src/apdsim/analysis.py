"""Efficiency and noise estimators, and the dead-time / bias sweeps."""
from __future__ import annotations

import dataclasses
import math
import warnings
from dataclasses import dataclass, field
from enum import Enum
from pathlib import Path

import numpy as np

from .detector import DetectorParams
from .engine import Cause, EventLog, config_digest, run_batch
from .quench import ConfigError, QuenchConfig
from .sources import PhotonStream, SimClock, set_shutter


class EstimatorError(ValueError):
    """Estimator evaluated outside its domain."""


class NegativeEfficiencyWarning(UserWarning):
    pass


def derive_seed(seed: int, *keys: int) -> int:
    ss = np.random.SeedSequence(entropy=int(seed), spawn_key=tuple(int(k) for k in keys))
    return int(ss.generate_state(1, np.uint64)[0] >> np.uint64(1))


def _corrected(rate: float, tau_d: float, what: str) -> float:
    if rate * tau_d >= 1.0:
        raise EstimatorError(f"{what} rate {rate:g}/s saturates the dead-time correction "
                             f"(rate * tau_d = {rate * tau_d:.3f} >= 1)")
    return rate / (1.0 - rate * tau_d)


def quantum_efficiency(S: float, N: float, tau_d: float, n: float) -> float:
    """Dead-time corrected detection efficiency from signal and noise count rates."""
    if not n > 0:
        raise EstimatorError(f"photon rate n must be > 0, got {n}")
    return (_corrected(S, tau_d, "signal") - _corrected(N, tau_d, "noise")) / n


def effective_efficiency(S: float, N: float, n: float) -> float:
    if not n > 0:
        raise EstimatorError(f"photon rate n must be > 0, got {n}")
    eta = (S - N) / n
    if eta < 0:
        warnings.warn(f"negative effective efficiency {eta:.3g} (noise fluctuation)",
                      NegativeEfficiencyWarning, stacklevel=2)
    return eta


def quantum_efficiency_sigma(S: float, N: float, tau_d: float, n: float,
                             t_signal: float, t_noise: float) -> float:
    """1-sigma on the corrected efficiency, Poisson counts propagated to first order."""
    var_s = S / t_signal
    var_n = N / t_noise
    ds = 1.0 / (n * (1.0 - S * tau_d) ** 2)
    dn = 1.0 / (n * (1.0 - N * tau_d) ** 2)
    return math.sqrt(ds * ds * var_s + dn * dn * var_n)


def afterpulse_fraction(log: EventLog) -> float:
    """Share of detections whose ground-truth cause is a trap release."""
    if len(log) == 0:
        raise EstimatorError("afterpulse fraction undefined for an empty log")
    return log.count(Cause.AFTERPULSE) / len(log)


def corrected_noise(log: EventLog) -> tuple[float, float]:
    """Noise rate per second of sensitive time, with its 1-sigma.

    Free-running: the non-paralyzable inverse N/(1 - N tau_d).  Gated: counts
    over the accumulated armed time, which folds in both the gate duty cycle
    and the gates lost to dead-time.
    """
    c = len(log)
    if log.meta["mode"] == "gated":
        armed = log.armed_time
        if armed <= 0:
            raise EstimatorError("gated run never armed")
        return c / armed, math.sqrt(c) / armed
    tau = log.meta["dead_time"]
    N = c / log.duration
    val = _corrected(N, tau, "noise")
    return val, math.sqrt(c) / log.duration / (1.0 - N * tau) ** 2


@dataclass
class EfficiencyReport:
    eta_q: float
    eta_eff: float
    signal_rate: float
    noise_rate: float
    n: float
    tau_d: float
    afterpulse_fraction: float
    stat_uncertainty: float
    noise_corrected: float = float("nan")
    sigma_noise: float = float("nan")
    mode: str = ""
    temperature: float = float("nan")
    v_on: float = float("nan")

    @property
    def eta_eff_negative(self) -> bool:
        return self.eta_eff < 0

    def check(self, tol: float = 1e-12) -> None:
        if self.signal_rate * self.tau_d >= 1 or self.noise_rate * self.tau_d >= 1:
            raise EstimatorError("report outside the estimator domain")
        if self.signal_rate >= self.noise_rate and not (
                -tol <= self.eta_eff <= self.eta_q + tol):
            raise EstimatorError(f"ordering violated: eta_eff={self.eta_eff}, eta_q={self.eta_q}")


def report_from_rates(S, N, tau_d, n, t_signal, t_noise, **extra) -> EfficiencyReport:
    return EfficiencyReport(
        eta_q=quantum_efficiency(S, N, tau_d, n),
        eta_eff=(S - N) / n,
        signal_rate=S, noise_rate=N, n=n, tau_d=tau_d,
        stat_uncertainty=quantum_efficiency_sigma(S, N, tau_d, n, t_signal, t_noise),
        **extra)


@dataclass(frozen=True)
class Conditions:
    """Fixed conditions of a measurement; sweeps vary one field."""
    det: DetectorParams
    quench: QuenchConfig
    source: PhotonStream
    duration: float
    seed: int = 0

    def replace(self, **changes) -> "Conditions":
        return dataclasses.replace(self, **changes)

    def jobs(self, seed: int):
        """Shutter-open and shutter-closed jobs with independent seeds."""
        return [(set_shutter(self.source, True), self.det, self.quench,
                 SimClock(self.duration, derive_seed(seed, 0))),
                (set_shutter(self.source, False), self.det, self.quench,
                 SimClock(self.duration, derive_seed(seed, 1)))]


def report_from_logs(signal: EventLog | None, noise: EventLog, conditions: Conditions) -> EfficiencyReport:
    tau = conditions.quench.effective_dead_time
    n_corr, sigma_n = corrected_noise(noise)
    extra = dict(noise_corrected=n_corr, sigma_noise=sigma_n, mode=conditions.quench.mode.label,
                 temperature=conditions.det.temperature, v_on=conditions.quench.v_on)
    N = len(noise) / noise.duration
    if signal is None:
        ap = afterpulse_fraction(noise) if len(noise) else 0.0
        return EfficiencyReport(eta_q=float("nan"), eta_eff=float("nan"), signal_rate=float("nan"),
                                noise_rate=N, n=0.0, tau_d=tau, afterpulse_fraction=ap,
                                stat_uncertainty=float("nan"), **extra)
    S = len(signal) / signal.duration
    ap = afterpulse_fraction(signal) if len(signal) else 0.0
    return report_from_rates(S, N, tau, conditions.source.mean_rate, signal.duration, noise.duration,
                             afterpulse_fraction=ap, **extra)


def measure(conditions: Conditions, workers: int | None = None) -> EfficiencyReport:
    """Paired shutter-open / shutter-closed measurement at fixed conditions."""
    signal, noise = run_batch(conditions.jobs(conditions.seed), workers)
    return report_from_logs(signal, noise, conditions)


class SweepAxis(str, Enum):
    DEAD_TIME = "dead_time"
    BIAS_VOLTAGE = "bias_voltage"


@dataclass
class SweepResult:
    axis: SweepAxis
    points: list = field(default_factory=list)   # (x, EfficiencyReport)
    meta: dict = field(default_factory=dict)

    @property
    def x(self) -> np.ndarray:
        return np.array([p[0] for p in self.points])

    def column(self, name: str) -> np.ndarray:
        return np.array([getattr(p[1], name) for p in self.points])

    def to_csv(self) -> str:
        lines = ["x,eta_q,eta_eff,S,N,afterpulse_fraction,sigma_eta_q"]
        for x, r in self.points:
            lines.append(",".join(repr(float(v)) for v in (
                x, r.eta_q, r.eta_eff, r.signal_rate, r.noise_rate, r.afterpulse_fraction,
                r.stat_uncertainty)))
        return "\n".join(lines) + "\n"

    def noise_csv(self) -> str:
        lines = ["x,N,N_corrected,sigma_N_corrected"]
        for x, r in self.points:
            lines.append(",".join(repr(float(v)) for v in (x, r.noise_rate, r.noise_corrected,
                                                           r.sigma_noise)))
        return "\n".join(lines) + "\n"

    def write(self, out_dir, stem: str) -> list[Path]:
        out_dir = Path(out_dir)
        out_dir.mkdir(parents=True, exist_ok=True)
        digest = self.meta.get("digest", "nodigest")
        main = out_dir / f"{stem}_{digest}.csv"
        main.write_text(self.to_csv())
        paths = [main]
        if self.axis is SweepAxis.DEAD_TIME:
            extra = out_dir / f"{stem}_{digest}_noise.csv"
            extra.write_text(self.noise_csv())
            paths.append(extra)
        return paths


def _sweep_meta(conditions: Conditions, axis: SweepAxis, xs) -> dict:
    return {"axis": axis.value, "mode": conditions.quench.mode.label,
            "temperature": conditions.det.temperature,
            "digest": config_digest(det=conditions.det, quench=conditions.quench,
                                    source=conditions.source, duration=conditions.duration,
                                    seed=conditions.seed, axis=axis.value, x=list(xs))}


def _check_increasing(xs, what):
    xs = [float(x) for x in xs]
    if any(b <= a for a, b in zip(xs, xs[1:])):
        raise ConfigError(f"{what} must be strictly increasing")
    return xs


def quench_for_dead_time(quench: QuenchConfig, tau_d: float) -> QuenchConfig:
    """Controller set to a dead-time; gated mode uses f_trig = 2 / tau_d."""
    if quench.gated:
        f = 2.0 / tau_d
        if quench.gate_width >= 1.0 / f:
            raise ConfigError(f"dead-time {tau_d:g} s incompatible with gate width {quench.gate_width:g} s")
        return quench.replace(f_trig=f)
    return quench.replace(dead_time=tau_d)


def sweep_dead_time(conditions: Conditions, tau_list, workers: int | None = None) -> SweepResult:
    """Shuttered noise versus dead-time at fixed bias and temperature."""
    taus = _check_increasing(tau_list, "dead-time list")
    pts = [conditions.replace(quench=quench_for_dead_time(conditions.quench, t)) for t in taus]
    jobs = [c.jobs(derive_seed(conditions.seed, i))[1] for i, c in enumerate(pts)]
    logs = run_batch(jobs, workers)
    res = SweepResult(SweepAxis.DEAD_TIME, meta=_sweep_meta(conditions, SweepAxis.DEAD_TIME, taus))
    for t, c, log in zip(taus, pts, logs):
        res.points.append((t, report_from_logs(None, log, c)))
    return res


def sweep_bias(conditions: Conditions, v_list, workers: int | None = None) -> SweepResult:
    """Paired efficiency/noise measurements versus APD bias."""
    vs = _check_increasing(v_list, "bias list")
    if vs and vs[0] <= conditions.det.v_breakdown:
        raise ConfigError(f"bias {vs[0]} V is not above breakdown ({conditions.det.v_breakdown} V)")
    pts = [conditions.replace(quench=conditions.quench.replace(v_on=v)) for v in vs]
    jobs = []
    for i, c in enumerate(pts):
        jobs.extend(c.jobs(derive_seed(conditions.seed, i)))
    logs = run_batch(jobs, workers)
    res = SweepResult(SweepAxis.BIAS_VOLTAGE, meta=_sweep_meta(conditions, SweepAxis.BIAS_VOLTAGE, vs))
    for i, (v, c) in enumerate(zip(vs, pts)):
        res.points.append((v, report_from_logs(logs[2 * i], logs[2 * i + 1], c)))
    return res


def find_plateau(values, sigmas, nsigma: float = 2.0) -> int:
    """Length of the longest tail whose points agree pairwise within nsigma."""
    k = 1
    n = len(values)
    while k < n:
        i = n - k - 1
        if all(abs(values[i] - values[j]) <= nsigma * math.hypot(sigmas[i], sigmas[j])
               for j in range(i + 1, n)):
            k += 1
        else:
            break
    return k


def afterpulse_fraction_blind(noise_curve: SweepResult) -> np.ndarray:
    """Excess of each noise point over the long-dead-time plateau, as a fraction."""
    if noise_curve.axis is not SweepAxis.DEAD_TIME:
        raise EstimatorError("blind afterpulse estimate needs a dead-time sweep")
    if len(noise_curve.points) < 3:
        raise EstimatorError("blind afterpulse estimate needs at least 3 points")
    N = noise_curve.column("noise_corrected")
    sig = noise_curve.column("sigma_noise")
    k = find_plateau(N, np.nan_to_num(sig))
    if k < 2:
        raise EstimatorError("no plateau at long dead-times: the last points disagree beyond 2 sigma")
    floor = float(np.mean(N[-k:]))
    return (N - floor) / N
