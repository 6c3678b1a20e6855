"""Simulation-in-the-loop calibration of detector parameters to scalar targets."""
from __future__ import annotations

import dataclasses
import logging
import math
from dataclasses import dataclass, field

import yaml

from .analysis import Conditions, measure, quench_for_dead_time
from .detector import DetectorParams, dark_rate, detection_probability
from .quench import ConfigError
from .sources import make_cw_source

log = logging.getLogger(__name__)

CAL_PARAMS = ("eta_slope", "dark_n0", "dark_slope", "trap_fill_per_ns", "tau_ref", "p_trigger")
OBSERVABLES = ("eta_q", "eta_eff", "noise_rate", "noise_corrected", "afterpulse_fraction",
               "detection_probability", "dark_rate")
BOUNDS = ("eq", "max", "min")


class CalibrationError(RuntimeError):
    def __init__(self, msg, result=None):
        super().__init__(msg)
        self.result = result


@dataclass(frozen=True)
class Target:
    observable: str
    value: float
    tolerance: float = 0.05      # relative
    bound: str = "eq"
    tau_d: float | None = None   # overrides of the base conditions
    v_on: float | None = None
    rate_n: float | None = None

    def __post_init__(self):
        if self.observable not in OBSERVABLES:
            raise ConfigError(f"unknown observable {self.observable!r}; expected one of {', '.join(OBSERVABLES)}")
        if self.bound not in BOUNDS:
            raise ConfigError(f"bound must be one of {BOUNDS}, got {self.bound!r}")
        if self.value == 0 or not self.tolerance > 0:
            raise ConfigError("target value must be non-zero and tolerance > 0")

    def miss(self, observed: float) -> float:
        rel = (observed - self.value) / abs(self.value)
        if self.bound == "max":
            return max(rel, 0.0)
        if self.bound == "min":
            return min(rel, 0.0)
        return rel

    def label(self) -> str:
        where = ", ".join(f"{k}={getattr(self, k):g}" for k in ("tau_d", "v_on", "rate_n")
                          if getattr(self, k) is not None)
        op = {"eq": "=", "max": "<=", "min": ">="}[self.bound]
        return f"{self.observable}{'@' + where if where else ''} {op} {self.value:g}"


def load_targets(path) -> list[Target]:
    with open(path) as fh:
        doc = yaml.safe_load(fh) or {}
    items = doc.get("targets", []) if isinstance(doc, dict) else doc
    if not isinstance(items, list):
        raise ConfigError(f"{path}: expected a list of targets")
    known = {f.name for f in dataclasses.fields(Target)}
    out = []
    for i, item in enumerate(items):
        bad = sorted(set(item) - known)
        if bad:
            raise ConfigError(f"{path}: target {i}: unknown key(s) {', '.join(bad)}")
        out.append(Target(**item))
    return out


def _target_conditions(base: Conditions, det: DetectorParams, t: Target) -> Conditions:
    c = base.replace(det=det)
    if t.tau_d is not None:
        c = c.replace(quench=quench_for_dead_time(c.quench, t.tau_d))
    if t.v_on is not None:
        c = c.replace(quench=c.quench.replace(v_on=t.v_on))
    if t.rate_n is not None:
        c = c.replace(source=make_cw_source(t.rate_n))
    return c


def evaluate(det: DetectorParams, base: Conditions, targets: list[Target]) -> list[float]:
    """Observed value for every target; runs shared by targets are done once."""
    cache = {}
    out = []
    for t in targets:
        c = _target_conditions(base, det, t)
        if t.observable == "detection_probability":
            out.append(detection_probability(c.quench.v_on, det))
            continue
        if t.observable == "dark_rate":
            out.append(dark_rate(c.quench.v_on, det.temperature, det))
            continue
        key = (c.quench, c.source)
        if key not in cache:
            cache[key] = measure(c)
        rep = cache[key]
        out.append(getattr(rep, t.observable))
    return out


@dataclass
class CalibrationResult:
    params: DetectorParams
    targets: list
    observed: list
    objective: float
    iterations: int
    evaluations: int
    history: list = field(default_factory=list)

    @property
    def misses(self) -> list[float]:
        return [t.miss(o) for t, o in zip(self.targets, self.observed)]

    @property
    def converged(self) -> bool:
        return all(abs(m) <= t.tolerance for t, m in zip(self.targets, self.misses))

    def report(self) -> str:
        lines = []
        for t, o, m in zip(self.targets, self.observed, self.misses):
            ok = "ok" if abs(m) <= t.tolerance else "MISS"
            lines.append(f"{t.label():50s} observed {o:.6g}  miss {m:+.4f}  tol {t.tolerance:g}  {ok}")
        return "\n".join(lines)


def _objective(targets, observed) -> float:
    return sum(t.miss(o) ** 2 for t, o in zip(targets, observed))


def calibrate(det: DetectorParams, base: Conditions, targets: list[Target],
              params=CAL_PARAMS, step: float = 0.25, min_step: float = 2e-3,
              max_evaluations: int = 400) -> CalibrationResult:
    """Coordinate descent in log-parameter space with a shrinking step.

    Every evaluation reuses ``base.seed`` so the objective is a deterministic
    function of the parameters.  Raises :class:`CalibrationError` (carrying
    the best result) when the targets are not met.
    """
    if not targets:
        return CalibrationResult(det, [], [], 0.0, 0, 0)
    best = det
    obs = evaluate(best, base, targets)
    f_best = _objective(targets, obs)
    n_eval, it = 1, 0
    history = [(f_best, best.to_dict())]
    while step >= min_step and n_eval < max_evaluations:
        it += 1
        improved = False
        for name in params:
            x0 = getattr(best, name)
            if x0 <= 0:
                continue
            for sign in (1.0, -1.0):
                x = x0 * math.exp(sign * step)
                if name == "p_trigger":
                    x = min(x, 1.0)
                if x == x0:
                    continue
                cand = best.replace(**{name: x})
                o = evaluate(cand, base, targets)
                n_eval += 1
                f = _objective(targets, o)
                if f < f_best:
                    best, obs, f_best, improved = cand, o, f, True
                    history.append((f_best, best.to_dict()))
                    break
        log.info("iteration %d step %.4f objective %.3e", it, step, f_best)
        result = CalibrationResult(best, targets, obs, f_best, it, n_eval, history)
        # stop once every target sits inside half its tolerance
        if all(abs(m) <= t.tolerance / 2 for t, m in zip(targets, result.misses)):
            break
        if not improved:
            step /= 2
    result = CalibrationResult(best, targets, obs, f_best, it, n_eval, history)
    if not result.converged:
        raise CalibrationError("calibration did not meet all targets within the evaluation budget\n"
                               + result.report(), result)
    return result
