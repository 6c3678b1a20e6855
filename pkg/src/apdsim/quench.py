"""Active-quenching controller state machine (gated and free-running).

The transition core :func:`fsm_step` works on integer codes so the
compiled event loop and the Python-level :func:`transition` share one
definition of the controller logic.
"""
from __future__ import annotations

import dataclasses
from dataclasses import dataclass
from enum import IntEnum
from typing import NamedTuple

import numba

from .detector import BiasLevel, DetectorParams
from .sources import ParameterError, period_ps, to_ps


class ConfigError(ParameterError):
    """Inconsistent controller or experiment configuration."""


class EngineFault(RuntimeError):
    """Programming error in event handling (not a model outcome)."""


class Mode(IntEnum):
    FREE_RUNNING = 0
    GATED = 1

    @classmethod
    def parse(cls, value) -> "Mode":
        if isinstance(value, Mode):
            return value
        try:
            return {"free_running": cls.FREE_RUNNING, "gated": cls.GATED}[str(value)]
        except KeyError:
            raise ConfigError(f"unknown quench mode {value!r} (expected gated or free_running)") from None

    @property
    def label(self) -> str:
        return "gated" if self is Mode.GATED else "free_running"


class Phase(IntEnum):
    IDLE_REF = 0
    ARMED = 1
    AVALANCHING = 2
    DEAD = 3


class EventKind(IntEnum):
    # numeric order is the tie-break at equal timestamps
    QUENCH_COMPLETE = 0
    DEAD_TIME_ELAPSED = 1
    REARM = 2
    GATE_FALL = 3
    GATE_RISE = 4
    AVALANCHE_SENSED = 5


ACT_EMIT = 1
ACT_SCHED_QUENCH = 2
ACT_SCHED_DEAD = 4
ACT_BIAS_ON = 8
ACT_BIAS_REF = 16


@numba.njit(cache=True)
def fsm_step(phase, entered, kind, t, gated):
    """(phase, entered_at, event kind, t, gated) -> (phase, entered_at, action bits)."""
    if phase == 1:  # armed
        if kind == 5:
            return 2, t, ACT_EMIT | ACT_SCHED_QUENCH
        if kind == 3 and gated:
            return 0, t, ACT_BIAS_REF
    elif phase == 2:  # avalanching; the scheduled quench always completes
        if kind == 0:
            if gated:
                return 3, t, ACT_BIAS_REF
            return 3, t, ACT_BIAS_REF | ACT_SCHED_DEAD
    elif phase == 3:  # dead
        if gated:
            # the trigger after a detection is spent as the logic reset
            if kind == 4:
                return 0, t, 0
        elif kind == 1 or kind == 2:
            return 1, t, ACT_BIAS_ON
    else:  # idle at V_REF
        if (gated and kind == 4) or (not gated and kind == 2):
            return 1, t, ACT_BIAS_ON
    return phase, entered, 0


@dataclass(frozen=True)
class QuenchConfig:
    mode: Mode = Mode.FREE_RUNNING
    f_trig: float = 0.0
    gate_width: float = 100e-9
    dead_time: float = 24e-6
    quench_latency: float = 5e-9
    v_on: float = 56.5
    v_ref: float = 54.5

    def __post_init__(self):
        object.__setattr__(self, "mode", Mode.parse(self.mode))
        if not self.quench_latency > 0:
            raise ConfigError("quench_latency must be > 0")
        if self.gated:
            if not self.f_trig > 0:
                raise ConfigError("gated mode requires f_trig > 0")
            if not 0 < self.gate_width < 1.0 / self.f_trig:
                raise ConfigError(f"gate_width {self.gate_width} must lie in (0, 1/f_trig = {1 / self.f_trig})")
            if self.latency_ps >= self.period_ps - self.gate_width_ps:
                raise ConfigError("quench_latency must end before the next gate")
        elif not self.dead_time > 0:
            raise ConfigError("free-running mode requires dead_time > 0")
        if not self.v_ref < self.v_on:
            raise ConfigError("v_ref must be below v_on")

    @property
    def gated(self) -> bool:
        return self.mode is Mode.GATED

    @property
    def period_ps(self) -> int:
        return period_ps(self.f_trig) if self.gated else 0

    @property
    def gate_width_ps(self) -> int:
        return to_ps(self.gate_width) if self.gated else 0

    @property
    def latency_ps(self) -> int:
        return to_ps(self.quench_latency)

    @property
    def dead_ps(self) -> int:
        # gated: one trigger period spent on the reset, one to re-arm
        return 2 * self.period_ps if self.gated else to_ps(self.dead_time)

    @property
    def effective_dead_time(self) -> float:
        return 2.0 / self.f_trig if self.gated else self.dead_time

    def check_detector(self, det: DetectorParams) -> None:
        if not self.v_ref < det.v_breakdown < self.v_on:
            raise ConfigError(f"need v_ref < v_breakdown < v_on, got "
                              f"{self.v_ref} / {det.v_breakdown} / {self.v_on}")

    def replace(self, **changes) -> "QuenchConfig":
        return dataclasses.replace(self, **changes)

    def to_dict(self) -> dict:
        d = dataclasses.asdict(self)
        d["mode"] = self.mode.label
        return d


def gated_config(f_trig: float, gate_width: float = 100e-9, **kw) -> QuenchConfig:
    return QuenchConfig(mode=Mode.GATED, f_trig=f_trig, gate_width=gate_width, **kw)


def free_running_config(dead_time: float, **kw) -> QuenchConfig:
    return QuenchConfig(mode=Mode.FREE_RUNNING, dead_time=dead_time, **kw)


class FsmEvent(NamedTuple):
    kind: EventKind
    t: int  # ps


class Action(NamedTuple):
    name: str            # emit_detection | schedule | set_bias
    arg: object = None   # FsmEvent for schedule, BiasLevel for set_bias


@dataclass(frozen=True)
class FsmState:
    phase: Phase = Phase.IDLE_REF
    phase_entered_at: int = 0  # ps

    @property
    def sw0_closed(self) -> bool:
        # SW0 holds the cathode at V_REF except while armed or avalanching
        return self.phase in (Phase.IDLE_REF, Phase.DEAD)

    @property
    def sw1_pulse_pending(self) -> bool:
        # the charge pulse is an instantaneous bias step
        return False

    @property
    def bias(self) -> BiasLevel:
        return BiasLevel.V_ON if self.phase in (Phase.ARMED, Phase.AVALANCHING) else BiasLevel.V_REF


def decode_actions(bits: int, t: int, config: QuenchConfig) -> list[Action]:
    actions = []
    if bits & ACT_EMIT:
        actions.append(Action("emit_detection"))
    if bits & ACT_SCHED_QUENCH:
        actions.append(Action("schedule", FsmEvent(EventKind.QUENCH_COMPLETE, t + config.latency_ps)))
    if bits & ACT_SCHED_DEAD:
        actions.append(Action("schedule", FsmEvent(EventKind.DEAD_TIME_ELAPSED, t + config.dead_ps)))
    if bits & ACT_BIAS_ON:
        actions.append(Action("set_bias", BiasLevel.V_ON))
    if bits & ACT_BIAS_REF:
        actions.append(Action("set_bias", BiasLevel.V_REF))
    return actions


def transition(state: FsmState, event: FsmEvent, config: QuenchConfig) -> tuple[FsmState, list[Action]]:
    if event.t < state.phase_entered_at:
        raise EngineFault(f"event {event.kind.name} at {event.t} ps precedes phase entry "
                          f"at {state.phase_entered_at} ps")
    phase, entered, bits = fsm_step(int(state.phase), int(state.phase_entered_at),
                                    int(event.kind), int(event.t), config.gated)
    return FsmState(Phase(phase), entered), decode_actions(bits, event.t, config)


def gated_schedule(f_trig: float, gate_width: float, duration: float) -> list[FsmEvent]:
    """Gate edges: rise at k/f_trig, fall at k/f_trig + gate_width, all < duration."""
    if not f_trig > 0:
        raise ConfigError("f_trig must be > 0")
    p, w, end = period_ps(f_trig), to_ps(gate_width), to_ps(duration)
    if w >= p:
        raise ConfigError(f"gate_width {gate_width} must be shorter than the period {1 / f_trig}")
    events = []
    k = 0
    while k * p < end:
        events.append(FsmEvent(EventKind.GATE_RISE, k * p))
        if k * p + w < end:
            events.append(FsmEvent(EventKind.GATE_FALL, k * p + w))
        k += 1
    return events


def free_running_rearm(state: FsmState, config: QuenchConfig) -> FsmEvent:
    if state.phase is not Phase.DEAD:
        raise EngineFault(f"rearm requested in phase {state.phase.name}")
    if config.gated:
        raise EngineFault("free-running rearm requested for a gated controller")
    return FsmEvent(EventKind.REARM, state.phase_entered_at + config.dead_ps)
