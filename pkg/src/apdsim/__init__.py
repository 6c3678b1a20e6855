"""Discrete-event Monte Carlo simulator of an actively quenched InGaAs/InP APD."""
from .detector import DetectorParams, TrapState, dark_rate, detection_probability
from .engine import Cause, EventLog, run, run_batch
from .quench import ConfigError, EngineFault, Mode, QuenchConfig, free_running_config, gated_config
from .sources import (ParameterError, PhotonStream, SimClock, make_cw_source, make_dark_source,
                      make_pulsed_source, set_shutter)

__version__ = "0.1.0"

__all__ = [
    "Cause", "ConfigError", "DetectorParams", "EngineFault", "EventLog", "Mode", "ParameterError",
    "PhotonStream", "QuenchConfig", "SimClock", "TrapState", "dark_rate", "detection_probability",
    "free_running_config", "gated_config", "make_cw_source", "make_dark_source", "make_pulsed_source",
    "run", "run_batch", "set_shutter",
]
