"""Experiment configuration: strict YAML schema, presets and config digest."""
from __future__ import annotations

import dataclasses
from dataclasses import dataclass, field
from pathlib import Path

import yaml

from .analysis import Conditions
from .detector import DetectorParams, load_detector_params
from .engine import config_digest
from .quench import ConfigError, QuenchConfig
from .sources import ParameterError, PhotonStream

PRESET_DIR = Path(__file__).parent / "presets"
EXPERIMENTS = ("single_run", "sweep_dead_time", "sweep_bias")
TOP_KEYS = ("experiment", "duration", "seed", "detector", "detector_file", "quench", "source",
            "sweep_points", "outputs", "workers")
OUTPUT_KEYS = ("dir", "event_log")


class ConfigParseError(ValueError):
    """The config file is not valid YAML."""


def _fields(cls):
    return tuple(f.name for f in dataclasses.fields(cls))


def _check_keys(where: str, mapping, allowed) -> dict:
    if mapping is None:
        return {}
    if not isinstance(mapping, dict):
        raise ConfigError(f"{where}: expected a mapping, got {type(mapping).__name__}")
    unknown = sorted(set(mapping) - set(allowed))
    if unknown:
        raise ConfigError(f"{where}: unknown key(s) {', '.join(repr(k) for k in unknown)}; "
                          f"allowed: {', '.join(allowed)}")
    return mapping


def _number(where: str, value) -> float:
    # YAML 1.1 reads 24e-6 as a string
    if isinstance(value, bool):
        raise ConfigError(f"{where}: expected a number, got {value!r}")
    try:
        return float(value)
    except (TypeError, ValueError):
        raise ConfigError(f"{where}: expected a number, got {value!r}") from None


def _typed(where: str, cls, mapping: dict, text_keys=(), bool_keys=()) -> dict:
    out = {}
    for k, v in mapping.items():
        if k in text_keys:
            out[k] = str(v)
        elif k in bool_keys:
            if not isinstance(v, bool):
                raise ConfigError(f"{where}.{k}: expected true/false, got {v!r}")
            out[k] = v
        else:
            out[k] = _number(f"{where}.{k}", v)
    return out


def parse_quench(where: str, mapping) -> QuenchConfig:
    m = _check_keys(where, mapping, _fields(QuenchConfig))
    try:
        return QuenchConfig(**_typed(where, QuenchConfig, m, text_keys=("mode",)))
    except ParameterError as e:
        raise ConfigError(f"{where}: {e}") from None


def parse_source(where: str, mapping) -> PhotonStream:
    m = _check_keys(where, mapping, _fields(PhotonStream))
    try:
        return PhotonStream(**_typed(where, PhotonStream, m, text_keys=("kind", "envelope"),
                                     bool_keys=("shutter_open",)))
    except ParameterError as e:
        raise ConfigError(f"{where}: {e}") from None


@dataclass
class ExperimentConfig:
    detector: DetectorParams
    runs: list                      # [(QuenchConfig, PhotonStream)], paired set-ups share a sweep
    experiment: str = "single_run"
    sweep_points: list = field(default_factory=list)
    duration: float = 1.0
    seed: int = 0
    outputs: dict = field(default_factory=lambda: {"dir": "out", "event_log": True})
    workers: int = 1
    path: Path | None = None

    @property
    def quench(self) -> QuenchConfig:
        return self.runs[0][0]

    @property
    def source(self) -> PhotonStream:
        return self.runs[0][1]

    def conditions(self, i: int = 0) -> Conditions:
        q, s = self.runs[i]
        return Conditions(self.detector, q, s, self.duration, self.seed)

    def resolved(self) -> dict:
        return {
            "experiment": self.experiment,
            "duration": self.duration,
            "seed": self.seed,
            "detector": self.detector.to_dict(),
            "runs": [{"quench": q.to_dict(), "source": s.to_dict()} for q, s in self.runs],
            "sweep_points": list(self.sweep_points),
            "workers": self.workers,
            "outputs": dict(self.outputs),
        }

    def digest(self) -> str:
        d = self.resolved()
        d.pop("workers")
        d.pop("outputs")
        return config_digest(config=d)

    def dump(self) -> str:
        return yaml.safe_dump(self.resolved(), sort_keys=False)

    def replace(self, **changes) -> "ExperimentConfig":
        return dataclasses.replace(self, **changes)


def resolve_path(name, base_dir: Path | None = None) -> Path:
    """A file path, else a path relative to ``base_dir``, else a bundled preset."""
    p = Path(name)
    candidates = [p]
    if base_dir is not None and not p.is_absolute():
        candidates.append(base_dir / p)
    candidates += [PRESET_DIR / p, PRESET_DIR / f"{p}.yaml"]
    for c in candidates:
        if c.is_file():
            return c
    raise FileNotFoundError(f"no such config or preset: {name}")


def parse_config(text: str, path: Path | None = None) -> ExperimentConfig:
    name = str(path) if path else "<config>"
    try:
        doc = yaml.safe_load(text)
    except yaml.MarkedYAMLError as e:
        mark = e.problem_mark
        where = f"line {mark.line + 1}, column {mark.column + 1}" if mark else "unknown position"
        raise ConfigParseError(f"{name}: {where}: {e.problem}") from None
    except yaml.YAMLError as e:
        raise ConfigParseError(f"{name}: {e}") from None
    doc = _check_keys(name, doc, TOP_KEYS)
    base_dir = path.parent if path else None

    experiment = str(doc.get("experiment", "single_run"))
    if experiment not in EXPERIMENTS:
        raise ConfigError(f"experiment: {experiment!r} is not one of {', '.join(EXPERIMENTS)}")

    det_values = {}
    if "detector_file" in doc:
        try:
            det_file = resolve_path(doc["detector_file"], base_dir)
        except FileNotFoundError as e:
            raise ConfigError(f"detector_file: {e}") from None
        det_values = load_detector_params(det_file).to_dict()
    overrides = _check_keys("detector", doc.get("detector"), _fields(DetectorParams))
    det_values.update({k: _number(f"detector.{k}", v) for k, v in overrides.items()})
    try:
        detector = DetectorParams.from_dict(det_values)
    except ParameterError as e:
        raise ConfigError(f"detector: {e}") from None

    quench_doc, source_doc = doc.get("quench", {}), doc.get("source", {})
    if isinstance(quench_doc, list) or isinstance(source_doc, list):
        if not (isinstance(quench_doc, list) and isinstance(source_doc, list)
                and len(quench_doc) == len(source_doc) and quench_doc):
            raise ConfigError("paired set-ups need quench and source lists of equal length")
        runs = [(parse_quench(f"quench[{i}]", q), parse_source(f"source[{i}]", s))
                for i, (q, s) in enumerate(zip(quench_doc, source_doc))]
    else:
        runs = [(parse_quench("quench", quench_doc), parse_source("source", source_doc))]
    for i, (q, _) in enumerate(runs):
        q.check_detector(detector)

    points = doc.get("sweep_points", [])
    if not isinstance(points, list):
        raise ConfigError("sweep_points: expected a list")
    points = [_number(f"sweep_points[{i}]", v) for i, v in enumerate(points)]
    if experiment != "single_run" and len(points) == 0:
        raise ConfigError(f"sweep_points: {experiment} needs at least one point")

    duration = _number("duration", doc.get("duration", 1.0))
    if not duration > 0:
        raise ConfigError("duration: must be > 0")
    seed = doc.get("seed", 0)
    if isinstance(seed, bool) or not isinstance(seed, int) or seed < 0:
        raise ConfigError(f"seed: expected a non-negative integer, got {seed!r}")
    outputs = {"dir": "out", "event_log": True}
    outputs.update(_check_keys("outputs", doc.get("outputs"), OUTPUT_KEYS))
    workers = doc.get("workers", 1)
    if isinstance(workers, bool) or not isinstance(workers, int) or workers < 1:
        raise ConfigError(f"workers: expected a positive integer, got {workers!r}")

    return ExperimentConfig(detector=detector, runs=runs, experiment=experiment, sweep_points=points,
                            duration=duration, seed=seed, outputs=outputs, workers=workers, path=path)


def load_config(name) -> ExperimentConfig:
    path = resolve_path(name)
    return parse_config(path.read_text(), path)
