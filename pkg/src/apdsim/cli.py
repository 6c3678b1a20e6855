"""Command-line experiment runner.

    apdsim run CONFIG [--seed N] [--out DIR] [--dry-run] [--trace-fsm]
    apdsim calibrate TARGETS CONFIG [--seed N] [--out DIR] [--dry-run]

Exit codes: 0 success, 1 runtime fault, 2 parse error, 3 validation error,
4 calibration did not converge.
"""
from __future__ import annotations

import argparse
import logging
import platform
import sys
import time
from pathlib import Path

import numba
import numpy as np
import yaml

from . import __version__
from .analysis import sweep_bias, sweep_dead_time
from .calibrate import CalibrationError, calibrate, load_targets
from .config import ConfigParseError, ExperimentConfig, load_config, resolve_path
from .detector import save_detector_params
from .engine import run
from .sources import ParameterError, SimClock

log = logging.getLogger("apdsim")

EXIT_OK, EXIT_RUNTIME, EXIT_PARSE, EXIT_INVALID, EXIT_NO_CONVERGENCE = 0, 1, 2, 3, 4


def write_manifest(out_dir: Path, cfg: ExperimentConfig, command: str, wall: float, files) -> Path:
    entries = {
        "command": command,
        "config": cfg.path,
        "experiment": cfg.experiment,
        "seed": cfg.seed,
        "digest": cfg.digest(),
        "wall_time_s": f"{wall:.3f}",
        "apdsim": __version__,
        "python": platform.python_version(),
        "numpy": np.__version__,
        "numba": numba.__version__,
        "outputs": " ".join(sorted(Path(f).name for f in files)),
    }
    path = out_dir / "manifest.txt"
    path.write_text("".join(f"{k} = {v}\n" for k, v in entries.items()))
    return path


def _mode_stem(cfg: ExperimentConfig, i: int) -> str:
    label = cfg.runs[i][0].mode.label
    return label if len(cfg.runs) == 1 else f"{i}_{label}"


def run_experiment(cfg: ExperimentConfig, out_dir: Path, trace_fsm: bool = False) -> list[Path]:
    out_dir.mkdir(parents=True, exist_ok=True)
    digest = cfg.digest()
    files = []
    if cfg.experiment == "single_run":
        for i, (q, s) in enumerate(cfg.runs):
            stem = f"events_{_mode_stem(cfg, i)}_{digest}"
            ev = run(s, cfg.detector, q, SimClock(cfg.duration, cfg.seed), trace=trace_fsm)
            ev.meta["config_digest"] = digest
            if cfg.outputs.get("event_log", True):
                files.extend(ev.write(out_dir / f"{stem}.csv"))
            if trace_fsm:
                p = out_dir / f"trace_{_mode_stem(cfg, i)}_{digest}.csv"
                p.write_text(ev.trace_csv())
                files.append(p)
            log.info("%s: %d detections %s", stem, len(ev), ev.counts_by_cause())
        return files
    sweep = sweep_dead_time if cfg.experiment == "sweep_dead_time" else sweep_bias
    for i in range(len(cfg.runs)):
        res = sweep(cfg.conditions(i), cfg.sweep_points, cfg.workers)
        res.meta["digest"] = digest
        files.extend(res.write(out_dir, f"{cfg.experiment}_{_mode_stem(cfg, i)}"))
        log.info("%s run %d: %d points", cfg.experiment, i, len(res.points))
    return files


def run_calibration(targets_path, cfg: ExperimentConfig, out_dir: Path):
    targets = load_targets(resolve_path(targets_path))
    digest = cfg.digest()
    out_dir.mkdir(parents=True, exist_ok=True)
    params_path = out_dir / f"calibrated_{digest}.yaml"
    report_path = out_dir / f"calibration_{digest}.txt"
    try:
        result = calibrate(cfg.detector, cfg.conditions(0), targets)
        status = EXIT_OK
    except CalibrationError as e:
        result = e.result
        status = EXIT_NO_CONVERGENCE
    save_detector_params(result.params, params_path)
    report_path.write_text(
        f"digest = {digest}\nconverged = {result.converged}\nevaluations = {result.evaluations}\n"
        f"objective = {result.objective!r}\n\n{result.report()}\n")
    return status, [params_path, report_path], result


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="apdsim", description=__doc__.splitlines()[0] if __doc__ else None)
    p.add_argument("-v", "--verbose", action="store_true", help="log progress")
    sub = p.add_subparsers(dest="command", required=True)

    def common(sp):
        sp.add_argument("--seed", type=int, help="override the config seed")
        sp.add_argument("--out", type=Path, help="output directory (default: outputs.dir)")
        sp.add_argument("--dry-run", action="store_true", help="validate, print the resolved config, write nothing")

    r = sub.add_parser("run", help="run the experiment described by a config file or preset")
    r.add_argument("config")
    r.add_argument("--trace-fsm", action="store_true", help="also write the controller transition trace")
    common(r)
    c = sub.add_parser("calibrate", help="fit detector parameters to scalar targets")
    c.add_argument("targets")
    c.add_argument("config")
    common(c)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        cfg = load_config(args.config)
        if args.seed is not None:
            if args.seed < 0:
                raise ParameterError("--seed must be non-negative")
            cfg = cfg.replace(seed=args.seed)
        if args.command == "calibrate":
            load_targets(resolve_path(args.targets))
    except ConfigParseError as e:
        print(f"parse error: {e}", file=sys.stderr)
        return EXIT_PARSE
    except yaml.YAMLError as e:
        print(f"parse error: {e}", file=sys.stderr)
        return EXIT_PARSE
    except (ParameterError, FileNotFoundError, TypeError) as e:
        print(f"invalid configuration: {e}", file=sys.stderr)
        return EXIT_INVALID

    out_dir = args.out if args.out is not None else Path(cfg.outputs["dir"])
    if args.dry_run:
        sys.stdout.write(f"# digest: {cfg.digest()}\n{cfg.dump()}")
        return EXIT_OK

    t0 = time.perf_counter()
    try:
        if args.command == "run":
            files = run_experiment(cfg, out_dir, trace_fsm=args.trace_fsm)
            status = EXIT_OK
        else:
            status, files, result = run_calibration(args.targets, cfg, out_dir)
            print(result.report())
            if status != EXIT_OK:
                print("calibration did not meet every target; best-so-far parameters written",
                      file=sys.stderr)
    except ParameterError as e:
        print(f"invalid configuration: {e}", file=sys.stderr)
        return EXIT_INVALID
    except Exception as e:  # noqa: BLE001 - any other failure is a runtime fault
        log.debug("runtime fault", exc_info=True)
        print(f"runtime error: {type(e).__name__}: {e}", file=sys.stderr)
        return EXIT_RUNTIME
    write_manifest(out_dir, cfg, args.command, time.perf_counter() - t0, files)
    for f in files:
        print(f)
    return status


if __name__ == "__main__":
    sys.exit(main())
