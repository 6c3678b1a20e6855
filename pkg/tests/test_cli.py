import subprocess
import sys

import pytest
import yaml

from apdsim import cli
from apdsim.config import ConfigParseError, load_config, parse_config
from apdsim.detector import DetectorParams, load_detector_params
from apdsim.quench import ConfigError

SMALL = """\
experiment: single_run
duration: 0.05
seed: 3
detector:
  dark_n0: 20000.0
quench:
  mode: free_running
  dead_time: 2.0e-6
source:
  kind: cw
  rate_n: 1.0e+5
"""

SWEEP = """\
experiment: sweep_dead_time
duration: 0.2
seed: 4
quench: {mode: gated, f_trig: 1.0e+4, gate_width: 100.0e-9}
source: {kind: dark}
sweep_points: [4.0e-6, 8.0e-6, 16.0e-6]
"""


@pytest.fixture
def small(tmp_path):
    p = tmp_path / "small.yaml"
    p.write_text(SMALL)
    return p


def test_dry_run_writes_nothing(small, tmp_path, capsys):
    out = tmp_path / "out"
    assert cli.main(["run", str(small), "--out", str(out), "--dry-run"]) == 0
    text = capsys.readouterr().out
    assert text.startswith("# digest: ")
    assert "dark_n0: 20000.0" in text
    assert not out.exists()


def test_run_twice_byte_identical(small, tmp_path):
    a, b = tmp_path / "a", tmp_path / "b"
    assert cli.main(["run", str(small), "--out", str(a)]) == 0
    assert cli.main(["run", str(small), "--out", str(b)]) == 0
    csvs = sorted(p.name for p in a.glob("*.csv*"))
    assert csvs and csvs == sorted(p.name for p in b.glob("*.csv*"))
    for name in csvs:
        assert (a / name).read_bytes() == (b / name).read_bytes()


def test_manifest(small, tmp_path):
    assert cli.main(["run", str(small), "--out", str(tmp_path)]) == 0
    entries = dict(line.split(" = ", 1) for line in (tmp_path / "manifest.txt").read_text().splitlines())
    cfg = load_config(small)
    assert entries["seed"] == "3"
    assert entries["digest"] == cfg.digest()
    for key in ("wall_time_s", "python", "numpy", "numba", "apdsim"):
        assert entries[key]
    # digest is carried by every output file name or sidecar
    for name in entries["outputs"].split():
        assert cfg.digest() in name


def test_seed_override(small, tmp_path):
    assert cli.main(["run", str(small), "--out", str(tmp_path), "--seed", "9"]) == 0
    entries = (tmp_path / "manifest.txt").read_text()
    assert "seed = 9" in entries
    assert load_config(small).replace(seed=9).digest() in entries


def test_trace_flag(small, tmp_path):
    assert cli.main(["run", str(small), "--out", str(tmp_path), "--trace-fsm"]) == 0
    (trace,) = tmp_path.glob("trace_*.csv")
    lines = trace.read_text().splitlines()
    assert lines[0] == "t,phase_from,phase_to,event,actions"
    assert lines[1].startswith("0.000000000000,idle_ref,armed,rearm")


def test_sweep_output(tmp_path):
    cfg = tmp_path / "sweep.yaml"
    cfg.write_text(SWEEP)
    assert cli.main(["run", str(cfg), "--out", str(tmp_path / "o")]) == 0
    main = tmp_path / "o" / f"sweep_dead_time_gated_{load_config(cfg).digest()}.csv"
    lines = main.read_text().splitlines()
    assert lines[0] == "x,eta_q,eta_eff,S,N,afterpulse_fraction,sigma_eta_q"
    assert [float(x.split(",")[0]) for x in lines[1:]] == [4e-6, 8e-6, 16e-6]


def test_misspelled_key_named(tmp_path, capsys):
    p = tmp_path / "bad.yaml"
    p.write_text(SMALL.replace("dead_time", "dead_tme"))
    assert cli.main(["run", str(p)]) == 3
    assert "dead_tme" in capsys.readouterr().err


def test_unknown_top_level_key(tmp_path, capsys):
    p = tmp_path / "bad.yaml"
    p.write_text(SMALL + "sead: 4\n")
    assert cli.main(["run", str(p)]) == 3
    assert "sead" in capsys.readouterr().err


def test_validation_error_exit_3(tmp_path):
    p = tmp_path / "bad.yaml"
    p.write_text(SMALL.replace("dead_time: 2.0e-6", "dead_time: 0.0"))
    assert cli.main(["run", str(p)]) == 3
    p.write_text(SMALL.replace("rate_n: 1.0e+5", "rate_n: lots"))
    assert cli.main(["run", str(p)]) == 3


def test_parse_error_exit_2_with_line(tmp_path, capsys):
    p = tmp_path / "bad.yaml"
    p.write_text("experiment: single_run\nquench: {mode: gated\nseed: 1\n")
    assert cli.main(["run", str(p)]) == 2
    assert "line " in capsys.readouterr().err


def test_missing_config_exit_3(tmp_path):
    assert cli.main(["run", str(tmp_path / "nope.yaml")]) == 3


def test_runtime_fault_exit_1(small, tmp_path, monkeypatch):
    def boom(*a, **k):
        raise RuntimeError("disk on fire")
    monkeypatch.setattr(cli, "run", boom)
    assert cli.main(["run", str(small), "--out", str(tmp_path)]) == 1


def test_presets_resolve():
    fr = load_config("noise_vs_dead_time_free_running")
    assert fr.experiment == "sweep_dead_time"
    assert fr.sweep_points[0] == pytest.approx(4e-6) and fr.sweep_points[-1] == pytest.approx(64e-6)
    assert fr.detector.temperature == 223.0
    g = load_config("noise_vs_dead_time_gated")
    assert g.quench.gated and g.quench.gate_width == 100e-9
    paired = load_config("bias_sweep_paired")
    assert [q.mode.label for q, _ in paired.runs] == ["free_running", "gated"]
    assert [s.mean_rate for _, s in paired.runs] == [1e4, 1e4]


def test_parse_config_direct():
    with pytest.raises(ConfigParseError):
        parse_config("a: [1, 2")
    with pytest.raises(ConfigError):
        parse_config("experiment: sweep_bias\n")
    with pytest.raises(ConfigError):
        parse_config("quench: [{mode: free_running}]\nsource: {kind: cw}\n")
    cfg = parse_config(SMALL)
    assert parse_config(SMALL).digest() == cfg.digest()
    assert cfg.replace(duration=1.0).digest() != cfg.digest()


def test_calibrate_empty_targets(small, tmp_path):
    t = tmp_path / "t.yaml"
    t.write_text("targets: []\n")
    assert cli.main(["calibrate", str(t), str(small), "--out", str(tmp_path)]) == 0
    (params,) = tmp_path.glob("calibrated_*.yaml")
    assert load_detector_params(params) == load_config(small).detector


def test_calibrate_non_convergence_exit_4(small, tmp_path):
    t = tmp_path / "t.yaml"
    t.write_text(yaml.safe_dump({"targets": [
        {"observable": "detection_probability", "value": 0.9, "tolerance": 0.01}]}))
    assert cli.main(["calibrate", str(t), str(small), "--out", str(tmp_path)]) == 4
    (params,) = tmp_path.glob("calibrated_*.yaml")
    best = load_detector_params(params)
    assert best.eta_slope > DetectorParams().eta_slope
    assert "MISS" in next(tmp_path.glob("calibration_*.txt")).read_text()


def test_calibrate_bad_targets_exit_3(small, tmp_path):
    t = tmp_path / "t.yaml"
    t.write_text("targets:\n  - {observable: eta_q, valu: 0.1}\n")
    assert cli.main(["calibrate", str(t), str(small)]) == 3


def test_console_entry_point(small):
    r = subprocess.run([sys.executable, "-m", "apdsim.cli", "run", str(small), "--dry-run"],
                       capture_output=True, text=True)
    assert r.returncode == 0 and "digest" in r.stdout


@pytest.mark.slow
def test_gated_dead_time_preset_end_to_end(tmp_path):
    assert cli.main(["run", "noise_vs_dead_time_gated", "--out", str(tmp_path)]) == 0
    digest = load_config("noise_vs_dead_time_gated").digest()
    lines = (tmp_path / f"sweep_dead_time_gated_{digest}.csv").read_text().splitlines()
    assert len(lines) == 13
    assert float(lines[1].split(",")[0]) == pytest.approx(4e-6)
    assert float(lines[-1].split(",")[0]) == pytest.approx(64e-6)
