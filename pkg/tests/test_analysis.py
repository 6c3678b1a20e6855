import math
import warnings

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from apdsim.analysis import (Conditions, EfficiencyReport, EstimatorError, NegativeEfficiencyWarning,
                             SweepAxis, SweepResult, afterpulse_fraction, afterpulse_fraction_blind,
                             corrected_noise, derive_seed, effective_efficiency, find_plateau,
                             measure, quantum_efficiency, quantum_efficiency_sigma,
                             quench_for_dead_time, report_from_rates, sweep_bias, sweep_dead_time)
from apdsim.detector import DetectorParams, bias_for_efficiency, dark_rate
from apdsim.engine import run
from apdsim.quench import ConfigError, free_running_config, gated_config
from apdsim.sources import SimClock, make_cw_source, make_dark_source, make_pulsed_source


def test_corrected_efficiency_signal_equals_noise():
    assert quantum_efficiency(100, 100, 24e-6, 1e4) == 0.0


def test_corrected_efficiency_hand_value():
    # 1000/0.976 - 100/0.9976 = 924.3495..., over 1e4
    expected = (1000 / (1 - 1000 * 24e-6) - 100 / (1 - 100 * 24e-6)) / 1e4
    assert expected == pytest.approx(0.0924349, abs=1e-7)
    assert quantum_efficiency(1000, 100, 24e-6, 1e4) == pytest.approx(expected, rel=1e-15)


def test_corrected_efficiency_without_dead_time_is_effective():
    assert quantum_efficiency(1100, 100, 0.0, 1e4) == effective_efficiency(1100, 100, 1e4)


def test_corrected_efficiency_domain_errors():
    with pytest.raises(EstimatorError, match="saturates"):
        quantum_efficiency(1e5, 100, 24e-6, 1e4)
    with pytest.raises(EstimatorError):
        quantum_efficiency(1000, 100, 24e-6, 0.0)


def test_effective_efficiency():
    assert effective_efficiency(1100, 100, 1e4) == pytest.approx(0.10)
    assert effective_efficiency(500, 500, 1e4) == 0.0
    with pytest.warns(NegativeEfficiencyWarning):
        assert effective_efficiency(90, 100, 1e4) < 0


def test_sigma_matches_finite_differences():
    S, N, tau, n, T = 2000.0, 500.0, 24e-6, 1e4, 100.0
    h = 1e-3
    dS = (quantum_efficiency(S + h, N, tau, n) - quantum_efficiency(S - h, N, tau, n)) / (2 * h)
    dN = (quantum_efficiency(S, N + h, tau, n) - quantum_efficiency(S, N - h, tau, n)) / (2 * h)
    expected = math.sqrt(dS ** 2 * S / T + dN ** 2 * N / T)
    assert quantum_efficiency_sigma(S, N, tau, n, T, T) == pytest.approx(expected, rel=1e-6)


@settings(max_examples=1000, deadline=None)
@given(S=st.floats(0, 4e4), N=st.floats(0, 4e4), tau=st.floats(0, 24e-6), n=st.floats(1, 1e7))
def test_ordering_on_random_reports(S, N, tau, n):
    if S * tau >= 1 or N * tau >= 1:
        return
    with warnings.catch_warnings():
        warnings.simplefilter("ignore", NegativeEfficiencyWarning)
        r = report_from_rates(S, N, tau, n, 1.0, 1.0, afterpulse_fraction=0.0)
    r.check()
    if S >= N:
        assert r.eta_eff <= r.eta_q + 1e-12


def test_report_check_rejects_domain():
    r = EfficiencyReport(0.1, 0.1, 5e4, 100, 1e4, 24e-6, 0.0, 0.0)
    with pytest.raises(EstimatorError):
        r.check()


def test_afterpulse_fraction_ground_truth():
    q = free_running_config(10e-6)
    log = run(make_cw_source(2e4), DetectorParams(trap_fill_per_ns=0.0), q, SimClock(1.0, 1))
    assert afterpulse_fraction(log) == 0.0
    with pytest.raises(EstimatorError):
        afterpulse_fraction(run(make_dark_source(), DetectorParams(dark_n0=0.0), q, SimClock(0.1, 1)))


def test_afterpulse_fraction_ignores_jitter():
    q = free_running_config(10e-6)
    a = run(make_cw_source(2e4), DetectorParams(jitter_fwhm=0.0), q, SimClock(1.0, 2))
    b = run(make_cw_source(2e4), DetectorParams(jitter_fwhm=2e-9), q, SimClock(1.0, 2))
    assert afterpulse_fraction(a) == afterpulse_fraction(b) > 0


def test_corrected_noise_free_running_oracle():
    det = DetectorParams(trap_fill_per_ns=0.0)
    q = free_running_config(24e-6)
    log = run(make_dark_source(), det, q, SimClock(50.0, 3))
    val, sig = corrected_noise(log)
    # latency adds to the unavailable time, so the oracle uses dead + latency
    R = dark_rate(q.v_on, det.temperature, det)
    assert abs(val - R) < 3 * sig + R * q.quench_latency * R


def test_corrected_noise_gated_per_armed_second():
    det = DetectorParams(trap_fill_per_ns=0.0)
    log = run(make_dark_source(), det, gated_config(1e5), SimClock(50.0, 4))
    val, sig = corrected_noise(log)
    R = dark_rate(56.5, det.temperature, det)
    assert abs(val - R) < 3 * sig


def test_derive_seed_stable():
    assert derive_seed(1, 0) == derive_seed(1, 0)
    assert derive_seed(1, 0) != derive_seed(1, 1)
    assert 0 <= derive_seed(2**63, 5) < 2**63


def test_find_plateau():
    assert find_plateau([5, 1, 1, 1], [0.1] * 4) == 3
    assert find_plateau([1, 1, 1], [0.1] * 3) == 3
    assert find_plateau([3, 2, 1], [0.01] * 3) == 1


def synthetic_curve(taus, values, sigma=1e-9):
    pts = [(t, EfficiencyReport(float("nan"), float("nan"), float("nan"), v, 0.0, t, 0.0, float("nan"),
                                noise_corrected=v, sigma_noise=sigma)) for t, v in zip(taus, values)]
    return SweepResult(SweepAxis.DEAD_TIME, pts)


def test_blind_flat_curve():
    assert np.all(afterpulse_fraction_blind(synthetic_curve([1, 2, 3], [7.0, 7.0, 7.0])) == 0)


def test_blind_synthetic_exponential():
    taus = np.array([10, 20, 30, 40, 60, 80, 100]) * 1e-6
    N = 2000 * (1 + np.exp(-taus / 10e-6))
    N[taus >= 60e-6] = 2000.0   # plateau
    frac = afterpulse_fraction_blind(synthetic_curve(taus, N, sigma=1.0))
    assert frac[0] == pytest.approx((2000 * (1 + math.exp(-1)) - 2000) / (2000 * (1 + math.exp(-1))), abs=1e-12)
    assert frac[0] == pytest.approx(0.2689, abs=1e-4)


def test_blind_errors():
    with pytest.raises(EstimatorError):
        afterpulse_fraction_blind(synthetic_curve([1, 2], [1.0, 1.0]))
    with pytest.raises(EstimatorError, match="plateau"):
        afterpulse_fraction_blind(synthetic_curve([1, 2, 3], [3.0, 2.0, 1.0]))
    with pytest.raises(EstimatorError):
        afterpulse_fraction_blind(SweepResult(SweepAxis.BIAS_VOLTAGE, synthetic_curve([1, 2, 3], [1.0] * 3).points))


def test_quench_for_dead_time():
    assert quench_for_dead_time(free_running_config(24e-6), 32e-6).dead_time == 32e-6
    g = quench_for_dead_time(gated_config(1e4), 10e-6)
    assert g.f_trig == pytest.approx(2e5)
    assert g.effective_dead_time == pytest.approx(10e-6)
    with pytest.raises(ConfigError):
        quench_for_dead_time(gated_config(1e4, gate_width=1e-6), 1e-6)


def base_conditions(det=None, quench=None, source=None, duration=2.0):
    return Conditions(det or DetectorParams(), quench or free_running_config(24e-6),
                      source or make_cw_source(1e4), duration, seed=5)


def test_sweep_without_traps_is_flat():
    c = base_conditions(det=DetectorParams(trap_fill_per_ns=0.0), duration=20.0)
    res = sweep_dead_time(c, [4e-6, 16e-6, 64e-6])
    N = res.column("noise_corrected")
    sig = res.column("sigma_noise")
    R = dark_rate(56.5, 223.0, c.det)
    assert np.all(np.abs(N - R) < 3 * sig + R * R * 5e-9)
    assert np.all(res.column("afterpulse_fraction") == 0)


def test_sweep_validation():
    c = base_conditions()
    with pytest.raises(ConfigError):
        sweep_dead_time(c, [24e-6, 16e-6])
    with pytest.raises(ConfigError):
        sweep_bias(c, [54.0, 57.0])
    with pytest.raises(ConfigError):
        sweep_dead_time(base_conditions(quench=gated_config(1e4, gate_width=1e-6)), [1e-6, 4e-6])


def test_sweep_csv_layout(tmp_path):
    c = base_conditions(duration=0.5)
    res = sweep_bias(c, [56.0, 57.0])
    lines = res.to_csv().splitlines()
    assert lines[0] == "x,eta_q,eta_eff,S,N,afterpulse_fraction,sigma_eta_q"
    assert len(lines) == 3
    assert res.meta["mode"] == "free_running" and res.meta["temperature"] == 223.0
    paths = res.write(tmp_path, "bias")
    assert paths[0].name == f"bias_{res.meta['digest']}.csv"
    d = sweep_dead_time(c, [16e-6, 24e-6, 32e-6])
    assert [p.name.endswith("_noise.csv") for p in d.write(tmp_path, "dt")] == [False, True]


def test_sweeps_deterministic():
    c = base_conditions(duration=0.5)
    assert sweep_bias(c, [56.0, 58.0]).to_csv() == sweep_bias(c, [56.0, 58.0]).to_csv()


def test_bias_sweep_monotone():
    c = base_conditions(det=DetectorParams(trap_fill_per_ns=0.0), duration=10.0)
    res = sweep_bias(c, [56.0, 57.0, 58.0, 60.0, 62.0])
    eq, sig = res.column("eta_q"), res.column("stat_uncertainty")
    for i in range(len(eq) - 1):
        assert eq[i + 1] >= eq[i] - 3 * math.hypot(sig[i], sig[i + 1])


def test_measure_paired_seeds_differ():
    signal, noise = base_conditions().jobs(5)
    assert signal[0].shutter_open and not noise[0].shutter_open
    assert signal[3].seed != noise[3].seed


def test_measure_consistent_without_traps():
    det = DetectorParams(trap_fill_per_ns=0.0)
    c = base_conditions(det=det, duration=30.0)
    r = measure(c)
    true = 0.35 * -math.expm1(-0.2 * 1.5)
    assert abs(r.eta_q - true) < 3 * r.stat_uncertainty
    assert r.eta_eff < r.eta_q


def test_gated_measure_uses_pulsed_rate():
    c = base_conditions(det=DetectorParams(trap_fill_per_ns=0.0), quench=gated_config(1e4),
                        source=make_pulsed_source(1e4, 1.0), duration=5.0)
    r = measure(c)
    assert r.n == 1e4 and r.tau_d == pytest.approx(200e-6)
    assert r.mode == "gated"


def test_high_flux_saturation():
    det = DetectorParams(trap_fill_per_ns=0.0)
    q = free_running_config(24e-6, v_on=bias_for_efficiency(0.30, det))
    r = measure(Conditions(det, q, make_cw_source(1e6), 10.0, seed=8))
    assert r.eta_eff < 0.05
    assert r.eta_q == pytest.approx(0.30, abs=max(0.02, 3 * r.stat_uncertainty))


def test_blind_matches_ground_truth(calibrated):
    c = base_conditions(det=calibrated, duration=40.0)
    taus = [16e-6, 24e-6, 32e-6, 48e-6, 64e-6, 80e-6, 96e-6]
    res = sweep_dead_time(c, taus)
    blind = afterpulse_fraction_blind(res)
    truth = res.column("afterpulse_fraction")
    for t, b, g in zip(taus, blind, truth):
        if t <= 48e-6:
            assert abs(b - g) < 0.02, (t, b, g)
