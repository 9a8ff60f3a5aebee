import math

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from spdcbell.analysis import default_convention
from spdcbell.bench import (
    CONDITIONAL_EFFICIENCY,
    DETECTOR_PAIRS,
    DETECTORS,
    TAG_DARK,
    BenchConfig,
    CalibrationError,
    Channel,
    ContractError,
    DetectorConfig,
    background_run,
    bell_bench,
    bell_pair_rate,
    bell_source,
    calibrate_accidentals,
    count_coincidences,
    dead_time_mask,
    detect,
    match_coincidences,
    measure_pair,
    route_pair,
    run_point,
    simulate_clicks,
    start_stop_delays,
    start_stop_histogram,
    transmission_for_conditional_efficiency,
)
from spdcbell.polcore import AnalyzerSetting, joint_pbs_probabilities
from spdcbell.source import SourceConfig, compensate, generate_pair_stream, poisson_arrivals

IDEAL = DetectorConfig(efficiency=1.0, dark_rate=0.0, dead_time_ns=0.0, jitter_ns=0.0)


def ideal_detectors():
    return {d: IDEAL for d in DETECTORS}


def pairs(n_rate=1e5, duration=1.0, seed=0):
    return generate_pair_stream(SourceConfig(pump_power_mw=1.0, pair_rate_per_mw=n_rate,
                                             duration_s=duration, seed=seed))


# --- brute-force oracles ------------------------------------------------------


def dead_time_oracle(t, dead):
    keep, last = [], -math.inf
    for x in t:
        ok = x - last >= dead
        keep.append(ok)
        if ok:
            last = x
    return np.array(keep, dtype=bool)


def greedy_oracle(ta, tb, half):
    """Each a in time order takes the earliest unused b within the window.

    b clicks that fall behind the current a's window can never be used again.
    """
    used = [False] * len(tb)
    out = []
    for i, a in enumerate(ta):
        for j, b in enumerate(tb):
            if used[j] or b < a - half:
                continue
            if b <= a + half:
                used[j] = True
                out.append((i, j))
            break
    return out


times = st.lists(st.floats(0, 2e6, allow_nan=False), max_size=40).map(sorted)


@given(times, st.floats(0, 3e5))
def test_dead_time_against_oracle(t, dead):
    t = np.array(t)
    assert np.array_equal(dead_time_mask(t, dead), dead_time_oracle(t, dead))


@given(times, times, st.floats(1.0, 3e5))
def test_matching_against_oracle(ta, tb, window_ps):
    ta, tb = np.array(ta), np.array(tb)
    ia, jb = match_coincidences(ta, tb, window_ps / 1e3)
    assert list(zip(ia.tolist(), jb.tolist())) == greedy_oracle(ta, tb, window_ps / 2)
    assert len(set(ia.tolist())) == len(ia) and len(set(jb.tolist())) == len(jb)


def test_matching_dense_against_oracle(rng):
    ta = np.sort(rng.uniform(0, 1e6, 400))
    tb = np.sort(rng.uniform(0, 1e6, 400))
    ia, jb = match_coincidences(ta, tb, 5.0)
    assert list(zip(ia.tolist(), jb.tolist())) == greedy_oracle(ta, tb, 2500.0)


# --- routing and measurement --------------------------------------------------


def test_route_split_fraction():
    p = pairs()
    r = route_pair(p, BenchConfig(), np.random.default_rng(1))
    n = len(p)
    assert abs(r.split.mean() - 0.5) < 5 * math.sqrt(0.25 / n)
    again = route_pair(p, BenchConfig(), np.random.default_rng(1))
    assert np.array_equal(r.signal_arm, again.signal_arm)


def test_route_without_splitter():
    p = pairs(duration=0.01)
    r = route_pair(p, BenchConfig(use_beam_splitter=False), np.random.default_rng(1))
    assert np.all(r.signal_arm == 0) and np.all(r.idler_arm == 0)


def single_beam_bench(theta, p):
    return BenchConfig(use_beam_splitter=False, settingT=AnalyzerSetting(theta), mix_p=p,
                       path_transmission=1.0, detectors=ideal_detectors())


def test_no_splitter_zero_rotation_splits_every_pair():
    p = pairs(duration=0.01)
    b = single_beam_bench(0.0, 1.0)
    out = measure_pair(p, route_pair(p, b, np.random.default_rng(0)), b, np.random.default_rng(1))
    assert np.array_equal(np.sort(out["TT"].tag), np.arange(len(p)))
    assert np.array_equal(np.sort(out["TR"].tag), np.arange(len(p)))
    assert len(out["RT"]) == len(out["RR"]) == 0


def test_no_splitter_eighth_rotation_null():
    p = pairs(duration=0.01)
    b = single_beam_bench(math.pi / 8, 1.0)
    out = measure_pair(p, route_pair(p, b, np.random.default_rng(0)), b, np.random.default_rng(1))
    assert len(np.intersect1d(out["TT"].tag, out["TR"].tag)) == 0
    assert len(out["TT"]) + len(out["TR"]) == 2 * len(p)


def test_calibrated_zero_setting_outcomes():
    conv = default_convention()
    sT, sR = conv.settings(0.0, 0.0)
    b = BenchConfig(settingT=sT, settingR=sR, triplet_phase=conv.phase, path_transmission=1.0,
                    detectors=ideal_detectors())
    probs = joint_pbs_probabilities(b.state(), sT, sR)
    assert np.allclose(probs, 0.25, atol=1e-12)
    p = pairs(duration=0.2)
    r = route_pair(p, b, np.random.default_rng(0))
    out = measure_pair(p, r, b, np.random.default_rng(1))
    tags = {d: set(out[d].tag.tolist()) for d in DETECTORS}
    n_split = int(r.split.sum())
    for k, (a, c) in enumerate([("TT", "RT"), ("TT", "RR"), ("TR", "RT"), ("TR", "RR")]):
        n = len(tags[a] & tags[c])
        assert abs(n - n_split * probs[k]) < 5 * math.sqrt(n_split * probs[k] * (1 - probs[k]))


# --- detection ----------------------------------------------------------------


def arrivals(t, d="TT"):
    return {d: Channel(np.asarray(t, float), np.zeros(len(t), dtype=np.int64))}


def test_detect_efficiency():
    t = np.arange(100000) * 1e6
    dets = {d: DetectorConfig(dark_rate=0.0) for d in DETECTORS}
    c = detect([arrivals(t)], dets, 0.1, np.random.default_rng(2))
    n = len(c["TT"])
    assert abs(n - 52500) < 5 * math.sqrt(1e5 * 0.525 * 0.475)


def test_detect_dead_time_drops_close_arrival():
    dets = {d: DetectorConfig(efficiency=1.0, dark_rate=0.0) for d in DETECTORS}
    c = detect([arrivals([0.0, 10e3, 100e3])], dets, 1e-6, np.random.default_rng(0))
    assert c["TT"].t.tolist() == [0.0, 100e3]


def test_detect_lossless():
    t = np.sort(np.random.default_rng(3).uniform(0, 1e9, 500))
    t = t[np.concatenate([[True], np.diff(t) > 0])]
    c = detect([arrivals(t)], ideal_detectors(), 1e-3, np.random.default_rng(0))
    assert np.array_equal(c["TT"].t, t)


def test_detect_unordered_input():
    with pytest.raises(ContractError):
        detect([arrivals([5.0, 1.0])], ideal_detectors(), 1.0, np.random.default_rng(0))


def test_clicks_respect_dead_time_on_full_run():
    s = bell_source(duration_s=0.5, seed=4)
    clicks, _ = simulate_clicks(bell_bench(0.1, 0.2), s, stray_rates={d: 1e5 for d in DETECTORS})
    for d in DETECTORS:
        gaps = np.diff(clicks[d].t)
        assert np.all(gaps >= 50e3 - 1e-6)
    assert np.any(clicks["TT"].tag == TAG_DARK)


# --- coincidences -------------------------------------------------------------


def test_count_coincidences_trivial():
    t = np.arange(10) * 1e6
    assert count_coincidences(t, np.zeros(0), 70) == 0
    assert count_coincidences(t, t, 70) == 10
    assert count_coincidences(Channel(t, np.zeros(10, dtype=np.int64)), t, 70) == 10


def test_window_is_full_gate_width():
    assert count_coincidences([0.0], [35e3], 70) == 1
    assert count_coincidences([0.0], [35.001e3], 70) == 0


def test_accidentals_at_12000_per_s():
    g = np.random.default_rng(21)
    a = poisson_arrivals(12000, 10.0, g)
    b = poisson_arrivals(12000, 10.0, g)
    assert 12000**2 * 70e-9 == pytest.approx(10.08)
    n = count_coincidences(a, b, 70)
    assert abs(n - 100.8) < 5 * math.sqrt(100.8)


def test_start_stop_histogram_edges():
    with pytest.raises(ValueError):
        start_stop_histogram([0.0], [1.0], 0.0, 1.0)
    h = start_stop_histogram(np.zeros(0), np.zeros(0), 1.0, 1.0)
    assert h.total == 0 and len(h.counts) == 0


def test_start_stop_pre_compensation_one_sided():
    src = SourceConfig(pump_power_mw=1.0, pair_rate_per_mw=1e5, duration_s=0.05, seed=8,
                       fluorescence_rate_per_mw=0.0)
    b = single_beam_bench(0.0, 1.0)
    clicks, _ = simulate_clicks(b, src, compensated=False)
    d = start_stop_delays(clicks["TR"], clicks["TT"], 0.01)
    assert len(d) > 0 and np.all(d < 0)
    h1 = start_stop_histogram(clicks["TR"], clicks["TT"], 0.1, 0.01)
    h2 = start_stop_histogram(clicks["TR"], clicks["TT"], 0.1, 0.01)
    assert np.array_equal(h1.counts, h2.counts) and np.array_equal(h1.edges_ps, h2.edges_ps)
    assert h1.support()[1] <= 0.0


def test_start_stop_post_compensation_symmetric():
    src = SourceConfig(pump_power_mw=1.0, pair_rate_per_mw=1e5, duration_s=0.05, seed=8,
                       fluorescence_rate_per_mw=0.0)
    clicks, _ = simulate_clicks(single_beam_bench(0.0, 1.0), src, compensated=True)
    h = start_stop_histogram(clicks["TR"], clicks["TT"], 0.1, 0.01)
    assert abs(h.mean()) < 0.1
    lo, hi = h.support()
    assert lo >= -1.5 - 1e-9 and hi <= 1.6 + 1e-9


# --- accidental calibration ---------------------------------------------------


def test_calibration_recovers_window():
    b = bell_bench()
    bg = background_run(b, bell_source(seed=1), 2e5, 2.0)
    cal = calibrate_accidentals(b, bg)
    assert set(cal) == set(DETECTOR_PAIRS)
    for c in cal.values():
        assert abs(c.window_ns - 70.0) < 3 * c.sigma_window_ns


def test_calibration_undefined_without_light():
    dark_free = {d: DetectorConfig(dark_rate=0.0) for d in DETECTORS}
    b = bell_bench(detectors=dark_free)
    bg = background_run(b, bell_source(seed=1), 0.0, 0.1)
    with pytest.raises(CalibrationError):
        calibrate_accidentals(b, bg)


def test_doubling_stray_quadruples_accidentals():
    b = bell_bench()
    r1 = background_run(b, bell_source(seed=2), 1e5, 2.0)
    r2 = background_run(b, bell_source(seed=3), 2e5, 2.0)
    for key in ("TT_RT", "TR_RR"):
        a, c = key.split("_")
        c1, c2 = r1.coincidences[key], r2.coincidences[key]
        ratio = c2 / c1
        sigma = ratio * math.sqrt(1 / c1 + 1 / c2)
        singles_ratio = (r2.singles[a] * r2.singles[c]) / (r1.singles[a] * r1.singles[c])
        assert singles_ratio == pytest.approx(4.0, rel=0.02)  # dead time trims the doubled rates slightly
        assert abs(ratio - singles_ratio) < 3 * sigma
        assert abs(ratio - 4.0) < 3 * sigma + 4.0 * 0.02


def test_pump_off_consistent_with_accidental_formula():
    b = bell_bench()
    r = background_run(b, bell_source(seed=5), 1e5, 2.0)
    for key in DETECTOR_PAIRS:
        a, c = key.split("_")
        expect = r.singles_rate(a) * r.singles_rate(c) * 70e-9 * r.duration_s
        assert abs(r.coincidences[key] - expect) < 4 * math.sqrt(expect)
        assert r.true_coincidences[key] == 0


# --- operating point ----------------------------------------------------------


def peak_setting():
    conv = default_convention()
    grid = np.arange(32) * math.pi / 16
    b = bell_bench(0.0, 0.0)
    probs = [joint_pbs_probabilities(b.state(), *conv.settings(0.0, t))[0] for t in grid]
    k = int(np.argmax(probs))
    return grid[k], probs[k]


def test_operating_point():
    theta_R, prob = peak_setting()
    src = bell_source(duration_s=10.0, seed=17)
    r = run_point(bell_bench(0.0, theta_R), src)
    T = r.duration_s
    eta = CONDITIONAL_EFFICIENCY
    # two photons per pair over four detectors, plus fluorescence and darks,
    # thinned slightly by dead time
    rate_in = bell_pair_rate() * eta / 2 + src.fluorescence_rate * eta / 4 + 50.0
    singles_expect = rate_in / (1 + rate_in * 50e-9) * T
    assert abs(singles_expect / T - 12000) < 3 * math.sqrt(12000 * T) / T
    for d in DETECTORS:
        n = r.singles[d]
        assert abs(n - singles_expect) < 3 * math.sqrt(singles_expect), d
        assert abs(n / T - 12000) < 3 * math.sqrt(n) / T, d
    true = r.true_coincidences["TT_RT"]
    expect_true = bell_pair_rate() * T * 0.5 * prob * eta**2
    assert abs(true - expect_true) < 3 * math.sqrt(expect_true)
    assert abs(true / T - 1200) < 3 * math.sqrt(true) / T
    acc = r.coincidences["TT_RT"] - true
    acc_expect = r.singles_rate("TT") * r.singles_rate("RT") * 70e-9 * T
    assert abs(acc - acc_expect) < 3 * math.sqrt(acc_expect)
    assert abs(acc - 10.08 * T) < 3 * math.sqrt(10.08 * T)


def test_run_point_deterministic():
    a = run_point(bell_bench(0.2, 0.1), bell_source(duration_s=0.2, seed=3))
    b = run_point(bell_bench(0.2, 0.1), bell_source(duration_s=0.2, seed=3))
    assert a.singles == b.singles and a.coincidences == b.coincidences


def test_transmission_for_conditional_efficiency():
    b = BenchConfig(use_beam_splitter=False)
    s = SourceConfig(pump_power_mw=10.0, pair_rate_per_mw=1.05e5)
    t = transmission_for_conditional_efficiency(0.21, b, s)
    # zero dead time reduces to the plain product
    no_dead = b.with_(detectors={d: DetectorConfig(dead_time_ns=0.0) for d in DETECTORS})
    assert transmission_for_conditional_efficiency(0.21, no_dead, s) == pytest.approx(0.4)
    assert 0.4 < t < 0.41
    with pytest.raises(ValueError):
        transmission_for_conditional_efficiency(0.9, b, s)


def test_bench_validation():
    with pytest.raises(ValueError):
        BenchConfig(coincidence_window_ns=0.0)
    with pytest.raises(ValueError):
        BenchConfig(mix_p=1.5)
    with pytest.raises(ValueError):
        DetectorConfig(efficiency=1.2)
    with pytest.raises(ValueError):
        BenchConfig(detectors={"TT": DetectorConfig()})


def test_compensated_stream_used_by_default():
    src = bell_source(duration_s=0.001, seed=1)
    p = generate_pair_stream(src)
    assert not p.compensated and compensate(p, src).compensated


def test_bunched_same_arm_pairs_give_one_click():
    """Two photons on one detector within picoseconds register once (dead time)."""
    from spdcbell.polcore import single_beam_coincidence_prob

    b = bell_bench(0.0, 0.0)
    src = bell_source(duration_s=10.0, seed=405)
    r = run_point(b, src, keep_clicks=True)
    eta, R, T = CONDITIONAL_EFFICIENCY, bell_pair_rate(), 10.0
    for d, setting in (("TT", b.settingT), ("RT", b.settingR)):
        pc = single_beam_coincidence_prob(setting.effective_angle, b.mix_p)
        # detector sees R*eta/2 pair photons, minus one per doubly-detected bunched pair
        expect = (R * eta / 2 - R * (1 - pc) * eta**2 / 8) * T
        expect /= 1 + r.singles_rate(d) * 50e-9  # ordinary dead-time thinning
        n = np.count_nonzero(r.clicks[d].tag >= 0)
        assert abs(n - expect) < 3 * math.sqrt(expect), d
