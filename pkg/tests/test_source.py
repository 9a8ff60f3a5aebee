import math

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st
from scipy import stats

from spdcbell.polcore import p_from_visibility
from spdcbell.source import (
    FLUX_GROWN_MAP,
    HYDROTHERMAL_MAP,
    IndistinguishabilityMap,
    PairStream,
    SourceConfig,
    apply_compensator,
    compensate,
    generate_fluorescence,
    generate_pair_stream,
    indistinguishability,
    merge_streams,
)


def cfg(**kw):
    base = dict(pump_power_mw=10.0, pair_rate_per_mw=1e5, duration_s=0.01, seed=3)
    base.update(kw)
    return SourceConfig(**base)


def test_pair_count_at_1e6():
    s = generate_pair_stream(cfg(duration_s=1.0))
    assert abs(len(s) - 1e6) < 5 * 1000


def test_zero_duration_empty():
    assert len(generate_pair_stream(cfg(duration_s=0.0))) == 0
    assert len(generate_fluorescence(cfg(duration_s=0.0))) == 0


def test_deterministic_and_seed_sensitive():
    a, b = generate_pair_stream(cfg()), generate_pair_stream(cfg())
    assert np.array_equal(a.t_pair, b.t_pair) and np.array_equal(a.z_origin, b.z_origin)
    c = generate_pair_stream(cfg(seed=4))
    assert len(c) != len(a) or not np.array_equal(c.t_pair, a.t_pair)


def test_pair_stream_structure():
    c = cfg()
    s = generate_pair_stream(c)
    assert np.all(np.diff(s.t_pair) >= 0)
    assert np.all((s.z_origin >= 0) & (s.z_origin <= c.crystal_length_mm))
    assert np.all((s.t_pair >= 0) & (s.t_pair < c.duration_s * 1e12))
    D, L = c.walkoff_ps_per_mm, c.crystal_length_mm
    assert np.allclose(s.relative_delay, -D * (L - s.z_origin))
    assert np.all(s.relative_delay <= 0)
    ev = s[0]
    assert (ev.signal_pol, ev.idler_pol) == ("H", "V")
    assert ev.relative_delay == pytest.approx(s.relative_delay[0])


def test_inter_arrivals_exponential():
    c = cfg(pump_power_mw=1.0, pair_rate_per_mw=1e5, duration_s=1.0, seed=11)
    s = generate_pair_stream(c)
    gaps = np.diff(s.t_pair) / 1e12
    assert len(gaps) > 9e4
    res = stats.kstest(gaps, "expon", args=(0, 1 / c.pair_rate))
    assert res.pvalue > 0.01


def test_compensator_examples():
    c = cfg()
    D, L = c.walkoff_ps_per_mm, c.crystal_length_mm
    from spdcbell.source import PairEvent

    mid = PairEvent(0.0, L / 2, 0.0, D * L / 2)
    assert apply_compensator(mid, c).relative_delay == pytest.approx(0.0)
    front = PairEvent(0.0, 0.0, 0.0, D * L)
    back = PairEvent(0.0, L, 0.0, 0.0)
    assert apply_compensator(front, c).relative_delay == pytest.approx(-D * L / 2)
    assert apply_compensator(back, c).relative_delay == pytest.approx(D * L / 2)


def test_compensate_matches_per_event_and_is_symmetric():
    c = cfg(duration_s=0.1)
    s = generate_pair_stream(c)
    post = compensate(s, c)
    for i in range(0, len(s), max(1, len(s) // 50)):
        assert post[i].relative_delay == pytest.approx(apply_compensator(s[i], c).relative_delay)
    d = post.relative_delay
    half = c.walkoff_ps_per_mm * c.crystal_length_mm / 2
    assert d.min() >= -half - 1e-9 and d.max() <= half + 1e-9
    sem = d.std() / math.sqrt(len(d))
    assert abs(d.mean()) < 3 * sem
    with pytest.raises(ValueError):
        compensate(post, c)


def test_custom_compensator_length():
    c = cfg(compensator_length_mm=0.0)
    assert c.compensator_mm == 0.0
    s = generate_pair_stream(c)
    assert np.array_equal(compensate(s, c).relative_delay, s.relative_delay)
    assert cfg().compensator_mm == 5.0


def test_pair_stream_from_events_roundtrip():
    s = generate_pair_stream(cfg(duration_s=0.0005))
    back = PairStream.from_events(list(s)[::-1], s.duration_s)
    assert np.array_equal(back.t_pair, s.t_pair)
    assert np.array_equal(back.t_idler, s.t_idler)
    assert len(PairStream.empty()) == 0


def test_fluorescence_rate_and_pol():
    c = cfg(duration_s=1.0, seed=5)
    f = generate_fluorescence(c)
    assert c.fluorescence_rate == pytest.approx(1e4)
    assert abs(len(f) - 1e4) < 5 * 100
    assert np.all(np.diff(f.t) >= 0)
    assert abs(f.pol.mean() - 0.5) < 5 * 0.5 / math.sqrt(len(f))
    assert len(generate_fluorescence(cfg(pump_power_mw=0.0))) == 0
    assert cfg(filter_bandwidth_nm=2.0).fluorescence_rate == pytest.approx(2e4)


def test_fluorescence_independent_of_pairs():
    a = generate_fluorescence(cfg(seed=9))
    b = generate_fluorescence(cfg(seed=9, pair_rate_per_mw=5.0))
    assert np.array_equal(a.t, b.t)


def test_fluorescence_singles_share():
    # consistency with the ~5% singles increase at the Bell operating point
    from spdcbell.bench import CONDITIONAL_EFFICIENCY, bell_pair_rate

    pair_singles = bell_pair_rate() * CONDITIONAL_EFFICIENCY * 2 / 4
    fl_singles = 1e4 * CONDITIONAL_EFFICIENCY / 4
    assert 0.02 < fl_singles / pair_singles < 0.08


@pytest.mark.parametrize("bad", [dict(pump_power_mw=-1), dict(duration_s=float("nan")),
                                 dict(compensator_length_mm=-1.0), dict(crystal_length_mm=-2)])
def test_config_validation(bad):
    with pytest.raises(ValueError):
        cfg(**bad)


# --- indistinguishability -----------------------------------------------------


def test_map_anchors():
    assert indistinguishability(cfg(aperture_diameter_mm=1.0)) == pytest.approx(0.98995, abs=1e-5)
    assert indistinguishability(cfg(aperture_diameter_mm=3.0)) == pytest.approx((3 * 0.9 - 1) / 1.9, abs=1e-12)
    assert indistinguishability(cfg(aperture_diameter_mm=1e-6)) == 1.0
    assert indistinguishability(cfg(aperture_diameter_mm=0.0)) == 1.0
    assert FLUX_GROWN_MAP.visibility(0.2, 1.0) == pytest.approx(0.977)
    assert FLUX_GROWN_MAP.visibility(2.0, 1.0) == pytest.approx(0.59)


def test_map_log_interpolation():
    v = HYDROTHERMAL_MAP.visibility(math.sqrt(3.0), 1.0)
    assert v == pytest.approx((0.99 + 0.90) / 2)
    assert HYDROTHERMAL_MAP.p(math.sqrt(3.0), 1.0) == pytest.approx(p_from_visibility(v))


def test_map_nearest_bandwidth():
    assert HYDROTHERMAL_MAP.visibility(3.0, 3.0) == HYDROTHERMAL_MAP.visibility(3.0, 1.0)


def test_map_rejects_bad_anchors():
    with pytest.raises(ValueError):
        IndistinguishabilityMap(((1.0, 1.0, 0.8), (2.0, 1.0, 0.9)))
    with pytest.raises(ValueError):
        IndistinguishabilityMap(((1.0, 1.0, 1.2),))


@given(st.floats(1e-3, 50.0), st.floats(1e-3, 50.0), st.sampled_from([HYDROTHERMAL_MAP, FLUX_GROWN_MAP]))
def test_map_monotone_and_bounded(a, b, imap):
    lo, hi = min(a, b), max(a, b)
    assert 0.0 <= imap.p(hi, 1.0) <= imap.p(lo, 1.0) <= 1.0


@given(st.lists(st.lists(st.floats(0, 1e6), max_size=20).map(sorted), max_size=4))
def test_merge_preserves_order(streams):
    t, src = merge_streams(*[np.array(s) for s in streams])
    assert np.all(np.diff(t) >= 0)
    assert len(t) == sum(len(s) for s in streams)
    for i, s in enumerate(streams):
        assert np.array_equal(t[src == i], np.array(s, dtype=float))
