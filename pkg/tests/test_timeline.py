import json

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from driverlens.errors import FormatError, ValidationError
from driverlens.timeline import (
    DriverEvent,
    EpisodeRecord,
    GlucoseTrace,
    Quality,
    TimeGrid,
    episode_hash,
    extract_windows,
    load_episode,
    resample_to_grid,
    save_episode,
    valid_anchors,
)

FIXTURES = __import__("pathlib").Path(__file__).parent / "fixtures"


def _episode(n, missing=(), events=()):
    grid = TimeGrid(0, 5, n)
    q = np.zeros(n, dtype=np.int8)
    q[list(missing)] = Quality.MISSING
    return EpisodeRecord("p", GlucoseTrace(grid, np.linspace(100, 150, n), q), tuple(events))


def test_resample_identity_on_grid():
    grid = TimeGrid(0, 5, 4)
    tr = resample_to_grid([(0, 100.0), (5, 101.0), (10, 99.5), (15, 120.0)], grid)
    assert tr.values.tolist() == [100.0, 101.0, 99.5, 120.0]
    assert np.all(tr.quality == Quality.MEASURED)


def test_resample_linear_midpoint():
    tr = resample_to_grid([(0, 100.0), (10, 120.0)], TimeGrid(0, 5, 3))
    assert tr.values[1] == 110.0
    assert tr.quality.tolist() == [Quality.MEASURED, Quality.INTERPOLATED, Quality.MEASURED]


def test_resample_long_gap_matches_hand_built_trace():
    samples = [(0, 100.0), (5, 104.0), (65, 160.0), (70, 150.0)]
    tr = resample_to_grid(samples, TimeGrid(0, 5, 15))
    M, I, X = Quality.MEASURED, Quality.INTERPOLATED, Quality.MISSING
    expected_q = [M, M] + [X] * 11 + [M, M]
    expected_v = [100.0, 104.0] + [104.0 + 56.0 * k / 12 for k in range(1, 12)] + [160.0, 150.0]
    assert tr.quality.tolist() == expected_q
    np.testing.assert_allclose(tr.values, expected_v, rtol=0, atol=1e-12)
    assert I not in tr.quality.tolist()


def test_one_window_at_boundary():
    assert len(extract_windows(_episode(24 + 12), 24, (6, 12))) == 1


def test_stride_one_counts():
    assert len(extract_windows(_episode(24 + 12 + 4), 24, (6, 12), stride=1)) == 5


@settings(max_examples=40, deadline=None)
@given(n=st.integers(30, 90), gap_start=st.integers(0, 89), gap_len=st.integers(0, 8),
       C=st.integers(1, 12), h=st.integers(1, 12), stride=st.integers(1, 4))
def test_missing_segments_match_brute_force_scan(n, gap_start, gap_len, C, h, stride):
    missing = [i for i in range(gap_start, gap_start + gap_len) if i < n]
    ep = _episode(n, missing)
    got = valid_anchors(ep, C, (h,), stride).tolist()
    miss = set(missing)
    expected = [t for t in range(C - 1, n - h, stride)
                if not any(i in miss for i in range(t - C + 1, t + 1)) and t + h not in miss]
    assert got == expected


def test_save_load_round_trip(tmp_path):
    ev = (DriverEvent(0, "meal", 45.5), DriverEvent(10, "bolus", 3.25), DriverEvent(20, "exercise", 0.5, 30))
    ep = _episode(20, missing=[3], events=ev)
    save_episode(ep, tmp_path / "p")
    back = load_episode(tmp_path / "p.cgm.csv")
    assert back == ep
    assert episode_hash(back) == episode_hash(ep)


def test_negative_carbs_rejected(tmp_path):
    ep = _episode(4)
    save_episode(ep, tmp_path / "p")
    (tmp_path / "p.events.jsonl").write_text(json.dumps({"t_min": 0, "kind": "meal", "magnitude": -5,
                                                         "duration_min": 0}) + "\n")
    with pytest.raises(ValidationError) as info:
        load_episode(tmp_path / "p")
    assert isinstance(info.value, FormatError) and info.value.line == 1


def test_malformed_header_reports_line(tmp_path):
    (tmp_path / "q.cgm.csv").write_text("time,value\n0,100\n")
    with pytest.raises(FormatError, match="line 1"):
        load_episode(tmp_path / "q")


def test_fourteen_day_fixture_event_count():
    manifest = json.loads((FIXTURES / "episode_14d.manifest.json").read_text())
    ep = load_episode(FIXTURES / "episode_14d")
    assert len(ep.events) == manifest["n_events"]
    assert ep.grid.n_points == manifest["n_points"] == 14 * 288
    assert episode_hash(ep) == manifest["hash"]


def test_events_must_be_sorted_and_inside_grid():
    grid = TimeGrid(0, 5, 10)
    tr = GlucoseTrace(grid, np.full(10, 100.0))
    with pytest.raises(ValidationError):
        EpisodeRecord("p", tr, (DriverEvent(10, "meal", 5.0), DriverEvent(5, "meal", 5.0)))
    with pytest.raises(ValidationError):
        EpisodeRecord("p", tr, (DriverEvent(50, "meal", 5.0),))


def test_glucose_range_enforced():
    with pytest.raises(ValidationError):
        GlucoseTrace(TimeGrid(0, 5, 2), [100.0, 900.0])
