import math
import random

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from scipy.integrate import solve_ivp

from pishgu import data
from pishgu.data import DatasetSpec, LeaveOneOut, RatioSplit, TrackPoint
from pishgu.errors import ConfigError, FormatError, ParseError


def spec(t_in=3, t_out=2, fps=1.0):
    return DatasetSpec("t", "vehicle_birdseye", "meters", fps, fps, t_in, t_out)


def track(frames, subject="1"):
    return [TrackPoint(f, subject, float(f), 2.0 * f) for f in frames]


def count_windows_by_enumeration(frames, length):
    """Independent oracle: start frames whose full span is present."""
    present = set(frames)
    return sum(all(s + k in present for k in range(length)) for s in sorted(present))


# -- ingestion ---------------------------------------------------------------


def write_csv(path, lines):
    path.write_text("\n".join(lines) + "\n")
    return path


def test_load_three_rows(tmp_path):
    p = write_csv(tmp_path / "t.csv", ["frame_id,subject_id,x,y", "0,7,0.0,0.0", "1,7,1.0,0.5", "2,7,2.0,1.0"])
    pts = data.load_tracks(p)
    assert len(pts) == 3
    assert {q.subject_id for q in pts} == {"7"}
    assert pts[2] == TrackPoint(2, "7", 2.0, 1.0)


def test_duplicate_row_names_pair(tmp_path):
    p = write_csv(tmp_path / "t.csv", ["frame_id,subject_id,x,y", "0,7,0,0", "0,7,1,1"])
    with pytest.raises(FormatError, match=r"0.*7"):
        data.load_tracks(p)


def test_shuffled_rows_give_sorted_output(tmp_path):
    rows = [f"{f},{s},{f * 0.5},{s}" for f in range(5) for s in (2, 10)]
    a = write_csv(tmp_path / "a.csv", ["frame_id,subject_id,x,y"] + rows)
    random.Random(0).shuffle(rows)
    b = write_csv(tmp_path / "b.csv", ["frame_id,subject_id,x,y"] + rows)
    assert data.load_tracks(a) == data.load_tracks(b)


def test_missing_column_is_named(tmp_path):
    p = write_csv(tmp_path / "t.csv", ["frame_id,subject_id,x", "0,1,0"])
    with pytest.raises(FormatError, match="y"):
        data.load_tracks(p)


def test_bad_value_reports_line(tmp_path):
    p = write_csv(tmp_path / "t.csv", ["frame_id,subject_id,x,y", "0,1,0,0", "1,1,abc,0"])
    with pytest.raises(ParseError) as info:
        data.load_tracks(p)
    assert info.value.line == 3


def test_extra_columns_warn(tmp_path, caplog):
    p = write_csv(tmp_path / "t.csv", ["frame_id,subject_id,x,y,speed", "0,1,0,0,3"])
    assert len(data.load_tracks(p)) == 1
    assert "speed" in caplog.text


def test_write_load_round_trip(tmp_path):
    pts = data.synth_scene("turning", 3, 10, seed=1)
    data.write_tracks(tmp_path / "t.csv", pts)
    assert data.load_tracks(tmp_path / "t.csv") == data._sort_tracks(pts)


def test_numeric_subjects_sort_numerically():
    assert sorted(["10", "2", "a"], key=data.subject_key) == ["2", "10", "a"]


# -- downsampling ------------------------------------------------------------


def test_downsample_keeps_every_tenth():
    pts = track(range(100))
    kept = data.downsample(pts, 25.0, 2.5)
    assert [p.frame_id for p in kept] == list(range(0, 100, 10))


def test_downsample_identity():
    pts = track(range(7))
    assert data.downsample(pts, 5.0, 5.0) == pts


def test_downsample_thirty_points():
    kept = data.downsample(track(range(30)), 10.0, 1.0)
    frames = [p.frame_id for p in kept]
    assert len(frames) == 3
    assert set(np.diff(frames)) == {10}


def test_non_integer_stride_rejected():
    with pytest.raises(ConfigError):
        data.frame_stride(25.0, 10.0)


# -- windows -----------------------------------------------------------------


def test_exact_length_gives_one_window():
    assert len(data.build_windows(track(range(5)), spec())) == 1


def test_one_extra_point_gives_two_windows():
    assert len(data.build_windows(track(range(6)), spec())) == 2


def test_gap_in_span_yields_no_window():
    frames = [0, 1, 2, 4, 5, 6]
    assert data.build_windows(track(frames), spec()) == []


def test_window_contents_and_anchor():
    (w,) = data.build_windows(track(range(5)), spec())
    np.testing.assert_array_equal(w.observed, [[0, 0], [1, 2], [2, 4]])
    np.testing.assert_array_equal(w.future, [[3, 6], [4, 8]])
    np.testing.assert_array_equal(w.relative, [[0, 0], [1, 2], [2, 4]])
    assert w.anchor_frame == 2


def test_windows_respect_frame_step_after_downsampling():
    s = DatasetSpec("t", "pedestrian_birdseye", "meters", 10.0, 1.0, 2, 1)
    pts = data.downsample(track(range(50)), 10.0, 1.0)
    ws = data.build_windows(pts, s)
    assert len(ws) == 5 - 3 + 1
    assert [w.anchor_frame for w in ws] == [10, 20, 30]


def test_stride_uses_global_grid():
    a = track(range(0, 12), "a")
    b = track(range(1, 12), "b")
    ws = data.build_windows(a + b, spec(), stride=2)
    anchors = {w.anchor_frame for w in ws}
    # starts are even frames for both subjects, so anchors coincide
    assert all((a - 2) % 2 == 0 for a in anchors)
    assert {w.subject_id for w in ws} == {"a", "b"}


@settings(max_examples=50, deadline=None)
@given(
    st.integers(0, 40),
    st.lists(st.integers(0, 39), max_size=5),
    st.integers(1, 4),
    st.integers(1, 4),
)
def test_window_count_matches_enumeration(length, holes, t_in, t_out):
    t_in = max(t_in, 2)
    frames = [f for f in range(length) if f not in set(holes)]
    ws = data.build_windows(track(frames), spec(t_in, t_out))
    assert len(ws) == count_windows_by_enumeration(frames, t_in + t_out)
    if not holes or all(h >= length for h in holes):
        assert len(ws) == max(0, length - (t_in + t_out) + 1)
    for w in ws:
        np.testing.assert_array_equal(w.relative[0], [0.0, 0.0])


# -- frames ------------------------------------------------------------------


def test_grouping_buckets_by_anchor():
    w = [
        data.make_window("a", 5, np.zeros((3, 2)), np.zeros((2, 2))),
        data.make_window("b", 5, np.ones((3, 2)), np.ones((2, 2))),
        data.make_window("c", 6, np.ones((3, 2)), np.ones((2, 2))),
    ]
    frames = data.group_frames(w)
    assert [len(f) for f in frames] == [2, 1]
    assert [f.anchor_frame for f in frames] == [5, 6]


def test_single_stationary_window_normalization():
    obs = np.full((3, 2), 10.0)
    frame = data.make_frame([data.make_window("a", 0, obs, np.full((2, 2), 10.0))])
    np.testing.assert_array_equal(frame.normalization_offset, [10.0, 10.0])
    np.testing.assert_array_equal(frame.observed[0, -1], [0.0, 0.0])


@settings(max_examples=30, deadline=None)
@given(st.integers(1, 8), st.integers(0, 2**31))
def test_centroid_of_normalized_last_positions_is_zero(n, seed):
    r = np.random.default_rng(seed)
    windows = [data.make_window(str(i), 0, r.normal(0, 100, (3, 2)), r.normal(0, 100, (2, 2))) for i in range(n)]
    frame = data.make_frame(windows)
    np.testing.assert_allclose(frame.observed[:, -1].mean(axis=0), 0.0, atol=1e-9)
    for w, orig in zip(frame.denormalized(), windows):
        np.testing.assert_allclose(w.observed, orig.observed, atol=1e-9)
        np.testing.assert_array_equal(w.relative, orig.relative)


def test_make_frame_rejects_mixed_anchors():
    w = [data.make_window("a", 0, np.zeros((3, 2)), np.zeros((2, 2))),
         data.make_window("b", 1, np.zeros((3, 2)), np.zeros((2, 2)))]
    with pytest.raises(ConfigError):
        data.make_frame(w)


# -- splits ------------------------------------------------------------------


def frames_for(n, scene=""):
    return [data.make_frame([data.make_window("a", i, np.zeros((3, 2)), np.zeros((2, 2)))], scene) for i in range(n)]


def test_ratio_split_exact_and_contiguous():
    frames = frames_for(100)
    random.Random(1).shuffle(frames)
    train, val, test = data.split_dataset(frames, RatioSplit(0.7, 0.1, 0.2))
    assert (len(train), len(val), len(test)) == (70, 10, 20)
    assert [f.anchor_frame for f in train + val + test] == list(range(100))


def test_leave_one_out():
    frames = frames_for(2, "A") + frames_for(3, "B") + frames_for(4, "C")
    train, val, test = data.split_dataset(frames, LeaveOneOut("C"))
    assert {f.scene for f in train} == {"A", "B"}
    assert {f.scene for f in test} == {"C"}
    assert val == [] and len(test) == 4


def test_bad_fractions_rejected():
    with pytest.raises(ConfigError):
        data.split_dataset(frames_for(10), RatioSplit(0.5, 0.5, 0.1))


def test_unknown_scene_rejected():
    with pytest.raises(ConfigError, match="Z"):
        data.split_dataset(frames_for(3, "A"), LeaveOneOut("Z"))


# -- synthetic ---------------------------------------------------------------


def test_constant_velocity_kinematics():
    path = data.constant_velocity_track((0, 0), (1, 0), 6)
    np.testing.assert_array_equal(path, [[k, 0] for k in range(6)])


@pytest.mark.parametrize("kind", data.SYNTH_KINDS)
def test_synth_is_deterministic(kind):
    assert data.synth_scene(kind, 4, 20, seed=9) == data.synth_scene(kind, 4, 20, seed=9)
    assert data.synth_scene(kind, 4, 20, seed=9) != data.synth_scene(kind, 4, 20, seed=10)


@pytest.mark.parametrize("kind", data.SYNTH_KINDS)
def test_synth_every_subject_every_frame(kind):
    pts = data.synth_scene(kind, 5, 12, seed=0)
    assert len(pts) == 60
    assert {(p.frame_id, p.subject_id) for p in pts} == {(f, str(s)) for f in range(12) for s in range(5)}


def test_turning_matches_integration():
    speed, heading, omega = 1.3, 0.4, 0.07
    path = data.turning_track((2.0, -1.0), speed, heading, omega, 30)

    def rhs(t, y):
        h = heading + omega * t
        return [speed * math.cos(h), speed * math.sin(h)]

    sol = solve_ivp(rhs, (0, 29), [2.0, -1.0], t_eval=np.arange(30), rtol=1e-11, atol=1e-12)
    np.testing.assert_allclose(path, sol.y.T, atol=1e-8)


def test_turning_heading_rotates_by_omega():
    omega = 0.05
    path = data.turning_track((0, 0), 1.0, 0.0, omega, 20)
    # chord k -> k+1 points along heading k*omega + omega/2 on a circular arc
    steps = np.diff(path, axis=0)
    angles = np.unwrap(np.arctan2(steps[:, 1], steps[:, 0]))
    np.testing.assert_allclose(np.diff(angles), omega, atol=1e-12)


def test_crossing_pairs_meet():
    pts = data.synth_scene("crossing", 2, 20, seed=3)
    a = np.array([[p.x, p.y] for p in pts if p.subject_id == "0"])
    b = np.array([[p.x, p.y] for p in pts if p.subject_id == "1"])
    # both lines pass through the shared centre within the window
    centre = a[10]
    d = b - centre
    cross = d[:-1, 0] * d[1:, 1] - d[:-1, 1] * d[1:, 0]
    assert np.min(np.linalg.norm(d, axis=1)) < 5.0
    assert np.allclose(cross, cross[0])


def test_synth_rejects_unknown_kind():
    with pytest.raises(ConfigError, match="kind"):
        data.synth_scene("spiral", 1, 10, seed=0)


# -- specs and cache ---------------------------------------------------------


def test_presets():
    v = data.preset("vehicle")
    assert (v.t_in, v.t_out, v.target_fps, v.units) == (15, 25, 5.0, "meters")
    p = data.preset("pedestrian")
    assert (p.t_in, p.t_out, p.target_fps) == (8, 12, 2.5)
    assert data.preset("pedestrian_highangle").units == "pixels"
    with pytest.raises(ConfigError):
        data.preset("boat")


def test_spec_round_trip(tmp_path):
    s = data.preset("pedestrian_highangle")
    data.save_dataset_spec(s, tmp_path / "s.cfg")
    assert data.load_dataset_spec(tmp_path / "s.cfg") == s


def test_spec_validation_names_field():
    with pytest.raises(ConfigError, match="units"):
        DatasetSpec("t", "vehicle_birdseye", "feet", 5.0, 5.0, 3, 2)


def test_cache_round_trip_is_exact(tmp_path):
    s = spec()
    pts = data.synth_scene("crossing", 4, 12, seed=2, noise=0.1)
    frames = data.group_frames(data.build_windows(pts, s), "scene1")
    data.write_cache(tmp_path / "c.bin", s, frames)
    s2, frames2 = data.read_cache(tmp_path / "c.bin")
    assert s2 == s and len(frames2) == len(frames)
    for a, b in zip(frames, frames2):
        assert (a.anchor_frame, a.scene, a.subject_ids) == (b.anchor_frame, b.scene, b.subject_ids)
        for name in ("normalization_offset", "observed", "relative", "future"):
            np.testing.assert_array_equal(getattr(a, name), getattr(b, name))


def test_cache_rejects_truncation(tmp_path):
    s = spec()
    frames = data.group_frames(data.build_windows(track(range(8)), s))
    data.write_cache(tmp_path / "c.bin", s, frames)
    raw = (tmp_path / "c.bin").read_bytes()
    (tmp_path / "c.bin").write_bytes(raw[:-8])
    with pytest.raises(FormatError, match="truncated"):
        data.read_cache(tmp_path / "c.bin")


def test_cache_rejects_foreign_file(tmp_path):
    (tmp_path / "c.bin").write_bytes(b"hello world")
    with pytest.raises(FormatError):
        data.read_cache(tmp_path / "c.bin")
