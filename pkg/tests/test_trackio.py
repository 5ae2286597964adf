import itertools
import json

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from vimu.trackio import (
    BBox,
    FilterParams,
    KalmanParams,
    KeypointFrame,
    KeypointParseError,
    PersonTrack,
    TrackerParams,
    assign_tracks,
    build_tracks,
    filter_tracks,
    iou,
    kalman_smooth,
    keypoint_bbox,
    load_keypoint_stream,
)


def det(joints, conf=1.0):
    """(N,3) detection from a list of (x, y) pairs."""
    arr = np.zeros((len(joints), 3))
    for i, (x, y) in enumerate(joints):
        arr[i] = [x, y, conf]
    return arr


def full_det(n=17, offset=(0.0, 0.0), spread=10.0, conf=1.0):
    pts = [(offset[0] + spread * np.cos(i), offset[1] + spread * np.sin(i)) for i in range(n)]
    return det(pts, conf)


# ---------------------------------------------------------------- loading

def write_jsonl(path, lines):
    path.write_text("\n".join(json.dumps(ln) for ln in lines) + "\n")


def test_load_empty_file(tmp_path):
    p = tmp_path / "kp.jsonl"
    p.write_text("")
    assert load_keypoint_stream(p) == []


def test_load_roundtrip_single_line(tmp_path):
    p = tmp_path / "kp.jsonl"
    joints = [[float(i), float(i + 1), 1.0] for i in range(17)]
    write_jsonl(p, [{"clip": "c0", "frame": 0, "people": [{"joints": joints}]}])
    frames = load_keypoint_stream(p)
    assert len(frames) == 1
    assert frames[0].clip_id == "c0"
    assert frames[0].detections.shape == (1, 17, 3)
    np.testing.assert_allclose(frames[0].detections[0], joints)


def test_load_wrong_joint_count_names_line(tmp_path):
    p = tmp_path / "kp.jsonl"
    good = [[0.0, 0.0, 1.0]] * 17
    bad = [[0.0, 0.0, 1.0]] * 16
    write_jsonl(p, [
        {"clip": "c0", "frame": 0, "people": [{"joints": good}]},
        {"clip": "c0", "frame": 1, "people": [{"joints": bad}]},
    ])
    with pytest.raises(KeypointParseError, match="line 2"):
        load_keypoint_stream(p)


def test_load_nonfinite_rejected(tmp_path):
    p = tmp_path / "kp.jsonl"
    joints = [[0.0, 0.0, 1.0]] * 16 + [[float("nan"), 0.0, 1.0]]
    write_jsonl(p, [{"clip": "c0", "frame": 0, "people": [{"joints": joints}]}])
    with pytest.raises(KeypointParseError, match="line 1"):
        load_keypoint_stream(p)


# ---------------------------------------------------------------- bbox / iou

def test_bbox_single_joint():
    d = np.zeros((17, 3))
    d[3] = [5.0, 7.0, 1.0]
    assert keypoint_bbox(d) == BBox(5, 7, 5, 7)


def test_bbox_min_max():
    d = np.zeros((17, 3))
    d[0] = [0, 0, 1.0]
    d[1] = [2, 4, 1.0]
    assert keypoint_bbox(d) == BBox(0, 0, 2, 4)


def test_bbox_ignores_absent():
    d = np.zeros((17, 3))
    d[0] = [0, 0, 1.0]
    d[1] = [2, 4, 1.0]
    d[2] = [100, 100, 0.0]  # absent
    assert keypoint_bbox(d) == BBox(0, 0, 2, 4)


def test_bbox_no_present_joints():
    with pytest.raises(ValueError):
        keypoint_bbox(np.zeros((17, 3)))


def test_iou_identical():
    b = BBox(0, 0, 2, 2)
    assert iou(b, b) == 1.0


def test_iou_disjoint():
    assert iou(BBox(0, 0, 1, 1), BBox(5, 5, 6, 6)) == 0.0


def test_iou_hand_case():
    # intersection 1, union 7
    assert iou(BBox(0, 0, 2, 2), BBox(1, 1, 3, 3)) == pytest.approx(1 / 7)


def test_iou_degenerate_zero_area():
    assert iou(BBox(1, 1, 1, 1), BBox(1, 1, 1, 1)) == 0.0


@given(st.lists(st.floats(-100, 100), min_size=8, max_size=8))
def test_iou_symmetric_bounded(vals):
    a = BBox(min(vals[0], vals[1]), min(vals[2], vals[3]), max(vals[0], vals[1]), max(vals[2], vals[3]))
    b = BBox(min(vals[4], vals[5]), min(vals[6], vals[7]), max(vals[4], vals[5]), max(vals[6], vals[7]))
    v = iou(a, b)
    assert v == iou(b, a)
    assert 0.0 <= v <= 1.0


# ---------------------------------------------------------------- matching

def brute_force_max_matching(weights):
    """Best total weight over all injective assignments (oracle)."""
    nt, nd = weights.shape
    best = 0.0
    k = min(nt, nd)
    rows = range(nt)
    for rsub in itertools.permutations(rows, k):
        total = sum(weights[r, c] for c, r in enumerate(rsub))
        best = max(best, total)
    return best


def test_assign_single_pair():
    m = assign_tracks([BBox(0, 0, 10, 10)], [BBox(1, 1, 11, 11)], 0.3)
    assert m.pairs == [(0, 0)]
    assert m.unmatched_tracks == [] and m.unmatched_detections == []


def test_assign_below_threshold_all_unmatched():
    m = assign_tracks([BBox(0, 0, 1, 1)], [BBox(50, 50, 51, 51)], 0.3)
    assert m.pairs == []
    assert m.unmatched_tracks == [0] and m.unmatched_detections == [0]


def test_assign_matches_brute_force_3x3():
    rng = np.random.default_rng(0)
    for _ in range(25):
        tracks = [BBox(x, y, x + 4, y + 4) for x, y in rng.uniform(0, 10, (3, 2))]
        dets = [BBox(x, y, x + 4, y + 4) for x, y in rng.uniform(0, 10, (3, 2))]
        weights = np.array([[iou(t, d) for d in dets] for t in tracks])
        m = assign_tracks(tracks, dets, 1e-9)
        got = sum(weights[i, j] for i, j in m.pairs)
        # pairs with IoU below the (tiny) threshold may be dropped after matching
        assert got == pytest.approx(brute_force_max_matching(weights), abs=1e-9)


def test_hungarian_equals_brute_force_random_matrices():
    from scipy.optimize import linear_sum_assignment

    rng = np.random.default_rng(42)
    for n in (4, 5, 6):
        for _ in range(40):
            w = rng.uniform(0, 1, (n, n))
            rows, cols = linear_sum_assignment(-w)
            got = w[rows, cols].sum()
            assert got == pytest.approx(brute_force_max_matching(w), abs=1e-12)


# ---------------------------------------------------------------- tracking

def make_frames(positions_per_person, clip="c0"):
    """positions_per_person: list over frames of list of detection arrays."""
    return [KeypointFrame(clip, t, np.stack(dets) if dets else np.zeros((0, 17, 3)))
            for t, dets in enumerate(positions_per_person)]


def test_single_person_single_track():
    frames = make_frames([[full_det(offset=(t * 1.0, 0.0))] for t in range(60)])
    tracks = build_tracks(frames, fps=30.0)
    assert len(tracks) == 1
    assert len(tracks[0]) == 60
    assert tracks[0].start_frame == 0


def test_two_separated_people_no_swap():
    frames = []
    for t in range(40):
        a = full_det(offset=(t * 0.5, 0.0))
        b = full_det(offset=(500 + t * 0.5, 300.0))
        frames.append(KeypointFrame("c0", t, np.stack([a, b])))
    tracks = build_tracks(frames, fps=30.0)
    assert len(tracks) == 2
    by_id = {tr.track_id: tr for tr in tracks}
    # track 0 stays near x~0..20, track 1 near x~500..520 at every frame
    for t in range(40):
        assert by_id[0].xy[t, :, 0].mean() < 100
        assert by_id[1].xy[t, :, 0].mean() > 400


def test_disappear_beyond_max_missed_splits_track():
    dets = []
    for t in range(30):
        if 10 <= t < 14:
            dets.append([])
        else:
            dets.append([full_det(offset=(t * 0.1, 0.0))])
    tracks = build_tracks(make_frames(dets), TrackerParams(max_missed=2), fps=30.0)
    assert len(tracks) == 2


def test_detection_never_in_two_tracks():
    rng = np.random.default_rng(3)
    frames = []
    for t in range(30):
        dets = [full_det(offset=(100 * p + rng.uniform(-2, 2), 0.0)) for p in range(3)]
        frames.append(KeypointFrame("c0", t, np.stack(dets)))
    tracks = build_tracks(frames, fps=30.0)
    # count matched detections per frame: each frame has 3 detections, and
    # across all tracks every (frame, detection) is used at most once
    used = {}
    for tr in tracks:
        for i, f in enumerate(tr.frames):
            if tr.present[i].any():
                key = (f, round(tr.xy[i, 0, 0] / 100))
                assert key not in used
                used[key] = tr.track_id


# ---------------------------------------------------------------- filtering

def make_track(n_frames, fps=30.0, present=None, start=0):
    xy = np.tile(np.linspace(0, 100, n_frames)[:, None, None], (1, 17, 2))
    conf = np.ones((n_frames, 17))
    if present is None:
        present = np.ones((n_frames, 17), dtype=bool)
    conf[~present] = 0.0
    return PersonTrack(0, "c0", start, xy, conf, present, fps)


def test_filter_drops_short_track():
    # 30 frames at 30 fps spans 29/30 s < 1 s
    assert filter_tracks([make_track(30)]) == []


def test_filter_keeps_exactly_one_second():
    # 31 frames at 30 fps spans exactly 1 s
    assert len(filter_tracks([make_track(31)])) == 1


def test_filter_removes_half_missing_pose():
    present = np.ones((90, 17), dtype=bool)
    present[40, 8:] = False  # 8/17 present -> fraction 0.47 <= 0.5
    out = filter_tracks([make_track(90, present=present)])
    assert len(out) == 1
    assert not out[0].present[40].any()


def test_filter_retains_full_track_unchanged():
    tr = make_track(90)
    out = filter_tracks([tr])
    assert len(out) == 1
    np.testing.assert_array_equal(out[0].xy, tr.xy)
    assert out[0].present.all()


def test_filter_idempotent():
    present = np.ones((90, 17), dtype=bool)
    present[0:3] = False
    present[50, 8:] = False
    once = filter_tracks([make_track(90, present=present)])
    twice = filter_tracks(once)
    assert len(once) == len(twice) == 1
    np.testing.assert_array_equal(once[0].xy, twice[0].xy)
    np.testing.assert_array_equal(once[0].present, twice[0].present)
    assert once[0].start_frame == twice[0].start_frame


# ---------------------------------------------------------------- smoothing

def cv_track(n=60, fps=30.0, v=(3.0, -1.5)):
    t = np.arange(n) / fps
    xy = np.zeros((n, 17, 2))
    for j in range(17):
        xy[:, j, 0] = 10 * j + v[0] * t
        xy[:, j, 1] = 5 * j + v[1] * t
    return PersonTrack(0, "c0", 0, xy, np.ones((n, 17)), np.ones((n, 17), dtype=bool), fps)


def test_smooth_constant_velocity_fixed_point():
    tr = cv_track()
    out = kalman_smooth(tr)
    np.testing.assert_allclose(out.xy, tr.xy, atol=1e-6)
    assert out.present.all()


def test_smooth_fills_single_gap_close_to_linear():
    tr = cv_track()
    tr.present[30, :] = False
    expected = tr.xy[30].copy()  # linear motion: truth == linear interpolation
    tr.xy[30] = 0.0
    out = kalman_smooth(tr)
    assert np.abs(out.xy[30] - expected).max() < 0.5
    assert out.present.all()


def test_smooth_reduces_noise_variance():
    rng = np.random.default_rng(7)
    n, fps = 600, 30.0
    t = np.arange(n) / fps
    # gentle sinusoid: peak acceleration ~ 12 px/s^2, within the default
    # constant-velocity process noise (sigma_accel = 10 px/s^2)
    clean = np.zeros((n, 17, 2))
    for j in range(17):
        clean[:, j, 0] = 100 + 30 * np.sin(2 * np.pi * 0.1 * t)
        clean[:, j, 1] = 50 + 30 * np.cos(2 * np.pi * 0.1 * t)
    noise = rng.normal(0, 2.0, clean.shape)
    tr = PersonTrack(0, "c0", 0, clean + noise, np.ones((n, 17)),
                     np.ones((n, 17), dtype=bool), fps)
    out = kalman_smooth(tr)
    resid = out.xy - clean
    assert resid.var() < noise.var()


def test_smooth_no_absent_joints_even_with_leading_gap():
    tr = cv_track()
    tr.present[:5, 3] = False
    tr.present[55:, 3] = False
    out = kalman_smooth(tr)
    assert out.present.all()
    assert np.isfinite(out.xy).all()


def test_smooth_joint_seen_once_filled_nearest():
    tr = cv_track()
    tr.present[:, 4] = False
    tr.present[20, 4] = True
    out = kalman_smooth(tr)
    assert out.present.all()
    np.testing.assert_allclose(out.xy[:, 4, :], np.tile(tr.xy[20, 4], (60, 1)))


@settings(max_examples=25, deadline=None)
@given(st.integers(2, 40), st.integers(0, 100))
def test_smooth_output_always_present(n_frames, seed):
    rng = np.random.default_rng(seed)
    xy = rng.uniform(0, 100, (n_frames, 17, 2))
    present = rng.uniform(0, 1, (n_frames, 17)) > 0.3
    conf = present.astype(float)
    tr = PersonTrack(0, "c0", 0, xy, conf, present, 30.0)
    out = kalman_smooth(tr)
    assert out.present.all()
    assert np.isfinite(out.xy).all()
