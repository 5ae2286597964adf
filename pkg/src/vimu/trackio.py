"""2D keypoint ingestion, person tracking, track filtering and smoothing.

Per-frame multi-person keypoint detections are associated into per-person
tracks by maximum-weight bipartite matching on bounding-box IoU, unreliable
poses and short tracks are dropped, and the surviving tracks are gap-filled
and smoothed with a per-coordinate constant-velocity Kalman filter plus an
RTS backward pass.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from typing import Iterable, Sequence

import numpy as np
from scipy.optimize import linear_sum_assignment

DEFAULT_N_JOINTS = 17

# keypoints below this confidence are treated as absent
CONF_ABSENT = 0.1
# confidence assigned to keypoints filled in by the smoother
CONF_SMOOTHED = 0.3
# confidence assigned to joints that had fewer than two measurements
CONF_FALLBACK = 0.15

COCO_JOINT_NAMES = [
    "nose", "left_eye", "right_eye", "left_ear", "right_ear",
    "left_shoulder", "right_shoulder", "left_elbow", "right_elbow",
    "left_wrist", "right_wrist", "left_hip", "right_hip",
    "left_knee", "right_knee", "left_ankle", "right_ankle",
]


class KeypointParseError(ValueError):
    """Malformed keypoint input; message names the offending line."""


@dataclass
class KeypointFrame:
    """All detections of one video frame.

    detections has shape (P, N, 3) with columns x, y, confidence; an absent
    joint is encoded as confidence 0 (the [0, 0, 0] file sentinel).
    """

    clip_id: str
    frame_index: int
    detections: np.ndarray


@dataclass(frozen=True)
class BBox:
    x_min: float
    y_min: float
    x_max: float
    y_max: float

    def __post_init__(self):
        if self.x_min > self.x_max or self.y_min > self.y_max:
            raise ValueError("inverted bbox")

    @property
    def area(self) -> float:
        return (self.x_max - self.x_min) * (self.y_max - self.y_min)

    def expand(self, margin: float) -> "BBox":
        return BBox(self.x_min - margin, self.y_min - margin,
                    self.x_max + margin, self.y_max + margin)


@dataclass
class PersonTrack:
    """Per-person keypoint time series over a contiguous frame range."""

    track_id: int
    clip_id: str
    start_frame: int
    xy: np.ndarray          # (F, N, 2)
    confidence: np.ndarray  # (F, N)
    present: np.ndarray     # (F, N) bool
    fps: float

    def __len__(self) -> int:
        return self.xy.shape[0]

    @property
    def n_joints(self) -> int:
        return self.xy.shape[1]

    @property
    def frames(self) -> range:
        return range(self.start_frame, self.start_frame + len(self))

    def bbox_at(self, i: int) -> BBox | None:
        mask = self.present[i]
        if not mask.any():
            return None
        pts = self.xy[i][mask]
        return BBox(pts[:, 0].min(), pts[:, 1].min(), pts[:, 0].max(), pts[:, 1].max())


@dataclass
class Matching:
    pairs: list[tuple[int, int]]
    unmatched_tracks: list[int]
    unmatched_detections: list[int]


@dataclass
class TrackerParams:
    iou_threshold: float = 0.3
    max_missed: int = 1
    conf_absent: float = CONF_ABSENT


@dataclass
class FilterParams:
    min_duration_s: float = 1.0
    min_joint_fraction: float = 0.5


@dataclass
class KalmanParams:
    sigma_accel: float = 10.0  # px/s^2 process noise
    sigma_meas: float = 2.0    # px measurement noise


def load_keypoint_stream(path, n_joints: int = DEFAULT_N_JOINTS) -> list[KeypointFrame]:
    """Load keypoint JSONL; one object per line, see the pipeline format docs.

    Frames come back sorted by (clip, frame_index). Malformed lines raise
    KeypointParseError naming the 1-based line number.
    """
    frames = []
    with open(path, "r", encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            line = line.strip()
            if not line:
                continue
            try:
                obj = json.loads(line)
            except json.JSONDecodeError as exc:
                raise KeypointParseError(f"line {lineno}: invalid JSON ({exc})") from exc
            try:
                clip = str(obj["clip"])
                frame_index = int(obj["frame"])
                people = obj["people"]
            except (KeyError, TypeError, ValueError) as exc:
                raise KeypointParseError(f"line {lineno}: missing or invalid field ({exc})") from exc
            if frame_index < 0:
                raise KeypointParseError(f"line {lineno}: negative frame index")
            dets = np.zeros((len(people), n_joints, 3), dtype=float)
            for p, person in enumerate(people):
                joints = person.get("joints")
                if joints is None or len(joints) != n_joints:
                    raise KeypointParseError(
                        f"line {lineno}: person {p} has {0 if joints is None else len(joints)} "
                        f"joints, expected {n_joints}")
                arr = np.asarray(joints, dtype=float)
                if arr.shape != (n_joints, 3):
                    raise KeypointParseError(f"line {lineno}: person {p} joints are not [x,y,conf] triples")
                if not np.all(np.isfinite(arr)):
                    raise KeypointParseError(f"line {lineno}: person {p} has non-finite coordinates")
                dets[p] = arr
            frames.append(KeypointFrame(clip_id=clip, frame_index=frame_index, detections=dets))
    frames.sort(key=lambda f: (f.clip_id, f.frame_index))
    for a, b in zip(frames, frames[1:]):
        if a.clip_id == b.clip_id and a.frame_index == b.frame_index:
            raise KeypointParseError(f"duplicate frame {b.frame_index} in clip {b.clip_id!r}")
    return frames


def detection_present(detection: np.ndarray, conf_absent: float = CONF_ABSENT) -> np.ndarray:
    """Presence mask of an (N, 3) detection; low confidence counts as absent."""
    return detection[:, 2] >= conf_absent


def keypoint_bbox(detection: np.ndarray, conf_absent: float = CONF_ABSENT) -> BBox:
    """Tight box over the present joints of an (N, 3) detection."""
    mask = detection_present(detection, conf_absent)
    if not mask.any():
        raise ValueError("no present joints, bbox undefined")
    pts = detection[mask, :2]
    return BBox(pts[:, 0].min(), pts[:, 1].min(), pts[:, 0].max(), pts[:, 1].max())


def iou(a: BBox, b: BBox) -> float:
    """Intersection-over-union of two boxes; identical zero-area boxes give 0."""
    ix = min(a.x_max, b.x_max) - max(a.x_min, b.x_min)
    iy = min(a.y_max, b.y_max) - max(a.y_min, b.y_min)
    if ix <= 0 or iy <= 0:
        return 0.0
    inter = ix * iy
    union = a.area + b.area - inter
    if union <= 0:
        return 0.0
    return inter / union


def assign_tracks(prev_tracks: Sequence[BBox], detections: Sequence[BBox],
                  iou_threshold: float) -> Matching:
    """Match track boxes to detection boxes, maximizing total IoU.

    The maximum-weight assignment is computed first (Hungarian algorithm);
    pairs whose IoU falls below the threshold are then dropped from it.
    """
    if not (0.0 < iou_threshold < 1.0):
        raise ValueError("iou_threshold must be in (0, 1)")
    nt, nd = len(prev_tracks), len(detections)
    if nt == 0 or nd == 0:
        return Matching([], list(range(nt)), list(range(nd)))
    weights = np.zeros((nt, nd))
    for i, tb in enumerate(prev_tracks):
        for j, db in enumerate(detections):
            weights[i, j] = iou(tb, db)
    rows, cols = linear_sum_assignment(-weights)
    pairs = [(int(i), int(j)) for i, j in zip(rows, cols) if weights[i, j] >= iou_threshold]
    matched_t = {i for i, _ in pairs}
    matched_d = {j for _, j in pairs}
    return Matching(
        pairs=pairs,
        unmatched_tracks=[i for i in range(nt) if i not in matched_t],
        unmatched_detections=[j for j in range(nd) if j not in matched_d],
    )


class _ActiveTrack:
    __slots__ = ("track_id", "start_frame", "rows", "bbox", "missed", "last_matched")

    def __init__(self, track_id: int, start_frame: int, row: np.ndarray, bbox: BBox):
        self.track_id = track_id
        self.start_frame = start_frame
        self.rows: list[np.ndarray] = [row]
        self.bbox = bbox
        self.missed = 0
        self.last_matched = start_frame


def build_tracks(frames: Sequence[KeypointFrame], params: TrackerParams | None = None,
                 fps: float = 30.0) -> list[PersonTrack]:
    """Associate per-frame detections into tracks (SORT-style, IoU matching).

    A track terminates after `max_missed` consecutive unmatched frames; new
    tracks open for unmatched detections. Each detection joins at most one
    track per frame.
    """
    params = params or TrackerParams()
    active: list[_ActiveTrack] = []
    finished: list[PersonTrack] = []
    next_id = 0
    prev_index: int | None = None

    def close(tr: _ActiveTrack):
        n = tr.last_matched - tr.start_frame + 1
        rows = np.stack(tr.rows[:n])
        finished.append(_track_from_rows(tr.track_id, clip_id, tr.start_frame, rows,
                                         fps, params.conf_absent))

    clip_id = frames[0].clip_id if frames else ""
    for frame in frames:
        if frame.clip_id != clip_id:
            raise ValueError("build_tracks expects frames from a single clip")
        step = 1 if prev_index is None else frame.frame_index - prev_index
        if step <= 0 and prev_index is not None:
            raise ValueError("frames must be sorted by strictly increasing frame_index")
        prev_index = frame.frame_index

        # account for skipped frame indices as misses
        for _ in range(max(step - 1, 0)):
            survivors = []
            for tr in active:
                tr.missed += 1
                tr.rows.append(np.zeros_like(tr.rows[0]))
                if tr.missed >= params.max_missed:
                    close(tr)
                else:
                    survivors.append(tr)
            active = survivors

        dets = frame.detections
        det_boxes, det_idx = [], []
        for j in range(dets.shape[0]):
            if detection_present(dets[j], params.conf_absent).any():
                det_boxes.append(keypoint_bbox(dets[j], params.conf_absent))
                det_idx.append(j)

        match = assign_tracks([tr.bbox for tr in active], det_boxes, params.iou_threshold)

        for ti, dj in match.pairs:
            tr = active[ti]
            tr.rows.append(dets[det_idx[dj]].copy())
            tr.bbox = det_boxes[dj]
            tr.missed = 0
            tr.last_matched = frame.frame_index
        for ti in match.unmatched_tracks:
            tr = active[ti]
            tr.missed += 1
            tr.rows.append(np.zeros((dets.shape[1] if dets.size else DEFAULT_N_JOINTS, 3)))
        survivors = []
        for tr in active:
            if tr.missed >= params.max_missed:
                close(tr)
            else:
                survivors.append(tr)
        active = survivors
        for dj in match.unmatched_detections:
            active.append(_ActiveTrack(next_id, frame.frame_index,
                                       dets[det_idx[dj]].copy(), det_boxes[dj]))
            next_id += 1

    for tr in active:
        close(tr)
    finished.sort(key=lambda t: t.track_id)
    return finished


def _track_from_rows(track_id: int, clip_id: str, start_frame: int, rows: np.ndarray,
                     fps: float, conf_absent: float) -> PersonTrack:
    conf = rows[:, :, 2]
    return PersonTrack(
        track_id=track_id,
        clip_id=clip_id,
        start_frame=start_frame,
        xy=rows[:, :, :2].copy(),
        confidence=conf.copy(),
        present=conf >= conf_absent,
        fps=fps,
    )


def filter_tracks(tracks: Iterable[PersonTrack], params: FilterParams | None = None) -> list[PersonTrack]:
    """Drop unreliable poses and short tracks.

    A pose whose present-joint fraction is <= min_joint_fraction is removed
    (all joints marked absent); tracks spanning less than min_duration_s
    seconds after trimming are dropped. A span of exactly min_duration_s
    (frame count - 1 == min_duration_s * fps) is retained. Idempotent.
    """
    params = params or FilterParams()
    kept = []
    for track in tracks:
        present = track.present.copy()
        frac = present.mean(axis=1)
        bad = frac <= params.min_joint_fraction
        present[bad] = False
        good_frames = np.nonzero(present.any(axis=1))[0]
        if good_frames.size == 0:
            continue
        lo, hi = int(good_frames[0]), int(good_frames[-1])
        span_frames = hi - lo  # duration spanned, in frame periods
        if span_frames < params.min_duration_s * track.fps - 1e-9:
            continue
        conf = track.confidence.copy()
        conf[~present] = 0.0
        kept.append(PersonTrack(
            track_id=track.track_id,
            clip_id=track.clip_id,
            start_frame=track.start_frame + lo,
            xy=track.xy[lo:hi + 1].copy(),
            confidence=conf[lo:hi + 1],
            present=present[lo:hi + 1],
            fps=track.fps,
        ))
    return kept


def kalman_smooth(track: PersonTrack, params: KalmanParams | None = None) -> PersonTrack:
    """Interpolate and smooth keypoints with a constant-velocity Kalman filter.

    Runs a forward filtering pass plus an RTS backward pass independently per
    joint coordinate. Present keypoints act as measurements, absent ones as
    missing observations; the output has every joint present over the whole
    frame range. Joints measured fewer than twice are filled with the nearest
    present value and tagged with a low confidence.
    """
    params = params or KalmanParams()
    F, N = track.xy.shape[:2]
    if F < 2:
        raise ValueError("kalman_smooth needs a track with at least 2 frames")
    dt = 1.0 / track.fps
    A = np.array([[1.0, dt], [0.0, 1.0]])
    q = params.sigma_accel**2
    Q = q * np.array([[dt**4 / 4.0, dt**3 / 2.0], [dt**3 / 2.0, dt**2]])
    Rm = params.sigma_meas**2
    H = np.array([1.0, 0.0])

    xy = track.xy.copy()
    conf = track.confidence.copy()
    for j in range(N):
        meas_idx = np.nonzero(track.present[:, j])[0]
        if meas_idx.size < 2:
            _fill_nearest(xy, conf, track, j, meas_idx)
            continue
        for c in range(2):
            z = track.xy[:, j, c]
            sm = _smooth_1d(z, track.present[:, j], meas_idx, A, Q, Rm, H, dt)
            xy[:, j, c] = sm
        filled = ~track.present[:, j]
        conf[filled, j] = CONF_SMOOTHED

    return PersonTrack(
        track_id=track.track_id,
        clip_id=track.clip_id,
        start_frame=track.start_frame,
        xy=xy,
        confidence=conf,
        present=np.ones((F, N), dtype=bool),
        fps=track.fps,
    )


def _fill_nearest(xy: np.ndarray, conf: np.ndarray, track: PersonTrack, j: int,
                  meas_idx: np.ndarray):
    F = xy.shape[0]
    if meas_idx.size == 1:
        xy[:, j, :] = track.xy[meas_idx[0], j]
    else:
        # joint never observed: fall back to the per-frame centroid of present joints
        for t in range(F):
            mask = track.present[t]
            xy[t, j] = track.xy[t][mask].mean(axis=0) if mask.any() else 0.0
    conf[:, j] = CONF_FALLBACK


def _smooth_1d(z: np.ndarray, present: np.ndarray, meas_idx: np.ndarray,
               A: np.ndarray, Q: np.ndarray, Rm: float, H: np.ndarray, dt: float) -> np.ndarray:
    """Kalman filter + RTS smoother for one coordinate; returns positions."""
    F = z.shape[0]
    t0, t1 = int(meas_idx[0]), int(meas_idx[1])
    v0 = (z[t1] - z[t0]) / ((t1 - t0) * dt)
    n = F - t0

    xf = np.zeros((n, 2))
    Pf = np.zeros((n, 2, 2))
    xp = np.zeros((n, 2))
    Pp = np.zeros((n, 2, 2))

    x = np.array([z[t0], v0])
    P = np.diag([Rm, 2.0 * Rm / ((t1 - t0) * dt) ** 2 + q_vel_floor(Q)])
    xp[0], Pp[0] = x, P
    if present[t0]:
        x, P = _kf_update(x, P, z[t0], H, Rm)
    xf[0], Pf[0] = x, P

    for k in range(1, n):
        x = A @ x
        P = A @ P @ A.T + Q
        xp[k], Pp[k] = x, P
        t = t0 + k
        if present[t]:
            x, P = _kf_update(x, P, z[t], H, Rm)
        xf[k], Pf[k] = x, P

    xs = xf.copy()
    Ps = Pf.copy()
    for k in range(n - 2, -1, -1):
        C = Pf[k] @ A.T @ np.linalg.inv(Pp[k + 1])
        xs[k] = xf[k] + C @ (xs[k + 1] - xp[k + 1])
        Ps[k] = Pf[k] + C @ (Ps[k + 1] - Pp[k + 1]) @ C.T

    out = np.empty(F)
    out[t0:] = xs[:, 0]
    # frames before the first measurement: constant-velocity extrapolation
    for t in range(t0 - 1, -1, -1):
        out[t] = xs[0, 0] - xs[0, 1] * (t0 - t) * dt
    return out


def q_vel_floor(Q: np.ndarray) -> float:
    return Q[1, 1]


def _kf_update(x: np.ndarray, P: np.ndarray, z: float, H: np.ndarray, Rm: float):
    S = H @ P @ H + Rm
    K = P @ H / S
    x = x + K * (z - H @ x)
    P = P - np.outer(K, H @ P)
    return x, P
