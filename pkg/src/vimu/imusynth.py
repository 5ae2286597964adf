"""Virtual IMU synthesis from world-frame joint motion.

Joint orientations come from forward kinematics rooted at the hip (body
center): each bone's rotation is the minimal rotation aligning its rest-pose
direction, as propagated by the parent frame, to the observed bone
direction. Sensor streams are the specific force (acceleration minus
gravity), body-frame angular velocity from orientation changes, and a
normalized constant magnetic field, all expressed in the sensor frame, with
an optional MEMS-style noise model (white noise, bias random walk,
quantization).
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace

import numpy as np

from .egomotion import MotionTrack3D
from .geometry import rotation_between, so3_exp, so3_log

GRAVITY = 9.81
# mid-latitude magnetic field direction (unit vector, 60 degree dip), world Z up
DEFAULT_MAG_FIELD = np.array([np.cos(np.deg2rad(60.0)), 0.0, -np.sin(np.deg2rad(60.0))])

ROOT = -1  # parent index of joints attached to the virtual hip-center root


@dataclass
class Skeleton:
    """Joint tree rooted at the hip (body center).

    parents[j] == ROOT attaches joint j directly to the virtual hip-center
    root, whose position is the midpoint of the two hip joints and whose
    orientation is the pelvis body frame. rest_positions are the rest-pose
    joint locations with the hip center at the origin, lateral axis +X,
    up +Z.
    """

    joint_names: list[str]
    parents: np.ndarray        # (N,) int
    rest_positions: np.ndarray  # (N, 3) meters

    def __post_init__(self):
        self.parents = np.asarray(self.parents, dtype=int)
        self.rest_positions = np.asarray(self.rest_positions, dtype=float)
        n = len(self.joint_names)
        if self.parents.shape != (n,) or self.rest_positions.shape != (n, 3):
            raise ValueError("skeleton field shapes do not match joint count")
        order = []
        seen = set()
        # children after parents; ROOT-attached joints first
        remaining = list(range(n))
        while remaining:
            progress = False
            for j in list(remaining):
                p = self.parents[j]
                if p == ROOT or p in seen:
                    order.append(j)
                    seen.add(j)
                    remaining.remove(j)
                    progress = True
            if not progress:
                raise ValueError("parent graph is not a tree rooted at the hip")
        self._topo_order = order

    @property
    def n_joints(self) -> int:
        return len(self.joint_names)

    def index(self, name: str) -> int:
        return self.joint_names.index(name)

    def topological_order(self) -> list[int]:
        return list(self._topo_order)


def coco17_skeleton() -> Skeleton:
    """Default 17-joint COCO-style skeleton; rest pose standing, ~1.7 m tall."""
    names = [
        "nose", "left_eye", "right_eye", "left_ear", "right_ear",
        "left_shoulder", "right_shoulder", "left_elbow", "right_elbow",
        "left_wrist", "right_wrist", "left_hip", "right_hip",
        "left_knee", "right_knee", "left_ankle", "right_ankle",
    ]
    idx = {n: i for i, n in enumerate(names)}
    parents = np.full(17, ROOT, dtype=int)
    parents[idx["left_eye"]] = idx["nose"]
    parents[idx["right_eye"]] = idx["nose"]
    parents[idx["left_ear"]] = idx["left_eye"]
    parents[idx["right_ear"]] = idx["right_eye"]
    parents[idx["left_elbow"]] = idx["left_shoulder"]
    parents[idx["right_elbow"]] = idx["right_shoulder"]
    parents[idx["left_wrist"]] = idx["left_elbow"]
    parents[idx["right_wrist"]] = idx["right_elbow"]
    parents[idx["left_knee"]] = idx["left_hip"]
    parents[idx["right_knee"]] = idx["right_hip"]
    parents[idx["left_ankle"]] = idx["left_knee"]
    parents[idx["right_ankle"]] = idx["right_knee"]
    # nose, shoulders, hips attach to the hip-center root

    rest = np.zeros((17, 3))
    rest[idx["left_hip"]] = [-0.10, 0.0, 0.0]
    rest[idx["right_hip"]] = [0.10, 0.0, 0.0]
    rest[idx["left_knee"]] = [-0.11, 0.0, -0.45]
    rest[idx["right_knee"]] = [0.11, 0.0, -0.45]
    rest[idx["left_ankle"]] = [-0.12, 0.0, -0.89]
    rest[idx["right_ankle"]] = [0.12, 0.0, -0.89]
    rest[idx["left_shoulder"]] = [-0.18, 0.0, 0.52]
    rest[idx["right_shoulder"]] = [0.18, 0.0, 0.52]
    rest[idx["left_elbow"]] = [-0.21, 0.0, 0.22]
    rest[idx["right_elbow"]] = [0.21, 0.0, 0.22]
    rest[idx["left_wrist"]] = [-0.21, 0.0, -0.05]   # forearm hangs vertical
    rest[idx["right_wrist"]] = [0.21, 0.0, -0.05]
    rest[idx["nose"]] = [0.0, 0.08, 0.70]
    rest[idx["left_eye"]] = [-0.04, 0.10, 0.74]
    rest[idx["right_eye"]] = [0.04, 0.10, 0.74]
    rest[idx["left_ear"]] = [-0.08, 0.04, 0.73]
    rest[idx["right_ear"]] = [0.08, 0.04, 0.73]
    return Skeleton(names, parents, rest)


# placement name -> attachment joint of the default skeleton; ROOT marks the
# virtual hip center. Sided placements resolve "{side}_{joint}".
PLACEMENT_JOINTS = {
    "head": "nose",
    "wrist": "{side}_wrist",
    "forearm": "{side}_wrist",
    "upper_arm": "{side}_elbow",
    "thigh": "{side}_knee",
    "shin": "{side}_ankle",
    "ankle": "{side}_ankle",
    "foot": "{side}_ankle",
    "hip": "{side}_hip",
    "waist_chest": None,
    "back": None,
}


@dataclass
class SensorPlacement:
    name: str
    joint_index: int  # ROOT for the virtual hip center
    mounting_rotation: np.ndarray = field(default_factory=lambda: np.eye(3))


def make_placement(name: str, skeleton: Skeleton | None = None,
                   mounting_rotation: np.ndarray | None = None) -> SensorPlacement:
    """Standard placement from a name like 'wrist_left' or 'waist_chest'."""
    skeleton = skeleton or coco17_skeleton()
    base, side = name, None
    for suffix in ("_left", "_right"):
        if name.endswith(suffix):
            base, side = name[: -len(suffix)], suffix[1:]
    if base not in PLACEMENT_JOINTS:
        raise ValueError(f"unknown placement {name!r}")
    joint = PLACEMENT_JOINTS[base]
    if joint is None:
        jidx = ROOT
    else:
        if "{side}" in joint:
            if side is None:
                raise ValueError(f"placement {base!r} needs a _left/_right side")
            joint = joint.format(side=side)
        jidx = skeleton.index(joint)
    mount = np.eye(3) if mounting_rotation is None else np.asarray(mounting_rotation, dtype=float)
    return SensorPlacement(name=name, joint_index=jidx, mounting_rotation=mount)


@dataclass
class IMUStream:
    """Tri-axial accel/gyro/mag samples at a fixed rate for one placement."""

    rate: float
    accel: np.ndarray  # (T, 3) m/s^2, sensor frame
    gyro: np.ndarray   # (T, 3) rad/s, sensor frame
    mag: np.ndarray    # (T, 3) unit-normalized, sensor frame
    placement: str
    label: str = ""
    subject: str = ""
    origin: str = "virtual"

    def __post_init__(self):
        if not (self.accel.shape == self.gyro.shape == self.mag.shape):
            raise ValueError("channel shapes differ")
        if self.rate <= 0:
            raise ValueError("rate must be positive")

    def __len__(self) -> int:
        return self.accel.shape[0]

    @property
    def duration_s(self) -> float:
        return (len(self) - 1) / self.rate

    def samples(self) -> np.ndarray:
        """(T, 9) matrix: accel xyz, gyro xyz, mag xyz."""
        return np.hstack([self.accel, self.gyro, self.mag])


@dataclass
class NoiseParams:
    accel_white: float = 0.05    # m/s^2
    gyro_white: float = 0.005    # rad/s
    bias_walk: float = 0.001     # per channel per sqrt(s)
    quantization_bits: int = 16  # 0 disables quantization
    accel_range: float = 8.0 * GRAVITY         # +/- m/s^2
    gyro_range: float = np.deg2rad(2000.0)     # +/- rad/s

    @staticmethod
    def disabled() -> "NoiseParams":
        return NoiseParams(accel_white=0.0, gyro_white=0.0, bias_walk=0.0,
                           quantization_bits=0)


def pelvis_frames(joints: np.ndarray, skeleton: Skeleton) -> tuple[np.ndarray, np.ndarray]:
    """Hip-center positions (T, 3) and pelvis body frames (T, 3, 3).

    Lateral axis: left hip -> right hip; up axis: spine direction (shoulder
    center above hip center), orthogonalized.
    """
    lh = joints[:, skeleton.index("left_hip")]
    rh = joints[:, skeleton.index("right_hip")]
    ls = joints[:, skeleton.index("left_shoulder")]
    rs = joints[:, skeleton.index("right_shoulder")]
    center = (lh + rh) / 2.0
    x = rh - lh
    xn = np.linalg.norm(x, axis=1, keepdims=True)
    x = np.where(xn > 1e-9, x / np.clip(xn, 1e-9, None), [1.0, 0.0, 0.0])
    spine = (ls + rs) / 2.0 - center
    z = spine - np.einsum("ti,ti->t", spine, x)[:, None] * x
    zn = np.linalg.norm(z, axis=1, keepdims=True)
    z = np.where(zn > 1e-9, z / np.clip(zn, 1e-9, None), [0.0, 0.0, 1.0])
    y = np.cross(z, x)
    frames = np.stack([x, y, z], axis=-1)  # columns are the axes
    return center, frames


def align_world_up(track: MotionTrack3D, skeleton: Skeleton | None = None) -> MotionTrack3D:
    """Rotate a motion track so the subject's mean torso axis becomes +Z.

    Composed motion lives in the frame of the first camera, whose axes are
    not gravity-aligned. Standing/locomotion activities keep the torso close
    to vertical on average, so the mean hip-to-shoulder direction estimates
    the up direction; gravity and the magnetic field are then meaningful in
    the rotated frame. (Estimate degrades for lying-down activities.)
    """
    skeleton = skeleton or coco17_skeleton()
    joints = track.joints_world
    lh = joints[:, skeleton.index("left_hip")]
    rh = joints[:, skeleton.index("right_hip")]
    ls = joints[:, skeleton.index("left_shoulder")]
    rs = joints[:, skeleton.index("right_shoulder")]
    spine = ((ls + rs) / 2.0 - (lh + rh) / 2.0).mean(axis=0)
    n = np.linalg.norm(spine)
    if n < 1e-9:
        return track
    Q = rotation_between(spine / n, np.array([0.0, 0.0, 1.0]))
    return replace(track, joints_world=joints @ Q.T, joint_orientations=None)


def forward_kinematics(track: MotionTrack3D, skeleton: Skeleton | None = None) -> np.ndarray:
    """Per-frame per-joint world orientations (T, N, 3, 3).

    Chains minimal bone rotations outward from the hip: a bone's orientation
    is the minimal rotation taking its parent-frame rest direction to the
    observed direction, composed with the parent orientation (twist-free
    swing decomposition). Zero-length observed bones reuse the previous
    frame's rotation.
    """
    skeleton = skeleton or coco17_skeleton()
    joints = track.joints_world
    T, N = joints.shape[:2]
    if N != skeleton.n_joints:
        raise ValueError("track joint count does not match skeleton")
    root_pos, root_R = pelvis_frames(joints, skeleton)
    rest = skeleton.rest_positions
    out = np.zeros((T, N, 3, 3))
    prev_A = {j: None for j in range(N)}
    for t in range(T):
        for j in skeleton.topological_order():
            p = skeleton.parents[j]
            if p == ROOT:
                parent_R = root_R[t]
                parent_pos = root_pos[t]
                d_rest = rest[j]  # rest offset from hip center
            else:
                parent_R = out[t, p]
                parent_pos = joints[t, p]
                d_rest = rest[j] - rest[p]
            b_obs = joints[t, j] - parent_pos
            rest_norm = np.linalg.norm(d_rest)
            if rest_norm < 1e-9:
                out[t, j] = parent_R
                continue
            predicted = parent_R @ (d_rest / rest_norm)
            if np.linalg.norm(b_obs) < 1e-9:
                A = prev_A[j] if prev_A[j] is not None else np.eye(3)
            else:
                A = rotation_between(predicted, b_obs)
                prev_A[j] = A
            out[t, j] = A @ parent_R
    return out


def world_kinematics(track: MotionTrack3D, placement: SensorPlacement,
                     skeleton: Skeleton | None = None) -> tuple[np.ndarray, np.ndarray]:
    """Sensor world positions (T, 3) and orientations (T, 3, 3) at a placement."""
    skeleton = skeleton or coco17_skeleton()
    if track.joint_orientations is None:
        track = replace(track, joint_orientations=forward_kinematics(track, skeleton))
    if placement.joint_index == ROOT:
        pos, R = pelvis_frames(track.joints_world, skeleton)
    else:
        if not (0 <= placement.joint_index < skeleton.n_joints):
            raise ValueError("placement joint index out of range")
        pos = track.joints_world[:, placement.joint_index]
        R = track.joint_orientations[:, placement.joint_index]
    return pos, R @ placement.mounting_rotation


def _second_derivative(p: np.ndarray, fps: float) -> np.ndarray:
    """Finite-difference acceleration; 4th-order interior, one-sided endpoints."""
    T = p.shape[0]
    a = np.zeros_like(p)
    if T >= 6:
        a[2:-2] = (-p[4:] + 16 * p[3:-1] - 30 * p[2:-2] + 16 * p[1:-3] - p[:-4]) / 12.0 * fps**2
        a[1] = (p[2] - 2 * p[1] + p[0]) * fps**2
        a[-2] = (p[-1] - 2 * p[-2] + p[-3]) * fps**2
        a[0] = (2 * p[0] - 5 * p[1] + 4 * p[2] - p[3]) * fps**2
        a[-1] = (2 * p[-1] - 5 * p[-2] + 4 * p[-3] - p[-4]) * fps**2
    else:
        a[1:-1] = (p[2:] - 2 * p[1:-1] + p[:-2]) * fps**2
        a[0] = a[1]
        a[-1] = a[-2]
    return a


def accel_signal(positions: np.ndarray, orientations: np.ndarray, fps: float,
                 gravity_on: bool = True) -> np.ndarray:
    """Specific force in the sensor frame from world positions.

    World acceleration is estimated with central differences; the specific
    force subtracts gravity g = (0, 0, -9.81) when gravity_on, and is rotated
    into the sensor frame.
    """
    positions = np.asarray(positions, dtype=float)
    if positions.shape[0] < 3:
        raise ValueError("need at least 3 samples to differentiate")
    a = _second_derivative(positions, fps)
    if gravity_on:
        a = a - np.array([0.0, 0.0, -GRAVITY])
    return np.einsum("tji,tj->ti", orientations, a)


def gyro_signal(orientations: np.ndarray, fps: float) -> np.ndarray:
    """Body-frame angular velocity from the orientation sequence.

    omega_t = log(R_t^T R_{t+1}) * fps; the last sample copies its neighbor.
    A relative rotation at (or numerically at) 180 degrees is ambiguous and
    raises.
    """
    R = np.asarray(orientations, dtype=float)
    T = R.shape[0]
    if T < 2:
        raise ValueError("need at least 2 orientation samples")
    out = np.zeros((T, 3))
    for t in range(T - 1):
        rel = R[t].T @ R[t + 1]
        w = so3_log(rel)
        ang = np.linalg.norm(w)
        if ang > np.pi - 1e-6:
            raise ValueError(f"180-degree relative rotation at sample {t}: "
                             "angular velocity sign is ambiguous")
        out[t] = w * fps
    out[T - 1] = out[T - 2]
    return out


def mag_signal(orientations: np.ndarray, field_vec: np.ndarray | None = None) -> np.ndarray:
    """Constant world magnetic field rotated into the sensor frame, normalized."""
    f = DEFAULT_MAG_FIELD if field_vec is None else np.asarray(field_vec, dtype=float)
    n = np.linalg.norm(f)
    if n < 1e-12:
        raise ValueError("magnetic field must be non-zero")
    f = f / n
    R = np.asarray(orientations, dtype=float)
    m = np.einsum("tji,j->ti", R, f)
    return m / np.linalg.norm(m, axis=1, keepdims=True)


def sensor_noise(stream: IMUStream, seed: int, params: NoiseParams | None = None) -> IMUStream:
    """MEMS-style corruption of accel/gyro: white noise + bias walk + quantization.

    Deterministic given the seed; all-zero parameters return the stream
    unchanged.
    """
    params = params or NoiseParams()
    rng = np.random.default_rng(seed)
    T = len(stream)
    dt = 1.0 / stream.rate

    def corrupt(x, white, rng_range):
        y = x.copy()
        if white > 0:
            y = y + rng.normal(0.0, white, (T, 3))
        if params.bias_walk > 0:
            y = y + np.cumsum(rng.normal(0.0, params.bias_walk * np.sqrt(dt), (T, 3)), axis=0)
        if params.quantization_bits > 0:
            step = 2.0 * rng_range / (2 ** params.quantization_bits)
            y = np.clip(np.round(y / step) * step, -rng_range, rng_range)
        return y

    return IMUStream(
        rate=stream.rate,
        accel=corrupt(stream.accel, params.accel_white, params.accel_range),
        gyro=corrupt(stream.gyro, params.gyro_white, params.gyro_range),
        mag=stream.mag.copy(),
        placement=stream.placement,
        label=stream.label,
        subject=stream.subject,
        origin=stream.origin,
    )


def resample(stream: IMUStream, target_rate: float) -> IMUStream:
    """Linear interpolation onto a uniform grid at target_rate."""
    if target_rate <= 0:
        raise ValueError("target_rate must be positive")
    if target_rate == stream.rate:
        return stream
    T = len(stream)
    t_src = np.arange(T) / stream.rate
    duration = t_src[-1]
    n_new = int(np.floor(duration * target_rate + 1e-9)) + 1
    t_new = np.arange(n_new) / target_rate

    def interp(x):
        return np.stack([np.interp(t_new, t_src, x[:, c]) for c in range(3)], axis=1)

    mag = interp(stream.mag)
    mag = mag / np.linalg.norm(mag, axis=1, keepdims=True)
    return IMUStream(rate=target_rate, accel=interp(stream.accel),
                     gyro=interp(stream.gyro), mag=mag,
                     placement=stream.placement, label=stream.label,
                     subject=stream.subject, origin=stream.origin)


def integrate_gyro(R0: np.ndarray, gyro: np.ndarray, fps: float) -> np.ndarray:
    """Reconstruct orientations by composing gyro increments (test oracle)."""
    T = gyro.shape[0]
    out = np.zeros((T, 3, 3))
    out[0] = R0
    for t in range(T - 1):
        out[t + 1] = out[t] @ so3_exp(gyro[t] / fps)
    return out


def synthesize_stream(track: MotionTrack3D, placement: SensorPlacement,
                      skeleton: Skeleton | None = None, gravity_on: bool = True,
                      mag_field: np.ndarray | None = None) -> IMUStream:
    """Noise-free IMU stream at a placement from a world-frame motion track."""
    pos, R = world_kinematics(track, placement, skeleton)
    return IMUStream(
        rate=track.fps,
        accel=accel_signal(pos, R, track.fps, gravity_on=gravity_on),
        gyro=gyro_signal(R, track.fps),
        mag=mag_signal(R, mag_field),
        placement=placement.name,
        label=track.label,
        subject=track.subject,
        origin="virtual",
    )
