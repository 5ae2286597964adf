"""Synthetic scene generator standing in for the deep-vision models.

Emits everything the pipeline ingests for a clip: 2D keypoints, per-frame
intrinsics, person-centered 3D poses, depth/color frame pairs for a simple
textured room, plus ground truth (world motion, camera trajectory, analytic
accelerations) and "real" IMU streams synthesized directly from the
ground-truth motion. All joint motion is a sum of sinusoids, so positions
and accelerations are available in closed form and every artifact is exact
up to the configured noise. Deterministic given the seed.
"""

from __future__ import annotations

import io
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import fileio
from .calib3d import CameraIntrinsics, _project_unchecked
from .imusynth import (
    IMUStream,
    NoiseParams,
    coco17_skeleton,
    make_placement,
    sensor_noise,
    synthesize_stream,
)
from .egomotion import MotionTrack3D

SCENARIOS = ("still", "walk", "run", "jump", "arm_wave")
CAMERA_MODES = ("static", "pan", "follow")

DEFAULT_PLACEMENTS = ("wrist_left", "ankle_right", "waist_chest")


@dataclass
class GeneratorNoise:
    keypoint_px: float = 0.0       # Gaussian pixel noise on 2D keypoints
    keypoint_dropout: float = 0.0  # probability a joint is reported absent
    intrinsics_jitter: float = 0.0  # relative jitter on per-frame intrinsics
    depth_noise_m: float = 0.0     # Gaussian depth noise


@dataclass
class GeneratorSpec:
    scenarios: tuple[str, ...] = ("still", "walk", "arm_wave")
    subjects: int = 3
    duration_s: float = 10.0
    camera: str = "static"
    fps: float = 15.0
    image_width: int = 96
    image_height: int = 72
    pan_rate_deg_s: float = 12.0
    seed: int = 0
    noise: GeneratorNoise = field(default_factory=GeneratorNoise)
    placements: tuple[str, ...] = DEFAULT_PLACEMENTS
    real_rate: float = 30.0
    real_noise: NoiseParams = field(default_factory=lambda: NoiseParams(
        accel_white=0.02, gyro_white=0.002, bias_walk=0.0, quantization_bits=16))
    render_person: bool = True

    def __post_init__(self):
        if self.duration_s < 2.0:
            raise ValueError("duration must be at least 2 seconds")
        for s in self.scenarios:
            if s not in SCENARIOS:
                raise ValueError(f"unknown scenario {s!r}")
        if self.camera not in CAMERA_MODES:
            raise ValueError(f"unknown camera mode {self.camera!r}")


@dataclass
class SinusoidMotion:
    """Joint trajectories as rest pose + root offset + per-joint sinusoids."""

    base: np.ndarray                       # (N, 3) rest joints in world frame
    components: list[tuple[int, np.ndarray, float, float]]  # (joint, amp3, freq_hz, phase)

    def positions(self, t: np.ndarray) -> np.ndarray:
        T = t.shape[0]
        out = np.tile(self.base, (T, 1, 1))
        for joint, amp, freq, phase in self.components:
            out[:, joint, :] += amp[None, :] * np.sin(2 * np.pi * freq * t + phase)[:, None]
        return out

    def accelerations(self, t: np.ndarray) -> np.ndarray:
        T = t.shape[0]
        out = np.zeros((T, self.base.shape[0], 3))
        for joint, amp, freq, phase in self.components:
            w = 2 * np.pi * freq
            out[:, joint, :] += -amp[None, :] * w**2 * np.sin(w * t + phase)[:, None]
        return out


def _add_root(components, joints, amp, freq, phase):
    for j in joints:
        components.append((j, np.asarray(amp, dtype=float), freq, phase))


def build_motion(scenario: str, rng: np.random.Generator) -> SinusoidMotion:
    """Parametric whole-body motion for a scenario, with per-subject variation."""
    skel = coco17_skeleton()
    scale = rng.uniform(0.93, 1.07)
    hip_height = 0.95 * scale
    base = skel.rest_positions * scale + np.array([0.0, 0.0, hip_height])
    idx = skel.index
    jitter = lambda v: v * rng.uniform(0.9, 1.1)
    phase0 = rng.uniform(0, 2 * np.pi)
    comps: list[tuple[int, np.ndarray, float, float]] = []
    all_joints = list(range(17))

    if scenario == "still":
        pass
    elif scenario in ("walk", "run"):
        run = scenario == "run"
        f = jitter(1.4 if run else 0.95)
        swing = jitter(0.42 if run else 0.24) * scale
        lift = jitter(0.10 if run else 0.05) * scale
        bounce = jitter(0.05 if run else 0.025) * scale
        # root bounce at double the step frequency
        _add_root(comps, all_joints, [0, 0, bounce], 2 * f, phase0)
        for side, sgn in (("left", 0.0), ("right", np.pi)):
            comps.append((idx(f"{side}_ankle"), np.array([0, swing, 0.0]), f, phase0 + sgn))
            comps.append((idx(f"{side}_ankle"), np.array([0, 0, lift]), f, phase0 + sgn + np.pi / 2))
            comps.append((idx(f"{side}_knee"), np.array([0, swing * 0.55, 0.0]), f, phase0 + sgn))
            # arms counter-swing
            comps.append((idx(f"{side}_wrist"), np.array([0, swing * 0.6, 0.0]), f, phase0 + sgn + np.pi))
            comps.append((idx(f"{side}_elbow"), np.array([0, swing * 0.3, 0.0]), f, phase0 + sgn + np.pi))
    elif scenario == "jump":
        f = jitter(1.0)
        height = jitter(0.14) * scale
        _add_root(comps, all_joints, [0, 0, height], f, phase0)
        for side in ("left", "right"):
            comps.append((idx(f"{side}_wrist"), np.array([0, 0, jitter(0.18) * scale]), f, phase0 + np.pi / 3))
    elif scenario == "arm_wave":
        f = jitter(0.6)
        comps.append((idx("right_wrist"), np.array([jitter(0.22), jitter(0.08), jitter(0.30)]) * scale,
                      f, phase0))
        comps.append((idx("right_elbow"), np.array([jitter(0.10), jitter(0.04), jitter(0.13)]) * scale,
                      f, phase0))
    else:  # pragma: no cover - guarded by GeneratorSpec
        raise ValueError(scenario)
    return SinusoidMotion(base=base, components=comps)


# --------------------------------------------------------------- camera

def look_at(position: np.ndarray, target: np.ndarray) -> np.ndarray:
    """World-from-camera rotation; camera X right, Y down, Z forward; world Z up."""
    z = target - position
    z = z / np.linalg.norm(z)
    x = np.cross(z, np.array([0.0, 0.0, 1.0]))
    nx = np.linalg.norm(x)
    if nx < 1e-9:
        x = np.array([1.0, 0.0, 0.0])
    else:
        x = x / nx
    y = np.cross(z, x)
    return np.stack([x, y, z], axis=1)


def rot_z(theta: float) -> np.ndarray:
    c, s = np.cos(theta), np.sin(theta)
    return np.array([[c, -s, 0.0], [s, c, 0.0], [0.0, 0.0, 1.0]])


@dataclass
class CameraTrajectory:
    R_wc: np.ndarray  # (T, 3, 3) world-from-camera rotations
    C: np.ndarray     # (T, 3) camera centers

    def to_camera(self, points_world: np.ndarray, t: int) -> np.ndarray:
        return (points_world - self.C[t]) @ self.R_wc[t]


def build_camera(mode: str, t: np.ndarray, person_center: np.ndarray,
                 root_xy: np.ndarray, pan_rate_deg_s: float,
                 rng: np.random.Generator) -> CameraTrajectory:
    T = t.shape[0]
    distance = rng.uniform(4.6, 5.4)
    height = rng.uniform(1.2, 1.6)
    C0 = np.array([rng.uniform(-0.3, 0.3), -distance, height])
    R0 = look_at(C0, person_center)
    if mode == "static":
        return CameraTrajectory(np.tile(R0, (T, 1, 1)), np.tile(C0, (T, 1)))
    if mode == "pan":
        rate = np.deg2rad(pan_rate_deg_s)
        thetas = rate * (t - t[-1] / 2.0)  # sweep centered on the person
        R = np.stack([rot_z(th) @ R0 for th in thetas])
        return CameraTrajectory(R, np.tile(C0, (T, 1)))
    if mode == "follow":
        offsets = np.zeros((T, 3))
        offsets[:, :2] = root_xy - root_xy[0]
        return CameraTrajectory(np.tile(R0, (T, 1, 1)), C0 + offsets)
    raise ValueError(f"unknown camera mode {mode!r}")


# --------------------------------------------------------------- room rendering

@dataclass
class _Plane:
    normal: np.ndarray
    offset: float          # plane: normal . X = offset
    bounds: np.ndarray     # (3, 2) axis-aligned validity box
    texture_seed: int


def _room_planes(rng: np.random.Generator) -> list[_Plane]:
    """Room walls plus two pillars near the person.

    The pillar faces present close-range surfaces with horizontal normals,
    which pin the yaw component of camera ego-motion (floor and ceiling are
    invariant to it).
    """
    hx, hy_back, hy_front, hz = 4.5, 3.0, 7.5, 3.0
    big = np.array([[-hx, hx], [-hy_front, hy_back], [0.0, hz]])
    seed = lambda: int(rng.integers(1 << 16))
    planes = [
        _Plane(np.array([0.0, 0.0, 1.0]), 0.0, big, seed()),        # floor
        _Plane(np.array([0.0, 1.0, 0.0]), hy_back, big, seed()),    # back wall
        _Plane(np.array([1.0, 0.0, 0.0]), -hx, big, seed()),        # left wall
        _Plane(np.array([1.0, 0.0, 0.0]), hx, big, seed()),         # right wall
        _Plane(np.array([0.0, 0.0, 1.0]), hz, big, seed()),         # ceiling
        _Plane(np.array([0.0, 1.0, 0.0]), -hy_front, big, seed()),  # front wall
    ]
    for cx in (-3.6, 3.6):
        w = 0.45
        box = np.array([[cx - w, cx + w], [0.3 - w, 0.3 + w], [0.0, hz]])
        planes.append(_Plane(np.array([1.0, 0.0, 0.0]), cx - w, box, seed()))
        planes.append(_Plane(np.array([1.0, 0.0, 0.0]), cx + w, box, seed()))
        planes.append(_Plane(np.array([0.0, 1.0, 0.0]), 0.3 - w, box, seed()))
        planes.append(_Plane(np.array([0.0, 1.0, 0.0]), 0.3 + w, box, seed()))
    return planes


def _texture(points: np.ndarray, seed: int) -> np.ndarray:
    """Smooth low-frequency RGB texture of world position."""
    rng = np.random.default_rng(seed)
    out = np.empty((points.shape[0], 3))
    for c in range(3):
        k = rng.uniform(0.6, 1.6, 3)
        phase = rng.uniform(0, 2 * np.pi)
        out[:, c] = 0.55 + 0.35 * np.sin(points @ k + phase)
    return np.clip(out, 0.0, 1.0)


def render_background(intr: CameraIntrinsics, R_wc: np.ndarray, C: np.ndarray,
                      planes: list[_Plane], width: int, height: int) -> tuple[np.ndarray, np.ndarray]:
    """Ray-cast the room; returns (depth (H, W), rgb (H, W, 3) in [0, 1]).

    Depth is the camera-frame Z of the nearest plane hit.
    """
    ys, xs = np.mgrid[0:height, 0:width].astype(float)
    d_cam = np.stack([(xs - intr.px) / intr.fx,
                      (ys - intr.py) / intr.fy,
                      np.ones_like(xs)], axis=-1).reshape(-1, 3)
    d_world = d_cam @ R_wc.T
    depth = np.full(d_world.shape[0], np.inf)
    hit_points = np.zeros_like(d_world)
    hit_plane = np.full(d_world.shape[0], -1)
    for pi, plane in enumerate(planes):
        denom = d_world @ plane.normal
        with np.errstate(divide="ignore", invalid="ignore"):
            s = (plane.offset - plane.normal @ C) / denom
        valid = np.isfinite(s) & (s > 0.05)
        pts = C + s[:, None] * d_world
        for ax in range(3):
            valid &= (pts[:, ax] >= plane.bounds[ax, 0] - 1e-6) & (pts[:, ax] <= plane.bounds[ax, 1] + 1e-6)
        closer = valid & (s < depth)
        depth[closer] = s[closer]
        hit_points[closer] = pts[closer]
        hit_plane[closer] = pi
    rgb = np.full((d_world.shape[0], 3), 0.5)
    for pi, plane in enumerate(planes):
        sel = hit_plane == pi
        if sel.any():
            rgb[sel] = _texture(hit_points[sel], plane.texture_seed)
    depth[~np.isfinite(depth)] = np.nan
    return depth.reshape(height, width), rgb.reshape(height, width, 3)


def paint_person(depth: np.ndarray, rgb: np.ndarray,
                 ellipse: tuple[float, float, float, float], person_depth: float):
    """Flat person blob inside a pixel ellipse (in place)."""
    h, w = depth.shape
    ys, xs = np.mgrid[0:h, 0:w].astype(float)
    cx, cy, rx, ry = ellipse
    inside = (((xs - cx) / max(rx, 1e-6)) ** 2 + ((ys - cy) / max(ry, 1e-6)) ** 2) <= 1.0
    depth[inside] = person_depth
    rgb[inside] = np.array([0.82, 0.33, 0.31])


def render_depth_color(intr: CameraIntrinsics, R_wc: np.ndarray, C: np.ndarray,
                       planes: list[_Plane], width: int, height: int,
                       person_ellipse: tuple[float, float, float, float] | None = None,
                       person_depth: float | None = None,
                       rng: np.random.Generator | None = None,
                       depth_noise: float = 0.0) -> tuple[np.ndarray, np.ndarray]:
    depth, rgb = render_background(intr, R_wc, C, planes, width, height)
    depth = depth.copy()
    rgb = rgb.copy()
    if person_ellipse is not None and person_depth is not None:
        paint_person(depth, rgb, person_ellipse, person_depth)
    if depth_noise > 0 and rng is not None:
        noisy = depth + rng.normal(0, depth_noise, depth.shape)
        depth = np.where(np.isfinite(depth), np.clip(noisy, 0.05, None), depth)
    return depth.astype(np.float32), rgb


# --------------------------------------------------------------- generation

@dataclass
class ClipArtifacts:
    clip_id: str
    manifest_path: Path
    label: str
    subject: str


def _clip_intrinsics(width: int, height: int) -> CameraIntrinsics:
    f = 0.62 * width
    return CameraIntrinsics(fx=f, fy=f, px=width / 2.0, py=height / 2.0, d=0.0)


def generate_clip(out_dir: Path, clip_id: str, scenario: str, subject: str,
                  spec: GeneratorSpec, rng: np.random.Generator,
                  motion: SinusoidMotion) -> ClipArtifacts:
    """Render one clip's artifacts plus ground truth; returns its manifest."""
    clip_dir = Path(out_dir) / "clips" / clip_id
    frames_dir = clip_dir / "frames"
    frames_dir.mkdir(parents=True, exist_ok=True)

    fps = spec.fps
    n_frames = int(round(spec.duration_s * fps))
    t = np.arange(n_frames) / fps

    joints_world = motion.positions(t)                     # (T, 17, 3)
    accel_world = motion.accelerations(t)
    skel = coco17_skeleton()
    lh, rh = skel.index("left_hip"), skel.index("right_hip")
    hip_center = (joints_world[:, lh] + joints_world[:, rh]) / 2.0

    person_center = joints_world[0].mean(axis=0)
    camera = build_camera(spec.camera, t, person_center, hip_center[:, :2],
                          spec.pan_rate_deg_s, rng)
    intr = _clip_intrinsics(spec.image_width, spec.image_height)
    planes = _room_planes(rng)

    kp_lines = []
    pose_lines = []
    intr_lines = []
    bg_cache: tuple[np.ndarray, np.ndarray] | None = None
    for f_i in range(n_frames):
        cam_joints = camera.to_camera(joints_world[f_i], f_i)
        if np.any(cam_joints[:, 2] <= 0.1):
            raise RuntimeError(f"{clip_id}: person behind camera at frame {f_i}")
        uv = _project_unchecked(cam_joints, intr)
        if spec.noise.keypoint_px > 0:
            uv = uv + rng.normal(0, spec.noise.keypoint_px, uv.shape)
        conf = np.ones(17)
        if spec.noise.keypoint_dropout > 0:
            drop = rng.uniform(size=17) < spec.noise.keypoint_dropout
            conf[drop] = 0.0
            uv[drop] = 0.0
        joints = [[float(uv[j, 0]), float(uv[j, 1]), float(conf[j])] for j in range(17)]
        kp_lines.append({"clip": clip_id, "frame": f_i, "people": [{"joints": joints}]})

        p3 = joints_world[f_i] - hip_center[f_i]
        pose_lines.append({"clip": clip_id, "track": 0, "frame": f_i,
                           "joints": [[float(v) for v in row] for row in p3]})

        jit = spec.noise.intrinsics_jitter
        vals = intr.as_array()[:4] * (1 + rng.normal(0, jit, 4)) if jit > 0 else intr.as_array()[:4]
        intr_lines.append({"clip": clip_id, "frame": f_i,
                           "fx": float(vals[0]), "fy": float(vals[1]),
                           "px": float(vals[2]), "py": float(vals[3]), "d": 0.0})

        ellipse = None
        person_depth = None
        if spec.render_person:
            present = conf > 0
            if present.any():
                u, v = uv[present, 0], uv[present, 1]
                cx, cy = (u.min() + u.max()) / 2.0, (v.min() + v.max()) / 2.0
                rx = 0.45 * max(u.max() - u.min(), 2.0)
                ry = 0.45 * max(v.max() - v.min(), 2.0)
                ellipse = (cx, cy, rx, ry)
                person_depth = float(camera.to_camera(hip_center[f_i][None], f_i)[0, 2])
        # the background only changes when the camera moves
        if bg_cache is None or f_i == 0 or not (
                np.array_equal(camera.R_wc[f_i], camera.R_wc[f_i - 1])
                and np.array_equal(camera.C[f_i], camera.C[f_i - 1])):
            bg_cache = render_background(intr, camera.R_wc[f_i], camera.C[f_i], planes,
                                         spec.image_width, spec.image_height)
        depth = bg_cache[0].copy()
        rgb = bg_cache[1].copy()
        if ellipse is not None and person_depth is not None:
            paint_person(depth, rgb, ellipse, person_depth)
        if spec.noise.depth_noise_m > 0:
            noisy = depth + rng.normal(0, spec.noise.depth_noise_m, depth.shape)
            depth = np.where(np.isfinite(depth), np.clip(noisy, 0.05, None), depth)
        fileio.write_depth(frames_dir / f"{clip_id}_{f_i:06d}.dmap", depth.astype(np.float32))
        fileio.write_ppm(frames_dir / f"{clip_id}_{f_i:06d}.ppm", rgb)

    fileio.write_jsonl(clip_dir / "keypoints.jsonl", kp_lines)
    fileio.write_jsonl(clip_dir / "poses.jsonl", pose_lines)
    fileio.write_jsonl(clip_dir / "intrinsics.jsonl", intr_lines)

    # ground truth for oracles
    buf = io.BytesIO()
    np.savez(buf, joints_world=joints_world, accel_world=accel_world,
             camera_R_wc=camera.R_wc, camera_C=camera.C, fps=fps,
             hip_center=hip_center)
    fileio.atomic_write_bytes(clip_dir / "ground_truth.npz", buf.getvalue())

    manifest = {
        "clip_id": clip_id,
        "fps": fps,
        "n_frames": n_frames,
        "label": scenario,
        "subject": subject,
        "files": {
            "keypoints": "keypoints.jsonl",
            "poses": "poses.jsonl",
            "intrinsics": "intrinsics.jsonl",
            "frames_dir": "frames",
            "ground_truth": "ground_truth.npz",
        },
    }
    manifest_path = clip_dir / "manifest.json"
    fileio.write_json(manifest_path, manifest)
    return ClipArtifacts(clip_id=clip_id, manifest_path=manifest_path,
                         label=scenario, subject=subject)


def generate_real_imu(out_dir: Path, clip_id: str, scenario: str, subject: str,
                      spec: GeneratorSpec, rng: np.random.Generator,
                      motion: SinusoidMotion) -> list[Path]:
    """'Real' IMU streams straight from the ground-truth motion at real_rate."""
    real_dir = Path(out_dir) / "real_imu"
    real_dir.mkdir(parents=True, exist_ok=True)
    n = int(round(spec.duration_s * spec.real_rate))
    t = np.arange(n) / spec.real_rate
    joints = motion.positions(t)
    track = MotionTrack3D(track_id=0, clip_id=clip_id, fps=spec.real_rate,
                          joints_world=joints, label=scenario, subject=subject)
    written = []
    for pname in spec.placements:
        placement = make_placement(pname)
        stream = synthesize_stream(track, placement)
        stream.origin = "real"
        seed = int(rng.integers(1 << 31))
        stream = sensor_noise(stream, seed=seed, params=spec.real_noise)
        tt = np.arange(len(stream)) / stream.rate
        base = real_dir / f"{clip_id}__t0__{pname}"
        fileio.write_imu_csv(base.with_suffix(".csv"), tt, stream.accel, stream.gyro, stream.mag)
        fileio.write_json(base.with_suffix(".meta.json"), {
            "subject": subject, "label": scenario, "placement": pname,
            "rate": stream.rate, "origin": "real", "clip": clip_id, "track": 0,
        })
        written.append(base.with_suffix(".csv"))
    return written


def generate_synthetic(out_dir, spec: GeneratorSpec) -> dict:
    """Generate the full dataset; returns the dataset manifest dict."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    clips = []
    for si in range(spec.subjects):
        subject = f"s{si:02d}"
        for scenario in spec.scenarios:
            clip_id = f"{subject}_{scenario}"
            # one independent, deterministic stream per clip
            crng = np.random.default_rng(
                np.random.SeedSequence([spec.seed, si, SCENARIOS.index(scenario)]))
            motion = build_motion(scenario, crng)
            art = generate_clip(out_dir, clip_id, scenario, subject, spec, crng, motion)
            generate_real_imu(out_dir, clip_id, scenario, subject, spec, crng, motion)
            clips.append(str(art.manifest_path.relative_to(out_dir)))
    dataset = {
        "clips": clips,
        "placements": list(spec.placements),
        "fps": spec.fps,
        "real_rate": spec.real_rate,
        "seed": spec.seed,
        "camera": spec.camera,
    }
    fileio.write_json(out_dir / "dataset.json", dataset)
    return dataset
