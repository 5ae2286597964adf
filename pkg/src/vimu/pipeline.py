"""Pipeline orchestration: config, clip manifests, and the full run.

A run converts each clip's ingested artifacts (2D keypoints, per-frame
intrinsics, person-centered 3D poses, depth/color frames) into virtual IMU
CSV streams: tracking -> calibration -> background pruning -> ego-motion ->
world-frame composition -> sensor synthesis -> noise -> resampling. Clip
failures are isolated: a failing clip is skipped and reported, the rest of
the run proceeds.
"""

from __future__ import annotations

import hashlib
import json
import logging
import traceback
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from . import calib3d, egomotion, fileio, harlab, imusynth, trackio

log = logging.getLogger("vimu")

SCHEMA_VERSION = 1


class ConfigError(ValueError):
    """Invalid pipeline configuration."""


@dataclass
class WindowConfig:
    length_s: float = 1.0
    overlap: float = 0.5


@dataclass
class IcpConfig:
    delta: float = 0.968
    max_iterations: int = 50
    tolerance: float = 1e-6
    max_corr_factor: float = 3.0
    trim_factor: float = 3.0
    min_correspondences: int = 10
    normal_k: int = 12
    stride: int = 4
    # drop points whose neighborhood is not locally planar (seams, depth
    # edges) before registration; None disables the filter
    max_planarity: float | None = 1e-4


@dataclass
class PipelineConfig:
    schema_version: int = SCHEMA_VERSION
    seed: int = 0
    tracker: trackio.TrackerParams = field(default_factory=trackio.TrackerParams)
    filter: trackio.FilterParams = field(default_factory=trackio.FilterParams)
    kalman: trackio.KalmanParams = field(default_factory=trackio.KalmanParams)
    pnp: calib3d.PnpParams = field(default_factory=calib3d.PnpParams)
    icp: IcpConfig = field(default_factory=IcpConfig)
    mask_margin_px: float = 4.0
    placements: tuple[str, ...] = ("forearm_left", "head", "shin_left",
                                   "thigh_right", "upper_arm_right", "waist_chest")
    noise: imusynth.NoiseParams = field(default_factory=imusynth.NoiseParams)
    resample_rate: float = 30.0
    gravity_on: bool = True
    windows: WindowConfig = field(default_factory=WindowConfig)
    grid: harlab.GridSpec = field(default_factory=harlab.GridSpec)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["placements"] = list(self.placements)
        d["grid"] = {"trees": list(self.grid.trees), "min_leaf": list(self.grid.min_leaf)}
        return d

    def fingerprint(self) -> str:
        canon = json.dumps(self.to_dict(), sort_keys=True)
        return hashlib.sha256(canon.encode()).hexdigest()[:16]


_SECTION_TYPES = {
    "tracker": trackio.TrackerParams,
    "filter": trackio.FilterParams,
    "kalman": trackio.KalmanParams,
    "pnp": calib3d.PnpParams,
    "icp": IcpConfig,
    "noise": imusynth.NoiseParams,
    "windows": WindowConfig,
}

_RANGE_CHECKS = {
    ("tracker", "iou_threshold"): lambda v: 0.0 < v < 1.0,
    ("tracker", "max_missed"): lambda v: v >= 1,
    ("filter", "min_joint_fraction"): lambda v: 0.0 <= v <= 1.0,
    ("filter", "min_duration_s"): lambda v: v > 0,
    ("icp", "delta"): lambda v: 0.0 <= v <= 1.0,
    ("icp", "stride"): lambda v: v >= 1,
    ("windows", "overlap"): lambda v: 0.0 <= v < 1.0,
    ("windows", "length_s"): lambda v: v > 0,
}


def _build_section(name: str, cls, data: dict):
    valid = set(cls.__dataclass_fields__)
    unknown = set(data) - valid
    if unknown:
        raise ConfigError(f"unknown keys in config section {name!r}: {sorted(unknown)}")
    try:
        obj = cls(**data)
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"config section {name!r}: {exc}") from exc
    for (sec, fieldname), check in _RANGE_CHECKS.items():
        if sec == name and fieldname in data and not check(data[fieldname]):
            raise ConfigError(f"config value {name}.{fieldname}={data[fieldname]} out of range")
    return obj


def config_from_dict(data: dict) -> PipelineConfig:
    """Strict config parser: unknown keys rejected, ranges validated."""
    if not isinstance(data, dict):
        raise ConfigError("config must be a JSON object")
    data = dict(data)
    version = data.pop("schema_version", SCHEMA_VERSION)
    if version != SCHEMA_VERSION:
        raise ConfigError(f"unsupported config schema_version {version!r}")
    kwargs = {"schema_version": version}
    top_fields = set(PipelineConfig.__dataclass_fields__)
    unknown = set(data) - top_fields
    if unknown:
        raise ConfigError(f"unknown config keys: {sorted(unknown)}")
    for key, value in data.items():
        if key in _SECTION_TYPES:
            if not isinstance(value, dict):
                raise ConfigError(f"config section {key!r} must be an object")
            kwargs[key] = _build_section(key, _SECTION_TYPES[key], value)
        elif key == "grid":
            if not isinstance(value, dict) or set(value) - {"trees", "min_leaf"}:
                raise ConfigError("config section 'grid' must have keys trees/min_leaf")
            kwargs[key] = harlab.GridSpec(trees=tuple(value.get("trees", (3, 10, 25, 50))),
                                          min_leaf=tuple(value.get("min_leaf", (1, 5, 20, 50))))
        elif key == "placements":
            kwargs[key] = tuple(value)
        else:
            kwargs[key] = value
    cfg = PipelineConfig(**kwargs)
    if cfg.resample_rate <= 0:
        raise ConfigError("resample_rate must be positive")
    for p in cfg.placements:
        imusynth.make_placement(p)  # raises on unknown placement names
    return cfg


def load_config(path) -> PipelineConfig:
    try:
        data = fileio.read_json(path)
    except (OSError, json.JSONDecodeError) as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from exc
    return config_from_dict(data)


# --------------------------------------------------------------- manifests

@dataclass
class ClipManifest:
    clip_id: str
    fps: float
    n_frames: int
    label: str
    subject: str
    root: Path
    files: dict[str, str]

    def path(self, key: str) -> Path:
        return self.root / self.files[key]

    def frame_path(self, frame: int, ext: str) -> Path:
        return self.root / self.files["frames_dir"] / f"{self.clip_id}_{frame:06d}.{ext}"


class DataError(ValueError):
    """Invalid or missing input data."""


def load_clip_manifest(path) -> ClipManifest:
    path = Path(path)
    data = fileio.read_json(path)
    try:
        m = ClipManifest(clip_id=str(data["clip_id"]), fps=float(data["fps"]),
                         n_frames=int(data["n_frames"]), label=str(data["label"]),
                         subject=str(data["subject"]), root=path.parent,
                         files=dict(data["files"]))
    except (KeyError, TypeError, ValueError) as exc:
        raise DataError(f"{path}: invalid clip manifest ({exc})") from exc
    if m.fps <= 0:
        raise DataError(f"{path}: fps must be positive")
    for key in ("keypoints", "poses", "intrinsics"):
        if key in m.files and not m.path(key).exists():
            raise DataError(f"{path}: referenced file missing: {m.files[key]}")
    return m


def load_dataset_manifest(path) -> tuple[list[ClipManifest], dict]:
    path = Path(path)
    try:
        data = fileio.read_json(path)
    except (OSError, json.JSONDecodeError) as exc:
        raise DataError(f"cannot read dataset manifest {path}: {exc}") from exc
    clips = [load_clip_manifest(path.parent / rel) for rel in data.get("clips", [])]
    return clips, data


# --------------------------------------------------------------- per-clip run

@dataclass
class ClipResult:
    clip_id: str
    status: str               # "ok" | "failed"
    error: str = ""
    n_tracks: int = 0
    n_icp_failures: int = 0
    files: list[str] = field(default_factory=list)


def _stable_seed(*parts) -> int:
    digest = hashlib.sha256("|".join(str(p) for p in parts).encode()).digest()
    return int.from_bytes(digest[:4], "little")


def process_clip(manifest: ClipManifest, config: PipelineConfig, out_dir: Path) -> ClipResult:
    """Run the full per-clip pipeline; writes IMU CSVs and sidecar manifests."""
    clip = manifest.clip_id
    result = ClipResult(clip_id=clip, status="ok")

    frames = trackio.load_keypoint_stream(manifest.path("keypoints"))
    tracks = trackio.build_tracks(frames, config.tracker, fps=manifest.fps)
    tracks = trackio.filter_tracks(tracks, config.filter)
    if not tracks:
        raise DataError(f"{clip}: no tracks survive filtering")
    tracks = [trackio.kalman_smooth(t, config.kalman) for t in tracks]

    intr_by_frame = calib3d.load_intrinsics_stream(manifest.path("intrinsics"))
    if not intr_by_frame:
        raise DataError(f"{clip}: empty intrinsics stream")
    intr = calib3d.aggregate_intrinsics(list(intr_by_frame.values()))
    poses = calib3d.load_pose_stream(manifest.path("poses"))

    calibrated = []
    kept_tracks = []
    for track in tracks:
        track_poses = [poses[(track.track_id, f)] for f in track.frames
                       if (track.track_id, f) in poses]
        if len(track_poses) < len(track) * 0.5:
            log.warning("%s: track %d lacks 3D poses for most frames, skipped",
                        clip, track.track_id)
            continue
        calibrated.append(calib3d.calibrate_track(track_poses, track, intr, config.pnp))
        kept_tracks.append(track)
    if not calibrated:
        raise DataError(f"{clip}: no track has usable 3D poses")

    keep_idx = calib3d.prune_background([np.stack([c.joints for c in seq])
                                         for seq in calibrated])
    calibrated = [calibrated[i] for i in keep_idx]
    kept_tracks = [kept_tracks[i] for i in keep_idx]
    result.n_tracks = len(kept_tracks)

    ego_by_frame = _estimate_ego_motion(manifest, config, kept_tracks, intr, result)

    streams_written = []
    for track, calib_seq in zip(kept_tracks, calibrated):
        ego_seq = [egomotion.RigidTransform.identity()]
        for i, f in enumerate(track.frames):
            if i == 0:
                continue
            ego_seq.append(ego_by_frame.get(f, egomotion.RigidTransform.identity()))
        motion = egomotion.compose_track(calib_seq, ego_seq, track_id=track.track_id,
                                         clip_id=clip, fps=manifest.fps,
                                         label=manifest.label, subject=manifest.subject)
        skeleton = imusynth.coco17_skeleton()
        # the camera-0 frame is not gravity-aligned; rotate torso-up to +Z
        motion = imusynth.align_world_up(motion, skeleton)
        motion.joint_orientations = imusynth.forward_kinematics(motion, skeleton)
        for pname in config.placements:
            placement = imusynth.make_placement(pname, skeleton)
            stream = imusynth.synthesize_stream(motion, placement, skeleton,
                                                gravity_on=config.gravity_on)
            stream = imusynth.sensor_noise(
                stream, seed=_stable_seed(config.seed, clip, track.track_id, pname),
                params=config.noise)
            stream = imusynth.resample(stream, config.resample_rate)
            base = Path(out_dir) / "virtual_imu" / f"{clip}__t{track.track_id}__{pname}"
            tt = np.arange(len(stream)) / stream.rate
            fileio.write_imu_csv(base.with_suffix(".csv"), tt, stream.accel,
                                 stream.gyro, stream.mag)
            fileio.write_json(base.with_suffix(".meta.json"), {
                "subject": manifest.subject, "label": manifest.label,
                "placement": pname, "rate": stream.rate, "origin": "virtual",
                "clip": clip, "track": track.track_id,
            })
            streams_written.append(str(base.with_suffix(".csv")))
    result.files = streams_written
    return result


def _estimate_ego_motion(manifest: ClipManifest, config: PipelineConfig,
                         tracks: list[trackio.PersonTrack],
                         intr: calib3d.CameraIntrinsics,
                         result: ClipResult) -> dict[int, egomotion.RigidTransform]:
    """Frame -> transform aligning frame f onto frame f-1 (background ICP)."""
    if "frames_dir" not in manifest.files:
        raise DataError(f"{manifest.clip_id}: manifest lacks depth/color frames")
    lo = min(t.start_frame for t in tracks)
    hi = max(t.frames[-1] for t in tracks)
    icp_params = egomotion.IcpParams(
        delta=config.icp.delta, max_iterations=config.icp.max_iterations,
        tolerance=config.icp.tolerance, max_corr_factor=config.icp.max_corr_factor,
        trim_factor=config.icp.trim_factor,
        min_correspondences=config.icp.min_correspondences,
        normal_k=config.icp.normal_k)

    bboxes_by_frame: dict[int, list[trackio.BBox]] = {}
    for track in tracks:
        for i, f in enumerate(track.frames):
            box = track.bbox_at(i)
            if box is not None:
                bboxes_by_frame.setdefault(f, []).append(box)

    ego: dict[int, egomotion.RigidTransform] = {}
    prev_cloud = None
    prev_frame = None
    for f in range(lo, hi + 1):
        depth_path = manifest.frame_path(f, "dmap")
        color_path = manifest.frame_path(f, "ppm")
        if not depth_path.exists() or not color_path.exists():
            raise DataError(f"{manifest.clip_id}: missing frame files at {f}")
        depth = egomotion.DepthMap(fileio.read_depth(depth_path))
        color = fileio.read_ppm(color_path)
        cloud = egomotion.backproject(depth, color, intr, stride=config.icp.stride)
        keep = egomotion.mask_foreground(cloud.pixels, bboxes_by_frame.get(f, []),
                                         margin=config.mask_margin_px)
        cloud = egomotion.select_points(cloud, keep)
        if config.icp.max_planarity is not None and len(cloud) > config.icp.normal_k + 1:
            good = egomotion.surface_point_mask(cloud.points, k=config.icp.normal_k,
                                                max_flatness=config.icp.max_planarity)
            cloud = egomotion.select_points(cloud, good)
        if len(cloud) < config.icp.normal_k + 1:
            log.warning("%s: frame %d has too few background points", manifest.clip_id, f)
            prev_cloud, prev_frame = None, f
            result.n_icp_failures += 1
            continue
        cloud = egomotion.estimate_normals(cloud, k=config.icp.normal_k)
        if prev_cloud is not None and prev_frame == f - 1:
            res = egomotion.colored_icp(cloud, prev_cloud, icp_params)
            if res.ok:
                ego[f] = res.transform
            else:
                result.n_icp_failures += 1
                ego[f] = egomotion.RigidTransform.identity()
        prev_cloud, prev_frame = cloud, f
    return ego


@dataclass
class RunSummary:
    processed: int
    failed: int
    results: list[ClipResult]
    provenance_path: str

    @property
    def exit_code(self) -> int:
        if self.failed == 0:
            return 0
        return 3


def run_pipeline(dataset_manifest, config: PipelineConfig, out_dir,
                 workers: int = 1) -> RunSummary:
    """Process every clip of a dataset; failures are isolated per clip."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    clips, dataset = load_dataset_manifest(dataset_manifest)

    def run_one(manifest: ClipManifest) -> ClipResult:
        try:
            return process_clip(manifest, config, out_dir)
        except Exception as exc:  # clip isolation contract
            log.error("clip %s failed: %s", manifest.clip_id, exc)
            log.debug("%s", traceback.format_exc())
            return ClipResult(clip_id=manifest.clip_id, status="failed", error=str(exc))

    if workers > 1 and len(clips) > 1:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            results = list(pool.map(run_one, clips))
    else:
        results = [run_one(m) for m in clips]

    failed = sum(1 for r in results if r.status == "failed")
    provenance = {
        "config_fingerprint": config.fingerprint(),
        "config": config.to_dict(),
        "dataset": str(dataset_manifest),
        "placements": list(config.placements),
        "clips": {r.clip_id: {"status": r.status, "error": r.error,
                              "n_tracks": r.n_tracks,
                              "n_icp_failures": r.n_icp_failures,
                              "n_files": len(r.files)}
                  for r in results},
        "summary": {"processed": len(results) - failed, "failed": failed},
    }
    prov_path = out_dir / "provenance.json"
    fileio.write_json(prov_path, provenance)
    return RunSummary(processed=len(results) - failed, failed=failed,
                      results=results, provenance_path=str(prov_path))


# --------------------------------------------------------------- IMU dataset loading

def load_imu_dir(imu_dir, placements: list[str] | None = None) -> list[harlab.Window]:
    """Windows from a directory of IMU CSVs + sidecar metadata.

    Streams of one recording (same clip and track) are stacked channel-wise
    in the given placement order (sidecar order of first appearance when not
    specified).
    """
    imu_dir = Path(imu_dir)
    metas = sorted(imu_dir.glob("*.meta.json"))
    if not metas:
        raise DataError(f"no IMU streams found under {imu_dir}")
    recordings: dict[tuple, dict[str, imusynth.IMUStream]] = {}
    seen_placements: list[str] = []
    for meta_path in metas:
        meta = fileio.read_json(meta_path)
        csv_path = meta_path.with_name(meta_path.name.replace(".meta.json", ".csv"))
        try:
            _, accel, gyro, mag = fileio.read_imu_csv(csv_path)
            stream = imusynth.IMUStream(rate=float(meta["rate"]), accel=accel, gyro=gyro,
                                        mag=mag, placement=str(meta["placement"]),
                                        label=str(meta["label"]), subject=str(meta["subject"]),
                                        origin=str(meta["origin"]))
        except (KeyError, ValueError, OSError) as exc:
            raise DataError(f"{csv_path}: {exc}") from exc
        key = (meta.get("clip", meta_path.stem), meta.get("track", 0), stream.origin)
        recordings.setdefault(key, {})[stream.placement] = stream
        if stream.placement not in seen_placements:
            seen_placements.append(stream.placement)
    order = placements or seen_placements
    windows: list[harlab.Window] = []
    for key in sorted(recordings):
        streams = recordings[key]
        ordered = [streams[p] for p in order if p in streams]
        if not ordered:
            continue
        windows.extend(harlab.windows_from_streams(ordered))
    return windows


def inject_domain_shift(windows: list[harlab.Window], gain: float,
                        offset: float) -> list[harlab.Window]:
    """Affine distortion of virtual windows (constructed domain-shift studies)."""
    out = []
    for w in windows:
        if w.origin == "virtual":
            out.append(harlab.Window(samples=w.samples * gain + offset, label=w.label,
                                     subject=w.subject, origin=w.origin,
                                     channel_names=w.channel_names))
        else:
            out.append(w)
    return out
