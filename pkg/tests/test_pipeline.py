import json
import shutil

import numpy as np
import pytest

from vimu import fileio
from vimu.harlab import LosoOptions
from vimu.pipeline import (
    ConfigError,
    DataError,
    PipelineConfig,
    config_from_dict,
    inject_domain_shift,
    load_clip_manifest,
    load_dataset_manifest,
    load_imu_dir,
    run_pipeline,
)
from vimu.synthgen import GeneratorSpec, generate_synthetic
from vimu.trackio import KalmanParams


@pytest.fixture(scope="module")
def small_dataset(tmp_path_factory):
    out = tmp_path_factory.mktemp("data")
    spec = GeneratorSpec(scenarios=("still", "walk"), subjects=1, duration_s=4.0,
                         fps=15.0, image_width=64, image_height=48, seed=21,
                         placements=("wrist_left", "ankle_right"))
    generate_synthetic(out, spec)
    return out


def fast_config():
    cfg = PipelineConfig(placements=("wrist_left", "ankle_right"))
    cfg.kalman = KalmanParams(sigma_accel=500.0, sigma_meas=0.1)
    cfg.icp.stride = 6
    return cfg


# ------------------------------------------------------------- config

def test_config_roundtrip_and_fingerprint():
    cfg = PipelineConfig()
    d = cfg.to_dict()
    cfg2 = config_from_dict(d)
    assert cfg2.fingerprint() == cfg.fingerprint()


def test_config_rejects_unknown_top_level_key():
    with pytest.raises(ConfigError, match="unknown config keys"):
        config_from_dict({"not_a_key": 1})


def test_config_rejects_unknown_section_key():
    with pytest.raises(ConfigError, match="unknown keys"):
        config_from_dict({"tracker": {"bogus": 1}})


def test_config_rejects_out_of_range():
    with pytest.raises(ConfigError, match="out of range"):
        config_from_dict({"tracker": {"iou_threshold": 1.5}})
    with pytest.raises(ConfigError, match="out of range"):
        config_from_dict({"icp": {"delta": -0.1}})


def test_config_rejects_bad_schema_version():
    with pytest.raises(ConfigError, match="schema_version"):
        config_from_dict({"schema_version": 99})


def test_config_rejects_unknown_placement():
    with pytest.raises(ValueError):
        config_from_dict({"placements": ["left_flipper"]})


def test_config_partial_override():
    cfg = config_from_dict({"tracker": {"iou_threshold": 0.5}, "seed": 7})
    assert cfg.tracker.iou_threshold == 0.5
    assert cfg.tracker.max_missed == 1
    assert cfg.seed == 7


# ------------------------------------------------------------- manifests

def test_load_clip_manifest_missing_file(tmp_path):
    man = {"clip_id": "c", "fps": 30, "n_frames": 10, "label": "x", "subject": "s",
           "files": {"keypoints": "nope.jsonl", "poses": "p.jsonl", "intrinsics": "i.jsonl"}}
    path = tmp_path / "manifest.json"
    path.write_text(json.dumps(man))
    with pytest.raises(DataError, match="missing"):
        load_clip_manifest(path)


def test_load_dataset_manifest(small_dataset):
    clips, data = load_dataset_manifest(small_dataset / "dataset.json")
    assert len(clips) == 2
    assert {c.label for c in clips} == {"still", "walk"}
    assert data["placements"] == ["wrist_left", "ankle_right"]


# ------------------------------------------------------------- run

def test_run_pipeline_produces_streams(small_dataset, tmp_path):
    summary = run_pipeline(small_dataset / "dataset.json", fast_config(), tmp_path)
    assert summary.failed == 0
    assert summary.processed == 2
    csvs = sorted((tmp_path / "virtual_imu").glob("*.csv"))
    # one file per (clip, track, placement): 2 clips x 1 track x 2 placements
    assert len(csvs) == 4
    prov = fileio.read_json(tmp_path / "provenance.json")
    assert prov["summary"] == {"processed": 2, "failed": 0}
    assert set(prov["clips"]) == {"s00_still", "s00_walk"}


def test_run_pipeline_empty_dataset(tmp_path):
    fileio.write_json(tmp_path / "dataset.json", {"clips": []})
    summary = run_pipeline(tmp_path / "dataset.json", fast_config(), tmp_path / "out")
    assert summary.processed == 0 and summary.failed == 0
    assert summary.exit_code == 0


def test_run_pipeline_isolates_corrupt_clip(small_dataset, tmp_path):
    broken = tmp_path / "broken_data"
    shutil.copytree(small_dataset, broken)
    # corrupt one depth file of the walk clip
    victim = broken / "clips" / "s00_walk" / "frames" / "s00_walk_000010.dmap"
    victim.write_bytes(b"GARBAGE")
    summary = run_pipeline(broken / "dataset.json", fast_config(), tmp_path / "out")
    assert summary.processed == 1
    assert summary.failed == 1
    assert summary.exit_code == 3
    by_id = {r.clip_id: r for r in summary.results}
    assert by_id["s00_walk"].status == "failed"
    assert by_id["s00_still"].status == "ok"


def test_run_pipeline_deterministic(small_dataset, tmp_path):
    out_a, out_b = tmp_path / "a", tmp_path / "b"
    run_pipeline(small_dataset / "dataset.json", fast_config(), out_a)
    run_pipeline(small_dataset / "dataset.json", fast_config(), out_b)
    for csv_a in sorted((out_a / "virtual_imu").glob("*.csv")):
        csv_b = out_b / "virtual_imu" / csv_a.name
        assert csv_a.read_bytes() == csv_b.read_bytes(), csv_a.name


def test_virtual_accel_matches_analytic(small_dataset, tmp_path):
    # world-frame acceleration of the virtual stream vs the generator's
    # closed form, on band-limited motion with zero generator noise
    run_pipeline(small_dataset / "dataset.json", fast_config(), tmp_path)
    gt = np.load(small_dataset / "clips" / "s00_walk" / "ground_truth.npz")
    from vimu.egomotion import MotionTrack3D
    from vimu.imusynth import coco17_skeleton, forward_kinematics, make_placement, world_kinematics

    skel = coco17_skeleton()
    track = MotionTrack3D(0, "w", float(gt["fps"]), gt["joints_world"])
    track.joint_orientations = forward_kinematics(track, skel)
    pos, R = world_kinematics(track, make_placement("ankle_right"), skel)
    j = skel.index("right_ankle")
    f_world = gt["accel_world"][:, j] - np.array([0, 0, -9.81])
    analytic = np.einsum("tji,tj->ti", R, f_world)

    t, acc, _, _ = fileio.read_imu_csv(tmp_path / "virtual_imu" / "s00_walk__t0__ankle_right.csv")
    t15 = np.arange(gt["joints_world"].shape[0]) / float(gt["fps"])
    analytic_30 = np.stack([np.interp(t, t15, analytic[:, c]) for c in range(3)], axis=1)
    n = min(len(acc), len(analytic_30))
    core = slice(5, n - 5)
    rms_err = np.sqrt(np.mean((acc[core] - analytic_30[core]) ** 2))
    rms_sig = np.sqrt(np.mean(analytic_30[core] ** 2))
    assert rms_err / rms_sig < 0.05


# ------------------------------------------------------------- IMU loading

def test_load_imu_dir_builds_windows(small_dataset, tmp_path):
    run_pipeline(small_dataset / "dataset.json", fast_config(), tmp_path)
    virtual = load_imu_dir(tmp_path / "virtual_imu")
    real = load_imu_dir(small_dataset / "real_imu")
    assert virtual and real
    assert all(w.origin == "virtual" for w in virtual)
    assert all(w.origin == "real" for w in real)
    assert virtual[0].samples.shape[1] == 18  # 2 placements x 9 channels
    assert virtual[0].channel_names == real[0].channel_names


def test_load_imu_dir_missing(tmp_path):
    with pytest.raises(DataError):
        load_imu_dir(tmp_path)


def test_inject_domain_shift_only_touches_virtual(small_dataset, tmp_path):
    run_pipeline(small_dataset / "dataset.json", fast_config(), tmp_path)
    virtual = load_imu_dir(tmp_path / "virtual_imu")
    real = load_imu_dir(small_dataset / "real_imu")
    shifted = inject_domain_shift(real + virtual, gain=2.0, offset=1.0)
    for orig, new in zip(real + virtual, shifted):
        if orig.origin == "virtual":
            np.testing.assert_allclose(new.samples, orig.samples * 2.0 + 1.0)
        else:
            np.testing.assert_array_equal(new.samples, orig.samples)
