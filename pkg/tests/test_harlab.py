import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from vimu.harlab import (
    GridSpec,
    LosoOptions,
    Window,
    apply_window_map,
    ecdf_features,
    evaluate_loso,
    feature_matrix,
    fit_window_map,
    macro_f1,
    mix_datasets,
    wilson_interval,
    window_count,
    window_slice,
    windows_for_seconds,
    windows_from_streams,
)
from vimu.imusynth import IMUStream


def make_stream(duration_s=10.0, rate=30.0, label="walk", subject="s1",
                origin="real", placement="wrist_left", seed=0, amp=1.0):
    rng = np.random.default_rng(seed)
    T = int(round(duration_s * rate))
    t = np.arange(T) / rate
    accel = amp * np.stack([np.sin(2 * np.pi * 1.0 * t + p) for p in (0, 1, 2)], axis=1)
    accel += rng.normal(0, 0.05 * amp, accel.shape)
    gyro = 0.3 * amp * np.stack([np.cos(2 * np.pi * 0.7 * t + p) for p in (0, 1, 2)], axis=1)
    mag = np.tile([1.0, 0.0, 0.0], (T, 1))
    return IMUStream(rate=rate, accel=accel, gyro=gyro, mag=mag, placement=placement,
                     label=label, subject=subject, origin=origin)


def make_window(samples, label="a", subject="s", origin="real"):
    names = tuple(f"c{i}" for i in range(samples.shape[1]))
    return Window(samples=samples, label=label, subject=subject, origin=origin,
                  channel_names=names)


# ------------------------------------------------------------- windowing

def test_window_count_examples():
    assert window_count(10.0, 1.0, 0.5) == 19
    assert window_count(10.0, 1.0, 0.0) == 10
    assert window_count(0.5, 1.0, 0.5) == 0


def test_window_slice_10s_50pct():
    ws = window_slice(make_stream(10.0), 1.0, 0.5)
    assert len(ws) == 19
    assert all(w.samples.shape == (30, 9) for w in ws)
    assert all(w.label == "walk" and w.subject == "s1" and w.origin == "real" for w in ws)


def test_window_slice_no_overlap_tiling():
    ws = window_slice(make_stream(10.0), 1.0, 0.0)
    assert len(ws) == 10


def test_window_slice_too_short_empty():
    ws = window_slice(make_stream(0.5), 1.0, 0.5)
    assert ws == []


@settings(max_examples=60, deadline=None)
@given(st.floats(1.0, 60.0), st.sampled_from([0.0, 0.25, 0.5, 0.75]))
def test_window_count_formula_property(duration, overlap):
    rate = 30.0
    T = int(round(duration * rate))
    duration_s = T / rate
    stream = make_stream(duration_s + 1e-9)
    got = len(window_slice(stream, 1.0, overlap))
    expected = int(np.floor((duration_s - 1.0) / (1.0 * (1 - overlap)) + 1e-9)) + 1
    assert got == expected


def test_windows_from_streams_stacks_placements():
    s1 = make_stream(5.0, placement="wrist_left")
    s2 = make_stream(5.0, placement="ankle_right", seed=1)
    ws = windows_from_streams([s1, s2])
    assert ws[0].samples.shape == (30, 18)
    assert ws[0].channel_names[0] == "wrist_left.accel.x"
    assert ws[0].channel_names[9] == "ankle_right.accel.x"
    # first nine columns equal the single-stream window
    solo = window_slice(s1)
    np.testing.assert_allclose(ws[0].samples[:, :9], solo[0].samples)


def test_windows_from_streams_rejects_mismatched_metadata():
    s1 = make_stream(5.0, label="walk")
    s2 = make_stream(5.0, label="run", placement="ankle_right")
    with pytest.raises(ValueError):
        windows_from_streams([s1, s2])


# ------------------------------------------------------------- features

def test_ecdf_constant_channel():
    w = make_window(np.full((30, 2), 3.5))
    f = ecdf_features(w, 15)
    assert f.shape == (2 * 16,)
    np.testing.assert_allclose(f, 3.5)


def test_ecdf_ramp_components_near_probes():
    L = 30
    ramp = np.linspace(0, 1, L)[:, None]
    w = make_window(ramp)
    f = ecdf_features(w, 15)
    probes = np.arange(1, 16) / 16.0
    np.testing.assert_allclose(f[:15], probes, atol=1.0 / L)
    assert f[15] == pytest.approx(0.5)


def test_ecdf_feature_length():
    w = make_window(np.random.default_rng(0).normal(size=(30, 7)))
    assert ecdf_features(w, 15).shape == (7 * 16,)


def test_ecdf_components_non_decreasing():
    rng = np.random.default_rng(1)
    for _ in range(20):
        w = make_window(rng.normal(size=(30, 4)))
        f = ecdf_features(w, 15).reshape(4, 16)
        assert np.all(np.diff(f[:, :15], axis=1) >= -1e-12)


# ------------------------------------------------------------- metrics

def test_macro_f1_perfect():
    assert macro_f1(["a", "b", "a"], ["a", "b", "a"], ["a", "b"]) == 1.0


def test_macro_f1_symmetric_confusion():
    # per class: TP=1, FP=1, FN=1 -> F1 = 0.5 each
    pred = ["a", "a", "b", "b"]
    truth = ["a", "b", "a", "b"]
    assert macro_f1(pred, truth, ["a", "b"]) == pytest.approx(0.5)


def test_macro_f1_collapsed_predictions():
    pred = ["a", "a", "a", "a"]
    truth = ["a", "a", "b", "b"]
    assert macro_f1(pred, truth, ["a", "b"]) == pytest.approx(1 / 3)


def test_macro_f1_skips_classes_without_truth():
    pred = ["a", "b"]
    truth = ["a", "b"]
    assert macro_f1(pred, truth, ["a", "b", "c"]) == 1.0


def test_macro_f1_permutation_invariant():
    rng = np.random.default_rng(2)
    pred = rng.choice(["a", "b", "c"], 60)
    truth = rng.choice(["a", "b", "c"], 60)
    base = macro_f1(pred, truth, ["a", "b", "c"])
    perm = rng.permutation(60)
    assert macro_f1(pred[perm], truth[perm], ["a", "b", "c"]) == pytest.approx(base)


def test_wilson_50_of_100():
    low, high = wilson_interval(50, 100)
    assert low == pytest.approx(0.4038, abs=1e-3)
    assert high == pytest.approx(0.5962, abs=1e-3)


def test_wilson_boundaries():
    low, _ = wilson_interval(0, 10)
    assert low == pytest.approx(0.0, abs=1e-12)
    _, high = wilson_interval(10, 10)
    assert high == pytest.approx(1.0, abs=1e-12)


def test_wilson_closed_form_random():
    rng = np.random.default_rng(3)
    z = 1.96
    for _ in range(100):
        n = int(rng.integers(1, 1000))
        s = int(rng.integers(0, n + 1))
        low, high = wilson_interval(s, n, z)
        p = s / n
        denom = 1 + z**2 / n
        center = (p + z**2 / (2 * n)) / denom
        half = z * np.sqrt(p * (1 - p) / n + z**2 / (4 * n**2)) / denom
        assert low == pytest.approx(max(0.0, center - half), abs=1e-9)
        assert high == pytest.approx(min(1.0, center + half), abs=1e-9)
        assert low <= p <= high


def test_wilson_invalid_n():
    with pytest.raises(ValueError):
        wilson_interval(0, 0)


# ------------------------------------------------------------- mixing

def windows_of(label, origin, n, subject="s1"):
    rng = np.random.default_rng(hash((label, origin, subject)) % 2**31)
    return [make_window(rng.normal(size=(30, 2)), label=label, origin=origin,
                        subject=subject) for _ in range(n)]


def test_mix_ratio_1_0_real_only():
    real = windows_of("a", "real", 20) + windows_of("b", "real", 20)
    virt = windows_of("a", "virtual", 20) + windows_of("b", "virtual", 20)
    out = mix_datasets(real, virt, real_per_class=10, virtual_per_class=0, seed=0)
    assert len(out) == 20
    assert all(w.origin == "real" for w in out)


def test_mix_ratio_1_1_equal_counts():
    real = windows_of("a", "real", 30) + windows_of("b", "real", 30)
    virt = windows_of("a", "virtual", 30) + windows_of("b", "virtual", 30)
    out = mix_datasets(real, virt, real_per_class=15, virtual_per_class=15, seed=0)
    by = {}
    for w in out:
        by[(w.label, w.origin)] = by.get((w.label, w.origin), 0) + 1
    assert by == {("a", "real"): 15, ("b", "real"): 15,
                  ("a", "virtual"): 15, ("b", "virtual"): 15}


def test_mix_deterministic_given_seed():
    real = windows_of("a", "real", 30) + windows_of("b", "real", 30)
    virt = windows_of("a", "virtual", 30) + windows_of("b", "virtual", 30)
    a = mix_datasets(real, virt, 10, 10, seed=5)
    b = mix_datasets(real, virt, 10, 10, seed=5)
    assert [id(w) for w in a] == [id(w) for w in b]


def test_mix_insufficient_lists_shortfalls():
    real = windows_of("a", "real", 5) + windows_of("b", "real", 30)
    virt = windows_of("a", "virtual", 30)
    with pytest.raises(ValueError, match="insufficient"):
        mix_datasets(real, virt, real_per_class=10, virtual_per_class=0, seed=0)


def test_windows_for_seconds():
    assert windows_for_seconds(30.0) == 59
    assert windows_for_seconds(300.0) == 599


# ------------------------------------------------------------- window mapping

def test_window_map_roundtrip_identity():
    rng = np.random.default_rng(4)
    ws = [make_window(rng.normal(size=(30, 3))) for _ in range(20)]
    dmap = fit_window_map(ws, ws)
    mapped = apply_window_map(dmap, ws)
    for a, b in zip(mapped, ws):
        np.testing.assert_allclose(a.samples, b.samples, atol=1e-9)


def test_window_map_removes_affine_shift():
    rng = np.random.default_rng(5)
    base = [make_window(rng.normal(size=(30, 2)), origin="real") for _ in range(200)]
    shifted = [make_window(w.samples * 2.0 + 3.0, origin="virtual") for w in base]
    dmap = fit_window_map(shifted, base)
    mapped = apply_window_map(dmap, shifted)
    pooled_real = np.concatenate([w.samples for w in base]).ravel()
    pooled_mapped = np.concatenate([w.samples for w in mapped]).ravel()
    np.testing.assert_allclose(np.sort(pooled_mapped), np.sort(pooled_real), atol=1e-6)


# ------------------------------------------------------------- LOSO

def build_har_dataset(subjects=4, virtual_gain=1.0, virtual_offset=0.0,
                      duration_s=30.0, seed=0):
    """Real + virtual windows for an easily separable 3-class task."""
    windows = []
    amps = {"still": 0.05, "walk": 1.0, "wave": 3.0}
    for si in range(subjects):
        for label, amp in amps.items():
            base = make_stream(duration_s, label=label, subject=f"s{si}",
                               origin="real", seed=seed + si * 10 + hash(label) % 7,
                               amp=amp * (1 + 0.05 * si))
            windows.extend(window_slice(base))
            virt = IMUStream(rate=base.rate,
                             accel=base.accel * virtual_gain + virtual_offset,
                             gyro=base.gyro * virtual_gain + virtual_offset,
                             mag=base.mag.copy(), placement=base.placement,
                             label=label, subject=base.subject, origin="virtual")
            windows.extend(window_slice(virt))
    return windows


SMALL_GRID = GridSpec(trees=(10,), min_leaf=(1, 5))


def test_loso_r2r_high_f1_on_separable():
    windows = build_har_dataset(subjects=4)
    report = evaluate_loso(windows, "R2R", grid=SMALL_GRID, options=LosoOptions(seed=1))
    assert report.mean_f1 > 0.95
    assert len(report.per_fold_f1) == 4
    assert report.wilson_low <= report.n_correct / report.n_test_windows <= report.wilson_high


def test_loso_requires_three_subjects():
    windows = build_har_dataset(subjects=2)
    with pytest.raises(ValueError):
        evaluate_loso(windows, "R2R", grid=SMALL_GRID)


def test_loso_rejects_unknown_protocol():
    windows = build_har_dataset(subjects=3)
    with pytest.raises(ValueError):
        evaluate_loso(windows, "X2Y", grid=SMALL_GRID)


def test_loso_v2r_mapping_recovers_shifted_domain():
    windows = build_har_dataset(subjects=4, virtual_gain=2.5, virtual_offset=3.0)
    no_map = evaluate_loso(windows, "V2R", grid=SMALL_GRID,
                           options=LosoOptions(seed=2, map_budget_s=None))
    with_map = evaluate_loso(windows, "V2R", grid=SMALL_GRID,
                             options=LosoOptions(seed=2, map_budget_s=20.0))
    assert with_map.mean_f1 > no_map.mean_f1


def test_loso_mix2r_runs_and_reports():
    windows = build_har_dataset(subjects=4, virtual_gain=1.2, virtual_offset=0.5)
    report = evaluate_loso(windows, "Mix2R", grid=SMALL_GRID,
                           options=LosoOptions(seed=3, map_budget_s=20.0,
                                               real_budget_s=10.0))
    assert 0.0 <= report.mean_f1 <= 1.0
    assert report.confusion.sum() == report.n_test_windows


def test_loso_deterministic():
    windows = build_har_dataset(subjects=3)
    a = evaluate_loso(windows, "R2R", grid=SMALL_GRID, options=LosoOptions(seed=7))
    b = evaluate_loso(windows, "R2R", grid=SMALL_GRID, options=LosoOptions(seed=7))
    assert a.to_dict() == b.to_dict()


def test_loso_report_structure():
    windows = build_har_dataset(subjects=3)
    report = evaluate_loso(windows, "R2R", grid=SMALL_GRID, options=LosoOptions(seed=0))
    d = report.to_dict()
    assert d["protocol"] == "R2R"
    assert set(d["classes"]) == {"still", "walk", "wave"}
    assert len(d["folds"]) == 3
    for fold in d["folds"]:
        assert fold["test_subject"] != fold["val_subject"]
