"""Activity-recognition experiment machinery.

Slices IMU streams into fixed-length windows (1 s, 50 % overlap by
default), extracts ECDF features (inverse empirical CDF at 15 equally
spaced probabilities plus the channel mean), trains Random Forest
classifiers under the R2R / V2R / Mix2R protocols with leave-one-subject-out
cross-validation, and reports macro F1 with a Wilson score interval over
window-level correctness.
"""

from __future__ import annotations

from collections import defaultdict
from dataclasses import dataclass
from typing import Sequence

import numpy as np

from . import distmap
from .forest import forest_predict, forest_train
from .imusynth import IMUStream

PROTOCOLS = ("R2R", "V2R", "Mix2R")
SENSOR_CHANNELS = ("accel.x", "accel.y", "accel.z",
                   "gyro.x", "gyro.y", "gyro.z",
                   "mag.x", "mag.y", "mag.z")


@dataclass
class Window:
    """One fixed-length slice of (possibly multi-placement) IMU data."""

    samples: np.ndarray          # (L, C)
    label: str
    subject: str
    origin: str                  # "real" | "virtual"
    channel_names: tuple[str, ...]

    def __post_init__(self):
        if self.samples.shape[1] != len(self.channel_names):
            raise ValueError("channel_names must match sample columns")


@dataclass
class GridSpec:
    """Hyperparameter lattice searched per fold."""

    trees: tuple[int, ...] = (3, 10, 25, 50)
    min_leaf: tuple[int, ...] = (1, 5, 20, 50)

    def points(self) -> list[tuple[int, int]]:
        return [(t, m) for t in self.trees for m in self.min_leaf]


@dataclass
class LosoOptions:
    seed: int = 0
    n_components: int = 15
    window_length_s: float = 1.0
    overlap: float = 0.5
    map_budget_s: float | None = None   # V2R/Mix2R: seconds of real data per class
    real_budget_s: float | None = None  # cap on real training data per class
    mix_virtual_ratio: float = 1.0      # Mix2R: virtual:real window count ratio


@dataclass
class FoldResult:
    test_subject: str
    val_subject: str
    best_n_trees: int
    best_min_leaf: int
    val_f1: float
    test_f1: float
    n_test: int
    n_correct: int


@dataclass
class EvalReport:
    protocol: str
    classes: list[str]
    per_fold_f1: list[float]
    mean_f1: float
    wilson_low: float
    wilson_high: float
    confusion: np.ndarray  # (K, K) rows = truth, cols = prediction
    n_test_windows: int
    n_correct: int
    folds: list[FoldResult]
    config: dict

    def to_dict(self) -> dict:
        return {
            "protocol": self.protocol,
            "classes": self.classes,
            "per_fold_f1": [float(v) for v in self.per_fold_f1],
            "mean_f1": float(self.mean_f1),
            "wilson_low": float(self.wilson_low),
            "wilson_high": float(self.wilson_high),
            "confusion": self.confusion.tolist(),
            "n_test_windows": int(self.n_test_windows),
            "n_correct": int(self.n_correct),
            "folds": [
                {
                    "test_subject": f.test_subject,
                    "val_subject": f.val_subject,
                    "best_n_trees": f.best_n_trees,
                    "best_min_leaf": f.best_min_leaf,
                    "val_f1": float(f.val_f1),
                    "test_f1": float(f.test_f1),
                    "n_test": f.n_test,
                    "n_correct": f.n_correct,
                }
                for f in self.folds
            ],
            "config": self.config,
        }


# --------------------------------------------------------------- windows

def window_count(duration_s: float, length_s: float = 1.0, overlap: float = 0.5) -> int:
    """Number of windows for a stream of the given duration."""
    if duration_s < length_s:
        return 0
    hop = length_s * (1.0 - overlap)
    return int(np.floor((duration_s - length_s) / hop + 1e-9)) + 1


def _window_starts(T: int, rate: float, length_s: float, overlap: float) -> tuple[int, list[int]]:
    """Window length in samples and start indices.

    A window is admitted while its continuous-time span fits the stream
    (k * hop + length <= duration), so the count formula
    floor((T_s - L_s) / (L_s (1 - overlap))) + 1 holds exactly.
    """
    if not (0.0 <= overlap < 1.0):
        raise ValueError("overlap must be in [0, 1)")
    L = int(round(rate * length_s))
    hop = length_s * (1.0 - overlap) * rate  # samples, possibly fractional
    starts = []
    k = 0
    while k * hop + L <= T + 1e-9:
        starts.append(min(int(round(k * hop)), T - L))
        k += 1
    return L, starts


def window_slice(stream: IMUStream, length_s: float = 1.0, overlap: float = 0.5) -> list[Window]:
    """Slice one stream into windows; trailing partial windows are dropped."""
    data = stream.samples()
    L, starts = _window_starts(data.shape[0], stream.rate, length_s, overlap)
    names = tuple(f"{stream.placement}.{c}" for c in SENSOR_CHANNELS)
    return [Window(samples=data[s:s + L].copy(), label=stream.label,
                   subject=stream.subject, origin=stream.origin,
                   channel_names=names)
            for s in starts]


def windows_from_streams(streams: Sequence[IMUStream], length_s: float = 1.0,
                         overlap: float = 0.5) -> list[Window]:
    """Multi-placement windows from the aligned streams of one recording.

    Streams must share rate, label, subject, and origin; channels are stacked
    in the given placement order. Lengths are trimmed to the shortest stream.
    """
    if not streams:
        return []
    first = streams[0]
    for s in streams[1:]:
        if (s.rate, s.label, s.subject, s.origin) != (first.rate, first.label,
                                                      first.subject, first.origin):
            raise ValueError("streams of one recording must share rate/label/subject/origin")
    T = min(len(s) for s in streams)
    data = np.hstack([s.samples()[:T] for s in streams])
    names = tuple(f"{s.placement}.{c}" for s in streams for c in SENSOR_CHANNELS)
    L, starts = _window_starts(T, first.rate, length_s, overlap)
    return [Window(samples=data[s:s + L].copy(), label=first.label,
                   subject=first.subject, origin=first.origin,
                   channel_names=names)
            for s in starts]


# --------------------------------------------------------------- features

def ecdf_features(window: Window, n_components: int = 15) -> np.ndarray:
    """Per channel: inverse ECDF at equally spaced probabilities, plus the mean."""
    return ecdf_features_matrix(window.samples, n_components)


def ecdf_features_matrix(samples: np.ndarray, n_components: int = 15) -> np.ndarray:
    if n_components < 1:
        raise ValueError("n_components must be >= 1")
    probs = np.arange(1, n_components + 1) / (n_components + 1)
    qs = np.quantile(samples, probs, axis=0)          # (n_components, C)
    means = samples.mean(axis=0)                      # (C,)
    return np.concatenate([qs, means[None, :]]).T.ravel()


def feature_matrix(windows: Sequence[Window], n_components: int = 15) -> np.ndarray:
    return np.stack([ecdf_features(w, n_components) for w in windows])


# --------------------------------------------------------------- metrics

def macro_f1(predictions, truth, classes: Sequence[str]) -> float:
    """Unweighted mean over classes of per-class F1; classes without truth
    instances are skipped."""
    predictions = np.asarray(predictions)
    truth = np.asarray(truth)
    scores = []
    for c in classes:
        tp = np.sum((predictions == c) & (truth == c))
        fp = np.sum((predictions == c) & (truth != c))
        fn = np.sum((predictions != c) & (truth == c))
        if tp + fn == 0:
            continue  # no truth instances of this class
        denom = 2 * tp + fp + fn
        scores.append(2 * tp / denom if denom > 0 else 0.0)
    return float(np.mean(scores)) if scores else 0.0


def confusion_matrix(predictions, truth, classes: Sequence[str]) -> np.ndarray:
    index = {c: i for i, c in enumerate(classes)}
    M = np.zeros((len(classes), len(classes)), dtype=np.int64)
    for p, t in zip(predictions, truth):
        M[index[t], index[p]] += 1
    return M


def wilson_interval(successes: int, n: int, z: float = 1.96) -> tuple[float, float]:
    """Wilson score interval for a binomial proportion."""
    if n <= 0:
        raise ValueError("n must be positive")
    if not (0 <= successes <= n):
        raise ValueError("successes must be in [0, n]")
    phat = successes / n
    denom = 1.0 + z**2 / n
    center = (phat + z**2 / (2 * n)) / denom
    half = z * np.sqrt(phat * (1 - phat) / n + z**2 / (4 * n**2)) / denom
    # the interval endpoints are exactly 0/1 at the boundary counts
    low = 0.0 if successes == 0 else max(0.0, center - half)
    high = 1.0 if successes == n else min(1.0, center + half)
    return low, high


# --------------------------------------------------------------- mixing

def windows_for_seconds(seconds: float, length_s: float = 1.0, overlap: float = 0.5) -> int:
    """Window count corresponding to a per-class data budget in seconds."""
    return window_count(seconds, length_s, overlap)


def _subsample_per_class(windows: Sequence[Window], per_class: int | None,
                         rng: np.random.Generator) -> list[Window]:
    if per_class is None:
        return list(windows)
    by_class: dict[str, list[Window]] = defaultdict(list)
    for w in windows:
        by_class[w.label].append(w)
    shortfalls = {c: len(ws) for c, ws in by_class.items() if len(ws) < per_class}
    if shortfalls:
        raise ValueError(f"insufficient windows per class (need {per_class}): {shortfalls}")
    out = []
    for c in sorted(by_class):
        ws = by_class[c]
        pick = rng.choice(len(ws), size=per_class, replace=False)
        out.extend(ws[i] for i in sorted(pick))
    return out


def mix_datasets(real: Sequence[Window], virtual: Sequence[Window],
                 real_per_class: int | None, virtual_per_class: int | None,
                 seed: int) -> list[Window]:
    """Seeded per-class subsample of real and virtual windows, concatenated.

    `None` keeps all windows on that side; pass 0 virtual windows for a
    real-only (R2R-style) subset. Raises listing per-class shortfalls when a
    requested amount is unavailable.
    """
    rng = np.random.default_rng(seed)
    out = _subsample_per_class(real, real_per_class, rng)
    if virtual_per_class == 0:
        return out
    out = out + _subsample_per_class(virtual, virtual_per_class, rng)
    return out


# --------------------------------------------------------------- mapping helpers

def pool_channel_samples(windows: Sequence[Window]) -> dict[str, np.ndarray]:
    """Per-channel concatenation of all window samples."""
    if not windows:
        raise ValueError("no windows to pool")
    names = windows[0].channel_names
    for w in windows:
        if w.channel_names != names:
            raise ValueError("windows have inconsistent channel layouts")
    data = np.concatenate([w.samples for w in windows], axis=0)
    return {name: data[:, i] for i, name in enumerate(names)}


def fit_window_map(virtual: Sequence[Window], real: Sequence[Window]) -> distmap.DistributionMap:
    """Distribution map from pooled virtual samples to pooled real samples."""
    return distmap.fit_map(pool_channel_samples(virtual), pool_channel_samples(real))


def apply_window_map(dmap: distmap.DistributionMap, windows: Sequence[Window]) -> list[Window]:
    """Map every channel of every window onto the target distribution."""
    if not windows:
        return []
    names = windows[0].channel_names
    data = np.concatenate([w.samples for w in windows], axis=0)
    mapped = np.empty_like(data)
    for i, name in enumerate(names):
        mapped[:, i] = distmap.apply_map(dmap, data[:, i], name)
    out = []
    pos = 0
    for w in windows:
        L = w.samples.shape[0]
        out.append(Window(samples=mapped[pos:pos + L], label=w.label, subject=w.subject,
                          origin=w.origin, channel_names=w.channel_names))
        pos += L
    return out


# --------------------------------------------------------------- LOSO evaluation

def _fold_seed(base: int, fold: int, grid_index: int) -> int:
    return (base * 1_000_003 + fold * 7_919 + grid_index * 104_729) % (2**31 - 1)


def evaluate_loso(windows: Sequence[Window], protocol: str,
                  grid: GridSpec | None = None,
                  options: LosoOptions | None = None) -> EvalReport:
    """Leave-one-subject-out evaluation under R2R, V2R, or Mix2R.

    Per fold, one subject is held out for testing (always on real data), the
    cyclically next subject validates the hyperparameter grid, and the rest
    train. For V2R/Mix2R the distribution map is fitted only on real data of
    the training subjects, within the per-class map budget.
    """
    if protocol not in PROTOCOLS:
        raise ValueError(f"unknown protocol {protocol!r}")
    grid = grid or GridSpec()
    opt = options or LosoOptions()

    real = [w for w in windows if w.origin == "real"]
    virtual = [w for w in windows if w.origin == "virtual"]
    if not real:
        raise ValueError("no real windows: testing always requires real data")
    if protocol in ("V2R", "Mix2R") and not virtual:
        raise ValueError(f"{protocol} requires virtual windows")
    if opt.map_budget_s is not None and opt.map_budget_s <= 0:
        raise ValueError("map_budget_s must be positive (or None to disable mapping)")

    subjects = sorted({w.subject for w in real})
    if len(subjects) < 3:
        raise ValueError("need at least 3 subjects for leave-one-subject-out")
    classes = sorted({w.label for w in real})

    real_by_subj: dict[str, list[Window]] = defaultdict(list)
    for w in real:
        real_by_subj[w.subject].append(w)
    virt_by_subj: dict[str, list[Window]] = defaultdict(list)
    for w in virtual:
        virt_by_subj[w.subject].append(w)

    folds: list[FoldResult] = []
    confusion = np.zeros((len(classes), len(classes)), dtype=np.int64)
    total_n = 0
    total_correct = 0

    for fold_idx, test_subject in enumerate(subjects):
        val_subject = subjects[(fold_idx + 1) % len(subjects)]
        if val_subject == test_subject:
            raise ValueError("need at least 2 distinct subjects per fold")
        train_subjects = [s for s in subjects if s not in (test_subject, val_subject)]

        train_windows = _fold_training_set(protocol, train_subjects, real_by_subj,
                                           virt_by_subj, opt, fold_idx, test_subject)
        val_windows = real_by_subj[val_subject]
        test_windows = real_by_subj[test_subject]

        # provenance guard: the test subject must never reach training or mapping
        for w in train_windows:
            if w.subject == test_subject:
                raise RuntimeError("test-subject window leaked into training")

        X_train = feature_matrix(train_windows, opt.n_components)
        y_train = np.array([w.label for w in train_windows])
        X_val = feature_matrix(val_windows, opt.n_components)
        y_val = np.array([w.label for w in val_windows])
        X_test = feature_matrix(test_windows, opt.n_components)
        y_test = np.array([w.label for w in test_windows])

        best = None
        for gi, (n_trees, min_leaf) in enumerate(grid.points()):
            model = forest_train(X_train, y_train, n_trees, min_leaf,
                                 seed=_fold_seed(opt.seed, fold_idx, gi))
            pred_val, _ = forest_predict(model, X_val)
            f1 = macro_f1(pred_val, y_val, classes)
            if best is None or f1 > best[0]:
                best = (f1, n_trees, min_leaf, model)
        val_f1, n_trees, min_leaf, model = best

        pred_test, _ = forest_predict(model, X_test)
        test_f1 = macro_f1(pred_test, y_test, classes)
        confusion += confusion_matrix(pred_test, y_test, classes)
        n_correct = int(np.sum(pred_test == y_test))
        total_n += len(y_test)
        total_correct += n_correct
        folds.append(FoldResult(test_subject=test_subject, val_subject=val_subject,
                                best_n_trees=n_trees, best_min_leaf=min_leaf,
                                val_f1=val_f1, test_f1=test_f1,
                                n_test=len(y_test), n_correct=n_correct))

    low, high = wilson_interval(total_correct, total_n)
    per_fold = [f.test_f1 for f in folds]
    return EvalReport(
        protocol=protocol,
        classes=classes,
        per_fold_f1=per_fold,
        mean_f1=float(np.mean(per_fold)),
        wilson_low=low,
        wilson_high=high,
        confusion=confusion,
        n_test_windows=total_n,
        n_correct=total_correct,
        folds=folds,
        config={
            "protocol": protocol,
            "grid_trees": list(grid.trees),
            "grid_min_leaf": list(grid.min_leaf),
            "seed": opt.seed,
            "n_components": opt.n_components,
            "window_length_s": opt.window_length_s,
            "overlap": opt.overlap,
            "map_budget_s": opt.map_budget_s,
            "real_budget_s": opt.real_budget_s,
            "mix_virtual_ratio": opt.mix_virtual_ratio,
        },
    )


def _fold_training_set(protocol: str, train_subjects: list[str],
                       real_by_subj: dict[str, list[Window]],
                       virt_by_subj: dict[str, list[Window]],
                       opt: LosoOptions, fold_idx: int, test_subject: str) -> list[Window]:
    train_real: list[Window] = []
    for s in train_subjects:
        train_real.extend(real_by_subj[s])
    train_virtual: list[Window] = []
    for s in train_subjects:
        train_virtual.extend(virt_by_subj.get(s, []))

    rng = np.random.default_rng(_fold_seed(opt.seed, fold_idx, 9999))
    real_cap = (windows_for_seconds(opt.real_budget_s, opt.window_length_s, opt.overlap)
                if opt.real_budget_s is not None else None)

    if protocol == "R2R":
        return _subsample_per_class(train_real, real_cap, rng)

    # V2R / Mix2R: map virtual onto the training subjects' real distribution
    if opt.map_budget_s is not None:
        budget = windows_for_seconds(opt.map_budget_s, opt.window_length_s, opt.overlap)
        fit_real = _subsample_per_class(train_real, budget, rng)
        for w in fit_real:
            if w.subject == test_subject:
                raise RuntimeError("test-subject window leaked into the distribution map")
        dmap = fit_window_map(train_virtual, fit_real)
        train_virtual = apply_window_map(dmap, train_virtual)

    if protocol == "V2R":
        return train_virtual

    # Mix2R
    capped_real = _subsample_per_class(train_real, real_cap, rng)
    per_class_real = real_cap if real_cap is not None else _min_class_count(capped_real)
    virt_cap = int(round(opt.mix_virtual_ratio * per_class_real))
    virt_sub = _subsample_per_class(train_virtual, virt_cap, rng)
    return capped_real + virt_sub


def _min_class_count(windows: Sequence[Window]) -> int:
    counts: dict[str, int] = defaultdict(int)
    for w in windows:
        counts[w.label] += 1
    return min(counts.values()) if counts else 0
