"""Evaluation report emission: JSON, aligned-text table, CSV, and figures.

Every report lands as a bundle: the full EvalReport as JSON, a short
aligned-text summary, the confusion matrix as CSV, and matplotlib figures
(confusion heatmap, per-fold F1 with the Wilson band) rendered to PNG next
to the delimited output.
"""

from __future__ import annotations

from pathlib import Path

import matplotlib

matplotlib.use("Agg")

import matplotlib.pyplot as plt
import numpy as np

from . import fileio
from .harlab import EvalReport


def write_confusion_csv(path, report: EvalReport):
    lines = ["truth\\prediction," + ",".join(report.classes)]
    for i, c in enumerate(report.classes):
        lines.append(c + "," + ",".join(str(int(v)) for v in report.confusion[i]))
    fileio.atomic_write_text(path, "\n".join(lines) + "\n")


def format_summary_table(report: EvalReport) -> str:
    rows = [
        ("protocol", report.protocol),
        ("classes", ", ".join(report.classes)),
        ("mean macro F1", f"{report.mean_f1:.4f}"),
        ("wilson 95% (accuracy)", f"[{report.wilson_low:.4f}, {report.wilson_high:.4f}]"),
        ("test windows", str(report.n_test_windows)),
        ("correct", str(report.n_correct)),
    ]
    width = max(len(k) for k, _ in rows)
    out = [f"{k:<{width}}  {v}" for k, v in rows]
    out.append("")
    out.append(f"{'fold (test subject)':<{width}}  F1      trees  min_leaf")
    for f in report.folds:
        out.append(f"{f.test_subject:<{width}}  {f.test_f1:.4f}  {f.best_n_trees:<5}  {f.best_min_leaf}")
    return "\n".join(out) + "\n"


def plot_confusion(path, report: EvalReport):
    K = len(report.classes)
    fig, ax = plt.subplots(figsize=(1.2 * K + 2.5, 1.2 * K + 2))
    M = report.confusion.astype(float)
    row_sums = M.sum(axis=1, keepdims=True)
    norm = np.divide(M, row_sums, out=np.zeros_like(M), where=row_sums > 0)
    im = ax.imshow(norm, cmap="Blues", vmin=0, vmax=1)
    for i in range(K):
        for j in range(K):
            ax.text(j, i, f"{int(M[i, j])}", ha="center", va="center",
                    color="white" if norm[i, j] > 0.5 else "black", fontsize=9)
    ax.set_xticks(range(K), report.classes, rotation=45, ha="right")
    ax.set_yticks(range(K), report.classes)
    ax.set_xlabel("prediction")
    ax.set_ylabel("truth")
    ax.set_title(f"{report.protocol}: mean macro F1 = {report.mean_f1:.3f}")
    fig.colorbar(im, ax=ax, fraction=0.046)
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)


def plot_fold_f1(path, report: EvalReport):
    fig, ax = plt.subplots(figsize=(max(4.0, 0.9 * len(report.folds) + 2), 3.4))
    xs = np.arange(len(report.folds))
    f1s = [f.test_f1 for f in report.folds]
    ax.bar(xs, f1s, color="#4878d0", width=0.6)
    ax.axhline(report.mean_f1, color="#333333", lw=1.2, label=f"mean = {report.mean_f1:.3f}")
    ax.axhspan(report.wilson_low, report.wilson_high, color="#d65f5f", alpha=0.15,
               label="Wilson 95% (accuracy)")
    ax.set_xticks(xs, [f.test_subject for f in report.folds], rotation=45, ha="right")
    ax.set_ylim(0, 1.02)
    ax.set_ylabel("macro F1")
    ax.set_xlabel("held-out subject")
    ax.set_title(f"{report.protocol} per-fold test F1")
    ax.legend(loc="lower right", fontsize=8)
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)


def write_report(report: EvalReport, out_dir, name: str | None = None) -> dict[str, str]:
    """Write the full report bundle; returns {artifact: path}."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    stem = name or report.protocol.lower()
    paths = {
        "json": out_dir / f"{stem}_report.json",
        "summary": out_dir / f"{stem}_summary.txt",
        "confusion_csv": out_dir / f"{stem}_confusion.csv",
        "confusion_png": out_dir / f"{stem}_confusion.png",
        "folds_png": out_dir / f"{stem}_fold_f1.png",
    }
    fileio.write_json(paths["json"], report.to_dict())
    fileio.atomic_write_text(paths["summary"], format_summary_table(report))
    write_confusion_csv(paths["confusion_csv"], report)
    plot_confusion(paths["confusion_png"], report)
    plot_fold_f1(paths["folds_png"], report)
    return {k: str(v) for k, v in paths.items()}


def plot_protocol_comparison(path, reports: list[EvalReport]):
    fig, ax = plt.subplots(figsize=(1.4 * len(reports) + 2.5, 3.4))
    xs = np.arange(len(reports))
    means = [r.mean_f1 for r in reports]
    ax.bar(xs, means, color=["#4878d0", "#ee854a", "#6acc64"][: len(reports)], width=0.55)
    for x, r in zip(xs, reports):
        ax.plot([x, x], [r.wilson_low, r.wilson_high], color="#333333", lw=1.5)
        ax.text(x, r.mean_f1 + 0.02, f"{r.mean_f1:.3f}", ha="center", fontsize=9)
    ax.set_xticks(xs, [r.protocol for r in reports])
    ax.set_ylim(0, 1.05)
    ax.set_ylabel("mean macro F1")
    ax.set_title("protocol comparison (bars: F1, whiskers: Wilson 95% accuracy)")
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)


def plot_mapping_histograms(path, before: np.ndarray, after: np.ndarray,
                            target: np.ndarray, channel: str):
    fig, ax = plt.subplots(figsize=(5.5, 3.2))
    bins = np.histogram_bin_edges(np.concatenate([before, after, target]), bins=60)
    ax.hist(target, bins=bins, alpha=0.45, label="real (target)", color="#444444")
    ax.hist(before, bins=bins, alpha=0.45, label="virtual (unmapped)", color="#d65f5f")
    ax.hist(after, bins=bins, alpha=0.55, label="virtual (mapped)", color="#4878d0",
            histtype="step", lw=1.6)
    ax.set_title(f"distribution mapping: {channel}")
    ax.legend(fontsize=8)
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)
