"""Cross-validation report emission: CSV/JSON tables plus an SVG ROC figure.

All outputs are deterministic: no timestamps, sorted JSON keys, fixed float
formatting, and a pinned SVG hash salt so reruns are byte-identical.
"""

from __future__ import annotations

import csv
import json
from pathlib import Path

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402  (backend must be set first)

from .calibration import FoldSummary  # noqa: E402

METRIC_NAMES = ("precision", "recall", "f1")
CLASS_NAMES = ("positive", "negative")


def _fmt(x: float) -> str:
    return f"{x:.10g}"


def write_metrics_csv(path, summaries: list[FoldSummary]) -> None:
    """Per-fold per-class rows: ``detector,fold,class,metric,value``."""
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["detector", "fold", "class", "metric", "value"])
        for s in summaries:
            for r in s.folds:
                for cls in CLASS_NAMES:
                    cm = r.metrics.per_class[cls]
                    for name in METRIC_NAMES:
                        w.writerow([s.detector, r.fold, cls, name, _fmt(getattr(cm, name))])


def write_confusion_json(path, summaries: list[FoldSummary]) -> None:
    doc = {}
    for s in summaries:
        pooled = s.pooled_confusion
        doc[s.detector] = {
            "k": s.k,
            "pooled_confusion": {
                "tp": pooled.tp, "fn": pooled.fn, "fp": pooled.fp, "tn": pooled.tn,
            },
            "accuracy": {
                "mean": s.accuracy_mean,
                "std": s.accuracy_std,
                "per_fold": [r.metrics.accuracy for r in s.folds],
            },
            "auc": {
                "mean": s.auc_mean,
                "std": s.auc_std,
                "per_fold": [r.auc for r in s.folds],
            },
            "thresholds": {
                "t_patch": [r.t_patch for r in s.folds],
                "t_slide": [r.t_slide for r in s.folds],
            },
            "metrics": {
                cls: {
                    name: {"mean": s.metric_stats[cls][name][0],
                           "std": s.metric_stats[cls][name][1]}
                    for name in METRIC_NAMES
                }
                for cls in CLASS_NAMES
            },
        }
    Path(path).write_text(json.dumps(doc, sort_keys=True, indent=2) + "\n")


def write_roc_csv(path, summaries: list[FoldSummary]) -> None:
    """Averaged ROC polylines, one ``detector,fpr,tpr`` row per grid point."""
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["detector", "fpr", "tpr"])
        for s in summaries:
            for fpr, tpr in zip(s.averaged_roc.fpr, s.averaged_roc.tpr):
                w.writerow([s.detector, _fmt(fpr), _fmt(tpr)])


def _operating_point(summary: FoldSummary) -> tuple[float, float]:
    cm = summary.pooled_confusion
    fpr = cm.fp / (cm.fp + cm.tn) if cm.fp + cm.tn else 0.0
    tpr = cm.tp / (cm.tp + cm.fn) if cm.tp + cm.fn else 0.0
    return fpr, tpr


def write_roc_svg(path, summaries: list[FoldSummary]) -> None:
    """Self-contained SVG of the averaged ROC curves, operating points marked."""
    with plt.rc_context({"svg.hashsalt": "stainscope", "svg.fonttype": "path"}):
        fig, ax = plt.subplots(figsize=(5.0, 5.0))
        ax.plot([0, 1], [0, 1], linestyle=":", color="0.6", linewidth=1)
        for s in summaries:
            line, = ax.plot(
                s.averaged_roc.fpr,
                s.averaged_roc.tpr,
                label=f"{s.detector} (AUC {s.auc_mean:.3f} ± {s.auc_std:.3f})",
            )
            fpr, tpr = _operating_point(s)
            ax.plot([fpr], [tpr], marker="o", color=line.get_color(), markersize=6)
        ax.set_xlabel("false positive rate")
        ax.set_ylabel("true positive rate")
        ax.set_xlim(-0.02, 1.02)
        ax.set_ylim(-0.02, 1.02)
        ax.set_title("slide-level ROC (fold average)")
        ax.legend(loc="lower right", fontsize=8)
        fig.tight_layout()
        fig.savefig(path, format="svg", metadata={"Date": None})
        plt.close(fig)


def write_reports(out_dir, summaries: list[FoldSummary]) -> dict[str, Path]:
    """Emit all cross-validation reports into ``out_dir``; returns the paths."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    paths = {
        "metrics": out / "metrics.csv",
        "confusion": out / "confusion.json",
        "roc_points": out / "roc_points.csv",
        "roc_svg": out / "roc.svg",
    }
    write_metrics_csv(paths["metrics"], summaries)
    write_confusion_json(paths["confusion"], summaries)
    write_roc_csv(paths["roc_points"], summaries)
    write_roc_svg(paths["roc_svg"], summaries)
    return paths
