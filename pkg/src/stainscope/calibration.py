"""ROC analysis, threshold selection, classification metrics and k-fold evaluation.

Conventions used throughout the package: a prediction is positive when its
score is greater than or equal to the threshold, and ROC thresholds sweep
the distinct scores in descending order with a leading +inf sentinel so the
curve always starts at (0, 0) and ends at (1, 1).
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np
from scipy.stats import norm

from .errors import (
    DegenerateFoldError,
    DegenerateLabelsError,
    InvalidInputError,
    StratificationError,
)


@dataclass
class RocCurve:
    """Operating points sorted by threshold descending.

    ``thresholds[i]`` classifies score >= thresholds[i] as positive and
    yields the operating point ``(fpr[i], tpr[i])``.  ``thresholds[0]`` is a
    +inf sentinel for (0, 0); the final threshold is the lowest distinct
    score, where every sample is predicted positive, giving (1, 1).
    """

    thresholds: np.ndarray
    fpr: np.ndarray
    tpr: np.ndarray
    auc: float

    @property
    def points(self) -> list[tuple[float, float, float]]:
        return list(zip(self.thresholds.tolist(), self.fpr.tolist(), self.tpr.tolist()))


def _as_score_label_arrays(scores, labels):
    scores = np.asarray(scores, dtype=np.float64)
    labels = np.asarray(labels, dtype=bool)
    if scores.ndim != 1 or labels.shape != scores.shape:
        raise InvalidInputError("scores and labels must be equal-length 1-d sequences")
    if not np.all(np.isfinite(scores)):
        raise InvalidInputError("scores must be finite")
    return scores, labels


def roc_curve(scores, labels) -> RocCurve:
    """Empirical ROC curve of ``scores`` against boolean ``labels``.

    One operating point per distinct score plus the +inf sentinel.  The AUC
    is the trapezoidal integral, which equals the Mann-Whitney statistic
    with ties counted one half.

    Raises :class:`DegenerateLabelsError` unless both classes are present.
    """
    scores, labels = _as_score_label_arrays(scores, labels)
    n_pos = int(labels.sum())
    n_neg = labels.size - n_pos
    if n_pos == 0 or n_neg == 0:
        raise DegenerateLabelsError("ROC needs at least one positive and one negative")

    order = np.argsort(-scores, kind="stable")
    s = scores[order]
    y = labels[order]
    # Last index of every run of equal scores.
    last = np.nonzero(np.append(s[:-1] != s[1:], True))[0]
    cum_tp = np.cumsum(y)
    cum_fp = np.cumsum(~y)
    thresholds = np.concatenate([[np.inf], s[last]])
    tpr = np.concatenate([[0.0], cum_tp[last] / n_pos])
    fpr = np.concatenate([[0.0], cum_fp[last] / n_neg])
    auc = float(np.trapezoid(tpr, fpr))
    return RocCurve(thresholds=thresholds, fpr=fpr, tpr=tpr, auc=auc)


def optimal_cutpoint(curve: RocCurve) -> float:
    """Threshold of the ROC point closest to the ideal corner (0, 1).

    Distance is Euclidean; ties prefer the higher tpr and then the lower
    threshold.  The returned value is placed in the middle of the interval
    of thresholds realizing the chosen point: halfway between the point's
    score and the next lower distinct score (for a perfectly separating
    curve this is the midpoint between the lowest positive score and the
    highest negative score).  At the extremes there is no interval, so the
    lowest score itself (last point) or max score + 1 (sentinel) is used.
    """
    dist = np.hypot(curve.fpr, 1.0 - curve.tpr)
    best = 0
    for i in range(1, curve.thresholds.size):
        key = (dist[i], -curve.tpr[i], curve.thresholds[i])
        if key < (dist[best], -curve.tpr[best], curve.thresholds[best]):
            best = i
    if best == 0:
        return float(curve.thresholds[1] + 1.0)
    if best == curve.thresholds.size - 1:
        return float(curve.thresholds[best])
    return float((curve.thresholds[best] + curve.thresholds[best + 1]) / 2.0)


@dataclass
class ConfusionMatrix:
    """Counts with rows = actual class, columns = predicted class."""

    tp: int
    fn: int
    fp: int
    tn: int

    @property
    def total(self) -> int:
        return self.tp + self.fn + self.fp + self.tn

    @property
    def accuracy(self) -> float:
        return (self.tp + self.tn) / self.total

    @property
    def sensitivity(self) -> float:
        return self.tp / (self.tp + self.fn)

    @property
    def specificity(self) -> float:
        return self.tn / (self.tn + self.fp)

    def add(self, other: "ConfusionMatrix") -> "ConfusionMatrix":
        return ConfusionMatrix(
            self.tp + other.tp, self.fn + other.fn, self.fp + other.fp, self.tn + other.tn
        )


@dataclass
class ClassMetrics:
    precision: float
    recall: float
    f1: float


@dataclass
class MetricsReport:
    per_class: dict[str, ClassMetrics]
    accuracy: float
    degenerate: bool


def _prf(tp: int, fp: int, fn: int) -> tuple[ClassMetrics, bool]:
    # Zero-division metrics are reported as 0 and flagged.
    degenerate = False
    if tp + fp == 0:
        precision, degenerate = 0.0, True
    else:
        precision = tp / (tp + fp)
    if tp + fn == 0:
        recall, degenerate = 0.0, True
    else:
        recall = tp / (tp + fn)
    if precision + recall == 0.0:
        f1, degenerate = 0.0, True
    else:
        f1 = 2.0 * precision * recall / (precision + recall)
    return ClassMetrics(precision, recall, f1), degenerate


def confusion_and_metrics(preds, labels) -> tuple[ConfusionMatrix, MetricsReport]:
    """Confusion matrix plus per-class precision/recall/F1 and accuracy.

    Metrics are computed for both classes (the negative class treats
    "negative" as the detection target, so its recall is the specificity).
    """
    preds = np.asarray(preds, dtype=bool)
    labels = np.asarray(labels, dtype=bool)
    if preds.shape != labels.shape or preds.ndim != 1:
        raise InvalidInputError("preds and labels must be equal-length 1-d sequences")
    if preds.size == 0:
        raise InvalidInputError("cannot compute metrics of an empty prediction list")
    cm = ConfusionMatrix(
        tp=int(np.count_nonzero(preds & labels)),
        fn=int(np.count_nonzero(~preds & labels)),
        fp=int(np.count_nonzero(preds & ~labels)),
        tn=int(np.count_nonzero(~preds & ~labels)),
    )
    return cm, metrics_from_confusion(cm)


def metrics_from_confusion(cm: ConfusionMatrix) -> MetricsReport:
    pos, deg_p = _prf(cm.tp, cm.fp, cm.fn)
    neg, deg_n = _prf(cm.tn, cm.fn, cm.fp)
    return MetricsReport(
        per_class={"positive": pos, "negative": neg},
        accuracy=cm.accuracy,
        degenerate=deg_p or deg_n,
    )


def stratified_kfold(patient_ids, labels, k: int, seed: int) -> list[list[str]]:
    """Split patients into ``k`` folds with per-class counts differing by <= 1.

    Patients are sorted by id within each class, shuffled with the seed and
    dealt round-robin, so the same inputs always produce the same folds.
    """
    ids = [str(p) for p in patient_ids]
    labels = np.asarray(labels, dtype=bool)
    if len(ids) != labels.size:
        raise InvalidInputError("patient_ids and labels must have equal length")
    if len(set(ids)) != len(ids):
        raise InvalidInputError("patient ids must be unique")
    if k < 2:
        raise InvalidInputError("k must be >= 2")
    rng = np.random.default_rng(seed)
    folds: list[list[str]] = [[] for _ in range(k)]
    for cls in (True, False):
        members = sorted(pid for pid, lab in zip(ids, labels) if lab == cls)
        if len(members) < k:
            name = "positive" if cls else "negative"
            raise StratificationError(
                f"class {name} has {len(members)} patients, fewer than k={k}"
            )
        order = rng.permutation(len(members))
        for i, j in enumerate(order):
            folds[i % k].append(members[j])
    return folds


@dataclass
class PatientRecord:
    """Everything crossval needs about one patient (= one slide here).

    ``patch_scores`` are the detector's scores for all border patches of the
    patient's slide; the annotated arrays hold scores and ground truth for
    the labeled calibration patches.
    """

    patient_id: str
    positive: bool
    patch_scores: np.ndarray
    annotated_scores: np.ndarray
    annotated_labels: np.ndarray


@dataclass
class FoldResult:
    fold: int
    t_patch: float
    t_slide: float
    auc: float
    confusion: ConfusionMatrix
    metrics: MetricsReport
    roc: RocCurve


@dataclass
class FoldSummary:
    """Aggregated k-fold results for one detector."""

    detector: str
    k: int
    folds: list[FoldResult]
    metric_stats: dict[str, dict[str, tuple[float, float]]]  # class -> metric -> (mean, std)
    accuracy_mean: float
    accuracy_std: float
    auc_mean: float
    auc_std: float
    pooled_confusion: ConfusionMatrix
    averaged_roc: "RocCurve" = field(repr=False)


def slide_probability_from_scores(patch_scores: np.ndarray, t_patch: float) -> float:
    """Percentage of patch scores at or above the patch threshold."""
    patch_scores = np.asarray(patch_scores)
    if patch_scores.size == 0:
        raise InvalidInputError("patient has no patch scores")
    return 100.0 * float(np.count_nonzero(patch_scores >= t_patch)) / patch_scores.size


def _mean_std(values) -> tuple[float, float]:
    arr = np.asarray(values, dtype=np.float64)
    return float(arr.mean()), float(arr.std())


def crossval(records: list[PatientRecord], k: int, seed: int, detector: str = "detector") -> FoldSummary:
    """Stratified k-fold evaluation of slide diagnosis with per-fold calibration.

    For each fold: the patch threshold is fit by ROC on the training folds'
    annotated patches, slide probabilities are derived from it, the slide
    threshold is fit by ROC on the training folds' slide probabilities, and
    the held-out patients are then diagnosed and scored.  ``detector`` is a
    label carried into reports; the scores themselves come precomputed on
    the records.
    """
    if not records:
        raise InvalidInputError("crossval needs at least one patient record")
    by_id = {r.patient_id: r for r in records}
    if len(by_id) != len(records):
        raise InvalidInputError("patient ids must be unique")
    folds = stratified_kfold(
        [r.patient_id for r in records], [r.positive for r in records], k, seed
    )

    results: list[FoldResult] = []
    pooled = ConfusionMatrix(0, 0, 0, 0)
    for fold_idx, test_ids in enumerate(folds):
        test = [by_id[i] for i in sorted(test_ids)]
        train = [r for r in records if r.patient_id not in set(test_ids)]
        if len({r.positive for r in test}) < 2 or len({r.positive for r in train}) < 2:
            raise DegenerateFoldError(f"fold {fold_idx} lacks one of the classes")

        ann_scores = np.concatenate([r.annotated_scores for r in train])
        ann_labels = np.concatenate([r.annotated_labels for r in train])
        t_patch = optimal_cutpoint(roc_curve(ann_scores, ann_labels))

        train_probs = [slide_probability_from_scores(r.patch_scores, t_patch) for r in train]
        train_labels = [r.positive for r in train]
        t_slide = optimal_cutpoint(roc_curve(train_probs, train_labels))

        test_probs = np.array(
            [slide_probability_from_scores(r.patch_scores, t_patch) for r in test]
        )
        test_labels = np.array([r.positive for r in test])
        preds = test_probs >= t_slide
        cm, metrics = confusion_and_metrics(preds, test_labels)
        roc = roc_curve(test_probs, test_labels)
        results.append(FoldResult(fold_idx, t_patch, t_slide, roc.auc, cm, metrics, roc))
        pooled = pooled.add(cm)

    metric_stats: dict[str, dict[str, tuple[float, float]]] = {}
    for cls in ("positive", "negative"):
        metric_stats[cls] = {}
        for name in ("precision", "recall", "f1"):
            vals = [getattr(r.metrics.per_class[cls], name) for r in results]
            metric_stats[cls][name] = _mean_std(vals)
    acc_mean, acc_std = _mean_std([r.metrics.accuracy for r in results])
    auc_mean, auc_std = _mean_std([r.auc for r in results])

    return FoldSummary(
        detector=detector,
        k=k,
        folds=results,
        metric_stats=metric_stats,
        accuracy_mean=acc_mean,
        accuracy_std=acc_std,
        auc_mean=auc_mean,
        auc_std=auc_std,
        pooled_confusion=pooled,
        averaged_roc=average_roc([r.roc for r in results]),
    )


def average_roc(curves: list[RocCurve], n_grid: int = 101) -> RocCurve:
    """Vertically average ROC curves on a fixed grid of fpr values.

    Duplicate fpr values within a curve collapse to their maximum tpr before
    linear interpolation.  The result has no meaningful thresholds (NaN) and
    need not start at (0, 0): a perfect curve contributes tpr 1 at fpr 0.
    """
    if not curves:
        raise InvalidInputError("average_roc needs at least one curve")
    grid = np.linspace(0.0, 1.0, n_grid)
    acc = np.zeros(n_grid)
    for curve in curves:
        # np.maximum.reduceat over runs of equal fpr (fpr is non-decreasing).
        fpr, tpr = curve.fpr, curve.tpr
        starts = np.nonzero(np.append(True, fpr[1:] != fpr[:-1]))[0]
        fpr_u = fpr[starts]
        tpr_u = np.maximum.reduceat(tpr, starts)
        acc += np.interp(grid, fpr_u, tpr_u)
    tpr_avg = acc / len(curves)
    auc = float(np.trapezoid(tpr_avg, grid))
    return RocCurve(
        thresholds=np.full(n_grid, np.nan), fpr=grid, tpr=tpr_avg, auc=auc
    )


def hanley_mcneil_variance(auc: float, n_pos: int, n_neg: int) -> float:
    """Hanley-McNeil (1982) variance of an empirical AUC."""
    q1 = auc / (2.0 - auc)
    q2 = 2.0 * auc * auc / (1.0 + auc)
    a2 = auc * auc
    return (
        auc * (1.0 - auc) + (n_pos - 1) * (q1 - a2) + (n_neg - 1) * (q2 - a2)
    ) / (n_pos * n_neg)


def roc_sample_size(
    auc_null: float,
    auc_alt: float,
    power: float,
    alpha: float,
    pos_neg_ratio: float = 1.0,
) -> int:
    """Smallest total sample size to detect an AUC above ``auc_null``.

    One-sided normal-approximation test: the positive count grows until

        z_{1-alpha} * SE(auc_null) + z_{power} * SE(auc_alt) <= auc_alt - auc_null

    with both standard errors from :func:`hanley_mcneil_variance` at the
    same class sizes and ``n_neg = ceil(n_pos / pos_neg_ratio)``.  Returns
    ``n_pos + n_neg``.
    """
    if not 0.5 <= auc_null < 1.0 or not auc_null < auc_alt < 1.0:
        raise InvalidInputError("need 0.5 <= auc_null < auc_alt < 1")
    if not 0.0 < power < 1.0 or not 0.0 < alpha < 1.0:
        raise InvalidInputError("power and alpha must lie in (0, 1)")
    if pos_neg_ratio <= 0.0:
        raise InvalidInputError("pos_neg_ratio must be positive")
    z_alpha = float(norm.ppf(1.0 - alpha))
    z_power = float(norm.ppf(power))
    delta = auc_alt - auc_null
    n_pos = 2
    while True:
        n_neg = max(1, math.ceil(n_pos / pos_neg_ratio))
        se0 = math.sqrt(hanley_mcneil_variance(auc_null, n_pos, n_neg))
        se1 = math.sqrt(hanley_mcneil_variance(auc_alt, n_pos, n_neg))
        if z_alpha * se0 + z_power * se1 <= delta:
            return n_pos + n_neg
        n_pos += 1
        if n_pos > 10_000_000:
            raise InvalidInputError("sample size search did not converge")
