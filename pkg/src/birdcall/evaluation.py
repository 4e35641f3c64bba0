"""Confusion-matrix bookkeeping and the per-class metric suite.

Counts are one-vs-rest: each class in turn is the positive while all
others pool into the negative. The report carries per-class rows plus
two summary rows, because the two natural averaging conventions answer
different questions: the macro row is the unweighted mean of per-class
values, while the micro row pools the one-vs-rest counts (which makes
accuracy, precision, recall, and F-scores collapse to the plain
fraction of correctly classified records).

Zero-denominator metrics (for example precision when nothing was
predicted positive) report 0 rather than NaN so summary rows stay
defined on degenerate inputs; undefined per-class AUC (a class absent
from the truth) also reports 0.
"""

from __future__ import annotations

import io
from dataclasses import dataclass, replace
from typing import Sequence

import numpy as np

from .network import ModelParams, predict_record
from .windowing import SegmentTensor

REPORT_COLUMNS = ("Accuracy", "Specificity", "F1", "FNR", "AUC", "Precision")
EXTRA_COLUMNS = ("Recall", "F2")


class UndefinedAucError(ValueError):
    """AUC is undefined when the truth contains only one class."""


@dataclass(frozen=True)
class ConfusionCounts:
    """One-vs-rest counts per class; tp+tn+fp+fn equals n for each class."""

    tp: np.ndarray
    tn: np.ndarray
    fp: np.ndarray
    fn: np.ndarray
    n: int

    @property
    def class_count(self) -> int:
        return self.tp.size


def confusion_counts(
    true_labels: Sequence[int], predicted_labels: Sequence[int], class_count: int
) -> ConfusionCounts:
    """Tally one-vs-rest counts from paired label sequences."""
    true = np.asarray(true_labels, dtype=np.intp)
    pred = np.asarray(predicted_labels, dtype=np.intp)
    if true.shape != pred.shape:
        raise ValueError(f"{true.size} true labels vs {pred.size} predictions")
    if true.size and (
        true.min() < 0 or true.max() >= class_count or pred.min() < 0 or pred.max() >= class_count
    ):
        raise ValueError(f"labels must lie in [0, {class_count})")

    matrix = np.zeros((class_count, class_count), dtype=np.int64)
    np.add.at(matrix, (true, pred), 1)
    tp = np.diag(matrix).copy()
    fp = matrix.sum(axis=0) - tp
    fn = matrix.sum(axis=1) - tp
    n = true.size
    tn = n - tp - fp - fn
    return ConfusionCounts(tp=tp, tn=tn, fp=fp, fn=fn, n=n)


def _ratio(num: float, den: float) -> float:
    return num / den if den > 0 else 0.0


def f_beta(precision: float, recall: float, beta: float) -> float:
    den = beta * beta * precision + recall
    return _ratio((1.0 + beta * beta) * precision * recall, den)


@dataclass(frozen=True)
class ClassMetrics:
    label: str
    accuracy: float
    specificity: float
    f1: float
    fnr: float
    auc: float
    precision: float
    recall: float
    f2: float


def per_class_metrics(
    counts: ConfusionCounts, labels: Sequence[str] | None = None
) -> list[ClassMetrics]:
    """Derive the metric row for every class (AUC filled in later)."""
    if labels is None:
        labels = [str(c) for c in range(counts.class_count)]
    rows = []
    for c in range(counts.class_count):
        tp, tn, fp, fn = (int(counts.tp[c]), int(counts.tn[c]), int(counts.fp[c]), int(counts.fn[c]))
        precision = _ratio(tp, tp + fp)
        recall = _ratio(tp, tp + fn)
        rows.append(
            ClassMetrics(
                label=labels[c],
                accuracy=_ratio(tp + tn, counts.n),
                specificity=_ratio(tn, tn + fp),
                f1=f_beta(precision, recall, 1.0),
                fnr=_ratio(fn, fn + tp),
                auc=0.0,
                precision=precision,
                recall=recall,
                f2=f_beta(precision, recall, 2.0),
            )
        )
    return rows


def auc_roc(scores: Sequence[float], truth: Sequence[bool]) -> float:
    """Trapezoidal area under the ROC curve, with tied scores averaged.

    Equivalent to the normalized Mann-Whitney U statistic.
    """
    scores = np.asarray(scores, dtype=np.float64)
    truth = np.asarray(truth, dtype=bool)
    if scores.shape != truth.shape:
        raise ValueError("scores and truth must have equal length")
    n_pos = int(truth.sum())
    n_neg = truth.size - n_pos
    if n_pos == 0 or n_neg == 0:
        raise UndefinedAucError("need both positive and negative examples")

    order = np.argsort(-scores, kind="stable")
    sorted_scores = scores[order]
    sorted_truth = truth[order]
    # one ROC vertex per distinct threshold keeps ties on a straight chord
    boundaries = np.flatnonzero(np.diff(sorted_scores))
    idx = np.r_[boundaries, scores.size - 1]
    tpr = np.r_[0.0, np.cumsum(sorted_truth)[idx] / n_pos]
    fpr = np.r_[0.0, np.cumsum(~sorted_truth)[idx] / n_neg]
    return float(np.trapezoid(tpr, fpr))


def _mean_metrics(rows: Sequence[ClassMetrics], label: str) -> ClassMetrics:
    def mean(attr: str) -> float:
        return float(np.mean([getattr(r, attr) for r in rows]))

    return ClassMetrics(
        label=label,
        accuracy=mean("accuracy"),
        specificity=mean("specificity"),
        f1=mean("f1"),
        fnr=mean("fnr"),
        auc=mean("auc"),
        precision=mean("precision"),
        recall=mean("recall"),
        f2=mean("f2"),
    )


def _micro_metrics(
    counts: ConfusionCounts, scores: np.ndarray, truth_onehot: np.ndarray
) -> ClassMetrics:
    tp = int(counts.tp.sum())
    tn = int(counts.tn.sum())
    fp = int(counts.fp.sum())
    fn = int(counts.fn.sum())
    precision = _ratio(tp, tp + fp)
    recall = _ratio(tp, tp + fn)
    try:
        auc = auc_roc(scores.ravel(), truth_onehot.ravel())
    except UndefinedAucError:
        auc = 0.0
    return ClassMetrics(
        label="micro-average",
        accuracy=_ratio(tp, counts.n),  # pooled TP/N = fraction correct
        specificity=_ratio(tn, tn + fp),
        f1=f_beta(precision, recall, 1.0),
        fnr=_ratio(fn, fn + tp),
        auc=auc,
        precision=precision,
        recall=recall,
        f2=f_beta(precision, recall, 2.0),
    )


@dataclass(frozen=True)
class MetricsReport:
    per_class: tuple[ClassMetrics, ...]
    macro: ClassMetrics
    micro: ClassMetrics
    counts: ConfusionCounts

    @property
    def rows(self) -> tuple[ClassMetrics, ...]:
        return self.per_class + (self.macro, self.micro)


def evaluate(
    params: ModelParams,
    records: Sequence[SegmentTensor],
    class_names: Sequence[str] | None = None,
) -> MetricsReport:
    """Predict every record, tally counts, and fill the full report.

    Per-class AUC is one-vs-rest over the record-level averaged
    probabilities.
    """
    if not records:
        raise ValueError("cannot evaluate an empty record list")
    class_count = params.arch.class_count
    if class_names is None:
        class_names = [str(c) for c in range(class_count)]

    true = np.array([r.label for r in records], dtype=np.intp)
    probs = np.empty((len(records), class_count))
    pred = np.empty(len(records), dtype=np.intp)
    for i, record in enumerate(records):
        pred[i], probs[i] = predict_record(params, record.images)

    counts = confusion_counts(true, pred, class_count)
    rows = per_class_metrics(counts, class_names)
    filled = []
    for c, row in enumerate(rows):
        try:
            auc = auc_roc(probs[:, c], true == c)
        except UndefinedAucError:
            auc = 0.0
        filled.append(replace(row, auc=auc))

    onehot = np.zeros_like(probs, dtype=bool)
    onehot[np.arange(true.size), true] = True
    macro = _mean_metrics(filled, "macro-average")
    micro = _micro_metrics(counts, probs, onehot)
    return MetricsReport(per_class=tuple(filled), macro=macro, micro=micro, counts=counts)


_ROW_FIELDS = ("accuracy", "specificity", "f1", "fnr", "auc", "precision", "recall", "f2")


def metrics_to_csv(report: MetricsReport) -> str:
    """One row per class plus macro-average and micro-average rows."""
    buf = io.StringIO()
    buf.write("class," + ",".join(c.lower() for c in REPORT_COLUMNS + EXTRA_COLUMNS) + "\n")
    for row in report.rows:
        buf.write(row.label)
        for attr in _ROW_FIELDS:
            buf.write(f",{getattr(row, attr):.6f}")
        buf.write("\n")
    return buf.getvalue()


def format_metrics_table(report: MetricsReport) -> str:
    """Human-readable aligned table with explicit averaging labels."""
    headers = ("Class",) + REPORT_COLUMNS + EXTRA_COLUMNS
    body = [
        (row.label,) + tuple(f"{getattr(row, attr):.4f}" for attr in _ROW_FIELDS)
        for row in report.rows
    ]
    widths = [max(len(h), *(len(r[i]) for r in body)) for i, h in enumerate(headers)]
    lines = [
        "  ".join(h.ljust(widths[i]) for i, h in enumerate(headers)),
        "  ".join("-" * w for w in widths),
    ]
    for r in body:
        lines.append("  ".join(v.ljust(widths[i]) for i, v in enumerate(r)))
    lines.append("")
    lines.append(
        "macro-average: unweighted mean over classes; micro-average: pooled "
        "one-vs-rest counts. Zero-denominator metrics and undefined AUC report 0."
    )
    return "\n".join(lines) + "\n"
