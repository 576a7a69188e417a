"""Classification metrics, one-vs-all ROC analysis and report files."""

from __future__ import annotations

import csv
import json
import os
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .beats import BeatClass

__all__ = [
    "CLASS_NAMES",
    "confusion",
    "normalize_rows",
    "ClassMetrics",
    "MetricSummary",
    "per_class_metrics",
    "RocCurve",
    "RocResult",
    "roc_curve",
    "roc_auc_ovr",
    "EvalReport",
    "evaluate",
    "emit_report",
]

CLASS_NAMES = tuple(c.name for c in BeatClass)
N_CLASSES = len(CLASS_NAMES)


def _labels(y, name: str) -> np.ndarray:
    y = np.asarray(y)
    if y.dtype.kind in "US":
        try:
            y = np.array([BeatClass[s] for s in y])
        except KeyError as exc:
            raise ValueError(f"{name} contains an unknown class name {exc.args[0]!r}") from None
    y = y.astype(np.int64)
    if y.size and (y.min() < 0 or y.max() >= N_CLASSES):
        raise ValueError(f"{name} has labels outside 0..{N_CLASSES - 1}")
    return y


def confusion(y_true, y_pred) -> np.ndarray:
    """5x5 count matrix; rows are true classes, columns predictions."""
    t = _labels(y_true, "y_true")
    p = _labels(y_pred, "y_pred")
    if t.shape != p.shape or t.ndim != 1 or t.size == 0:
        raise ValueError("y_true and y_pred must be non-empty 1-D arrays of equal length")
    return np.bincount(t * N_CLASSES + p, minlength=N_CLASSES * N_CLASSES).reshape(N_CLASSES, N_CLASSES)


def normalize_rows(matrix: np.ndarray) -> tuple[np.ndarray, list[int]]:
    """Row-normalised copy plus the indices of rows with zero support (left as zeros)."""
    m = np.asarray(matrix, dtype=np.float64)
    sums = m.sum(axis=1)
    out = np.zeros_like(m)
    nz = sums > 0
    out[nz] = m[nz] / sums[nz, None]
    return out, [int(i) for i in np.flatnonzero(~nz)]


@dataclass
class ClassMetrics:
    count: int
    accuracy: float  # recall in percent
    precision: float
    recall: float
    f1: float
    ova_accuracy: float  # one-vs-all accuracy in percent, for comparison
    flags: list[str] = field(default_factory=list)


@dataclass
class MetricSummary:
    per_class: dict[str, ClassMetrics]
    macro: dict[str, float]
    overall_accuracy: float


def _ratio(num: float, den: float) -> tuple[float, bool]:
    return (num / den, False) if den > 0 else (0.0, True)


def per_class_metrics(matrix: np.ndarray) -> MetricSummary:
    """Per-class accuracy/precision/recall/F1 from a confusion matrix.

    Zero denominators give 0 and add a flag such as ``"precision_undefined"``.
    """
    m = np.asarray(matrix)
    if m.shape != (N_CLASSES, N_CLASSES) or np.any(m < 0):
        raise ValueError("expected a non-negative 5x5 matrix")
    total = m.sum()
    per = {}
    for c, name in enumerate(CLASS_NAMES):
        tp = m[c, c]
        row = m[c].sum()
        col = m[:, c].sum()
        flags = []
        recall, bad = _ratio(tp, row)
        if bad:
            flags.append("recall_undefined")
        precision, bad = _ratio(tp, col)
        if bad:
            flags.append("precision_undefined")
        f1, bad = _ratio(2 * precision * recall, precision + recall)
        if bad:
            flags.append("f1_undefined")
        tn = total - row - col + tp
        ova, _ = _ratio(tp + tn, total)
        per[name] = ClassMetrics(int(row), 100.0 * recall, float(precision), float(recall), float(f1), 100.0 * ova, flags)
    macro = {key: float(np.mean([getattr(cm, key) for cm in per.values()])) for key in ("accuracy", "precision", "recall", "f1")}
    overall = float(np.trace(m) / total) if total else 0.0
    return MetricSummary(per, macro, overall)


@dataclass
class RocCurve:
    fpr: np.ndarray
    tpr: np.ndarray
    thresholds: np.ndarray
    auc: float


@dataclass
class RocResult:
    curves: dict[str, RocCurve]
    auc: dict[str, float | None]
    macro_auc: float
    flags: list[str]
    # one-vs-all (tpr, fpr) when scores >= threshold count as positive
    operating_point: dict[str, tuple[float, float]] = field(default_factory=dict)
    threshold: float = 0.5


def roc_curve(positive: np.ndarray, scores: np.ndarray) -> RocCurve:
    """ROC points for a binary problem, sweeping every distinct score.

    The first point uses threshold +inf (nothing predicted positive). Samples
    with tied scores cross the threshold together.
    """
    positive = np.asarray(positive, dtype=bool)
    scores = np.asarray(scores, dtype=np.float64)
    n_pos = positive.sum()
    n_neg = positive.size - n_pos
    if n_pos == 0 or n_neg == 0:
        raise ValueError("ROC needs both positive and negative samples")
    order = np.argsort(-scores, kind="stable")
    s = scores[order]
    pos = positive[order]
    tp = np.cumsum(pos)
    fp = np.cumsum(~pos)
    last_of_group = np.r_[s[1:] != s[:-1], True]
    tpr = np.r_[0.0, tp[last_of_group] / n_pos]
    fpr = np.r_[0.0, fp[last_of_group] / n_neg]
    thresholds = np.r_[np.inf, s[last_of_group]]
    auc = float(np.sum(np.diff(fpr) * (tpr[1:] + tpr[:-1]) / 2.0))
    return RocCurve(fpr, tpr, thresholds, auc)


def roc_auc_ovr(y_true, scores: np.ndarray, threshold: float = 0.5) -> RocResult:
    """One-vs-all ROC per class; classes absent from ``y_true`` are skipped and flagged.

    ``threshold`` fixes the reported one-vs-all operating point.
    """
    y = _labels(y_true, "y_true")
    scores = np.asarray(scores, dtype=np.float64)
    if scores.shape != (y.size, N_CLASSES):
        raise ValueError(f"scores must have shape ({y.size}, {N_CLASSES})")
    curves, aucs, flags, points = {}, {}, [], {}
    for c, name in enumerate(CLASS_NAMES):
        pos = y == c
        hit = scores[:, c] >= threshold
        points[name] = (
            float((hit & pos).sum() / pos.sum()) if pos.any() else 0.0,
            float((hit & ~pos).sum() / (~pos).sum()) if (~pos).any() else 0.0,
        )
        if pos.all() or not pos.any():
            aucs[name] = None
            flags.append(f"auc_undefined:{name}")
            continue
        curve = roc_curve(pos, scores[:, c])
        curves[name] = curve
        aucs[name] = curve.auc
    defined = [a for a in aucs.values() if a is not None]
    macro = float(np.mean(defined)) if defined else float("nan")
    return RocResult(curves, aucs, macro, flags, points, threshold)


@dataclass
class EvalReport:
    frequency: int
    metrics: MetricSummary
    confusion: np.ndarray
    roc: RocResult | None

    @property
    def normalized_confusion(self) -> np.ndarray:
        return normalize_rows(self.confusion)[0]

    @property
    def macro_f1(self) -> float:
        return self.metrics.macro["f1"]

    @property
    def macro_auc(self) -> float | None:
        return self.roc.macro_auc if self.roc else None

    def to_dict(self) -> dict:
        norm, empty_rows = normalize_rows(self.confusion)
        return {
            "frequency_hz": self.frequency,
            "overall_accuracy": self.metrics.overall_accuracy,
            "per_class": {
                name: {
                    "count": cm.count,
                    "accuracy_pct": cm.accuracy,
                    "ova_accuracy_pct": cm.ova_accuracy,
                    "precision": cm.precision,
                    "recall": cm.recall,
                    "f1": cm.f1,
                    "flags": cm.flags,
                }
                for name, cm in self.metrics.per_class.items()
            },
            "macro": self.metrics.macro,
            "confusion": self.confusion.tolist(),
            "confusion_normalized": norm.tolist(),
            "confusion_empty_rows": [CLASS_NAMES[i] for i in empty_rows],
            "auc": self.roc.auc if self.roc else None,
            "macro_auc": self.macro_auc,
            "auc_flags": self.roc.flags if self.roc else [],
            "ovr_operating_point": (
                {"threshold": self.roc.threshold, **{k: {"tpr": a, "fpr": b} for k, (a, b) in self.roc.operating_point.items()}} if self.roc else None
            ),
        }


def evaluate(y_true, y_pred, scores: np.ndarray | None = None, frequency: int = 360) -> EvalReport:
    cm = confusion(y_true, y_pred)
    roc = roc_auc_ovr(y_true, scores) if scores is not None else None
    return EvalReport(frequency=frequency, metrics=per_class_metrics(cm), confusion=cm, roc=roc)


_TABLE_METRICS = (("accuracy", "{:.1f}"), ("precision", "{:.2f}"), ("recall", "{:.2f}"), ("f1", "{:.2f}"))


def emit_report(reports: list[EvalReport], out_dir: str | os.PathLike) -> list[Path]:
    """Write per-frequency JSON, ROC and confusion CSVs plus a combined results table.

    Returns the written paths in a fixed order. Output bytes depend only on
    the reports, so re-running on the same inputs reproduces the files.
    """
    if not reports:
        raise ValueError("need at least one report")
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    if not os.access(out, os.W_OK):
        raise PermissionError(f"cannot write to {out}")
    reports = sorted(reports, key=lambda r: -r.frequency)
    written: list[Path] = []
    for rep in reports:
        f = rep.frequency
        path = out / f"report_{f}hz.json"
        path.write_text(json.dumps(rep.to_dict(), indent=2, sort_keys=True) + "\n", encoding="utf-8")
        written.append(path)

        path = out / f"confusion_{f}hz.csv"
        norm, _ = normalize_rows(rep.confusion)
        with open(path, "w", newline="", encoding="utf-8") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["true", *[f"pred_{n}" for n in CLASS_NAMES], *[f"norm_{n}" for n in CLASS_NAMES]])
            for i, name in enumerate(CLASS_NAMES):
                w.writerow([name, *rep.confusion[i].tolist(), *[repr(float(v)) for v in norm[i]]])
        written.append(path)

        if rep.roc is not None:
            path = out / f"roc_{f}hz.csv"
            with open(path, "w", newline="", encoding="utf-8") as fh:
                w = csv.writer(fh, lineterminator="\n")
                w.writerow(["class", "fpr", "tpr", "threshold"])
                for name, curve in rep.roc.curves.items():
                    for a, b, t in zip(curve.fpr, curve.tpr, curve.thresholds):
                        w.writerow([name, repr(float(a)), repr(float(b)), repr(float(t))])
            written.append(path)

    path = out / "results_table.csv"
    freqs = [r.frequency for r in reports]
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        header = ["class", "count"]
        for metric, _ in _TABLE_METRICS:
            header += [f"{metric}_{f}hz" for f in freqs]
        w.writerow(header)
        for name in CLASS_NAMES:
            row = [name, reports[0].metrics.per_class[name].count]
            for metric, fmt in _TABLE_METRICS:
                row += [fmt.format(getattr(r.metrics.per_class[name], metric)) for r in reports]
            w.writerow(row)
        row = ["macro-avg", "--"]
        for metric, fmt in _TABLE_METRICS:
            row += [fmt.format(r.metrics.macro[metric]) for r in reports]
        w.writerow(row)
        if all(r.roc is not None for r in reports):
            w.writerow(["macro-auc", "--", *[f"{r.macro_auc:.3f}" for r in reports]])
    written.append(path)
    return written
