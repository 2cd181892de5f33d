"""Confusion matrices, averaged precision/recall/F1 and comparison tables."""

from __future__ import annotations

import csv
import io
import json
import math
from dataclasses import asdict, dataclass, field
from typing import NamedTuple, Sequence

import numpy as np

from .errors import EmptyMatrix, InvalidClass, LengthMismatch

TABLE_COLUMNS = ("Method", "Train Accuracy", "Test Accuracy", "Precision", "Recall", "F1 Score")
CSV_HEADER = ("method", "train_acc", "test_acc", "precision", "recall", "f1")


@dataclass
class ConfusionMatrix:
    counts: np.ndarray  # rows: true class, cols: predicted

    @property
    def total(self) -> int:
        return int(self.counts.sum())

    @property
    def n_classes(self) -> int:
        return self.counts.shape[0]


class Metrics(NamedTuple):
    accuracy: float
    precision: float
    recall: float
    f1: float
    zero_division: bool


def confusion(true_labels, predicted_labels, n_classes: int) -> ConfusionMatrix:
    t = np.asarray(true_labels, dtype=np.int64)
    p = np.asarray(predicted_labels, dtype=np.int64)
    if t.shape != p.shape:
        raise LengthMismatch(f"{t.size} true labels vs {p.size} predictions")
    for arr in (t, p):
        if arr.size and (arr.min() < 0 or arr.max() >= n_classes):
            raise InvalidClass(f"labels must lie in [0, {n_classes})")
    counts = np.zeros((n_classes, n_classes), dtype=np.int64)
    np.add.at(counts, (t, p), 1)
    return ConfusionMatrix(counts)


def per_class(cm: ConfusionMatrix):
    """Per-class ``(precision, recall, f1, support, zero_division)``.

    Undefined ratios (zero denominators) are reported as 0.
    """
    c = cm.counts.astype(np.float64)
    tp = np.diag(c)
    predicted = c.sum(axis=0)
    support = c.sum(axis=1)
    precision = np.divide(tp, predicted, out=np.zeros_like(tp), where=predicted > 0)
    recall = np.divide(tp, support, out=np.zeros_like(tp), where=support > 0)
    denom = precision + recall
    f1 = np.divide(2 * precision * recall, denom, out=np.zeros_like(tp), where=denom > 0)
    zero_div = bool(np.any(predicted == 0) or np.any(support == 0))
    return precision, recall, f1, support, zero_div


def metrics(cm: ConfusionMatrix, averaging: str = "weighted") -> Metrics:
    total = cm.total
    if total == 0:
        raise EmptyMatrix("confusion matrix has no samples")
    precision, recall, f1, support, zero_div = per_class(cm)
    if averaging == "weighted":
        w = support / total
    elif averaging == "macro":
        w = np.full(cm.n_classes, 1.0 / cm.n_classes)
    else:
        raise ValueError(f"unknown averaging {averaging!r}")
    acc = float(np.trace(cm.counts) / total)
    return Metrics(acc, float(w @ precision), float(w @ recall), float(w @ f1), zero_div)


@dataclass
class EvalReport:
    method: str
    train_accuracy: float
    test_accuracy: float
    precision: float
    recall: float
    f1: float
    confusion: ConfusionMatrix
    params: dict = field(default_factory=dict)
    averaging: str = "weighted"
    warnings: list = field(default_factory=list)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["confusion"] = self.confusion.counts.tolist()
        return d

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True) + "\n"

    @classmethod
    def from_dict(cls, d: dict) -> "EvalReport":
        d = dict(d)
        d["confusion"] = ConfusionMatrix(np.asarray(d["confusion"], dtype=np.int64))
        return cls(**d)

    @classmethod
    def from_json(cls, text: str) -> "EvalReport":
        return cls.from_dict(json.loads(text))


def evaluate(method: str, y_train, pred_train, y_test, pred_test, n_classes: int = 3,
             params: dict | None = None, averaging: str = "weighted") -> EvalReport:
    """Build a report: train accuracy plus test-set confusion and averaged scores."""
    train_cm = confusion(y_train, pred_train, n_classes)
    test_cm = confusion(y_test, pred_test, n_classes)
    m = metrics(test_cm, averaging)
    train_acc = metrics(train_cm).accuracy if train_cm.total else float("nan")
    warnings = ["zero denominator in per-class precision/recall (scored as 0)"] if m.zero_division else []
    return EvalReport(method, train_acc, m.accuracy, m.precision, m.recall, m.f1, test_cm,
                      dict(params or {}), averaging, warnings)


def _fmt(v: float) -> str:
    return "" if v is None or (isinstance(v, float) and math.isnan(v)) else f"{v:.3f}"


def _rows(reports: Sequence[EvalReport]) -> list[list[str]]:
    return [[r.method] + [_fmt(v) for v in (r.train_accuracy, r.test_accuracy, r.precision, r.recall, r.f1)]
            for r in reports]


def report_table(reports: Sequence[EvalReport]) -> tuple[str, str]:
    """Render ``(text_table, csv_text)`` with one row per report, in order."""
    rows = _rows(reports)
    widths = [max(len(h), *(len(r[i]) for r in rows)) for i, h in enumerate(TABLE_COLUMNS)]

    def line(cells):
        out = [cells[0].ljust(widths[0])] + [c.rjust(w) for c, w in zip(cells[1:], widths[1:])]
        return "  ".join(out).rstrip()

    text = "\n".join([line(TABLE_COLUMNS), line(["-" * w for w in widths])] + [line(r) for r in rows]) + "\n"
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(CSV_HEADER)
    writer.writerows(rows)
    return text, buf.getvalue()


def epoch_curve(history) -> str:
    """CSV ``epoch,train_acc,test_acc`` from a list of epoch records."""
    if not history:
        raise ValueError("empty training history")
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(("epoch", "train_acc", "test_acc"))
    for rec in history:
        test = "" if math.isnan(rec.test_acc) else f"{rec.test_acc:.6f}"
        writer.writerow((rec.epoch, f"{rec.train_acc:.6f}", test))
    return buf.getvalue()


def format_confusion(cm: ConfusionMatrix, names: Sequence[str]) -> str:
    width = max(max(len(n) for n in names), len(str(cm.counts.max())), 4)
    head = " " * width + "  " + "  ".join(n[:width].rjust(width) for n in names)
    body = ["  ".join([names[i][:width].ljust(width)] + [str(v).rjust(width) for v in row])
            for i, row in enumerate(cm.counts)]
    return "\n".join([head] + body) + "\n"
