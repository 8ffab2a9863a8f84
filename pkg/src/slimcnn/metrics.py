"""Confusion matrix and precision/recall/F1 classification report."""

from __future__ import annotations

import csv
import io
from dataclasses import dataclass

import numpy as np


def confusion_matrix(truth, pred, k: int) -> np.ndarray:
    """Counts with rows = true class, columns = predicted class."""
    truth = np.asarray(truth, dtype=np.int64).ravel()
    pred = np.asarray(pred, dtype=np.int64).ravel()
    if truth.shape != pred.shape:
        raise ValueError(f"length mismatch: {truth.size} truths vs {pred.size} predictions")
    for arr in (truth, pred):
        if arr.size and (arr.min() < 0 or arr.max() >= k):
            raise ValueError(f"class index out of range for k={k}")
    cm = np.zeros((k, k), dtype=np.int64)
    np.add.at(cm, (truth, pred), 1)
    return cm


def _safe_div(num: np.ndarray, den: np.ndarray) -> np.ndarray:
    num = np.asarray(num, dtype=np.float64)
    den = np.asarray(den, dtype=np.float64)
    out = np.zeros_like(num)
    np.divide(num, den, out=out, where=den != 0)
    return out


@dataclass
class Report:
    classes: list[str]
    precision: np.ndarray
    recall: np.ndarray
    f1: np.ndarray
    support: np.ndarray
    accuracy: float
    correct: int

    @property
    def total(self) -> int:
        return int(self.support.sum())

    @property
    def macro(self) -> tuple[float, float, float]:
        return float(self.precision.mean()), float(self.recall.mean()), float(self.f1.mean())

    @property
    def weighted(self) -> tuple[float, float, float]:
        w = self.support / self.support.sum()
        return float(self.precision @ w), float(self.recall @ w), float(self.f1 @ w)

    def rows(self) -> list[tuple]:
        """(label, precision, recall, f1, support); accuracy row has only f1 and support."""
        out = [(name, p, r, f, int(s)) for name, p, r, f, s in
               zip(self.classes, self.precision, self.recall, self.f1, self.support)]
        out.append(("accuracy", None, None, self.accuracy, self.total))
        out.append(("macro avg", *self.macro, self.total))
        out.append(("weighted avg", *self.weighted, self.total))
        return out

    def to_text(self, digits: int = 2) -> str:
        width = max(12, *(len(c) for c in self.classes)) + 2

        def cell(v):
            return " " * 10 if v is None else f"{v:10.{digits}f}"

        lines = [" " * width + f"{'precision':>10}{'recall':>10}{'f1-score':>10}{'support':>10}", ""]
        for i, (label, p, r, f, s) in enumerate(self.rows()):
            if i == len(self.classes):
                lines.append("")
            lines.append(f"{label:>{width}}{cell(p)}{cell(r)}{cell(f)}{s:>10}")
        lines += ["", f"accuracy = {self.correct}/{self.total} = {self.accuracy:.4f}"]
        return "\n".join(lines)

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["label", "precision", "recall", "f1", "support"])
        for label, p, r, f, s in self.rows():
            w.writerow([label, "" if p is None else repr(float(p)), "" if r is None else repr(float(r)),
                        repr(float(f)), s])
        return buf.getvalue()


def classification_report(cm: np.ndarray, class_names) -> Report:
    """Per-class precision/recall/F1; any 0/0 ratio is reported as 0."""
    cm = np.asarray(cm, dtype=np.int64)
    k = cm.shape[0]
    if cm.shape != (k, k):
        raise ValueError(f"confusion matrix must be square, got {cm.shape}")
    if len(class_names) != k:
        raise ValueError(f"{len(class_names)} names for {k} classes")
    total = int(cm.sum())
    if total == 0:
        raise ValueError("empty confusion matrix")
    tp = np.diag(cm).astype(np.float64)
    precision = _safe_div(tp, cm.sum(axis=0))
    recall = _safe_div(tp, cm.sum(axis=1))
    f1 = _safe_div(2 * precision * recall, precision + recall)
    return Report(list(class_names), precision, recall, f1, cm.sum(axis=1), float(tp.sum() / total),
                  int(tp.sum()))


def format_confusion_matrix(cm: np.ndarray, class_names) -> str:
    cm = np.asarray(cm)
    width = max(8, *(len(c) for c in class_names), len(str(cm.max()))) + 2
    lines = ["true \\ pred".ljust(width) + "".join(c.rjust(width) for c in class_names)]
    for name, row in zip(class_names, cm):
        lines.append(name.ljust(width) + "".join(str(v).rjust(width) for v in row))
    return "\n".join(lines)
