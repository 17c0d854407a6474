"""Evaluation metrics: macro-F1, ROC AUC, MAE, RMSE and R^2."""

from __future__ import annotations

import csv
import dataclasses
import io
import json
import math
from typing import Iterable, Sequence

import numpy as np

from .errors import ContractError, UndefinedMetricError


@dataclasses.dataclass
class F1Result:
    macro: float
    per_class: dict[int, float]
    undefined: list[int]


def f1_breakdown(y_true, y_pred, n_classes: int | None = None, restrict: Iterable[int] | None = None) -> F1Result:
    """Per-class F1 and its unweighted mean.

    Accepts integer class labels (single-label) or (n, C) binary indicator
    matrices (multi-label). A class with no true and no predicted instances
    scores 0 and is listed in ``undefined``.
    """
    yt = np.asarray(y_true)
    yp = np.asarray(y_pred)
    if yt.size == 0 or yt.shape != yp.shape:
        raise ContractError(f"macro_f1 needs equal, non-empty inputs; got shapes {yt.shape} and {yp.shape}")
    if yt.ndim == 2:
        n_classes = yt.shape[1] if n_classes is None else n_classes
        truth = yt.astype(bool)
        pred = yp.astype(bool)
    else:
        yt = yt.astype(np.int64)
        yp = yp.astype(np.int64)
        if n_classes is None:
            n_classes = int(max(yt.max(), yp.max())) + 1
        if min(yt.min(), yp.min()) < 0 or max(yt.max(), yp.max()) >= n_classes:
            raise ContractError(f"labels must lie in [0, {n_classes})")
        classes = np.arange(n_classes)
        truth = yt[:, None] == classes
        pred = yp[:, None] == classes
    classes = list(range(n_classes)) if restrict is None else sorted(int(c) for c in restrict)
    if not classes:
        raise ContractError("restrict selects no classes")
    per_class, undefined = {}, []
    for c in classes:
        tp = int(np.sum(truth[:, c] & pred[:, c]))
        fp = int(np.sum(~truth[:, c] & pred[:, c]))
        fn = int(np.sum(truth[:, c] & ~pred[:, c]))
        denom = 2 * tp + fp + fn
        if denom == 0:
            undefined.append(c)
            per_class[c] = 0.0
        else:
            per_class[c] = 2 * tp / denom
    macro = sum(per_class[c] for c in classes) / len(classes)
    return F1Result(macro, per_class, undefined)


def macro_f1(y_true, y_pred, n_classes: int | None = None, restrict: Iterable[int] | None = None) -> float:
    return f1_breakdown(y_true, y_pred, n_classes, restrict).macro


def auc_roc(scores, labels) -> float:
    """Mann-Whitney AUC: (wins + 0.5 * ties) / (n_pos * n_neg)."""
    s = np.asarray(scores, dtype=np.float64).ravel()
    y = np.asarray(labels).ravel().astype(bool)
    if s.shape != y.shape or s.size == 0:
        raise ContractError("auc_roc needs equal, non-empty scores and labels")
    pos, neg = s[y], np.sort(s[~y])
    if pos.size == 0 or neg.size == 0:
        raise UndefinedMetricError("AUC is undefined unless both classes are present")
    below = np.searchsorted(neg, pos, side="left")
    upto = np.searchsorted(neg, pos, side="right")
    wins = int(below.sum())
    ties = int((upto - below).sum())
    return (wins + 0.5 * ties) / (pos.size * neg.size)


def roc_curve(scores, labels) -> list[tuple[float, float, float]]:
    """(threshold, false-positive rate, true-positive rate) points, descending threshold."""
    s = np.asarray(scores, dtype=np.float64).ravel()
    y = np.asarray(labels).ravel().astype(bool)
    n_pos, n_neg = int(y.sum()), int((~y).sum())
    if n_pos == 0 or n_neg == 0:
        raise UndefinedMetricError("ROC is undefined unless both classes are present")
    points = [(math.inf, 0.0, 0.0)]
    for thr in np.unique(s)[::-1]:
        hit = s >= thr
        points.append((float(thr), int(np.sum(hit & ~y)) / n_neg, int(np.sum(hit & y)) / n_pos))
    return points


def _pair(y, y_hat) -> tuple[np.ndarray, np.ndarray]:
    a = np.asarray(y, dtype=np.float64).ravel()
    b = np.asarray(y_hat, dtype=np.float64).ravel()
    if a.shape != b.shape or a.size == 0:
        raise ContractError(f"metric inputs must be equal-length and non-empty, got {a.size} and {b.size}")
    return a, b


def mae(y, y_hat) -> float:
    a, b = _pair(y, y_hat)
    return float(np.mean(np.abs(a - b)))


def rmse(y, y_hat) -> float:
    a, b = _pair(y, y_hat)
    return float(np.sqrt(np.mean((a - b) ** 2)))


def r_squared(y, y_hat) -> float:
    a, b = _pair(y, y_hat)
    ss_tot = float(np.sum((a - a.mean()) ** 2))
    if a.size < 2 or ss_tot == 0.0:
        raise UndefinedMetricError("R^2 is undefined for fewer than two targets or zero target variance")
    return 1.0 - float(np.sum((a - b) ** 2)) / ss_tot


def qa_macro_f1(questions: Sequence[str], valid: Sequence[Iterable[int]], gold: np.ndarray, pred: np.ndarray) -> float:
    """Mean over distinct questions of macro-F1 across that question's valid candidates."""
    gold = np.asarray(gold, dtype=bool)
    pred = np.asarray(pred, dtype=bool)
    by_question: dict[str, list[int]] = {}
    valid_sets: dict[str, set[int]] = {}
    for i, q in enumerate(questions):
        by_question.setdefault(q, []).append(i)
        valid_sets.setdefault(q, set()).update(int(c) for c in valid[i])
    scores = [
        macro_f1(gold[rows], pred[rows], restrict=valid_sets[q])
        for q, rows in by_question.items()
    ]
    return sum(scores) / len(scores)


@dataclasses.dataclass
class MetricReport:
    values: dict[str, float]
    seed: int | None = None
    split: str = "test"
    per_class_f1: dict | None = None
    roc: list | None = None
    config: dict = dataclasses.field(default_factory=dict)

    def __post_init__(self):
        for name, v in self.values.items():
            if not math.isfinite(v):
                raise ContractError(f"metric {name!r} is not finite: {v}")

    def to_dict(self) -> dict:
        d = dataclasses.asdict(self)
        if d["roc"] is not None:
            d["roc"] = [[None if math.isinf(t) else t, f, tp] for t, f, tp in d["roc"]]
        return d

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), sort_keys=True, indent=2)

    def to_csv(self) -> str:
        buf = io.StringIO()
        writer = csv.writer(buf, lineterminator="\n")
        writer.writerow(["metric", "value", "seed", "split"])
        for name in sorted(self.values):
            writer.writerow([name, repr(self.values[name]), self.seed, self.split])
        return buf.getvalue()
