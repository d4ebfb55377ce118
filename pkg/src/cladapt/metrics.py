"""Evaluation metrics and result containers.

AUROC is computed per class one-vs-rest from the Mann-Whitney rank statistic
(midranks for ties) and macro-averaged over the classes that have both
positives and negatives in the evaluated set. F1 is macro-averaged over the
classes present in the true labels.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Iterable, Mapping, Optional, Sequence

import numpy as np
from scipy.stats import rankdata

METRIC_CONVENTION = {
    "auroc": "one-vs-rest per class, macro mean over classes with both positives and negatives",
    "f1": "per-class F1 from argmax predictions (lowest index wins ties), macro mean over classes in the labels",
}


class UndefinedMetricError(ValueError):
    """The metric has no defined value for this input (e.g. a single class only)."""


def binary_auroc(scores, positive) -> float:
    """P(score of a random positive > score of a random negative), ties counted one half."""
    s = np.asarray(scores, dtype=np.float64)
    pos = np.asarray(positive, dtype=bool)
    n_pos = int(pos.sum())
    n_neg = pos.size - n_pos
    if n_pos == 0 or n_neg == 0:
        raise UndefinedMetricError("AUROC needs at least one positive and one negative")
    ranks = rankdata(s, method="average")
    u = ranks[pos].sum() - n_pos * (n_pos + 1) / 2.0
    return float(u / (n_pos * n_neg))


def auroc_ovr_macro(scores, labels) -> float:
    """Macro one-vs-rest AUROC for ``(N, K)`` class scores.

    A 1-D ``scores`` array is treated as the positive-class score of a binary
    problem with labels in {0, 1}.
    """
    s = np.asarray(scores, dtype=np.float64)
    y = np.asarray(labels, dtype=np.int64)
    if s.ndim == 1:
        return binary_auroc(s, y == 1)
    if s.shape[0] != y.shape[0]:
        raise ValueError(f"{s.shape[0]} score rows but {y.shape[0]} labels")
    values = []
    for c in range(s.shape[1]):
        pos = y == c
        if pos.any() and not pos.all():
            values.append(binary_auroc(s[:, c], pos))
    if not values:
        raise UndefinedMetricError("no class has both positive and negative samples")
    return float(np.mean(values))


def f1_macro(predicted, true, num_classes: Optional[int] = None) -> float:
    pred = np.asarray(predicted, dtype=np.int64)
    y = np.asarray(true, dtype=np.int64)
    if pred.shape != y.shape or y.size == 0:
        raise ValueError("predictions and labels must be non-empty and equally long")
    k = num_classes or int(max(pred.max(), y.max())) + 1
    conf = np.zeros((k, k), dtype=np.int64)
    np.add.at(conf, (y, pred), 1)
    tp = np.diag(conf).astype(np.float64)
    pred_count = conf.sum(axis=0)
    true_count = conf.sum(axis=1)
    scores = []
    for c in np.flatnonzero(true_count):
        precision = tp[c] / pred_count[c] if pred_count[c] else 0.0
        recall = tp[c] / true_count[c]
        denom = precision + recall
        scores.append(2 * precision * recall / denom if denom > 0 else 0.0)
    return float(np.mean(scores))


def argmax_predictions(probs) -> np.ndarray:
    return np.argmax(np.asarray(probs), axis=1)


@dataclass
class EvalRow:
    """One checkpoint evaluated on every test set. NaN marks an undefined cell."""

    label: str
    columns: list[str]
    auroc: list[float]
    f1: list[float]

    @property
    def flagged(self) -> list[bool]:
        return [math.isnan(a) or math.isnan(f) for a, f in zip(self.auroc, self.f1)]

    def cell(self, column: str) -> tuple[float, float]:
        i = self.columns.index(column)
        return self.auroc[i], self.f1[i]

    def to_dict(self) -> dict:
        return {"label": self.label, "columns": list(self.columns),
                "auroc": [None if math.isnan(v) else v for v in self.auroc],
                "f1": [None if math.isnan(v) else v for v in self.f1]}

    @classmethod
    def from_dict(cls, d: dict) -> "EvalRow":
        nan = float("nan")
        return cls(d["label"], list(d["columns"]),
                   [nan if v is None else float(v) for v in d["auroc"]],
                   [nan if v is None else float(v) for v in d["f1"]])


@dataclass
class EvalMatrix:
    strategy: str
    rows: list[EvalRow] = field(default_factory=list)

    @property
    def columns(self) -> list[str]:
        return self.rows[0].columns if self.rows else []

    def to_dict(self) -> dict:
        return {"strategy": self.strategy, "metric_convention": METRIC_CONVENTION,
                "rows": [r.to_dict() for r in self.rows]}

    @classmethod
    def from_dict(cls, d: dict) -> "EvalMatrix":
        return cls(d["strategy"], [EvalRow.from_dict(r) for r in d["rows"]])


def evaluate_arrays(probs: np.ndarray, labels: np.ndarray, num_classes: int) -> tuple[float, float]:
    try:
        a = auroc_ovr_macro(probs, labels)
    except UndefinedMetricError:
        a = float("nan")
    f = f1_macro(argmax_predictions(probs), labels, num_classes) if len(labels) else float("nan")
    return a, f


def evaluate_checkpoint(net, test_sets: Mapping[str, tuple[np.ndarray, np.ndarray]],
                        label: str = "") -> EvalRow:
    """AUROC/F1 of ``net`` on every named ``(x, y)`` test set."""
    from .model import predict

    aurocs, f1s = [], []
    for name, (x, y) in test_sets.items():
        a, f = evaluate_arrays(predict(net, x), y, net.num_classes)
        aurocs.append(a)
        f1s.append(f)
    return EvalRow(label, list(test_sets), aurocs, f1s)


@dataclass
class TrendPoint:
    epoch: int
    experience: int
    auroc: float
    f1: float
    boundary: bool


class TrendRecorder:
    """Collects union-test metrics during training, every ``every`` epochs.

    ``boundary`` is set on the first epoch of every experience after the first.
    """

    def __init__(self, x: np.ndarray, y: np.ndarray, every: int = 1):
        if every < 1:
            raise ValueError("evaluation cadence must be >= 1 epoch")
        self.x, self.y, self.every = x, y, every
        self.points: list[TrendPoint] = []
        self._epoch = 0
        self._last_experience: Optional[int] = None

    def __call__(self, net, experience: int) -> None:
        from .model import predict

        self._epoch += 1
        boundary = self._last_experience is not None and experience != self._last_experience
        self._last_experience = experience
        if self._epoch % self.every and not boundary:
            return
        a, f = evaluate_arrays(predict(net, self.x), self.y, net.num_classes)
        self.points.append(TrendPoint(self._epoch, experience, a, f, boundary))


def union_trend(checkpoints: Iterable[tuple[int, object]], x: np.ndarray, y: np.ndarray,
                every: int = 1) -> list[TrendPoint]:
    """Series over ``(experience, net)`` pairs given in epoch order."""
    rec = TrendRecorder(x, y, every)
    for experience, net in checkpoints:
        rec(net, experience)
    return rec.points


@dataclass
class DeltaReport:
    """Joint minus strategy, per test set; positive means joint scored higher."""

    strategy: str
    columns: list[str]
    d_auroc: list[float]
    d_f1: list[float]

    def to_dict(self) -> dict:
        return {"strategy": self.strategy, "columns": self.columns,
                "d_auroc": self.d_auroc, "d_f1": self.d_f1}


def delta_vs_joint(final_row: EvalRow, joint_row: EvalRow, strategy: str = "") -> DeltaReport:
    if list(final_row.columns) != list(joint_row.columns):
        raise ValueError(f"test-set columns differ: {final_row.columns} vs {joint_row.columns}")
    da = [j - s for j, s in zip(joint_row.auroc, final_row.auroc)]
    df = [j - s for j, s in zip(joint_row.f1, final_row.f1)]
    return DeltaReport(strategy, list(final_row.columns), da, df)


def forgetting(history: Sequence[float]) -> float:
    """Best earlier value minus the latest value of one test metric."""
    if len(history) < 2:
        return 0.0
    return float(max(history[:-1]) - history[-1])
