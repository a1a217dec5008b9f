"""Accuracy measures over per-class score matrices.

Four measures: top-1 and top-5 accuracy (per-class averaged by default),
logarithmic loss in natural-log units, and macro F1. All reductions run in
double precision with a fixed accumulation order so repeated runs agree
byte for byte.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np

PROB_CLIP = 1e-15


@dataclass(frozen=True)
class ScoreMatrix:
    """Per-instance, per-candidate-class real scores."""

    candidates: tuple[int, ...]
    values: np.ndarray  # (rows, len(candidates)) float

    def __post_init__(self):
        vals = self.values
        if vals.ndim != 2 or vals.shape[1] != len(self.candidates):
            raise ValueError(f"score matrix shape {vals.shape} does not match {len(self.candidates)} candidates")
        if len(set(self.candidates)) != len(self.candidates):
            raise ValueError("candidate ids must be unique")
        if not np.all(np.isfinite(vals)):
            raise ValueError("score matrix contains non-finite values")
        vals.setflags(write=False)

    @property
    def rows(self) -> int:
        return int(self.values.shape[0])


@dataclass(frozen=True)
class MetricReport:
    """The four measures for one (classifier, dataset) evaluation."""

    top1: float
    top5: float
    logloss: float
    f1: float

    def csv_row(self, classifier: str, dataset: str) -> str:
        cells = [format(v, ".6g") for v in (self.top1, self.top5, self.logloss, self.f1)]
        return ",".join([classifier, dataset] + cells)


def _ranked_candidate_order(values: np.ndarray, candidates: np.ndarray) -> np.ndarray:
    """Candidate indices sorted by descending score, ties by ascending class id.

    Returns an array of shape ``values.shape`` of column indices; the first k
    columns of each row are that instance's top-k candidates.
    """
    # lexsort uses the last key as primary.
    order = np.lexsort((np.broadcast_to(candidates, values.shape), -values), axis=1)
    return order


def argmax_labels(values: np.ndarray, candidates: Sequence[int]) -> np.ndarray:
    """Per-row argmax as class ids; exact ties go to the lowest class id."""
    cand = np.asarray(candidates, dtype=np.int64)
    order = _ranked_candidate_order(np.asarray(values, dtype=np.float64), cand)
    return cand[order[:, 0]]


def top_k_accuracy(scores: ScoreMatrix, labels: np.ndarray, k: int, per_class_average: bool = True) -> float:
    """Percent of instances whose true class ranks among the k highest scores.

    With ``per_class_average`` (the default) the hit rate is computed per true
    class and the result is the unweighted mean over classes present in
    ``labels``; otherwise it is the plain instance average. Score ties are
    resolved by lowest class id.
    """
    if scores.rows == 0:
        raise ValueError("empty score matrix")
    if not 1 <= k <= len(scores.candidates):
        raise ValueError(f"k={k} out of range for {len(scores.candidates)} candidates")
    labels = np.asarray(labels, dtype=np.int64)
    cand = np.asarray(scores.candidates, dtype=np.int64)
    if not np.all(np.isin(labels, cand)):
        raise ValueError("label outside candidate set")

    order = _ranked_candidate_order(scores.values.astype(np.float64), cand)
    topk = cand[order[:, :k]]  # (rows, k) class ids
    hits = (topk == labels[:, None]).any(axis=1)

    if not per_class_average:
        return float(hits.mean() * 100.0)
    classes = np.unique(labels)
    rates = [hits[labels == c].mean() for c in classes]
    return float(np.mean(rates) * 100.0)


def softmax_probabilities(scores: ScoreMatrix) -> np.ndarray:
    """Row-wise softmax with max shifting, safe against overflow."""
    v = scores.values.astype(np.float64)
    shifted = v - v.max(axis=1, keepdims=True)
    e = np.exp(shifted)
    return e / e.sum(axis=1, keepdims=True)


def log_loss(probs: np.ndarray, labels: np.ndarray, candidates: Sequence[int]) -> float:
    """Mean negative natural log of the true-class probability.

    Probabilities are clipped to [1e-15, 1] so degenerate softmax rows yield a
    bounded loss.
    """
    labels = np.asarray(labels, dtype=np.int64)
    cand = list(candidates)
    col = {c: i for i, c in enumerate(cand)}
    try:
        idx = np.asarray([col[int(y)] for y in labels], dtype=np.int64)
    except KeyError as exc:
        raise ValueError(f"label {exc.args[0]} not in candidates") from exc
    p_true = np.clip(probs[np.arange(len(labels)), idx], PROB_CLIP, 1.0)
    return float(-np.log(p_true).mean())


def f1_macro(predictions: np.ndarray, labels: np.ndarray, candidates: Sequence[int]) -> float:
    """Unweighted mean of per-class one-vs-rest F1 over all candidate classes.

    A class with zero predictions and zero instances contributes 0 under the
    0/0 convention, so the macro average spans the full candidate list.
    """
    predictions = np.asarray(predictions, dtype=np.int64)
    labels = np.asarray(labels, dtype=np.int64)
    if predictions.size == 0 or labels.size == 0:
        raise ValueError("empty predictions or labels")
    if predictions.shape != labels.shape:
        raise ValueError("predictions and labels differ in length")
    total = 0.0
    for c in candidates:
        tp = float(np.sum((predictions == c) & (labels == c)))
        fp = float(np.sum((predictions == c) & (labels != c)))
        fn = float(np.sum((predictions != c) & (labels == c)))
        denom = 2 * tp + fp + fn
        total += (2 * tp / denom) if denom > 0 else 0.0
    return total / len(tuple(candidates))


def evaluate(scores: ScoreMatrix, labels: np.ndarray, per_class_average: bool = True) -> MetricReport:
    """Bundle the four measures with their default settings.

    Top-1/top-5 use per-class averaging (set ``per_class_average=False`` for
    plain instance averaging); top-5 falls back to k=|candidates| when fewer
    than five candidates exist; log loss is natural-log on softmax
    probabilities; F1 is macro over the candidate list with argmax
    predictions (ties to the lowest class id).
    """
    k5 = min(5, len(scores.candidates))
    probs = softmax_probabilities(scores)
    preds = argmax_labels(scores.values, scores.candidates)
    return MetricReport(
        top1=top_k_accuracy(scores, labels, 1, per_class_average),
        top5=top_k_accuracy(scores, labels, k5, per_class_average),
        logloss=log_loss(probs, labels, scores.candidates),
        f1=f1_macro(preds, labels, scores.candidates),
    )
