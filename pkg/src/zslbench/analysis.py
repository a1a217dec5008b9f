"""Dataset difficulty, attribute influence, and combined-points analyses.

Difficulty buckets each test instance by how many base classifiers identify
it correctly (level 0 = none, level K = all). Attribute tallies award +1 to
every attribute of a correctly recognized instance and -1 to every attribute
of a missed one, correct and incorrect pools kept separate. Combined points
dense-rank competitors per (dataset, measure): the best value earns P points
(P competitors), equal values share the same points, and the next distinct
value takes the immediately following rank.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Optional, Sequence

import numpy as np


class IncompleteTableError(Exception):
    """A metric value needed for points ranking is missing; names the cell."""


@dataclass(frozen=True)
class PointsTable:
    """Integer points per competitor and dataset, plus totals."""

    competitors: tuple[str, ...]
    datasets: tuple[str, ...]
    points: np.ndarray  # (P, n_datasets) int
    totals: np.ndarray  # (P,) int

    def __post_init__(self):
        self.points.setflags(write=False)
        self.totals.setflags(write=False)

    def to_csv(self) -> str:
        lines = ["competitor," + ",".join(self.datasets) + ",Total"]
        for i, name in enumerate(self.competitors):
            cells = [str(int(v)) for v in self.points[i]]
            lines.append(f"{name}," + ",".join(cells) + f",{int(self.totals[i])}")
        return "\n".join(lines) + "\n"


@dataclass(frozen=True)
class AttributeScores:
    """Signed tallies per attribute with the extreme attribute names.

    ``easiest``/``hardest`` are None when there were no correct/incorrect
    instances to tally (the corresponding side is undefined).
    """

    names: tuple[str, ...]
    positive: np.ndarray  # +1 tallies over correct instances
    negative: np.ndarray  # -1 tallies over incorrect instances (<= 0)
    easiest: Optional[str]
    hardest: Optional[str]


def correctness_from_predictions(per_classifier_predictions: Sequence[np.ndarray], labels: np.ndarray) -> np.ndarray:
    """Binary (instances x classifiers) matrix, 1 where prediction == label."""
    labels = np.asarray(labels, dtype=np.int64)
    cols = []
    for j, preds in enumerate(per_classifier_predictions):
        preds = np.asarray(preds, dtype=np.int64)
        if preds.shape != labels.shape:
            raise ValueError(f"classifier {j}: {preds.shape[0]} predictions for {labels.shape[0]} labels")
        cols.append((preds == labels).astype(np.int8))
    return np.stack(cols, axis=1)


def difficulty_levels(correctness: np.ndarray) -> np.ndarray:
    """Percent of instances identified by exactly 0, 1, ..., K classifiers."""
    correctness = np.asarray(correctness)
    if correctness.ndim != 2 or correctness.shape[0] == 0:
        raise ValueError("empty correctness matrix")
    k = correctness.shape[1]
    sums = correctness.sum(axis=1)
    counts = np.bincount(sums, minlength=k + 1).astype(np.float64)
    return counts / correctness.shape[0] * 100.0


def binarize_attributes(values: np.ndarray, threshold: float = 0.5) -> np.ndarray:
    """Threshold real-valued attribute strengths into presence flags."""
    return (np.asarray(values, dtype=np.float64) > threshold).astype(np.int8)


def attribute_scores(
    per_instance_attributes: np.ndarray,
    names: Sequence[str],
    correct: np.ndarray,
) -> AttributeScores:
    """Tally attribute influence over correctly and incorrectly recognized instances.

    ``per_instance_attributes`` is a binary (instances x attributes) matrix
    (binarize real strengths upstream), ``correct`` a binary vector. The
    easiest attribute maximizes the positive tally, the hardest maximizes the
    magnitude of the negative tally; ties go to the first attribute in order.
    """
    attrs = np.asarray(per_instance_attributes)
    correct = np.asarray(correct).astype(bool)
    names = tuple(names)
    if attrs.ndim != 2 or attrs.shape[1] != len(names):
        raise ValueError(f"attribute matrix shape {attrs.shape} does not match {len(names)} names")
    if attrs.shape[0] != correct.shape[0]:
        raise ValueError("attribute rows do not align with correctness vector")
    positive = attrs[correct].sum(axis=0).astype(np.int64)
    negative = -attrs[~correct].sum(axis=0).astype(np.int64)
    easiest = names[int(np.argmax(positive))] if correct.any() else None
    hardest = names[int(np.argmax(-negative))] if (~correct).any() else None
    return AttributeScores(names, positive, negative, easiest, hardest)


def combine_attribute_tallies(parts: Sequence[AttributeScores]) -> AttributeScores:
    """Joint tallies across classifiers: sum the per-classifier tallies."""
    if not parts:
        raise ValueError("nothing to combine")
    names = parts[0].names
    positive = np.sum([p.positive for p in parts], axis=0)
    negative = np.sum([p.negative for p in parts], axis=0)
    easiest = names[int(np.argmax(positive))] if positive.any() else None
    hardest = names[int(np.argmax(-negative))] if negative.any() else None
    return AttributeScores(names, positive, negative, easiest, hardest)


def dense_rank(values: np.ndarray, lower_better: bool) -> np.ndarray:
    """Dense ranks, 1 = best; equal values share a rank, no gaps after ties."""
    v = np.asarray(values, dtype=np.float64)
    key = v if lower_better else -v
    uniq = np.unique(key)
    return np.searchsorted(uniq, key) + 1


def combined_points(
    values: np.ndarray,
    competitors: Sequence[str],
    datasets: Sequence[str],
    measures: Sequence[str],
    lower_better: Sequence[str] = (),
) -> PointsTable:
    """Dense-rank points over a (competitors x datasets x measures) value cube.

    Per (dataset, measure) the best competitor earns P points and each rank
    down earns one less; ties share points. Per-dataset points sum over
    measures, totals over datasets. Measures named in ``lower_better`` rank
    ascending (for example log loss). NaN cells raise IncompleteTableError.
    """
    values = np.asarray(values, dtype=np.float64)
    competitors = tuple(competitors)
    datasets = tuple(datasets)
    measures = tuple(measures)
    p = len(competitors)
    if values.shape != (p, len(datasets), len(measures)):
        raise ValueError(f"value cube shape {values.shape} does not match rosters")
    lower = set(lower_better)
    unknown = lower - set(measures)
    if unknown:
        raise ValueError(f"lower_better names unknown measures: {sorted(unknown)}")

    if np.isnan(values).any():
        i, j, k = (int(v) for v in np.argwhere(np.isnan(values))[0])
        raise IncompleteTableError(
            f"incomplete table: missing value for ({competitors[i]}, {datasets[j]}, {measures[k]})"
        )

    points = np.zeros((p, len(datasets)), dtype=np.int64)
    for j in range(len(datasets)):
        for k, meas in enumerate(measures):
            ranks = dense_rank(values[:, j, k], lower_better=meas in lower)
            points[:, j] += (p + 1) - ranks
    return PointsTable(competitors, datasets, points, points.sum(axis=1))
