"""Six fusion schemes over aligned base-classifier outputs.

All schemes consume a BasePredictionSet: per-classifier score rows min-max
normalized to [0, 1] per instance, plus the derived predicted label,
confidence (row max), and margin (top1 - top2) for each classifier.

Schemes:

* MV   majority vote; ties by summed confidence, then lowest class id
* MDT  decision tree over (confidence, margin) meta-features whose leaves
       delegate to one base classifier
* DNN  two-hidden-layer network on the concatenated score rows, rectified
       linear throughout (output layer included), squared-error targets
* GT   repeated game: multiplicative weight updates from per-player payoff,
       fused by weighted plurality
* Auc  sealed-bid auction: the most confident classifier wins the instance
* Con  consensus: iterate the softmaxed score rows to their uniform average

The hard ceiling for selector-style fusion is 100 minus the fraction of
instances no base classifier gets right.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

from .metrics import ScoreMatrix

SCHEMES = ("mv", "mdt", "dnn", "gt", "con", "auc")

FUSION_DTYPE = np.dtype("<f8")


class FusionDivergedError(Exception):
    """Non-finite loss during DNN fusion training."""


class NoConsensusError(Exception):
    """Consensus iteration exhausted max_iters; carries the last distribution."""

    def __init__(self, last_distribution: np.ndarray):
        self.last_distribution = last_distribution
        super().__init__("no consensus within max_iters")


@dataclass(frozen=True)
class BasePredictionSet:
    """Aligned outputs of K base classifiers on one instance set."""

    classifiers: tuple[str, ...]
    candidates: tuple[int, ...]
    scores: np.ndarray  # (K, N, C) min-max normalized per instance
    predicted: np.ndarray  # (K, N) class ids
    confidence: np.ndarray  # (K, N) row max of normalized scores
    margin: np.ndarray  # (K, N) top1 - top2 normalized score

    def __post_init__(self):
        for a in (self.scores, self.predicted, self.confidence, self.margin):
            a.setflags(write=False)

    @property
    def k(self) -> int:
        return len(self.classifiers)

    @property
    def n(self) -> int:
        return int(self.scores.shape[1])


def build_prediction_set(classifier_names: Sequence[str], score_matrices: Sequence[ScoreMatrix]) -> BasePredictionSet:
    """Normalize and align per-classifier score matrices into one set."""
    names = tuple(classifier_names)
    if len(names) != len(score_matrices) or not names:
        raise ValueError("need one score matrix per classifier name")
    candidates = score_matrices[0].candidates
    rows = score_matrices[0].rows
    for sm in score_matrices:
        if sm.candidates != candidates or sm.rows != rows:
            raise ValueError("score matrices are not aligned on instances and candidates")
    cand = np.asarray(candidates, dtype=np.int64)
    k, n, c = len(names), rows, len(candidates)
    scores = np.empty((k, n, c))
    for i, sm in enumerate(score_matrices):
        v = sm.values.astype(np.float64)
        lo = v.min(axis=1, keepdims=True)
        hi = v.max(axis=1, keepdims=True)
        span = np.where(hi > lo, hi - lo, 1.0)
        scores[i] = (v - lo) / span

    order = np.lexsort(
        (np.broadcast_to(cand, scores.shape), -scores),
        axis=2,
    )
    predicted = cand[order[:, :, 0]]
    top1 = np.take_along_axis(scores, order[:, :, :1], axis=2)[:, :, 0]
    if c > 1:
        top2 = np.take_along_axis(scores, order[:, :, 1:2], axis=2)[:, :, 0]
    else:
        top2 = np.zeros_like(top1)
    return BasePredictionSet(names, candidates, scores, predicted, top1, top1 - top2)


@dataclass(frozen=True)
class FusionModel:
    """A fitted fusion scheme; ``params`` holds the scheme-specific payload."""

    scheme: str
    k: int
    candidates: tuple[int, ...]
    seed: int
    params: dict = field(default_factory=dict)


def _break_label_tie(tied: np.ndarray, weight_per_label: dict[int, float]) -> int:
    best = max(weight_per_label[int(c)] for c in tied)
    winners = [int(c) for c in tied if weight_per_label[int(c)] == best]
    return min(winners)


def _plurality(preds: BasePredictionSet, weights: np.ndarray) -> np.ndarray:
    """Weighted plurality labels; ties by summed confidence, then lowest id."""
    out = np.empty(preds.n, dtype=np.int64)
    for i in range(preds.n):
        votes: dict[int, float] = {}
        conf: dict[int, float] = {}
        for k in range(preds.k):
            lab = int(preds.predicted[k, i])
            votes[lab] = votes.get(lab, 0.0) + float(weights[k])
            conf[lab] = conf.get(lab, 0.0) + float(preds.confidence[k, i])
        top = max(votes.values())
        tied = np.asarray([lab for lab, v in votes.items() if v == top])
        out[i] = tied[0] if tied.size == 1 else _break_label_tie(tied, conf)
    return out


def fuse_majority(preds: BasePredictionSet) -> np.ndarray:
    """Per-instance plurality over the K predicted labels."""
    return _plurality(preds, np.ones(preds.k))


# --- Meta decision tree -----------------------------------------------------

MDT_MAX_DEPTH = 8
MDT_MIN_LEAF = 16


def _meta_features(preds: BasePredictionSet) -> np.ndarray:
    """(N, 2K) matrix: per-classifier confidence then per-classifier margin."""
    return np.hstack([preds.confidence.T, preds.margin.T])


def _best_leaf(correct: np.ndarray, idx: np.ndarray) -> tuple[int, int]:
    """Classifier index with most correct predictions on ``idx`` (ties: lowest)."""
    counts = correct[idx].sum(axis=0)
    best = int(np.argmax(counts))
    return best, int(counts[best])


def _grow_tree(features: np.ndarray, correct: np.ndarray, idx: np.ndarray, depth: int) -> dict:
    leaf_clf, leaf_hits = _best_leaf(correct, idx)
    node: dict = {"leaf": leaf_clf}
    if depth >= MDT_MAX_DEPTH or idx.size <= MDT_MIN_LEAF:
        return node
    best_gain = 0
    best_split = None
    for f in range(features.shape[1]):
        vals = np.unique(features[idx, f])
        if vals.size < 2:
            continue
        for t in (vals[:-1] + vals[1:]) / 2.0:
            left = idx[features[idx, f] <= t]
            right = idx[features[idx, f] > t]
            if left.size == 0 or right.size == 0:
                continue
            _, lh = _best_leaf(correct, left)
            _, rh = _best_leaf(correct, right)
            gain = lh + rh - leaf_hits
            if gain > best_gain:
                best_gain = gain
                best_split = (f, float(t), left, right)
    if best_split is None:
        return node
    f, t, left, right = best_split
    return {
        "feature": f,
        "threshold": t,
        "left": _grow_tree(features, correct, left, depth + 1),
        "right": _grow_tree(features, correct, right, depth + 1),
    }


def train_mdt(preds_fit: BasePredictionSet, true_labels: np.ndarray) -> FusionModel:
    """Grow a decision tree on confidence/margin meta-features.

    Each leaf names the base classifier whose prediction the tree delegates
    to; splits maximize the gain in correctly delegated instances and stop at
    depth 8 or 16 instances per node.
    """
    true_labels = np.asarray(true_labels, dtype=np.int64)
    if preds_fit.n == 0:
        raise ValueError("empty fit set")
    features = _meta_features(preds_fit)
    correct = (preds_fit.predicted == true_labels[None, :]).T.astype(np.int64)  # (N, K)
    tree = _grow_tree(features, correct, np.arange(preds_fit.n), depth=0)
    return FusionModel("mdt", preds_fit.k, preds_fit.candidates, seed=0, params={"tree": tree})


def _route(tree: dict, row: np.ndarray) -> int:
    node = tree
    while "leaf" not in node:
        node = node["left"] if row[node["feature"]] <= node["threshold"] else node["right"]
    return int(node["leaf"])


def fuse_mdt(model: FusionModel, preds: BasePredictionSet) -> np.ndarray:
    if model.k != preds.k:
        raise ValueError(f"model fitted for {model.k} classifiers, got {preds.k}")
    features = _meta_features(preds)
    out = np.empty(preds.n, dtype=np.int64)
    for i in range(preds.n):
        out[i] = preds.predicted[_route(model.params["tree"], features[i]), i]
    return out


# --- Two-hidden-layer network ----------------------------------------------


@dataclass(frozen=True)
class DnnConfig:
    hidden1: int = 32
    hidden2: int = 16
    lr: float = 0.01
    epochs: int = 60
    seed: int = 0


def _relu(z: np.ndarray) -> np.ndarray:
    return np.maximum(z, 0.0)


def _forward(layers: list[tuple[np.ndarray, np.ndarray]], x: np.ndarray):
    activations = [x]
    pre = []
    h = x
    for w, b in layers:
        z = h @ w + b
        pre.append(z)
        h = _relu(z)
        activations.append(h)
    return activations, pre


def train_dnn(preds_fit: BasePredictionSet, true_labels: np.ndarray, cfg: DnnConfig = DnnConfig()) -> FusionModel:
    """Fit the score-concatenation network by seeded per-sample SGD on MSE.

    Inputs are the K concatenated normalized score rows (K*C reals); the
    output layer has one rectified-linear unit per candidate slot and is
    regressed onto the one-hot true slot. The fitted network binds the
    candidate count: fusing later requires the same number of candidates.
    """
    true_labels = np.asarray(true_labels, dtype=np.int64)
    if preds_fit.n == 0:
        raise ValueError("empty fit set")
    k, n, c = preds_fit.scores.shape
    x = preds_fit.scores.transpose(1, 0, 2).reshape(n, k * c)
    col = {cand: j for j, cand in enumerate(preds_fit.candidates)}
    targets = np.zeros((n, c))
    for i, lab in enumerate(true_labels):
        targets[i, col[int(lab)]] = 1.0

    rng = np.random.default_rng(cfg.seed)
    sizes = [k * c, cfg.hidden1, cfg.hidden2, c]
    layers = []
    for fan_in, fan_out in zip(sizes[:-1], sizes[1:]):
        w = rng.standard_normal((fan_in, fan_out)) * np.sqrt(2.0 / fan_in)
        layers.append((w, np.zeros(fan_out)))

    for _ in range(cfg.epochs):
        for i in rng.permutation(n):
            acts, pre = _forward(layers, x[i])
            out = acts[-1]
            err = out - targets[i]
            loss = float(np.mean(err**2))
            if not np.isfinite(loss):
                raise FusionDivergedError("diverged: non-finite loss")
            delta = (2.0 / c) * err * (pre[-1] > 0)
            for li in range(len(layers) - 1, -1, -1):
                w, b = layers[li]
                grad_w = np.outer(acts[li], delta)
                grad_b = delta
                if li > 0:
                    delta = (w @ delta) * (pre[li - 1] > 0)
                layers[li] = (w - cfg.lr * grad_w, b - cfg.lr * grad_b)

    params = {
        "weights": [w for w, _ in layers],
        "biases": [b for _, b in layers],
        "config": {"hidden1": cfg.hidden1, "hidden2": cfg.hidden2, "lr": cfg.lr, "epochs": cfg.epochs},
    }
    return FusionModel("dnn", k, preds_fit.candidates, seed=cfg.seed, params=params)


def dnn_fit_mse(model: FusionModel, preds: BasePredictionSet, true_labels: np.ndarray) -> float:
    """Mean squared error of the fitted network on an aligned set."""
    k, n, c = preds.scores.shape
    x = preds.scores.transpose(1, 0, 2).reshape(n, k * c)
    layers = list(zip(model.params["weights"], model.params["biases"]))
    col = {cand: j for j, cand in enumerate(preds.candidates)}
    targets = np.zeros((n, c))
    for i, lab in enumerate(np.asarray(true_labels, dtype=np.int64)):
        targets[i, col[int(lab)]] = 1.0
    acts, _ = _forward(layers, x)
    return float(np.mean((acts[-1] - targets) ** 2))


def fuse_dnn(model: FusionModel, preds: BasePredictionSet) -> np.ndarray:
    """Argmax of the network outputs per instance, ties to the lowest class id.

    The network maps score patterns to candidate slots, so the candidate
    count must match the fit-time count (the ids themselves may differ).
    """
    if model.k != preds.k:
        raise ValueError(f"model fitted for {model.k} classifiers, got {preds.k}")
    if len(model.candidates) != len(preds.candidates):
        raise ValueError(
            f"candidate count mismatch: fitted on {len(model.candidates)}, fusing {len(preds.candidates)}"
        )
    k, n, c = preds.scores.shape
    x = preds.scores.transpose(1, 0, 2).reshape(n, k * c)
    layers = list(zip(model.params["weights"], model.params["biases"]))
    acts, _ = _forward(layers, x)
    out = acts[-1]
    cand = np.asarray(preds.candidates, dtype=np.int64)
    order = np.lexsort((np.broadcast_to(cand, out.shape), -out), axis=1)
    return cand[order[:, 0]]


# --- Repeated game ----------------------------------------------------------

GT_LEARNING_RATE = 0.5


def train_game(preds_fit: BasePredictionSet, true_labels: np.ndarray, rounds: int) -> FusionModel:
    """Multiplicative-weights game over the K base classifiers.

    Every round computes the weighted-plurality labels (the game state,
    recorded as an accuracy trajectory) and pays each player its agreement
    rate with the true labels minus its disagreement rate; weights update as
    w <- normalize(w * (1 + 0.5 * payoff)).
    """
    if rounds < 1:
        raise ValueError("rounds must be >= 1")
    true_labels = np.asarray(true_labels, dtype=np.int64)
    k = preds_fit.k
    weights = np.full(k, 1.0 / k)
    acc = (preds_fit.predicted == true_labels[None, :]).mean(axis=1)  # per player
    payoff = 2.0 * acc - 1.0
    trajectory = []
    for _ in range(rounds):
        fused = _plurality(preds_fit, weights)
        trajectory.append(float((fused == true_labels).mean()))
        weights = weights * (1.0 + GT_LEARNING_RATE * payoff)
        weights = weights / weights.sum()
    return FusionModel(
        "gt", k, preds_fit.candidates, seed=0,
        params={"weights": weights, "rounds": rounds, "fit_accuracy_trajectory": trajectory},
    )


def fuse_game(model: FusionModel, preds: BasePredictionSet) -> np.ndarray:
    if model.k != preds.k:
        raise ValueError(f"model fitted for {model.k} classifiers, got {preds.k}")
    return _plurality(preds, np.asarray(model.params["weights"], dtype=np.float64))


# --- Auction ----------------------------------------------------------------


def fuse_auction(preds: BasePredictionSet) -> np.ndarray:
    """Each classifier bids its confidence; the highest bid wins the instance.

    Bid ties go to the larger margin, then the lowest classifier index.
    """
    out = np.empty(preds.n, dtype=np.int64)
    for i in range(preds.n):
        bids = preds.confidence[:, i]
        top = bids.max()
        tied = np.flatnonzero(bids == top)
        if tied.size > 1:
            margins = preds.margin[tied, i]
            tied = tied[margins == margins.max()]
        out[i] = preds.predicted[int(tied[0]), i]
    return out


# --- Consensus ---------------------------------------------------------------


def _softmax_rows(v: np.ndarray) -> np.ndarray:
    shifted = v - v.max(axis=-1, keepdims=True)
    e = np.exp(shifted)
    return e / e.sum(axis=-1, keepdims=True)


def fuse_consensus(preds: BasePredictionSet, tolerance: float = 1e-9, max_iters: int = 100) -> np.ndarray:
    """Iterate the softmaxed score rows to a shared distribution and argmax it.

    Each step replaces all K rows by their uniform average; iteration stops
    when successive distributions differ by less than ``tolerance`` in L1
    (one step reaches the fixed point, the loop is kept for generality).
    Raises NoConsensusError with the last distribution when ``max_iters`` is
    exhausted.
    """
    if tolerance <= 0:
        raise ValueError("tolerance must be > 0")
    p = _softmax_rows(preds.scores)  # (K, N, C)
    converged = False
    for _ in range(max_iters):
        mean = p.mean(axis=0)  # (N, C)
        new_p = np.repeat(mean[None, :, :], preds.k, axis=0)
        diff = np.abs(new_p - p).sum(axis=-1).max()
        p = new_p
        if diff < tolerance:
            converged = True
            break
    if not converged:
        raise NoConsensusError(p[0])
    consensus = p[0]
    cand = np.asarray(preds.candidates, dtype=np.int64)
    order = np.lexsort((np.broadcast_to(cand, consensus.shape), -consensus), axis=1)
    return cand[order[:, 0]]


def ceiling(levels: Sequence[float]) -> float:
    """Selector-fusion upper bound: 100 minus the share no classifier solves.

    ``levels`` are the difficulty-level percentages (share of instances
    correctly identified by exactly 0, 1, ..., K classifiers) and should sum
    to roughly 100.
    """
    levels = [float(v) for v in levels]
    total = sum(levels)
    if abs(total - 100.0) > 5.0:
        raise ValueError(f"difficulty levels sum to {total}, expected about 100")
    return 100.0 - levels[0]


# --- Artifact round-trip -----------------------------------------------------


def save_fusion_model(model: FusionModel, path) -> None:
    """One JSON header line; DNN layer matrices follow as raw little-endian reals."""
    header = {
        "scheme": model.scheme,
        "k": model.k,
        "candidates": list(model.candidates),
        "seed": model.seed,
    }
    blob = b""
    if model.scheme == "dnn":
        shapes = [list(w.shape) for w in model.params["weights"]]
        header["config"] = model.params["config"]
        header["weight_shapes"] = shapes
        for w in model.params["weights"]:
            blob += np.ascontiguousarray(w, dtype=FUSION_DTYPE).tobytes()
        for b in model.params["biases"]:
            blob += np.ascontiguousarray(b, dtype=FUSION_DTYPE).tobytes()
    elif model.scheme == "mdt":
        header["tree"] = model.params["tree"]
    elif model.scheme == "gt":
        header["weights"] = [float(v) for v in model.params["weights"]]
        header["rounds"] = model.params["rounds"]
    elif model.scheme == "con":
        header["tolerance"] = model.params.get("tolerance", 1e-9)
        header["max_iters"] = model.params.get("max_iters", 100)
    Path(path).write_bytes(json.dumps(header, sort_keys=True).encode("utf-8") + b"\n" + blob)


def load_fusion_model(path) -> FusionModel:
    raw = Path(path).read_bytes()
    nl = raw.index(b"\n")
    header = json.loads(raw[:nl].decode("utf-8"))
    scheme = header["scheme"]
    params: dict = {}
    if scheme == "dnn":
        blob = raw[nl + 1 :]
        weights, biases = [], []
        offset = 0
        for shape in header["weight_shapes"]:
            count = int(np.prod(shape))
            weights.append(
                np.frombuffer(blob, dtype=FUSION_DTYPE, count=count, offset=offset).reshape(shape).copy()
            )
            offset += count * FUSION_DTYPE.itemsize
        for shape in header["weight_shapes"]:
            count = int(shape[1])
            biases.append(np.frombuffer(blob, dtype=FUSION_DTYPE, count=count, offset=offset).copy())
            offset += count * FUSION_DTYPE.itemsize
        params = {"weights": weights, "biases": biases, "config": header["config"]}
    elif scheme == "mdt":
        params = {"tree": header["tree"]}
    elif scheme == "gt":
        params = {"weights": np.asarray(header["weights"]), "rounds": header["rounds"]}
    elif scheme == "con":
        params = {"tolerance": header["tolerance"], "max_iters": header["max_iters"]}
    return FusionModel(scheme, int(header["k"]), tuple(header["candidates"]), int(header["seed"]), params)
