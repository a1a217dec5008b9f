"""Five zero-shot classifiers behind one train/score/predict interface.

All five learn a D x M projection matrix W scoring class y for instance x:

* DeViSE, ALE, SJE: bilinear score x' W p(y), trained by seeded per-instance
  SGD on a ranking hinge, implicitly regularized by early stopping on a
  held-out slice of the training rows.
* ESZSL: bilinear score, W in closed form from a doubly regularized square
  loss (feature-side gamma, prototype-side lambda).
* SAE: W solves a Sylvester equation balancing a feature->semantic projection
  against its transposed reconstruction; scoring is cosine similarity between
  the projected instance and the prototype.

Loss forms:

* DeViSE: sum over wrong classes of max(0, margin - s_true + s_wrong).
* ALE: the same hinge estimated by sampled violation search; the weight is
  the harmonic rank discount of the estimated violator rank.
* SJE: only the most violating class, max_y [margin*1{y != true} + s_y] - s_true
  (margin 1 gives the canonical 0/1 task loss).

Every trainer is a pure function of (dataset, config) including the seed.
"""

from __future__ import annotations

import json
import zlib
from dataclasses import asdict, dataclass
from pathlib import Path
from typing import Optional, Sequence

import numpy as np
import scipy.linalg

from .data import Dataset, PrototypeTable

RANKING_METHODS = ("devise", "ale", "sje")
CLOSED_FORM_METHODS = ("eszsl", "sae")
ALL_METHODS = RANKING_METHODS + CLOSED_FORM_METHODS

MODEL_DTYPE = np.dtype("<f8")


class TrainingDivergedError(Exception):
    """A non-finite loss appeared during SGD; carries the failing epoch."""

    def __init__(self, epoch: int):
        self.epoch = epoch
        super().__init__(f"diverged at epoch {epoch}")


class SingularSystemError(Exception):
    """The regularized closed-form system is singular; raise gamma/lambda."""


class SpectralConflictError(Exception):
    """A and -B share an eigenvalue, so the Sylvester equation has no unique solution."""


@dataclass(frozen=True)
class TrainConfig:
    """Hyperparameters shared by all trainers (each uses the relevant subset).

    Defaults are workable placeholders for desk-scale synthetic data, not
    tuned values.
    """

    learning_rate: float = 0.01
    margin: float = 1.0
    epochs: int = 50
    patience: int = 5
    gamma: float = 1.0  # ESZSL feature-side ridge
    lam: float = 1.0  # ESZSL prototype-side ridge / SAE trade-off
    normalize_inputs: bool = True
    sae_feature_space_scoring: bool = False
    seed: int = 0

    def __post_init__(self):
        if self.epochs < 1:
            raise ValueError("epochs must be >= 1")
        if self.learning_rate < 0 or self.margin < 0 or self.gamma < 0 or self.lam < 0:
            raise ValueError("learning_rate, margin, gamma, lam must be >= 0")


@dataclass(frozen=True)
class CompatibilityModel:
    """A trained projection matrix plus its method tag and training metadata."""

    method: str
    w: np.ndarray  # (D, M) float64
    meta: dict

    def __post_init__(self):
        self.w.setflags(write=False)

    @property
    def normalize_inputs(self) -> bool:
        return bool(self.meta.get("config", {}).get("normalize_inputs", False))


def l2_normalize_rows(a: np.ndarray) -> np.ndarray:
    """Row-normalize to unit L2 norm; all-zero rows stay zero."""
    a = np.asarray(a, dtype=np.float64)
    norms = np.linalg.norm(a, axis=-1, keepdims=True)
    norms = np.where(norms == 0, 1.0, norms)
    return a / norms


def _prepared_inputs(dataset: Dataset, rows: np.ndarray, cfg: TrainConfig) -> tuple[np.ndarray, np.ndarray, dict[int, np.ndarray]]:
    """Training rows as float64 (optionally normalized) plus per-class prototypes."""
    x = dataset.embeddings[rows].astype(np.float64)
    y = dataset.labels[rows]
    protos = {c: dataset.prototypes[c].astype(np.float64) for c in dataset.class_order}
    if cfg.normalize_inputs:
        x = l2_normalize_rows(x)
        protos = {c: l2_normalize_rows(v[None, :])[0] for c, v in protos.items()}
    return x, y, protos


def score(model: CompatibilityModel, x: np.ndarray, prototypes: PrototypeTable, candidates: Sequence[int]) -> np.ndarray:
    """Raw compatibility scores of ``x`` against each candidate class.

    Bilinear methods return x' W p(y); SAE returns the cosine similarity of
    the semantic projection x' W with p(y) (or, when the model was trained
    with feature-space scoring, the negative distance between x and W p(y)).
    No input normalization happens here; see :func:`score_rows` for the
    model-consistent evaluation path.
    """
    candidates = list(candidates)
    if not candidates:
        raise ValueError("empty candidate list")
    x = np.asarray(x, dtype=np.float64)
    if x.shape != (model.w.shape[0],):
        raise ValueError(f"instance dim {x.shape} does not match W {model.w.shape}")
    p = np.stack([np.asarray(prototypes[c], dtype=np.float64) for c in candidates])
    if p.shape[1] != model.w.shape[1]:
        raise ValueError(f"prototype dim {p.shape[1]} does not match W {model.w.shape}")
    if model.method == "sae":
        if model.meta.get("config", {}).get("sae_feature_space_scoring"):
            recon = p @ model.w.T  # (C, D) feature-space reconstructions
            return -np.linalg.norm(recon - x[None, :], axis=1)
        proj = x @ model.w  # (M,)
        num = p @ proj
        denom = np.linalg.norm(p, axis=1) * np.linalg.norm(proj)
        denom = np.where(denom == 0, 1.0, denom)
        return num / denom
    return p @ (x @ model.w)


def predict(model: CompatibilityModel, x: np.ndarray, prototypes: PrototypeTable, candidates: Sequence[int]) -> int:
    """Class id with the highest score; exact ties go to the lowest class id."""
    s = score(model, x, prototypes, candidates)
    best = s.max()
    tied = [c for c, v in zip(candidates, s) if v == best]
    return min(tied)


def score_rows(model: CompatibilityModel, dataset: Dataset, rows: np.ndarray, candidates: Sequence[int]) -> np.ndarray:
    """Score matrix (len(rows) x len(candidates)) using the model's own
    normalization convention for embeddings and prototypes."""
    candidates = list(candidates)
    x = dataset.embeddings[rows].astype(np.float64)
    p = dataset.prototypes.matrix(candidates).astype(np.float64)
    if model.normalize_inputs:
        x = l2_normalize_rows(x)
        p = l2_normalize_rows(p)
    if model.method == "sae":
        if model.meta.get("config", {}).get("sae_feature_space_scoring"):
            recon = p @ model.w.T  # (C, D)
            diffs = x[:, None, :] - recon[None, :, :]
            return -np.linalg.norm(diffs, axis=2)
        proj = x @ model.w  # (N, M)
        num = proj @ p.T
        denom = np.linalg.norm(proj, axis=1, keepdims=True) * np.linalg.norm(p, axis=1)[None, :]
        denom = np.where(denom == 0, 1.0, denom)
        return num / denom
    return (x @ model.w) @ p.T


def _derived_rng(x: np.ndarray, y_true: int, candidates: Sequence[int]) -> np.random.Generator:
    # Seed depends on the instance and candidate set, never W, so the sampled
    # trial sequence is stable under W perturbations (finite differences).
    h = zlib.crc32(np.asarray(x, dtype=np.float64).tobytes())
    h = zlib.crc32(np.asarray(list(candidates), dtype=np.int64).tobytes(), h)
    h = zlib.crc32(int(y_true).to_bytes(8, "little", signed=True), h)
    return np.random.default_rng(h)


def _harmonic(r: int) -> float:
    return sum(1.0 / k for k in range(1, r + 1))


def ranking_loss_and_gradient(
    variant: str,
    w: np.ndarray,
    x: np.ndarray,
    y_true: int,
    prototypes,
    candidates: Sequence[int],
    margin: float = 1.0,
    rng: Optional[np.random.Generator] = None,
) -> tuple[float, np.ndarray]:
    """Per-instance ranking loss and its gradient with respect to W.

    ``prototypes`` may be a PrototypeTable or any mapping class id -> vector.
    For ALE the violation search uses ``rng`` when given (SGD passes its own
    generator); otherwise the sampling is a deterministic function of the
    instance, so the result is reproducible and finite-difference checkable.
    """
    variant = variant.lower()
    if variant not in RANKING_METHODS:
        raise ValueError(f"unknown ranking variant {variant!r}")
    candidates = list(candidates)
    if y_true not in candidates:
        raise ValueError(f"true class {y_true} not among candidates")
    x = np.asarray(x, dtype=np.float64)
    w = np.asarray(w, dtype=np.float64)
    if x.shape[0] != w.shape[0]:
        raise ValueError("instance dimension does not match W")
    p = np.stack([np.asarray(prototypes[c], dtype=np.float64) for c in candidates])
    if p.shape[1] != w.shape[1]:
        raise ValueError("prototype dimension does not match W")

    xw = x @ w  # (M,)
    s = p @ xw  # scores per candidate
    true_idx = candidates.index(y_true)
    s_true = s[true_idx]
    p_true = p[true_idx]
    wrong = [i for i in range(len(candidates)) if i != true_idx]
    grad = np.zeros_like(w)
    if not wrong:
        return 0.0, grad

    if variant == "devise":
        loss = 0.0
        direction = np.zeros(w.shape[1])
        for i in wrong:
            slack = margin - s_true + s[i]
            if slack > 0:
                loss += slack
                direction += p[i] - p_true
        if loss > 0:
            grad = np.outer(x, direction)
        return float(loss), grad

    if variant == "sje":
        vals = s + margin
        vals[true_idx] = s_true  # zero task loss for the true class
        best = int(np.argmax(vals))
        loss = vals[best] - s_true
        if loss > 0 and best != true_idx:
            grad = np.outer(x, p[best] - p_true)
            return float(loss), grad
        return float(max(loss, 0.0)), grad

    # ALE: sample wrong classes in a seeded order until one violates the
    # margin; weight the single violating term by the harmonic discount of
    # the rank estimate floor(C-1 / trials).
    gen = rng if rng is not None else _derived_rng(x, y_true, candidates)
    order = gen.permutation(len(wrong))
    c_minus_1 = len(wrong)
    for n, j in enumerate(order, start=1):
        i = wrong[j]
        slack = margin - s_true + s[i]
        if slack > 0:
            rank_est = max(1, c_minus_1 // n)
            weight = _harmonic(rank_est)
            grad = weight * np.outer(x, p[i] - p_true)
            return float(weight * slack), grad
    return 0.0, grad


def _stratified_validation_rows(labels: np.ndarray, rows: np.ndarray, rng: np.random.Generator) -> tuple[np.ndarray, np.ndarray]:
    """Hold out ~10% of rows per class (at least one when a class has >= 2)."""
    val_mask = np.zeros(rows.shape[0], dtype=bool)
    for c in np.unique(labels[rows]):
        idx = np.flatnonzero(labels[rows] == c)
        if idx.size < 2:
            continue
        k = max(1, int(np.floor(0.1 * idx.size + 0.5)))
        k = min(k, idx.size - 1)
        chosen = rng.choice(idx, size=k, replace=False)
        val_mask[chosen] = True
    return rows[~val_mask], rows[val_mask]


def train_ranking(variant: str, train: Dataset, cfg: TrainConfig) -> CompatibilityModel:
    """Seeded per-instance SGD over the training rows with the variant's loss.

    Training halts at ``cfg.epochs`` or when held-out seen-class top-1 fails
    to improve for ``cfg.patience`` consecutive epochs; the weights from the
    best validation epoch are returned. Raises TrainingDivergedError when a
    non-finite loss appears.
    """
    variant = variant.lower()
    if variant not in RANKING_METHODS:
        raise ValueError(f"unknown ranking variant {variant!r}")
    rng = np.random.default_rng(cfg.seed)
    d, m = train.d, train.m
    w = rng.uniform(-1.0 / np.sqrt(d), 1.0 / np.sqrt(d), size=(d, m))

    x_all, y_all, protos = _prepared_inputs(train, train.split.train_rows, cfg)
    seen = list(train.split.seen)
    local_rows = np.arange(x_all.shape[0], dtype=np.int64)
    grad_rows, val_rows = _stratified_validation_rows(y_all, local_rows, rng)
    p_seen = np.stack([protos[c] for c in seen])
    seen_arr = np.asarray(seen, dtype=np.int64)

    def validation_top1(wm: np.ndarray) -> float:
        s = (x_all[val_rows] @ wm) @ p_seen.T
        order = np.lexsort((np.broadcast_to(seen_arr, s.shape), -s), axis=1)
        pred = seen_arr[order[:, 0]]
        return float((pred == y_all[val_rows]).mean())

    best_w = w.copy()
    best_acc = -np.inf
    bad_epochs = 0
    stopped_early = False
    epochs_run = 0
    for epoch in range(cfg.epochs):
        epochs_run = epoch + 1
        for i in rng.permutation(grad_rows):
            loss, grad = ranking_loss_and_gradient(
                variant, w, x_all[i], int(y_all[i]), protos, seen, margin=cfg.margin, rng=rng
            )
            if not np.isfinite(loss) or not np.all(np.isfinite(grad)):
                raise TrainingDivergedError(epoch)
            if loss > 0:
                w -= cfg.learning_rate * grad
        if not np.all(np.isfinite(w)):
            raise TrainingDivergedError(epoch)
        if val_rows.size:
            acc = validation_top1(w)
            if acc > best_acc:
                best_acc = acc
                best_w = w.copy()
                bad_epochs = 0
            else:
                bad_epochs += 1
                if bad_epochs >= cfg.patience:
                    stopped_early = True
                    break
        else:
            best_w = w.copy()

    meta = {
        "seed": cfg.seed,
        "epochs_run": epochs_run,
        "stopped_early": stopped_early,
        "config": asdict(cfg),
    }
    return CompatibilityModel(variant, best_w, meta)


def train_eszsl(train: Dataset, cfg: TrainConfig) -> CompatibilityModel:
    """Closed-form W = (X X' + gamma I)^-1 X Y S' (S S' + lambda I)^-1.

    X stacks the training embeddings as columns (D x N), S the seen-class
    prototypes as columns (M x N0), and Y is the +1/-1 class indicator. The
    returned W zeroes the gradient of the regularized square loss to within
    1e-6 relative; anything worse raises SingularSystemError.
    """
    x_rows, y_all, protos = _prepared_inputs(train, train.split.train_rows, cfg)
    seen = list(train.split.seen)
    x = x_rows.T  # (D, N)
    s = np.stack([protos[c] for c in seen]).T  # (M, N0)
    col = {c: j for j, c in enumerate(seen)}
    y = -np.ones((x.shape[1], len(seen)))
    for i, lab in enumerate(y_all):
        y[i, col[int(lab)]] = 1.0

    a = x @ x.T + cfg.gamma * np.eye(x.shape[0])
    b = s @ s.T + cfg.lam * np.eye(s.shape[0])
    k = x @ y @ s.T
    try:
        w = np.linalg.solve(a, k)
        w = np.linalg.solve(b.T, w.T).T
    except np.linalg.LinAlgError as exc:
        raise SingularSystemError(f"singular system ({exc}); use gamma, lambda > 0") from exc

    residual = a @ w @ b - k
    if not np.all(np.isfinite(w)) or np.linalg.norm(residual) > 1e-6 * (1.0 + np.linalg.norm(w)):
        raise SingularSystemError("singular system: stationarity not reached; use gamma, lambda > 0")

    meta = {"seed": cfg.seed, "epochs_run": 0, "stopped_early": False, "config": asdict(cfg)}
    return CompatibilityModel("eszsl", w, meta)


def solve_sylvester(a: np.ndarray, b: np.ndarray, c: np.ndarray) -> np.ndarray:
    """Solve A W + W B = C; requires the spectra of A and -B to be disjoint.

    The all-zero B degenerates to the linear system A W = C. The solution is
    residual-checked to 1e-8 relative; failures raise SpectralConflictError.
    """
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    c = np.asarray(c, dtype=np.float64)
    if not np.any(b):
        try:
            w = np.linalg.solve(a, c)
        except np.linalg.LinAlgError as exc:
            raise SpectralConflictError(f"spectral conflict: A singular with B = 0 ({exc})") from exc
    else:
        eig_a = np.linalg.eigvals(a)
        eig_nb = np.linalg.eigvals(-b)
        gap = np.abs(eig_a[:, None] - eig_nb[None, :]).min()
        scale = max(np.abs(eig_a).max(), np.abs(eig_nb).max(), 1.0)
        if gap <= 1e-12 * scale:
            raise SpectralConflictError("spectral conflict: A and -B share an eigenvalue")
        w = scipy.linalg.solve_sylvester(a, b, c)
    residual = np.linalg.norm(a @ w + w @ b - c)
    bound = 1e-8 * max(np.linalg.norm(c), np.finfo(np.float64).tiny)
    if not np.all(np.isfinite(w)) or residual > bound:
        raise SpectralConflictError(f"spectral conflict: residual {residual:.3e} exceeds {bound:.3e}")
    return w


def train_sae(train: Dataset, cfg: TrainConfig) -> CompatibilityModel:
    """Learn the SAE projection by solving its Sylvester stationarity condition.

    With X the training embeddings as columns and S the per-instance
    prototype columns, the M x D projection solves
    (S S') W + W (lambda X X') = (1 + lambda) S X'. The model stores the
    transpose so every method shares the D x M convention.
    """
    if cfg.lam <= 0:
        raise ValueError("SAE requires lam > 0")
    x_rows, y_all, protos = _prepared_inputs(train, train.split.train_rows, cfg)
    x = x_rows.T  # (D, N)
    s = np.stack([protos[int(c)] for c in y_all]).T  # (M, N)
    a = s @ s.T
    b = cfg.lam * (x @ x.T)
    c = (1.0 + cfg.lam) * (s @ x.T)
    w_md = solve_sylvester(a, b, c)  # (M, D)
    meta = {"seed": cfg.seed, "epochs_run": 0, "stopped_early": False, "config": asdict(cfg)}
    return CompatibilityModel("sae", w_md.T.copy(), meta)


def train(method: str, dataset: Dataset, cfg: TrainConfig) -> CompatibilityModel:
    """Dispatch to the trainer for ``method``."""
    method = method.lower()
    if method in RANKING_METHODS:
        return train_ranking(method, dataset, cfg)
    if method == "eszsl":
        return train_eszsl(dataset, cfg)
    if method == "sae":
        return train_sae(dataset, cfg)
    raise ValueError(f"unknown method {method!r}")


def save_model(model: CompatibilityModel, path) -> None:
    """Write a model artifact: one JSON header line, then the raw W payload."""
    header = {
        "method": model.method,
        "d": int(model.w.shape[0]),
        "m": int(model.w.shape[1]),
        "dtype": MODEL_DTYPE.str,
        "meta": model.meta,
    }
    blob = json.dumps(header, sort_keys=True).encode("utf-8") + b"\n"
    blob += np.ascontiguousarray(model.w, dtype=MODEL_DTYPE).tobytes()
    Path(path).write_bytes(blob)


def load_model(path) -> CompatibilityModel:
    raw = Path(path).read_bytes()
    nl = raw.index(b"\n")
    header = json.loads(raw[:nl].decode("utf-8"))
    d, m = int(header["d"]), int(header["m"])
    w = np.frombuffer(raw[nl + 1 :], dtype=np.dtype(header["dtype"])).reshape(d, m).copy()
    return CompatibilityModel(header["method"], w, header["meta"])
