"""Dataset model, on-disk bundle format, validation, and synthetic generation.

A dataset couples an embedding matrix (one D-dimensional float32 row per
instance) with integer class labels, a table of M-dimensional class
prototypes (semantic embeddings), and a seen/unseen split. Train rows carry
seen-class labels only, test rows unseen-class labels only, and the two
class sets are disjoint.

Bundle layout (one directory per dataset):

    header.txt        JSON header: n, d, m, seen, unseen, train_rows_file,
                      test_rows_file, attribute_names (optional id_map)
    embeddings.f32    N x D float32, row-major, little-endian
    prototypes.f32    (N0+N1) x M float32 in header class order (seen then
                      unseen)
    attributes.f32    optional, (N0+N1) x A float32, same class order
    labels.txt        one class id per line (1-based)
    train_rows.txt    one 0-based row index per line
    test_rows.txt     one 0-based row index per line

Class ids are 1-based integers. Converters ingesting external datasets with
arbitrary ids should re-map them to 1..C and record the original ids under
the header's ``id_map`` key.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

FLOAT_DTYPE = np.dtype("<f4")

HEADER_FILE = "header.txt"
EMBEDDINGS_FILE = "embeddings.f32"
PROTOTYPES_FILE = "prototypes.f32"
ATTRIBUTES_FILE = "attributes.f32"
LABELS_FILE = "labels.txt"
TRAIN_ROWS_FILE = "train_rows.txt"
TEST_ROWS_FILE = "test_rows.txt"


class BundleError(Exception):
    """Base class for bundle load/save failures."""


class MalformedBundleError(BundleError):
    """A required bundle part is missing or unparseable."""


class CorruptPayloadError(BundleError):
    """A payload file disagrees with the dimensions declared in the header."""


class InvalidDatasetError(Exception):
    """A loaded or constructed dataset violates its invariants."""

    def __init__(self, violations: list["Violation"]):
        self.violations = violations
        lines = "; ".join(str(v) for v in violations)
        super().__init__(f"invalid dataset: {lines}")


class DegenerateMetaSplitError(Exception):
    """The requested meta split leaves zero seen or zero pseudo-unseen classes."""


@dataclass(frozen=True)
class Violation:
    """One invariant violation, naming the invariant and the offending item."""

    invariant: str
    detail: str

    def __str__(self) -> str:
        return f"{self.invariant}: {self.detail}"


@dataclass(frozen=True)
class PrototypeTable:
    """Per-class semantic embedding vectors, all of one dimension."""

    vectors: dict[int, np.ndarray]

    def __post_init__(self):
        for v in self.vectors.values():
            v.setflags(write=False)

    @property
    def dim(self) -> int:
        first = next(iter(self.vectors.values()))
        return int(first.shape[0])

    def __getitem__(self, class_id: int) -> np.ndarray:
        return self.vectors[class_id]

    def __contains__(self, class_id: int) -> bool:
        return class_id in self.vectors

    def matrix(self, class_ids: Sequence[int]) -> np.ndarray:
        """Stack prototype vectors for ``class_ids`` into a (len, M) array."""
        return np.stack([self.vectors[c] for c in class_ids])


@dataclass(frozen=True)
class AttributeTable:
    """Per-class attribute vectors with their attribute names."""

    names: tuple[str, ...]
    vectors: dict[int, np.ndarray]

    def __post_init__(self):
        for v in self.vectors.values():
            v.setflags(write=False)

    def matrix(self, class_ids: Sequence[int]) -> np.ndarray:
        return np.stack([self.vectors[c] for c in class_ids])


@dataclass(frozen=True)
class SplitSpec:
    """Seen/unseen class lists plus train/test row indices."""

    seen: tuple[int, ...]
    unseen: tuple[int, ...]
    train_rows: np.ndarray
    test_rows: np.ndarray

    def __post_init__(self):
        self.train_rows.setflags(write=False)
        self.test_rows.setflags(write=False)


@dataclass(frozen=True)
class Dataset:
    """Immutable embedding dataset with labels, prototypes, and a split."""

    embeddings: np.ndarray  # (N, D) float32
    labels: np.ndarray  # (N,) int64 class ids
    prototypes: PrototypeTable
    split: SplitSpec
    attributes: Optional[AttributeTable] = None

    def __post_init__(self):
        self.embeddings.setflags(write=False)
        self.labels.setflags(write=False)

    @property
    def n(self) -> int:
        return int(self.embeddings.shape[0])

    @property
    def d(self) -> int:
        return int(self.embeddings.shape[1])

    @property
    def m(self) -> int:
        return self.prototypes.dim

    @property
    def class_order(self) -> tuple[int, ...]:
        """Canonical class ordering used for prototype/attribute payloads."""
        return self.split.seen + self.split.unseen


def validate(dataset: Dataset) -> list[Violation]:
    """Check every dataset invariant; an empty list means the dataset is valid.

    Violations are data, not errors: callers decide whether to raise.
    """
    out: list[Violation] = []
    emb, labels, split = dataset.embeddings, dataset.labels, dataset.split

    if emb.ndim != 2 or emb.shape[0] < 1 or emb.shape[1] < 1:
        out.append(Violation("embedding-shape", f"expected (N>=1, D>=1), got {emb.shape}"))
        return out
    if not np.all(np.isfinite(emb)):
        bad = int(np.argwhere(~np.isfinite(emb))[0][0])
        out.append(Violation("embedding-finite", f"non-finite value in row {bad}"))
    if labels.shape != (emb.shape[0],):
        out.append(Violation("label-shape", f"expected ({emb.shape[0]},), got {labels.shape}"))
        return out
    if np.any(labels < 1):
        bad = int(np.argwhere(labels < 1)[0][0])
        out.append(Violation("label-range", f"row {bad} has class id {int(labels[bad])} < 1"))

    seen, unseen = set(split.seen), set(split.unseen)
    if len(split.seen) != len(seen) or len(split.unseen) != len(unseen):
        out.append(Violation("class-list-unique", "duplicate class id in seen or unseen list"))
    if not seen:
        out.append(Violation("split-nonempty", "no seen classes"))
    if not unseen:
        out.append(Violation("split-nonempty", "no unseen classes"))
    for c in sorted(seen & unseen):
        out.append(Violation("seen-unseen-disjoint", f"class {c} appears in both seen and unseen"))

    for name, rows in (("train", split.train_rows), ("test", split.test_rows)):
        if rows.size and (rows.min() < 0 or rows.max() >= emb.shape[0]):
            out.append(Violation("row-index-range", f"{name}_rows index out of range"))
        if len(np.unique(rows)) != rows.size:
            out.append(Violation("row-index-unique", f"duplicate index in {name}_rows"))
    overlap = np.intersect1d(split.train_rows, split.test_rows)
    if overlap.size:
        out.append(Violation("train-test-disjoint", f"row {int(overlap[0])} in both train and test"))

    # Label membership per side of the split.
    ok_rows = split.train_rows[(split.train_rows >= 0) & (split.train_rows < emb.shape[0])]
    for r in ok_rows:
        if int(labels[r]) not in seen:
            out.append(Violation("train-labels-seen", f"train row {int(r)} labeled {int(labels[r])}, not a seen class"))
            break
    ok_rows = split.test_rows[(split.test_rows >= 0) & (split.test_rows < emb.shape[0])]
    for r in ok_rows:
        if int(labels[r]) not in unseen:
            out.append(Violation("test-labels-unseen", f"test row {int(r)} labeled {int(labels[r])}, not an unseen class"))
            break

    # Prototype coverage and consistency.
    proto = dataset.prototypes
    dims = {v.shape[0] for v in proto.vectors.values()}
    if len(dims) > 1:
        out.append(Violation("prototype-dim", f"mixed prototype lengths {sorted(dims)}"))
    for v in proto.vectors.values():
        if not np.all(np.isfinite(v)):
            out.append(Violation("prototype-finite", "non-finite prototype value"))
            break
    referenced = set(int(c) for c in np.unique(labels)) | seen | unseen
    for c in sorted(referenced):
        if c not in proto.vectors:
            out.append(Violation("prototype-coverage", f"class {c} has no prototype"))

    attrs = dataset.attributes
    if attrs is not None:
        a = len(attrs.names)
        for c, v in attrs.vectors.items():
            if v.shape[0] != a:
                out.append(Violation("attribute-dim", f"class {c} attribute vector length {v.shape[0]} != {a}"))
        for c in sorted(referenced):
            if c not in attrs.vectors:
                out.append(Violation("attribute-coverage", f"class {c} has no attribute vector"))
        for c, v in attrs.vectors.items():
            if not np.all(np.isfinite(v)):
                out.append(Violation("attribute-finite", f"non-finite attribute value for class {c}"))
                break
    return out


def _read_int_lines(path: Path) -> np.ndarray:
    with path.open("r", encoding="utf-8") as f:
        vals = [int(line) for line in f if line.strip()]
    return np.asarray(vals, dtype=np.int64)


def _write_int_lines(path: Path, values: np.ndarray) -> None:
    with path.open("w", encoding="utf-8") as f:
        for v in values:
            f.write(f"{int(v)}\n")


def _read_matrix(path: Path, rows: int, cols: int, what: str) -> np.ndarray:
    raw = path.read_bytes()
    expected = rows * cols * FLOAT_DTYPE.itemsize
    if len(raw) != expected:
        raise CorruptPayloadError(
            f"corrupt payload: {path.name} holds {len(raw)} bytes, "
            f"header implies {expected} for {what} ({rows}x{cols})"
        )
    return np.frombuffer(raw, dtype=FLOAT_DTYPE).reshape(rows, cols).copy()


def save_bundle(dataset: Dataset, path) -> None:
    """Write ``dataset`` to ``path`` in the bundle layout; round-trips bit-exactly."""
    root = Path(path)
    root.mkdir(parents=True, exist_ok=True)
    order = dataset.class_order
    header = {
        "n": dataset.n,
        "d": dataset.d,
        "m": dataset.m,
        "seen": list(dataset.split.seen),
        "unseen": list(dataset.split.unseen),
        "train_rows_file": TRAIN_ROWS_FILE,
        "test_rows_file": TEST_ROWS_FILE,
        "attribute_names": list(dataset.attributes.names) if dataset.attributes else None,
    }
    (root / HEADER_FILE).write_text(json.dumps(header, indent=2) + "\n", encoding="utf-8")
    (root / EMBEDDINGS_FILE).write_bytes(
        np.ascontiguousarray(dataset.embeddings, dtype=FLOAT_DTYPE).tobytes()
    )
    proto = np.ascontiguousarray(dataset.prototypes.matrix(order), dtype=FLOAT_DTYPE)
    (root / PROTOTYPES_FILE).write_bytes(proto.tobytes())
    if dataset.attributes is not None:
        attr = np.ascontiguousarray(dataset.attributes.matrix(order), dtype=FLOAT_DTYPE)
        (root / ATTRIBUTES_FILE).write_bytes(attr.tobytes())
    _write_int_lines(root / LABELS_FILE, dataset.labels)
    _write_int_lines(root / TRAIN_ROWS_FILE, dataset.split.train_rows)
    _write_int_lines(root / TEST_ROWS_FILE, dataset.split.test_rows)


def load_bundle(path) -> Dataset:
    """Load a bundle directory into a validated Dataset.

    Raises:
        MalformedBundleError: a required part is missing or unparseable.
        CorruptPayloadError: payload sizes disagree with the header.
        InvalidDatasetError: the assembled dataset violates an invariant.
    """
    root = Path(path)
    header_path = root / HEADER_FILE
    if not header_path.is_file():
        raise MalformedBundleError(f"malformed bundle: missing {HEADER_FILE} in {root}")
    try:
        header = json.loads(header_path.read_text(encoding="utf-8"))
    except (OSError, json.JSONDecodeError) as exc:
        raise MalformedBundleError(f"malformed bundle: unreadable header ({exc})") from exc
    try:
        n, d, m = int(header["n"]), int(header["d"]), int(header["m"])
        seen = tuple(int(c) for c in header["seen"])
        unseen = tuple(int(c) for c in header["unseen"])
        train_file = header.get("train_rows_file", TRAIN_ROWS_FILE)
        test_file = header.get("test_rows_file", TEST_ROWS_FILE)
        attr_names = header.get("attribute_names")
    except (KeyError, TypeError, ValueError) as exc:
        raise MalformedBundleError(f"malformed bundle: bad header field ({exc})") from exc

    required = [EMBEDDINGS_FILE, PROTOTYPES_FILE, LABELS_FILE, train_file, test_file]
    if attr_names is not None:
        required.append(ATTRIBUTES_FILE)
    for name in required:
        if not (root / name).is_file():
            raise MalformedBundleError(f"malformed bundle: missing {name} in {root}")

    order = seen + unseen
    emb = _read_matrix(root / EMBEDDINGS_FILE, n, d, "embeddings")
    proto_mat = _read_matrix(root / PROTOTYPES_FILE, len(order), m, "prototypes")
    prototypes = PrototypeTable({c: proto_mat[i] for i, c in enumerate(order)})
    attributes = None
    if attr_names is not None:
        names = tuple(str(s) for s in attr_names)
        attr_mat = _read_matrix(root / ATTRIBUTES_FILE, len(order), len(names), "attributes")
        attributes = AttributeTable(names, {c: attr_mat[i] for i, c in enumerate(order)})

    labels = _read_int_lines(root / LABELS_FILE)
    if labels.shape[0] != n:
        raise CorruptPayloadError(f"corrupt payload: {LABELS_FILE} has {labels.shape[0]} lines, header declares n={n}")
    split = SplitSpec(
        seen=seen,
        unseen=unseen,
        train_rows=_read_int_lines(root / train_file),
        test_rows=_read_int_lines(root / test_file),
    )
    dataset = Dataset(emb, labels, prototypes, split, attributes)
    violations = validate(dataset)
    if violations:
        raise InvalidDatasetError(violations)
    return dataset


def _simplex_frame(n: int) -> np.ndarray:
    """n unit vectors in n-1 dims with pairwise cosine -1/(n-1) and zero sum."""
    centered = np.eye(n) - np.full((n, n), 1.0 / n)
    basis, _ = np.linalg.qr(centered[:, : n - 1])
    pts = centered @ basis  # (n, n-1)
    return pts / np.linalg.norm(pts, axis=1, keepdims=True)


def synthesize(
    n_seen: int,
    n_unseen: int,
    per_class: int,
    d: int,
    m: int,
    noise_sigma: float,
    seed: int,
    *,
    n_attributes: int = 0,
) -> Dataset:
    """Generate a seeded synthetic dataset with a linear ground truth.

    A single random linear map G (m -> d, standard normal entries) is drawn
    once and every instance of class y is ``G @ prototype(y)`` plus Gaussian
    noise of scale ``noise_sigma``. Identical arguments (seed included)
    reproduce the dataset bit for bit; ``noise_sigma`` is the one difficulty
    knob (at 0.0 each class collapses to a single point).

    Prototypes are unit vectors laid out so that a bilinear model trained on
    the seen classes is exactly well-specified: the seen prototypes form a
    centered regular simplex spanning a random min(m, n_seen - 1) dimensional
    subspace and the unseen prototypes are drawn uniformly on the unit sphere
    of that same span. (Sphere-uniform prototypes in all of R^m would leave
    directions no seen class constrains, capping unseen accuracy well below
    100% even at zero noise; the zero-sum simplex additionally makes the
    +1/-1 square-loss solution act as a pure projector, so closed-form
    training recovers the nearest-prototype rule.) When n_seen - 1 exceeds
    ``m`` the simplex cannot exist and both sides fall back to sphere-uniform
    draws in R^m, which the seen classes then span anyway.

    ``n_attributes`` optionally attaches random binary per-class attributes
    (drawn after everything else, so datasets with and without attributes
    share embeddings for the same seed).
    """
    if min(n_seen, n_unseen, per_class, d, m) < 1:
        raise ValueError("all counts and dimensions must be >= 1")
    if noise_sigma < 0:
        raise ValueError("noise_sigma must be >= 0")
    rng = np.random.default_rng(seed)
    n_classes = n_seen + n_unseen
    g = rng.standard_normal((d, m))

    protos = {}
    if n_seen == 1:
        span_dim = 1
        span = rng.standard_normal((m, 1))
        span /= np.linalg.norm(span)
        protos[1] = span[:, 0].astype(FLOAT_DTYPE)
    elif n_seen - 1 <= m:
        span_dim = n_seen - 1
        span, _ = np.linalg.qr(rng.standard_normal((m, span_dim)))
        corners = _simplex_frame(n_seen)
        for c in range(1, n_seen + 1):
            protos[c] = (span @ corners[c - 1]).astype(FLOAT_DTYPE)
    else:
        span_dim = m
        span = np.eye(m)
        for c in range(1, n_seen + 1):
            v = rng.standard_normal(m)
            v /= np.linalg.norm(v)
            protos[c] = v.astype(FLOAT_DTYPE)
    for c in range(n_seen + 1, n_classes + 1):
        v = rng.standard_normal(span_dim)
        v /= np.linalg.norm(v)
        protos[c] = (span @ v).astype(FLOAT_DTYPE)

    n_total = n_classes * per_class
    emb = np.empty((n_total, d), dtype=np.float64)
    labels = np.empty(n_total, dtype=np.int64)
    row = 0
    for c in range(1, n_classes + 1):
        center = g @ protos[c].astype(np.float64)
        for _ in range(per_class):
            noise = rng.standard_normal(d) if noise_sigma > 0 else 0.0
            emb[row] = center + noise_sigma * noise
            labels[row] = c
            row += 1

    split = SplitSpec(
        seen=tuple(range(1, n_seen + 1)),
        unseen=tuple(range(n_seen + 1, n_classes + 1)),
        train_rows=np.arange(0, n_seen * per_class, dtype=np.int64),
        test_rows=np.arange(n_seen * per_class, n_total, dtype=np.int64),
    )
    attributes = None
    if n_attributes > 0:
        names = tuple(f"attr_{i:03d}" for i in range(n_attributes))
        vecs = {
            c: rng.integers(0, 2, size=n_attributes).astype(FLOAT_DTYPE)
            for c in range(1, n_classes + 1)
        }
        attributes = AttributeTable(names, vecs)
    return Dataset(emb.astype(FLOAT_DTYPE), labels, PrototypeTable(protos), split, attributes)


def carve_meta_split(dataset: Dataset, fusion_class_fraction: float, seed: int) -> tuple[Dataset, Dataset]:
    """Carve a pseudo-unseen subset of seen classes for meta-classifier fitting.

    Returns ``(inner, fusion)``. ``inner`` re-labels a seeded random subset of
    the seen classes as its unseen side: their train instances become inner's
    test rows, so base classifiers trained on inner can be scored on held-out
    classes whose true labels are still known. ``fusion`` preserves the
    original split unchanged (it is the dataset for final training and
    evaluation). Unseen-class labels of the original dataset are never
    exposed through inner.
    """
    n0 = len(dataset.split.seen)
    if n0 < 2:
        raise DegenerateMetaSplitError(f"degenerate meta split: need >= 2 seen classes, have {n0}")
    k = int(math.floor(fusion_class_fraction * n0 + 0.5))
    if k <= 0 or k >= n0:
        raise DegenerateMetaSplitError(
            f"degenerate meta split: fraction {fusion_class_fraction} of {n0} seen classes "
            f"yields {k} pseudo-unseen"
        )
    rng = np.random.default_rng(seed)
    seen_arr = np.asarray(dataset.split.seen, dtype=np.int64)
    pseudo = set(int(c) for c in rng.choice(seen_arr, size=k, replace=False))
    remaining = tuple(c for c in dataset.split.seen if c not in pseudo)
    pseudo_ordered = tuple(c for c in dataset.split.seen if c in pseudo)

    train_labels = dataset.labels[dataset.split.train_rows]
    keep = np.isin(train_labels, remaining)
    inner_split = SplitSpec(
        seen=remaining,
        unseen=pseudo_ordered,
        train_rows=dataset.split.train_rows[keep].copy(),
        test_rows=dataset.split.train_rows[~keep].copy(),
    )
    inner = Dataset(dataset.embeddings, dataset.labels, dataset.prototypes, inner_split, dataset.attributes)
    return inner, dataset
