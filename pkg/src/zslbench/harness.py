"""Experiment orchestration: train/evaluate grids, meta fitting, persistence.

A run walks (dataset x classifier) cells, evaluates every trained base on
the unseen-class test rows, derives the correctness matrix and difficulty
levels, then fits and applies the six fusion schemes using a pseudo-unseen
carve of the seen classes (base classifiers are retrained on the inner split
for meta fitting and on all seen classes for final evaluation, so unseen
labels never leak into fitting).

Results land in an append-only ``records.ndtxt`` (one JSON record per line)
from which ``emit_report`` derives the CSV tables. Cell failures are
recorded and never abort the grid. Everything is seeded; rerunning a config
reproduces the metric CSVs byte for byte. The ``ZSLB_WORKERS`` environment
variable bounds dataset-level parallelism (default 1).
"""

from __future__ import annotations

import hashlib
import json
import math
import os
import threading
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

from . import analysis, classifiers, fusion, metrics
from .data import Dataset, carve_meta_split, load_bundle, synthesize

PARAMETRIC_SCHEMES = ("mdt", "dnn", "gt")
FIT_FREE_SCHEMES = ("mv", "auc", "con")

RECORDS_FILE = "records.ndtxt"
TABLE_KINDS = ("top1", "top5", "logloss", "f1")
REPORT_KINDS = TABLE_KINDS + ("combined_points", "difficulty", "ceiling")


@dataclass(frozen=True)
class DatasetSpec:
    name: str
    bundle: Optional[str] = None
    synth: Optional[dict] = None

    def materialize(self, default_seed: int) -> Dataset:
        if self.bundle is not None:
            return load_bundle(self.bundle)
        if self.synth is None:
            raise ValueError(f"dataset {self.name}: need either a bundle path or a synthesize block")
        kw = dict(self.synth)
        kw.setdefault("seed", default_seed)
        return synthesize(
            n_seen=int(kw["n_seen"]),
            n_unseen=int(kw["n_unseen"]),
            per_class=int(kw["per_class"]),
            d=int(kw["d"]),
            m=int(kw["m"]),
            noise_sigma=float(kw.get("noise_sigma", 0.0)),
            seed=int(kw["seed"]),
            n_attributes=int(kw.get("n_attributes", 0)),
        )


@dataclass(frozen=True)
class ClassifierSpec:
    method: str
    config: dict = field(default_factory=dict)

    @property
    def name(self) -> str:
        return self.config.get("name", self.method)


@dataclass(frozen=True)
class FusionSpec:
    scheme: str
    config: dict = field(default_factory=dict)

    @property
    def name(self) -> str:
        return self.config.get("name", self.scheme)


@dataclass(frozen=True)
class ExperimentConfig:
    """Full grid description; ``seed`` is mandatory (no wall-clock defaults)."""

    seed: int
    datasets: tuple[DatasetSpec, ...]
    classifiers: tuple[ClassifierSpec, ...]
    fusions: tuple[FusionSpec, ...]
    fusion_class_fraction: Optional[float] = None  # None = auto
    per_class_average: bool = True
    output_dir: Optional[str] = None
    raw: dict = field(default_factory=dict)

    def __post_init__(self):
        if not self.datasets or not self.classifiers:
            raise ValueError("dataset and classifier rosters must be nonempty")

    @property
    def config_hash(self) -> str:
        return hashlib.sha256(json.dumps(self.raw, sort_keys=True).encode("utf-8")).hexdigest()[:16]


def load_experiment_config(path) -> ExperimentConfig:
    raw = json.loads(Path(path).read_text(encoding="utf-8"))
    return experiment_config_from_dict(raw)


def experiment_config_from_dict(raw: dict) -> ExperimentConfig:
    if "seed" not in raw:
        raise ValueError("experiment config must set an explicit seed")
    datasets = tuple(
        DatasetSpec(name=d["name"], bundle=d.get("bundle"), synth=d.get("synthesize"))
        for d in raw.get("datasets", [])
    )
    clfs = tuple(
        ClassifierSpec(method=c["method"].lower(), config=c.get("config", {}))
        for c in raw.get("classifiers", [])
    )
    fus = tuple(
        FusionSpec(scheme=f["scheme"].lower(), config=f.get("config", {}))
        for f in raw.get("fusions", [])
    )
    metric_opts = raw.get("metrics", {})
    return ExperimentConfig(
        seed=int(raw["seed"]),
        datasets=datasets,
        classifiers=clfs,
        fusions=fus,
        fusion_class_fraction=raw.get("fusion_class_fraction"),
        per_class_average=bool(metric_opts.get("per_class_average", True)),
        output_dir=raw.get("output_dir"),
        raw=raw,
    )


def _cell_seed(global_seed: int, *parts: str) -> int:
    h = hashlib.sha256(("/".join(str(p) for p in parts) + f"#{global_seed}").encode("utf-8"))
    return int.from_bytes(h.digest()[:8], "little") % (2**63)


def _train_config(spec: ClassifierSpec, seed: int) -> classifiers.TrainConfig:
    kw = {k: v for k, v in spec.config.items() if k != "name"}
    kw["seed"] = seed
    return classifiers.TrainConfig(**kw)


@dataclass
class RunRecord:
    """One persisted grid cell (or one dataset-level analysis record)."""

    record_id: str
    dataset: str
    competitor: str
    kind: str  # "base" | "fusion" | "dataset"
    metrics: Optional[dict] = None
    difficulty: Optional[list] = None
    ceiling: Optional[float] = None
    error: Optional[str] = None
    elapsed_s: float = 0.0
    seed: int = 0
    config_hash: str = ""
    extra: dict = field(default_factory=dict)

    def to_json(self) -> str:
        payload = {
            "record_id": self.record_id,
            "dataset": self.dataset,
            "competitor": self.competitor,
            "kind": self.kind,
            "metrics": self.metrics,
            "difficulty": self.difficulty,
            "ceiling": self.ceiling,
            "error": self.error,
            "elapsed_s": self.elapsed_s,
            "seed": self.seed,
            "config_hash": self.config_hash,
            "extra": self.extra,
        }
        return json.dumps(payload, sort_keys=True)

    @staticmethod
    def from_json(line: str) -> "RunRecord":
        d = json.loads(line)
        return RunRecord(**d)


def _metric_dict(report: metrics.MetricReport) -> dict:
    return {"top1": report.top1, "top5": report.top5, "logloss": report.logloss, "f1": report.f1}


def _label_metrics(fused: np.ndarray, labels: np.ndarray, candidates: Sequence[int], per_class_average: bool = True) -> dict:
    """Top-1 and macro F1 for label-only fusion outputs (no scores, so no
    top-5 or log loss)."""
    labels = np.asarray(labels, dtype=np.int64)
    hits = fused == labels
    if per_class_average:
        classes = np.unique(labels)
        top1 = float(np.mean([hits[labels == c].mean() for c in classes]) * 100.0)
    else:
        top1 = float(hits.mean() * 100.0)
    return {
        "top1": top1,
        "top5": None,
        "logloss": None,
        "f1": metrics.f1_macro(fused, labels, candidates),
    }


def _score_matrix(model, dataset: Dataset, rows: np.ndarray, candidates) -> metrics.ScoreMatrix:
    return metrics.ScoreMatrix(tuple(candidates), classifiers.score_rows(model, dataset, rows, candidates))


def _auto_fraction(dataset: Dataset) -> float:
    """Carve exactly the unseen-class count when the seen side allows it, so
    candidate-bound fusion models fit the final evaluation; otherwise half."""
    n0, n1 = len(dataset.split.seen), len(dataset.split.unseen)
    if 0 < n1 < n0:
        return n1 / n0
    k = max(1, int(math.floor(n0 / 2 + 0.5)))
    k = min(k, n0 - 1) if n0 > 1 else 1
    return k / n0


def _run_dataset(
    config: ExperimentConfig,
    spec: DatasetSpec,
    emit,
) -> None:
    chash = config.config_hash
    try:
        dataset = spec.materialize(_cell_seed(config.seed, "dataset", spec.name))
    except Exception as exc:  # noqa: BLE001 - per-cell isolation by contract
        for clf in config.classifiers:
            emit(RunRecord(f"{spec.name}/{clf.name}", spec.name, clf.name, "base",
                           error=f"dataset failed: {exc}", config_hash=chash))
        for fus in config.fusions:
            emit(RunRecord(f"{spec.name}/{fus.name}", spec.name, fus.name, "fusion",
                           error=f"dataset failed: {exc}", config_hash=chash))
        return

    test_rows = dataset.split.test_rows
    test_labels = dataset.labels[test_rows]
    candidates = dataset.split.unseen

    # Base classifiers trained on all seen classes.
    base_models: dict[str, classifiers.CompatibilityModel] = {}
    base_scores: dict[str, metrics.ScoreMatrix] = {}
    base_reports: dict[str, metrics.MetricReport] = {}
    base_errors: dict[str, str] = {}
    for clf in config.classifiers:
        seed = _cell_seed(config.seed, spec.name, clf.name)
        start = time.perf_counter()
        try:
            model = classifiers.train(clf.method, dataset, _train_config(clf, seed))
            sm = _score_matrix(model, dataset, test_rows, candidates)
            report = metrics.evaluate(sm, test_labels, config.per_class_average)
            base_models[clf.name] = model
            base_scores[clf.name] = sm
            base_reports[clf.name] = report
        except Exception as exc:  # noqa: BLE001
            base_errors[clf.name] = str(exc)
            emit(RunRecord(f"{spec.name}/{clf.name}", spec.name, clf.name, "base",
                           error=str(exc), elapsed_s=time.perf_counter() - start,
                           seed=seed, config_hash=chash))

    # Dataset-level analysis from the successful bases.
    ok_names = [c.name for c in config.classifiers if c.name in base_models]
    difficulty = ceiling_val = None
    if ok_names:
        preds = [metrics.argmax_labels(base_scores[n].values, candidates) for n in ok_names]
        correctness = analysis.correctness_from_predictions(preds, test_labels)
        difficulty = [float(v) for v in analysis.difficulty_levels(correctness)]
        ceiling_val = fusion.ceiling(difficulty)
        attr_summary = _attribute_summary(dataset, test_rows, correctness, ok_names)
        emit(RunRecord(f"{spec.name}/_dataset", spec.name, "_dataset", "dataset",
                       difficulty=difficulty, ceiling=ceiling_val, config_hash=chash,
                       extra=attr_summary))

    for clf in config.classifiers:
        if clf.name not in base_reports:
            continue
        seed = _cell_seed(config.seed, spec.name, clf.name)
        emit(RunRecord(f"{spec.name}/{clf.name}", spec.name, clf.name, "base",
                       metrics=_metric_dict(base_reports[clf.name]),
                       difficulty=difficulty, ceiling=ceiling_val,
                       seed=seed, config_hash=chash))

    if not config.fusions:
        return

    # Evaluation-side prediction set from the bases that trained.
    eval_set = None
    if ok_names:
        eval_set = fusion.build_prediction_set(ok_names, [base_scores[n] for n in ok_names])

    # Fit-side prediction set from inner-trained bases on pseudo-unseen rows.
    fit_set = None
    fit_labels = None
    fit_error = None
    needs_fit = any(f.scheme in PARAMETRIC_SCHEMES for f in config.fusions)
    if needs_fit and ok_names:
        try:
            fraction = config.fusion_class_fraction
            if fraction is None:
                fraction = _auto_fraction(dataset)
            inner, _ = carve_meta_split(dataset, fraction, _cell_seed(config.seed, spec.name, "carve"))
            fit_mats = []
            fit_names = []
            for clf in config.classifiers:
                if clf.name not in base_models:
                    continue
                seed = _cell_seed(config.seed, spec.name, clf.name, "inner")
                inner_model = classifiers.train(clf.method, inner, _train_config(clf, seed))
                fit_mats.append(_score_matrix(inner_model, inner, inner.split.test_rows, inner.split.unseen))
                fit_names.append(clf.name)
            fit_set = fusion.build_prediction_set(fit_names, fit_mats)
            fit_labels = dataset.labels[inner.split.test_rows]
        except Exception as exc:  # noqa: BLE001
            fit_error = f"meta fit unavailable: {exc}"

    for fus in config.fusions:
        seed = _cell_seed(config.seed, spec.name, fus.name, "fuse")
        start = time.perf_counter()
        try:
            if eval_set is None:
                raise RuntimeError("no base classifier trained successfully")
            fused = _apply_fusion(fus, eval_set, fit_set, fit_labels, fit_error, seed)
            mets = _label_metrics(fused, test_labels, candidates, config.per_class_average)
            emit(RunRecord(f"{spec.name}/{fus.name}", spec.name, fus.name, "fusion",
                           metrics=mets, difficulty=difficulty, ceiling=ceiling_val,
                           elapsed_s=time.perf_counter() - start, seed=seed, config_hash=chash))
        except Exception as exc:  # noqa: BLE001
            emit(RunRecord(f"{spec.name}/{fus.name}", spec.name, fus.name, "fusion",
                           error=str(exc), elapsed_s=time.perf_counter() - start,
                           seed=seed, config_hash=chash))


def _apply_fusion(
    fus: FusionSpec,
    eval_set: fusion.BasePredictionSet,
    fit_set,
    fit_labels,
    fit_error,
    seed: int,
) -> np.ndarray:
    scheme = fus.scheme
    if scheme == "mv":
        return fusion.fuse_majority(eval_set)
    if scheme == "auc":
        return fusion.fuse_auction(eval_set)
    if scheme == "con":
        return fusion.fuse_consensus(
            eval_set,
            tolerance=float(fus.config.get("tolerance", 1e-9)),
            max_iters=int(fus.config.get("max_iters", 100)),
        )
    if fit_set is None:
        raise RuntimeError(fit_error or "meta fit set unavailable")
    if scheme == "mdt":
        model = fusion.train_mdt(fit_set, fit_labels)
        return fusion.fuse_mdt(model, eval_set)
    if scheme == "gt":
        model = fusion.train_game(fit_set, fit_labels, rounds=int(fus.config.get("rounds", 10)))
        return fusion.fuse_game(model, eval_set)
    if scheme == "dnn":
        cfg = fusion.DnnConfig(
            hidden1=int(fus.config.get("hidden1", 32)),
            hidden2=int(fus.config.get("hidden2", 16)),
            lr=float(fus.config.get("lr", 0.01)),
            epochs=int(fus.config.get("epochs", 60)),
            seed=seed,
        )
        model = fusion.train_dnn(fit_set, fit_labels, cfg)
        return fusion.fuse_dnn(model, eval_set)
    raise ValueError(f"unknown fusion scheme {scheme!r}")


def _attribute_summary(dataset: Dataset, rows: np.ndarray, correctness: np.ndarray, names: list[str]) -> dict:
    if dataset.attributes is None:
        return {}
    labels = dataset.labels[rows]
    attr_rows = analysis.binarize_attributes(
        np.stack([dataset.attributes.vectors[int(c)] for c in labels])
    )
    per_clf = {}
    parts = []
    for j, name in enumerate(names):
        scores = analysis.attribute_scores(attr_rows, dataset.attributes.names, correctness[:, j])
        parts.append(scores)
        per_clf[name] = {"easiest": scores.easiest, "hardest": scores.hardest}
    total = analysis.combine_attribute_tallies(parts)
    per_clf["total"] = {"easiest": total.easiest, "hardest": total.hardest}
    return {"attributes": per_clf}


class _RecordWriter:
    """Single synchronized appender for the run's record log."""

    def __init__(self, path: Path):
        self.path = path
        self.lock = threading.Lock()
        self.records: list[RunRecord] = []

    def __call__(self, record: RunRecord) -> None:
        with self.lock:
            self.records.append(record)
            with self.path.open("a", encoding="utf-8") as f:
                f.write(record.to_json() + "\n")


def run_experiment(config: ExperimentConfig, out_dir=None) -> list[RunRecord]:
    """Run the full grid described by ``config``, persisting into ``out_dir``
    (falls back to the config's own output_dir)."""
    if out_dir is None:
        out_dir = config.output_dir
    if out_dir is None:
        raise ValueError("no output directory: pass out_dir or set output_dir in the config")
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    writer = _RecordWriter(out / RECORDS_FILE)
    workers = max(1, int(os.environ.get("ZSLB_WORKERS", "1")))
    if workers == 1:
        for spec in config.datasets:
            _run_dataset(config, spec, writer)
    else:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            futures = [pool.submit(_run_dataset, config, spec, writer) for spec in config.datasets]
            for f in futures:
                f.result()
    return writer.records


def load_records(path) -> list[RunRecord]:
    records = []
    with Path(path).open("r", encoding="utf-8") as f:
        for line in f:
            if line.strip():
                records.append(RunRecord.from_json(line))
    return records


def _roster(records: list[RunRecord], kinds: tuple[str, ...]) -> tuple[list[str], list[str]]:
    competitors: list[str] = []
    datasets: list[str] = []
    for r in records:
        if r.kind in kinds and r.competitor != "_dataset" and r.competitor not in competitors:
            competitors.append(r.competitor)
        if r.dataset not in datasets:
            datasets.append(r.dataset)
    return competitors, datasets


def _latest_cells(records: list[RunRecord]) -> dict[tuple[str, str], RunRecord]:
    cells = {}
    for r in records:
        if r.kind in ("base", "fusion"):
            cells[(r.competitor, r.dataset)] = r  # later records supersede
    return cells


def emit_report(records: list[RunRecord], kind: str, out_dir) -> tuple[list[Path], int]:
    """Write the CSV tables for ``kind``; returns (paths, missing-cell count)."""
    if kind not in REPORT_KINDS:
        raise ValueError(f"unknown report kind {kind!r}")
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    warnings = 0

    if kind in TABLE_KINDS:
        competitors, datasets = _roster(records, ("base", "fusion"))
        cells = _latest_cells(records)
        lines = ["classifier," + ",".join(datasets)]
        for name in competitors:
            row = [name]
            for ds in datasets:
                rec = cells.get((name, ds))
                val = rec.metrics.get(kind) if rec and rec.metrics else None
                if val is None:
                    row.append("")
                    warnings += 1
                else:
                    row.append(format(val, ".6g"))
            lines.append(",".join(row))
        path = out / f"table_{kind}.csv"
        path.write_text("\n".join(lines) + "\n", encoding="utf-8")
        return [path], warnings

    if kind == "combined_points":
        paths = []
        base_names = [r.competitor for r in records if r.kind == "base"]
        fusion_names = [r.competitor for r in records if r.kind == "fusion"]
        base_roster = list(dict.fromkeys(base_names))
        fusion_roster = list(dict.fromkeys(fusion_names))
        _, datasets = _roster(records, ("base", "fusion"))
        cells = _latest_cells(records)

        def cube(roster: list[str], measures: tuple[str, ...]) -> np.ndarray:
            vals = np.full((len(roster), len(datasets), len(measures)), np.nan)
            for i, name in enumerate(roster):
                for j, ds in enumerate(datasets):
                    rec = cells.get((name, ds))
                    if rec and rec.metrics:
                        for k, m in enumerate(measures):
                            v = rec.metrics.get(m)
                            if v is not None:
                                vals[i, j, k] = v
            return vals

        jobs = []
        if base_roster:
            jobs.append(("points_base.csv", base_roster, ("top1", "top5", "logloss", "f1")))
        if fusion_roster:
            jobs.append(("points_meta.csv", fusion_roster, ("top1", "f1")))
        if base_roster and fusion_roster:
            jobs.append(("points_joint.csv", base_roster + fusion_roster, ("top1", "f1")))
        for fname, roster, measures in jobs:
            vals = cube(roster, measures)
            if np.isnan(vals).any():
                warnings += int(np.isnan(vals).sum())
                continue
            lower = tuple(m for m in ("logloss",) if m in measures)
            table = analysis.combined_points(vals, roster, datasets, measures, lower_better=lower)
            path = out / fname
            path.write_text(table.to_csv(), encoding="utf-8")
            paths.append(path)
        return paths, warnings

    # difficulty / ceiling from dataset-level records
    ds_records = {r.dataset: r for r in records if r.kind == "dataset"}
    _, datasets = _roster(records, ("base", "fusion"))
    if kind == "difficulty":
        width = max((len(r.difficulty) for r in ds_records.values() if r.difficulty), default=6)
        lines = ["dataset," + ",".join(f"lvl{i}" for i in range(width))]
        for ds in datasets:
            rec = ds_records.get(ds)
            if rec is None or rec.difficulty is None:
                warnings += 1
                lines.append(ds + "," * width)
            else:
                lines.append(ds + "," + ",".join(format(v, ".6g") for v in rec.difficulty))
        path = out / "difficulty.csv"
        path.write_text("\n".join(lines) + "\n", encoding="utf-8")
        return [path], warnings

    lines = ["dataset,ceiling"]
    for ds in datasets:
        rec = ds_records.get(ds)
        if rec is None or rec.ceiling is None:
            warnings += 1
            lines.append(ds + ",")
        else:
            lines.append(f"{ds},{format(rec.ceiling, '.6g')}")
    path = out / "ceiling.csv"
    path.write_text("\n".join(lines) + "\n", encoding="utf-8")
    return [path], warnings


def emit_all_reports(records: list[RunRecord], out_dir) -> tuple[list[Path], int]:
    paths: list[Path] = []
    warnings = 0
    for kind in REPORT_KINDS:
        p, w = emit_report(records, kind, out_dir)
        paths.extend(p)
        warnings += w
    return paths, warnings
