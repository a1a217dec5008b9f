"""Command line entry point.

Subcommands:

    synth      generate a seeded synthetic bundle
    validate   check a bundle's invariants (exit 1 on violations)
    train      fit one classifier on a bundle and save the model artifact
    evaluate   score a saved model on a bundle's test rows
    fuse       fuse several saved models with one scheme
    analyze    difficulty levels, ceiling, and attribute influence
    score      combined points from metric tables (dense ranking)
    run        full experiment grid from a JSON config
    report     derive CSV tables from a records log

Exit codes: 0 success, 1 validation failure, 2 runtime error or bad usage.
"""

from __future__ import annotations

import argparse
import csv
import json
import sys
from pathlib import Path

import numpy as np

from . import analysis, classifiers, fusion, harness, metrics
from .data import InvalidDatasetError, load_bundle, save_bundle, synthesize, validate


def _add_synth(sub):
    p = sub.add_parser("synth", help="generate a synthetic bundle")
    p.add_argument("--out", required=True)
    p.add_argument("--n-seen", type=int, required=True)
    p.add_argument("--n-unseen", type=int, required=True)
    p.add_argument("--per-class", type=int, required=True)
    p.add_argument("--dim", type=int, required=True, help="embedding dimension")
    p.add_argument("--proto-dim", type=int, required=True, help="prototype dimension")
    p.add_argument("--noise", type=float, default=0.0)
    p.add_argument("--seed", type=int, required=True)
    p.add_argument("--n-attributes", type=int, default=0)


def _add_train(sub):
    p = sub.add_parser("train", help="train one classifier")
    p.add_argument("--bundle", required=True)
    p.add_argument("--method", required=True, choices=classifiers.ALL_METHODS)
    p.add_argument("--out", required=True)
    p.add_argument("--seed", type=int, required=True)
    p.add_argument("--learning-rate", type=float, default=0.01)
    p.add_argument("--margin", type=float, default=1.0)
    p.add_argument("--epochs", type=int, default=50)
    p.add_argument("--patience", type=int, default=5)
    p.add_argument("--gamma", type=float, default=1.0)
    p.add_argument("--lam", type=float, default=1.0)
    p.add_argument("--no-normalize", action="store_true")


def _train_config_from_args(args) -> classifiers.TrainConfig:
    return classifiers.TrainConfig(
        learning_rate=args.learning_rate,
        margin=args.margin,
        epochs=args.epochs,
        patience=args.patience,
        gamma=args.gamma,
        lam=args.lam,
        normalize_inputs=not args.no_normalize,
        seed=args.seed,
    )


def _cmd_synth(args) -> int:
    ds = synthesize(
        args.n_seen, args.n_unseen, args.per_class, args.dim, args.proto_dim,
        args.noise, args.seed, n_attributes=args.n_attributes,
    )
    save_bundle(ds, args.out)
    print(f"wrote bundle with {ds.n} instances to {args.out}")
    return 0


def _cmd_validate(args) -> int:
    try:
        ds = load_bundle(args.bundle)
    except InvalidDatasetError as exc:
        for v in exc.violations:
            print(str(v))
        return 1
    violations = validate(ds)
    if violations:
        for v in violations:
            print(str(v))
        return 1
    print(f"ok: {ds.n} instances, {len(ds.split.seen)} seen / {len(ds.split.unseen)} unseen classes")
    return 0


def _cmd_train(args) -> int:
    ds = load_bundle(args.bundle)
    model = classifiers.train(args.method, ds, _train_config_from_args(args))
    classifiers.save_model(model, args.out)
    print(f"trained {args.method} (epochs_run={model.meta['epochs_run']}) -> {args.out}")
    return 0


def _evaluate_model(model, ds) -> metrics.MetricReport:
    sm = metrics.ScoreMatrix(
        tuple(ds.split.unseen),
        classifiers.score_rows(model, ds, ds.split.test_rows, ds.split.unseen),
    )
    return metrics.evaluate(sm, ds.labels[ds.split.test_rows])


def _cmd_evaluate(args) -> int:
    ds = load_bundle(args.bundle)
    model = classifiers.load_model(args.model)
    report = _evaluate_model(model, ds)
    row = report.csv_row(model.method, Path(args.bundle).name)
    if args.out:
        Path(args.out).write_text("classifier,dataset,top1,top5,logloss,f1\n" + row + "\n", encoding="utf-8")
    print(row)
    return 0


def _cmd_fuse(args) -> int:
    ds = load_bundle(args.bundle)
    models = [classifiers.load_model(p) for p in args.models]
    names = [f"{m.method}#{i}" for i, m in enumerate(models)]
    candidates = ds.split.unseen
    mats = [
        metrics.ScoreMatrix(tuple(candidates), classifiers.score_rows(m, ds, ds.split.test_rows, candidates))
        for m in models
    ]
    eval_set = fusion.build_prediction_set(names, mats)
    scheme = args.scheme

    if scheme in harness.PARAMETRIC_SCHEMES:
        from .data import carve_meta_split

        inner, _ = carve_meta_split(ds, args.fraction, args.seed)
        fit_mats = []
        for m in models:
            cfg_kw = dict(m.meta.get("config", {}))
            cfg_kw["seed"] = args.seed
            inner_model = classifiers.train(m.method, inner, classifiers.TrainConfig(**cfg_kw))
            fit_mats.append(
                metrics.ScoreMatrix(
                    tuple(inner.split.unseen),
                    classifiers.score_rows(inner_model, inner, inner.split.test_rows, inner.split.unseen),
                )
            )
        fit_set = fusion.build_prediction_set(names, fit_mats)
        fit_labels = ds.labels[inner.split.test_rows]
    else:
        fit_set = fit_labels = None

    spec = harness.FusionSpec(scheme=scheme, config={})
    fused = harness._apply_fusion(spec, eval_set, fit_set, fit_labels, None, args.seed)
    mets = harness._label_metrics(fused, ds.labels[ds.split.test_rows], candidates)
    print(f"{scheme},{Path(args.bundle).name},top1={mets['top1']:.6g},f1={mets['f1']:.6g}")
    if args.out:
        np.savetxt(args.out, fused, fmt="%d")
    return 0


def _cmd_analyze(args) -> int:
    ds = load_bundle(args.bundle)
    models = [classifiers.load_model(p) for p in args.models]
    candidates = ds.split.unseen
    test_rows = ds.split.test_rows
    labels = ds.labels[test_rows]
    preds = [
        metrics.argmax_labels(classifiers.score_rows(m, ds, test_rows, candidates), candidates)
        for m in models
    ]
    correctness = analysis.correctness_from_predictions(preds, labels)
    levels = analysis.difficulty_levels(correctness)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    name = Path(args.bundle).name
    lvl_cells = ",".join(format(v, ".6g") for v in levels)
    (out / "difficulty.csv").write_text(
        "dataset," + ",".join(f"lvl{i}" for i in range(len(levels))) + "\n" + f"{name},{lvl_cells}\n",
        encoding="utf-8",
    )
    ceil = fusion.ceiling(levels)
    (out / "ceiling.csv").write_text(f"dataset,ceiling\n{name},{format(ceil, '.6g')}\n", encoding="utf-8")
    print(f"difficulty: {lvl_cells}")
    print(f"ceiling: {ceil:.6g}")
    if ds.attributes is not None:
        attr_rows = analysis.binarize_attributes(
            np.stack([ds.attributes.vectors[int(c)] for c in labels])
        )
        lines = ["classifier,easiest,hardest"]
        parts = []
        for i, m in enumerate(models):
            scores = analysis.attribute_scores(attr_rows, ds.attributes.names, correctness[:, i])
            parts.append(scores)
            lines.append(f"{m.method}#{i},{scores.easiest or ''},{scores.hardest or ''}")
        total = analysis.combine_attribute_tallies(parts)
        lines.append(f"total,{total.easiest or ''},{total.hardest or ''}")
        (out / "attributes.csv").write_text("\n".join(lines) + "\n", encoding="utf-8")
        print(f"attributes: easiest={total.easiest} hardest={total.hardest} (total)")
    return 0


def _read_metric_table(path: Path) -> tuple[list[str], list[str], np.ndarray]:
    with path.open("r", encoding="utf-8") as f:
        rows = list(csv.reader(f))
    header = rows[0][1:]
    names = [r[0] for r in rows[1:]]
    values = np.array([[float(c) if c else np.nan for c in r[1:]] for r in rows[1:]])
    return names, header, values


def _cmd_score(args) -> int:
    tables = [Path(p) for p in args.tables]
    measures = [p.stem for p in tables]
    lower = set(args.lower_better or [])
    parsed = [_read_metric_table(p) for p in tables]
    names, datasets, _ = parsed[0]
    for (n2, d2, _), p in zip(parsed, tables):
        if n2 != names or d2 != datasets:
            raise RuntimeError(f"table {p} disagrees on competitors or datasets")
    cube = np.stack([v for _, _, v in parsed], axis=2)
    table = analysis.combined_points(cube, names, datasets, measures, lower_better=tuple(lower))
    csv_text = table.to_csv()
    if args.out:
        Path(args.out).write_text(csv_text, encoding="utf-8")
    print(csv_text, end="")
    return 0


def _cmd_run(args) -> int:
    config = harness.load_experiment_config(args.config)
    records = harness.run_experiment(config, args.out)
    paths, warnings = harness.emit_all_reports(records, args.out)
    errors = sum(1 for r in records if r.error)
    print(f"{len(records)} records, {errors} cell errors, {warnings} empty report cells")
    for p in paths:
        print(f"wrote {p}")
    return 0


def _cmd_report(args) -> int:
    records = harness.load_records(args.records)
    paths, warnings = harness.emit_report(records, args.kind, args.out)
    if warnings:
        print(f"warning: {warnings} empty cells", file=sys.stderr)
    for p in paths:
        print(f"wrote {p}")
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="zslbench", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True)

    _add_synth(sub)

    p = sub.add_parser("validate", help="validate a bundle")
    p.add_argument("bundle")

    _add_train(sub)

    p = sub.add_parser("evaluate", help="evaluate a model on a bundle")
    p.add_argument("--bundle", required=True)
    p.add_argument("--model", required=True)
    p.add_argument("--out")

    p = sub.add_parser("fuse", help="fuse several models with one scheme")
    p.add_argument("--bundle", required=True)
    p.add_argument("--models", nargs="+", required=True)
    p.add_argument("--scheme", required=True, choices=fusion.SCHEMES)
    p.add_argument("--seed", type=int, required=True)
    p.add_argument("--fraction", type=float, default=0.5, help="pseudo-unseen class fraction for meta fitting")
    p.add_argument("--out", help="write fused labels here")

    p = sub.add_parser("analyze", help="difficulty, ceiling, attribute influence")
    p.add_argument("--bundle", required=True)
    p.add_argument("--models", nargs="+", required=True)
    p.add_argument("--out", required=True)

    p = sub.add_parser("score", help="combined points from metric tables")
    p.add_argument("--tables", nargs="+", required=True)
    p.add_argument("--lower-better", nargs="*", default=[], help="measure names ranked ascending")
    p.add_argument("--out")

    p = sub.add_parser("run", help="run an experiment grid")
    p.add_argument("--config", required=True)
    p.add_argument("--out", required=True)

    p = sub.add_parser("report", help="derive CSV tables from records")
    p.add_argument("--records", required=True)
    p.add_argument("--kind", required=True, choices=harness.REPORT_KINDS)
    p.add_argument("--out", required=True)

    return parser


_COMMANDS = {
    "synth": _cmd_synth,
    "validate": _cmd_validate,
    "train": _cmd_train,
    "evaluate": _cmd_evaluate,
    "fuse": _cmd_fuse,
    "analyze": _cmd_analyze,
    "score": _cmd_score,
    "run": _cmd_run,
    "report": _cmd_report,
}


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return _COMMANDS[args.command](args)
    except InvalidDatasetError as exc:
        for v in exc.violations:
            print(str(v), file=sys.stderr)
        return 1
    except Exception as exc:  # noqa: BLE001 - CLI boundary
        print(f"error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
