"""Acceptance suite: one test group per release criterion.

Criteria 1, 2, and 4 assert the published reference tables verbatim. Three of
those assertions fail by construction of the reference data itself and are
expected to stay red:

* the individual combined-points table awards SAE 6 points on SUN, but
  dense-ranking the published two-decimal metric values yields 7 (the SUN F1
  column rounds SJE and SAE to the same 0.53, and no order-independent tie
  rule can give the published split while also matching the shared-points
  ties in the aPY LogLoss and AWA2 F1 columns);
* the joint 11-competitor table's CUB column awards one extra point to every
  competitor outside the top four relative to any dense ranking of the
  published CUB values, shifting seven totals by +1;
* the published AWA2 difficulty row sums to 98.01, outside the 100 +- 0.05
  band the other four rows satisfy.

Everything else must pass at the stated tolerances.
"""

import math
import time

import numpy as np
import pytest

from zslbench import reference
from zslbench.analysis import combined_points, difficulty_levels
from zslbench.classifiers import (
    TrainConfig,
    ranking_loss_and_gradient,
    score_rows,
    solve_sylvester,
    train_eszsl,
    train_sae,
)
from zslbench.data import synthesize
from zslbench.fusion import (
    build_prediction_set,
    ceiling,
    fuse_auction,
    fuse_consensus,
    fuse_majority,
)
from zslbench.harness import emit_all_reports, experiment_config_from_dict, run_experiment
from zslbench.metrics import ScoreMatrix, argmax_labels, evaluate, top_k_accuracy


# --- Criterion 1: individual combined-points reproduction --------------------


@pytest.fixture(scope="module")
def individual_points():
    start = time.perf_counter()
    table = combined_points(
        reference.base_value_cube(),
        reference.BASE_CLASSIFIERS,
        reference.DATASETS,
        reference.MEASURES,
        lower_better=reference.LOWER_BETTER,
    )
    return table, time.perf_counter() - start


@pytest.mark.parametrize("competitor", reference.BASE_CLASSIFIERS)
def test_criterion_1_individual_points(individual_points, competitor):
    table, _ = individual_points
    i = table.competitors.index(competitor)
    expected = reference.BASE_POINTS[competitor]
    got = tuple(int(v) for v in table.points[i]) + (int(table.totals[i]),)
    assert got == expected, (
        f"{competitor}: dense ranking of the published metric values yields "
        f"{got}, reference table records {expected}"
    )


def test_criterion_1_runtime_under_one_second(individual_points):
    _, elapsed = individual_points
    assert elapsed < 1.0


# --- Criterion 2: meta and joint points reproduction -------------------------


def test_criterion_2_meta_points_totals():
    table = combined_points(
        reference.meta_value_cube(), reference.META_CLASSIFIERS,
        reference.DATASETS, ("top1", "f1"),
    )
    for i, name in enumerate(table.competitors):
        expected = reference.META_POINTS[name]
        assert tuple(int(v) for v in table.points[i]) == expected[:-1], name
        assert int(table.totals[i]) == expected[-1], name


@pytest.fixture(scope="module")
def joint_points():
    return combined_points(
        reference.joint_value_cube(), reference.JOINT_COMPETITORS,
        reference.DATASETS, ("top1", "f1"),
    )


def test_criterion_2_joint_apy_column_with_tie_cells(joint_points):
    apy = reference.DATASETS.index("aPY")
    got = {name: int(joint_points.points[i, apy]) for i, name in enumerate(joint_points.competitors)}
    expected = {name: pts[apy] for name, pts in reference.JOINT_POINTS.items()}
    assert got == expected
    # the three-way tie cell: MDT, Auc, and MV-adjacent all land on 18
    assert got["MDT"] == got["Auc"] == got["MV"] == 18


@pytest.mark.parametrize("competitor", reference.JOINT_COMPETITORS)
def test_criterion_2_joint_totals(joint_points, competitor):
    i = joint_points.competitors.index(competitor)
    expected = reference.JOINT_POINTS[competitor][-1]
    got = int(joint_points.totals[i])
    assert got == expected, (
        f"{competitor}: dense ranking of the published top-1/F1 values totals "
        f"{got}, reference table records {expected} (CUB column offset)"
    )


# --- Criterion 3: ceiling reproduction ----------------------------------------


@pytest.mark.parametrize("dataset", reference.DATASETS)
def test_criterion_3_ceiling_matches_published_limits(dataset):
    got = ceiling(reference.DIFFICULTY_LEVELS[dataset])
    assert got == pytest.approx(reference.CEILINGS[dataset], abs=0.02)


# --- Criterion 4: difficulty-level consistency ---------------------------------


@pytest.mark.parametrize("dataset", reference.DATASETS)
def test_criterion_4_published_rows_sum_to_100(dataset):
    total = sum(reference.DIFFICULTY_LEVELS[dataset])
    assert total == pytest.approx(100.0, abs=0.05), (
        f"{dataset}: published difficulty row sums to {total}"
    )


def test_criterion_4_computed_rows_sum_exactly():
    rng = np.random.default_rng(123)
    for _ in range(10):
        mat = rng.integers(0, 2, size=(rng.integers(5, 200), 5))
        assert difficulty_levels(mat).sum() == pytest.approx(100.0, abs=1e-9)


# --- Criterion 5: gradient correctness -----------------------------------------


def _finite_difference(variant, w, x, y_true, protos, candidates, step=1e-5):
    grad = np.zeros_like(w)
    for i in range(w.shape[0]):
        for j in range(w.shape[1]):
            wp, wm = w.copy(), w.copy()
            wp[i, j] += step
            wm[i, j] -= step
            lp, _ = ranking_loss_and_gradient(variant, wp, x, y_true, protos, candidates)
            lm, _ = ranking_loss_and_gradient(variant, wm, x, y_true, protos, candidates)
            grad[i, j] = (lp - lm) / (2 * step)
    return grad


@pytest.mark.parametrize("variant", ["devise", "ale", "sje"])
def test_criterion_5_gradients_match_finite_differences(variant):
    rng = np.random.default_rng(20240901)
    start = time.perf_counter()
    for _ in range(100):
        d = int(rng.integers(2, 9))
        m = int(rng.integers(2, 9))
        c = int(rng.integers(2, 7))
        candidates = list(range(1, c + 1))
        protos = {cc: rng.normal(size=m) for cc in candidates}
        w = rng.normal(size=(d, m))
        x = rng.normal(size=d)
        y_true = int(rng.choice(candidates))
        _, grad = ranking_loss_and_gradient(variant, w, x, y_true, protos, candidates)
        fd = _finite_difference(variant, w, x, y_true, protos, candidates)
        denom = max(np.linalg.norm(fd), 1e-9)
        rel = np.linalg.norm(grad - fd) / denom
        assert rel < 1e-4, f"{variant}: relative gradient error {rel}"
    assert time.perf_counter() - start < 10.0


# --- Criterion 6: closed-form correctness ---------------------------------------


def test_criterion_6_eszsl_stationarity_and_oracle():
    rng = np.random.default_rng(77)
    start = time.perf_counter()
    for _ in range(50):
        d = int(rng.integers(3, 8))
        m = int(rng.integers(2, 6))
        n_seen = int(rng.integers(2, 5))
        per_class = int(rng.integers(2, 5))
        ds = synthesize(n_seen, 1, per_class, d, m, 0.4, seed=int(rng.integers(0, 2**31)))
        cfg = TrainConfig(gamma=0.5, lam=0.7, seed=0)
        model = train_eszsl(ds, cfg)

        from zslbench.classifiers import _prepared_inputs

        x_rows, y_all, protos = _prepared_inputs(ds, ds.split.train_rows, cfg)
        x = x_rows.T
        s = np.stack([protos[c] for c in ds.split.seen]).T
        col = {c: j for j, c in enumerate(ds.split.seen)}
        y = -np.ones((x.shape[1], len(ds.split.seen)))
        for i, lab in enumerate(y_all):
            y[i, col[int(lab)]] = 1.0
        a = x @ x.T + cfg.gamma * np.eye(d)
        b = s @ s.T + cfg.lam * np.eye(s.shape[0])
        k = x @ y @ s.T

        # stationarity of the regularized square loss
        assert np.linalg.norm(a @ model.w @ b - k) <= 1e-6 * (1 + np.linalg.norm(model.w))
        # independent oracle: vectorized normal equations
        w_oracle = np.linalg.solve(np.kron(b.T, a), k.reshape(-1, order="F")).reshape(d, s.shape[0], order="F")
        assert np.linalg.norm(model.w - w_oracle) <= 1e-8 * np.linalg.norm(w_oracle)
    assert time.perf_counter() - start < 10.0


def test_criterion_6_sylvester_residual_and_oracle():
    rng = np.random.default_rng(78)
    start = time.perf_counter()
    for _ in range(50):
        ma = int(rng.integers(2, 6))
        mb = int(rng.integers(2, 6))
        a = rng.normal(size=(ma, ma))
        a = a @ a.T + np.eye(ma)  # positive definite
        b = rng.normal(size=(mb, mb))
        b = b @ b.T + np.eye(mb)
        c = rng.normal(size=(ma, mb))
        w = solve_sylvester(a, b, c)
        assert np.linalg.norm(a @ w + w @ b - c) <= 1e-8 * np.linalg.norm(c)
        lhs = np.kron(np.eye(mb), a) + np.kron(b.T, np.eye(ma))
        w_oracle = np.linalg.solve(lhs, c.reshape(-1, order="F")).reshape(ma, mb, order="F")
        assert np.linalg.norm(w - w_oracle) <= 1e-8 * np.linalg.norm(w_oracle)
    assert time.perf_counter() - start < 10.0


def test_criterion_6_sae_residual_bound():
    rng = np.random.default_rng(79)
    for _ in range(20):
        ds = synthesize(3, 2, 8, 6, 4, 0.3, seed=int(rng.integers(0, 2**31)))
        cfg = TrainConfig(lam=float(rng.uniform(0.2, 3.0)), seed=0)
        model = train_sae(ds, cfg)

        from zslbench.classifiers import _prepared_inputs

        x_rows, y_all, protos = _prepared_inputs(ds, ds.split.train_rows, cfg)
        x = x_rows.T
        s = np.stack([protos[int(c)] for c in y_all]).T
        a = s @ s.T
        b = cfg.lam * (x @ x.T)
        c = (1 + cfg.lam) * (s @ x.T)
        w_md = model.w.T
        assert np.linalg.norm(a @ w_md + w_md @ b - c) <= 1e-8 * np.linalg.norm(c)


# --- Criterion 7: synthetic end-to-end -------------------------------------------


def _nearest_prototype_oracle_accuracy(ds):
    """Recover the generator map by least squares, invert it, classify by
    nearest unseen prototype in semantic space."""
    train_rows = ds.split.train_rows
    p_train = np.stack([ds.prototypes[int(c)].astype(np.float64) for c in ds.labels[train_rows]])
    x_train = ds.embeddings[train_rows].astype(np.float64)
    g_hat, *_ = np.linalg.lstsq(p_train, x_train, rcond=None)  # (M, D), maps proto -> embedding
    x_test = ds.embeddings[ds.split.test_rows].astype(np.float64)
    sem, *_ = np.linalg.lstsq(g_hat.T, x_test.T, rcond=None)  # (M, Nte)
    p_unseen = ds.prototypes.matrix(ds.split.unseen).astype(np.float64)
    d2 = ((sem.T[:, None, :] - p_unseen[None, :, :]) ** 2).sum(axis=2)
    pred = np.asarray(ds.split.unseen)[np.argmin(d2, axis=1)]
    return float((pred == ds.labels[ds.split.test_rows]).mean() * 100.0)


@pytest.fixture(scope="module")
def synthetic_run_clock():
    return {"start": time.perf_counter()}


@pytest.mark.parametrize("sigma,threshold", [(0.05, 90.0), (0.0, 99.0)])
def test_criterion_7_eszsl_unseen_accuracy(synthetic_run_clock, sigma, threshold):
    ds = synthesize(10, 10, 50, 64, 16, sigma, seed=1)
    assert _nearest_prototype_oracle_accuracy(ds) >= threshold  # the data supports it
    model = train_eszsl(ds, TrainConfig(seed=1))
    sm = ScoreMatrix(ds.split.unseen, score_rows(model, ds, ds.split.test_rows, ds.split.unseen))
    top1 = top_k_accuracy(sm, ds.labels[ds.split.test_rows], k=1)
    assert top1 >= threshold


def test_criterion_7_fused_top1_never_exceeds_ceiling(synthetic_run_clock, tmp_path):
    raw = {
        "seed": 1,
        "datasets": [
            # the pinned end-to-end dataset plus a noisier grid with a
            # nontrivial ceiling and a DNN-compatible class split
            {"name": "pinned", "synthesize": {"n_seen": 10, "n_unseen": 10, "per_class": 50,
                                              "d": 64, "m": 16, "noise_sigma": 0.05}},
            {"name": "noisy", "synthesize": {"n_seen": 10, "n_unseen": 5, "per_class": 30,
                                             "d": 32, "m": 12, "noise_sigma": 4.0}},
            {"name": "harder", "synthesize": {"n_seen": 12, "n_unseen": 6, "per_class": 25,
                                              "d": 24, "m": 10, "noise_sigma": 5.5}},
        ],
        "classifiers": [
            {"method": "devise", "config": {"epochs": 15, "learning_rate": 0.05}},
            {"method": "ale", "config": {"epochs": 15, "learning_rate": 0.05}},
            {"method": "sje", "config": {"epochs": 15, "learning_rate": 0.05}},
            {"method": "eszsl"},
            {"method": "sae"},
        ],
        "fusions": [{"scheme": s} for s in ("mv", "mdt", "dnn")],
    }
    config = experiment_config_from_dict(raw)
    records = run_experiment(config, tmp_path)
    ceilings = {r.dataset: r.ceiling for r in records if r.kind == "dataset"}
    checked = 0
    for r in records:
        if r.kind == "fusion" and r.metrics is not None:
            assert r.metrics["top1"] <= ceilings[r.dataset] + 1e-9, (
                f"{r.competitor} on {r.dataset}: {r.metrics['top1']} above ceiling {ceilings[r.dataset]}"
            )
            checked += 1
    assert checked >= 7  # mv and mdt everywhere, dnn where the class split allows


def test_criterion_7_runtime_under_60s(synthetic_run_clock):
    assert time.perf_counter() - synthetic_run_clock["start"] < 60.0


# --- Criterion 8: fusion oracles ---------------------------------------------------


@pytest.fixture(scope="module")
def big_random_prediction_set():
    rng = np.random.default_rng(888)
    candidates = (1, 2, 3, 4)
    mats = [ScoreMatrix(candidates, rng.normal(size=(1000, 4))) for _ in range(5)]
    return build_prediction_set([f"clf{i}" for i in range(5)], mats)


def test_criterion_8_majority_matches_vote_counting(big_random_prediction_set):
    ps = big_random_prediction_set
    fused = fuse_majority(ps)
    for i in range(ps.n):
        votes, conf = {}, {}
        for k in range(ps.k):
            lab = int(ps.predicted[k, i])
            votes[lab] = votes.get(lab, 0) + 1
            conf[lab] = conf.get(lab, 0.0) + float(ps.confidence[k, i])
        top = max(votes.values())
        tied = [lab for lab, v in votes.items() if v == top]
        best = max(conf[lab] for lab in tied)
        assert fused[i] == min(lab for lab in tied if conf[lab] == best)


def test_criterion_8_auction_matches_max_bid(big_random_prediction_set):
    ps = big_random_prediction_set
    fused = fuse_auction(ps)
    for i in range(ps.n):
        order = sorted(range(ps.k), key=lambda k: (-ps.confidence[k, i], -ps.margin[k, i], k))
        assert fused[i] == ps.predicted[order[0], i]


def test_criterion_8_consensus_matches_mean_distribution(big_random_prediction_set):
    ps = big_random_prediction_set
    fused = fuse_consensus(ps)
    shifted = ps.scores - ps.scores.max(axis=2, keepdims=True)
    e = np.exp(shifted)
    probs = e / e.sum(axis=2, keepdims=True)
    mean = probs.mean(axis=0)
    cand = np.asarray(ps.candidates)
    for i in range(ps.n):
        best = mean[i].max()
        assert fused[i] == min(int(cand[j]) for j in range(len(cand)) if mean[i, j] == best)


# --- Criterion 9: metric sanity ------------------------------------------------------


def test_criterion_9_uniform_logloss_is_ln_c():
    for c in (2, 10, 50, 72):
        sm = ScoreMatrix(tuple(range(1, c + 1)), np.zeros((6, c)))
        labels = np.arange(1, 7) % c + 1
        report = evaluate(sm, labels)
        assert abs(report.logloss - math.log(c)) < 1e-9


def test_criterion_9_topk_monotone_in_k():
    rng = np.random.default_rng(9)
    sm = ScoreMatrix(tuple(range(1, 9)), rng.normal(size=(60, 8)))
    labels = rng.integers(1, 9, size=60)
    accs = [top_k_accuracy(sm, labels, k=k) for k in range(1, 9)]
    assert all(a <= b + 1e-12 for a, b in zip(accs, accs[1:]))
    assert accs[-1] == 100.0


def test_criterion_9_perfect_predictions():
    rng = np.random.default_rng(10)
    labels = rng.integers(1, 6, size=40)
    values = rng.normal(size=(40, 5))
    values[np.arange(40), labels - 1] = values.max() + 1.0
    report = evaluate(ScoreMatrix((1, 2, 3, 4, 5), values), labels)
    assert report.top1 == 100.0
    assert report.f1 == 1.0


# --- Criterion 10: end-to-end reproducibility ------------------------------------------


def test_criterion_10_reruns_are_byte_identical(tmp_path):
    raw = {
        "seed": 42,
        "datasets": [
            {"name": "a", "synthesize": {"n_seen": 8, "n_unseen": 4, "per_class": 12,
                                         "d": 16, "m": 8, "noise_sigma": 3.0}},
            {"name": "b", "synthesize": {"n_seen": 6, "n_unseen": 3, "per_class": 10,
                                         "d": 12, "m": 6, "noise_sigma": 2.0}},
        ],
        "classifiers": [
            {"method": "devise", "config": {"epochs": 8, "learning_rate": 0.05}},
            {"method": "ale", "config": {"epochs": 8, "learning_rate": 0.05}},
            {"method": "sje", "config": {"epochs": 8, "learning_rate": 0.05}},
            {"method": "eszsl"},
            {"method": "sae"},
        ],
        "fusions": [{"scheme": s} for s in ("mv", "mdt", "dnn", "gt", "con", "auc")],
    }
    config = experiment_config_from_dict(raw)
    outs = []
    for tag in ("first", "second"):
        out = tmp_path / tag
        records = run_experiment(config, out)
        emit_all_reports(records, out)
        outs.append(out)
    csvs = sorted(p.name for p in outs[0].glob("*.csv"))
    assert csvs  # reports were produced
    for name in csvs:
        assert (outs[0] / name).read_bytes() == (outs[1] / name).read_bytes(), name
