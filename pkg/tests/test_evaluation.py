"""IoU metric, evaluation protocol, repeated runs, audit, ablation, and PCA."""

from __future__ import annotations

import csv
import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from fsstis.config import Config
from fsstis.episodes import (
    Dataset,
    FinetunePool,
    PoolEntry,
    Sample,
    SynthSpec,
    generate_dataset,
    make_strict_split,
)
from fsstis.evaluation import (
    EvalReport,
    aggregate_runs,
    ablation_suite,
    audit_access,
    evaluate,
    feature_mean_vector,
    iou,
    pca_export,
    pca_top2,
    read_report,
    repeated_eval,
    worker_count,
    write_ablation_csv,
    write_report,
)
from fsstis.tensors import Rng
from fsstis.training import finetune_target, train_source

from oracles import iou_loop

# ---------------------------------------------------------------------- iou


def test_iou_equal_nonempty_is_one():
    m = np.zeros((6, 6), dtype=np.uint8)
    m[1:4, 2:5] = 1
    assert iou(m, m) == 1.0


def test_iou_disjoint_nonempty_is_zero():
    a = np.zeros((4, 4), dtype=np.uint8)
    b = np.zeros((4, 4), dtype=np.uint8)
    a[0, 0] = 1
    b[3, 3] = 1
    assert iou(a, b) == 0.0


def test_iou_both_empty_is_one():
    z = np.zeros((5, 5), dtype=np.uint8)
    assert iou(z, z) == 1.0


def test_iou_shape_mismatch_raises():
    with pytest.raises(ValueError, match="shapes"):
        iou(np.zeros((3, 3)), np.zeros((4, 4)))


def test_iou_matches_loop_oracle():
    rng = np.random.default_rng(0)
    for _ in range(50):
        pred = (rng.uniform(size=(7, 5)) < 0.4).astype(np.uint8)
        gt = (rng.uniform(size=(7, 5)) < 0.4).astype(np.uint8)
        assert iou(pred, gt) == iou_loop(pred, gt)


@given(st.integers(0, 2**32 - 1))
@settings(max_examples=30, deadline=None)
def test_iou_bounds_and_symmetry(seed):
    rng = np.random.default_rng(seed)
    a = (rng.uniform(size=(6, 6)) < 0.5).astype(np.uint8)
    b = (rng.uniform(size=(6, 6)) < 0.5).astype(np.uint8)
    v = iou(a, b)
    assert 0.0 <= v <= 1.0
    assert v == iou(b, a)
    assert iou(a, a) == 1.0


# ---------------------------------------------------------------------- pca


def test_pca_collinear_points_have_zero_pc2(tmp_path):
    rng = np.random.default_rng(1)
    direction = rng.normal(size=8)
    direction /= np.linalg.norm(direction)
    ts = rng.normal(size=20)
    data = np.outer(ts, direction) + rng.normal(size=8)  # shifted line
    coords = pca_export(data, [f"p{i}" for i in range(20)], tmp_path / "line.csv")
    assert np.max(np.abs(coords[:, 1])) <= 1e-6


def test_pca_variance_ordering():
    rng = np.random.default_rng(2)
    data = rng.normal(size=(40, 6)) * np.array([3.0, 1.0, 0.5, 0.2, 0.1, 0.05])
    coords, _ = pca_top2(data)
    assert np.var(coords[:, 0]) >= np.var(coords[:, 1])


def test_pca_matches_dense_eigensolver():
    rng = np.random.default_rng(3)
    data = rng.normal(size=(100, 32)) @ rng.normal(size=(32, 32))
    coords, directions = pca_top2(data)
    centered = data - data.mean(axis=0)
    cov = centered.T @ centered / (len(data) - 1)
    evals, evecs = np.linalg.eigh(cov)
    oracle = evecs[:, [-1, -2]]  # top-2 eigenvectors as columns
    ours = directions.T
    # principal angles between the two 2-D subspaces
    q1, _ = np.linalg.qr(ours)
    q2, _ = np.linalg.qr(oracle)
    sigma = np.linalg.svd(q1.T @ q2, compute_uv=False)
    angles = np.arccos(np.clip(sigma, -1.0, 1.0))
    assert np.max(angles) <= 1e-4


def test_pca_rank_zero_raises():
    data = np.ones((5, 4))
    with pytest.raises(ValueError, match="rank-0"):
        pca_top2(data)


def test_pca_too_few_vectors_raises():
    with pytest.raises(ValueError, match="at least 3"):
        pca_top2(np.eye(2))


def test_pca_label_count_mismatch_raises(tmp_path):
    with pytest.raises(ValueError, match="labels"):
        pca_export(np.random.default_rng(0).normal(size=(4, 3)),
                   ["a", "b"], tmp_path / "x.csv")


def test_pca_csv_rows_match_returned_coords(tmp_path):
    rng = np.random.default_rng(4)
    data = rng.normal(size=(6, 5))
    labels = [f"v{i}" for i in range(6)]
    path = tmp_path / "proj.csv"
    coords = pca_export(data, labels, path)
    with open(path, newline="", encoding="utf-8") as fh:
        rows = list(csv.reader(fh))
    assert rows[0] == ["label", "pc1", "pc2"]
    assert [r[0] for r in rows[1:]] == labels
    parsed = np.array([[float(r[1]), float(r[2])] for r in rows[1:]])
    assert np.array_equal(parsed, coords)


def test_feature_mean_vector():
    arr = np.arange(24, dtype=np.float64).reshape(2, 3, 4)
    np.testing.assert_allclose(feature_mean_vector(arr),
                               arr.mean(axis=(1, 2)))
    with pytest.raises(ValueError, match="feature map"):
        feature_mean_vector(np.zeros((3, 3)))


# ------------------------------------------------------------- aggregation


def _report(seed, miou, per_category, k=1, pool=("p",), queries=("q",)):
    return EvalReport(seed=seed, k=k, pool_ids=tuple(pool),
                      query_ids=tuple(queries),
                      per_category=per_category, miou=miou)


def test_aggregate_mean_and_sample_std():
    runs = [_report(0, 0.5, {3: 0.5}), _report(1, 0.7, {3: 0.7})]
    cfg = Config(seed=0)
    rep = aggregate_runs(runs, cfg)
    assert rep.mean == pytest.approx(0.6)
    assert rep.std == pytest.approx(np.std([0.5, 0.7], ddof=1))
    rep_pop = aggregate_runs(runs, cfg, sample_std=False)
    assert rep_pop.std == pytest.approx(0.1)


def test_aggregate_per_category_and_perfect_runs():
    runs = [
        _report(0, 1.0, {3: 1.0, 4: 1.0}),
        _report(1, 1.0, {3: 1.0, 4: 1.0}),
    ]
    rep = aggregate_runs(runs, Config(seed=0))
    assert rep.mean == 1.0
    assert rep.std == 0.0
    assert rep.per_category == {3: 1.0, 4: 1.0}


def test_audit_access_clean_and_violations():
    run = _report(0, 0.5, {3: 0.5}, pool=("pool1",), queries=("q1", "q2"))
    clean_log = [("finetune-pool", "pool1"),
                 ("eval-query", "q1"), ("eval-query", "q2")]
    audit = audit_access(clean_log, [run])
    assert audit["violations"] == 0
    assert audit["checked_fetches"] == 3

    bad_purpose = audit_access(clean_log + [("finetune-step", "q1")], [run])
    assert bad_purpose["violations"] >= 1
    assert bad_purpose["non_protocol_purposes"] == ["finetune-step"]

    hidden_read = audit_access(clean_log + [("eval-query", "q3")], [run])
    assert hidden_read["query_fetch_mismatch"]
    assert hidden_read["violations"] >= 1

    overlap_run = _report(0, 0.5, {3: 0.5}, pool=("pool1",),
                          queries=("pool1", "q2"))
    overlap_log = [("finetune-pool", "pool1"),
                   ("eval-query", "pool1"), ("eval-query", "q2")]
    overlap = audit_access(overlap_log, [overlap_run])
    assert overlap["pool_images_as_queries"] == 1
    assert overlap["violations"] >= 1


def test_worker_count_parsing(monkeypatch):
    monkeypatch.delenv("FSSTI_THREADS", raising=False)
    assert worker_count() == 1
    monkeypatch.setenv("FSSTI_THREADS", "4")
    assert worker_count() == 4
    monkeypatch.setenv("FSSTI_THREADS", "0")
    assert worker_count() == 1
    monkeypatch.setenv("FSSTI_THREADS", "abc")
    with pytest.raises(ValueError, match="FSSTI_THREADS"):
        worker_count()


# ----------------------------------------------------- pipeline fixtures


EVAL_CONFIG = Config(seed=3, channels=16, iterations_source=400,
                     iterations_finetune=200, k_shot=1,
                     images_per_category=6, eval_repeats=2,
                     absolute_regularizer=True)


@pytest.fixture(scope="module")
def eval_dataset():
    return generate_dataset(SynthSpec(seed=3, images_per_category=6))


@pytest.fixture(scope="module")
def source_checkpoint(eval_dataset):
    return train_source(eval_dataset, EVAL_CONFIG).checkpoint


# ----------------------------------------------------------------- evaluate


def test_evaluate_empty_test_set_raises(eval_dataset, source_checkpoint):
    pool, _ = make_strict_split(eval_dataset, 1, Rng(0).child("split"))
    with pytest.raises(ValueError, match="empty test set"):
        evaluate(source_checkpoint, pool, [], eval_dataset, EVAL_CONFIG)


def test_evaluate_rejects_pool_query_overlap(eval_dataset, source_checkpoint):
    pool, test_ids = make_strict_split(eval_dataset, 1, Rng(0).child("split"))
    poisoned = test_ids + [sorted(pool.ids)[0]]
    with pytest.raises(ValueError, match="overlaps"):
        evaluate(source_checkpoint, pool, poisoned, eval_dataset, EVAL_CONFIG)


def test_evaluate_unknown_category_raises(eval_dataset, source_checkpoint):
    pool, test_ids = make_strict_split(eval_dataset, 1, Rng(0).child("split"))
    lone = pool.entries[:1]  # keep category 3 only
    small_pool = FinetunePool(k=1, entries=lone)
    bad = [t for t in test_ids if t.startswith("target_cat4")][:1]
    with pytest.raises(ValueError, match="no supports"):
        evaluate(source_checkpoint, small_pool, bad, eval_dataset, EVAL_CONFIG)


def test_evaluate_deterministic(eval_dataset, source_checkpoint):
    pool, test_ids = make_strict_split(eval_dataset, 1, Rng(5).child("split"))
    a = evaluate(source_checkpoint, pool, test_ids, eval_dataset, EVAL_CONFIG)
    b = evaluate(source_checkpoint, pool, test_ids, eval_dataset, EVAL_CONFIG)
    assert a == b
    assert 0.0 <= a.miou <= 1.0
    assert a.miou == pytest.approx(np.mean(list(a.per_category.values())))


def test_evaluate_self_consistency_after_adaptation(eval_dataset,
                                                    source_checkpoint):
    # A query identical to the (adapted-on) support must be segmented well.
    s = eval_dataset.fetch("target_cat5_1", "probe")
    pool = FinetunePool(
        k=1, entries=((s.category, (PoolEntry("sup", s.image, s.mask),)),))
    adapted = finetune_target(source_checkpoint, pool, EVAL_CONFIG).checkpoint
    dup = Dataset(None, {
        "sup": Sample("sup", "target", s.category, s.image, s.mask),
        "probe": Sample("probe", "target", s.category, s.image, s.mask),
    })
    report = evaluate(adapted, pool, ["probe"], dup, EVAL_CONFIG)
    assert report.miou >= 0.9


# ------------------------------------------------------------ repeated_eval


def test_repeated_eval_matches_manual_composition(eval_dataset,
                                                  source_checkpoint):
    seed = 11
    rep = repeated_eval(source_checkpoint, eval_dataset, EVAL_CONFIG,
                        seeds=[seed])
    pool, test_ids = make_strict_split(eval_dataset, EVAL_CONFIG.k_shot,
                                       Rng(seed).child("split"))
    run_cfg = EVAL_CONFIG.replace(seed=seed)
    adapted = finetune_target(source_checkpoint, pool, run_cfg).checkpoint
    manual = evaluate(adapted, pool, test_ids, eval_dataset, run_cfg, seed=seed)
    assert rep.runs == (manual,)
    assert rep.mean == manual.miou
    assert rep.std == 0.0


def test_repeated_eval_identical_seeds_zero_std(eval_dataset,
                                                source_checkpoint):
    rep = repeated_eval(source_checkpoint, eval_dataset, EVAL_CONFIG,
                        seeds=[7, 7, 7])
    assert rep.std == 0.0
    assert all(run == rep.runs[0] for run in rep.runs)
    assert rep.seeds == (7, 7, 7)


def test_repeated_eval_audit_is_clean(eval_dataset, source_checkpoint):
    rep = repeated_eval(source_checkpoint, eval_dataset, EVAL_CONFIG,
                        seeds=[21, 22])
    assert rep.audit is not None
    assert rep.audit["violations"] == 0
    # per run: 3 pool images at split time + 15 queries ((6-1) x 3 categories)
    assert rep.audit["checked_fetches"] == 2 * (3 + 15)


def test_repeated_eval_report_json_roundtrip(tmp_path, eval_dataset,
                                             source_checkpoint):
    rep = repeated_eval(source_checkpoint, eval_dataset, EVAL_CONFIG,
                        seeds=[31, 32])
    path = tmp_path / "report.json"
    write_report(rep, path)
    loaded = read_report(path)
    assert loaded == rep.to_json_dict()
    for key in ("seeds", "per_run_miou", "mean", "std", "per_category"):
        assert key in loaded
    assert loaded["config"]["variant"] == "full"


def test_repeated_eval_threads_match_sequential(monkeypatch, eval_dataset,
                                                source_checkpoint):
    monkeypatch.delenv("FSSTI_THREADS", raising=False)
    seq = repeated_eval(source_checkpoint, eval_dataset, EVAL_CONFIG,
                        seeds=[41, 42])
    monkeypatch.setenv("FSSTI_THREADS", "2")
    par = repeated_eval(source_checkpoint, eval_dataset, EVAL_CONFIG,
                        seeds=[41, 42])
    assert par.to_json_dict() == seq.to_json_dict()


def test_repeated_eval_source_only_composition(eval_dataset,
                                               source_checkpoint):
    seed = 51
    rep = repeated_eval(source_checkpoint, eval_dataset, EVAL_CONFIG,
                        seeds=[seed], finetune=False)
    pool, test_ids = make_strict_split(eval_dataset, EVAL_CONFIG.k_shot,
                                       Rng(seed).child("split"))
    manual = evaluate(source_checkpoint, pool, test_ids, eval_dataset,
                      EVAL_CONFIG.replace(seed=seed), seed=seed)
    assert rep.runs == (manual,)
    assert rep.audit["violations"] == 0


# ------------------------------------------------------------------ ablation


def test_ablation_rows_labels_and_csv(tmp_path, eval_dataset):
    cfg = EVAL_CONFIG.replace(channels=8, iterations_source=30,
                              iterations_finetune=10)
    rows = ablation_suite(eval_dataset, cfg, seeds=[61, 62],
                          variants=["full", "no-ode"])
    assert [r.label for r in rows] == ["FSS-TIs", "FSS-TIs-SO", "FSS-TIs-ODE"]
    # paired protocol: every row evaluated on the same seeds and splits
    for row in rows:
        assert row.report.seeds == (61, 62)
        assert row.report.config["variant"] == row.variant
        assert len(row.per_run) == 2
    pools = [tuple(r.pool_ids for r in row.report.runs) for row in rows]
    assert pools[0] == pools[1] == pools[2]

    path = tmp_path / "ablation.csv"
    write_ablation_csv(rows, path)
    with open(path, newline="", encoding="utf-8") as fh:
        parsed = list(csv.reader(fh))
    assert parsed[0] == ["label", "variant", "finetuned", "mean", "std",
                        "run1", "run2"]
    assert [r[0] for r in parsed[1:]] == ["FSS-TIs", "FSS-TIs-SO", "FSS-TIs-ODE"]
    assert float(parsed[1][3]) == pytest.approx(rows[0].mean)


def test_ablation_unknown_variant_raises(eval_dataset):
    with pytest.raises(ValueError, match="variant"):
        ablation_suite(eval_dataset, EVAL_CONFIG, seeds=[1],
                       variants=["bogus"])
