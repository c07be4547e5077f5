"""Tests for the training loops, metrics, cross-validation and the
checkpoint format."""

import dataclasses
import json
import struct

import numpy as np
import pytest

import gutgraph.autodiff as ad
import gutgraph.model as gm
import gutgraph.train as gt
from gutgraph.graph import build_multigraph
from gutgraph.ingest import synth_cohort


def small_cfg(**overrides) -> gt.TrainConfig:
    base = dict(embed_dim=6, gcn_layers=2, bins=4, heads=2, epochs=5,
                learning_rate=1e-3, seed=0, folds=3, eval_seeds=1,
                classifier_steps=40)
    base.update(overrides)
    return gt.TrainConfig(**base)


def small_problem(n_per_class=6, n_features=10, separation=2.0, seed=3):
    table, labels = synth_cohort(n_per_class, n_features, separation, seed)
    return table.values, np.asarray(labels.labels)


# ---------------------------------------------------------------------------
# config


def test_config_defaults_valid():
    cfg = gt.TrainConfig()
    assert cfg.embed_dim == 256
    assert cfg.threshold == 0.6
    assert cfg.histogram_weighting == "magnitude"


@pytest.mark.parametrize("kwargs", [
    {"embed_dim": 0},
    {"gcn_layers": 0},
    {"bins": 0},
    {"heads": 0},
    {"threshold": 0.0},
    {"threshold": 1.0},
    {"epochs": -1},
    {"classifier_steps": -1},
    {"learning_rate": -0.1},
    {"clip_norm": 0.0},
    {"seed": -1},
    {"folds": 1},
    {"eval_seeds": 0},
    {"histogram_weighting": "median"},
])
def test_config_rejects_bad_values(kwargs):
    with pytest.raises(ValueError):
        gt.TrainConfig(**kwargs)


def test_config_dict_round_trip():
    cfg = small_cfg(use_attention=False, histogram_weighting="count")
    assert gt.TrainConfig.from_dict(cfg.as_dict()) == cfg


def test_config_from_dict_rejects_unknown_keys():
    data = gt.TrainConfig().as_dict()
    data["momentum"] = 0.9
    with pytest.raises(ValueError, match="momentum"):
        gt.TrainConfig.from_dict(data)


# ---------------------------------------------------------------------------
# unsupervised loop


def test_zero_learning_rate_keeps_params():
    values, _ = small_problem()
    cfg = small_cfg(learning_rate=0.0, epochs=3)
    mg = build_multigraph(values, cfg.threshold, seed=cfg.seed)
    params, trace = gt.train_unsupervised(mg, cfg)
    init_ss = np.random.SeedSequence(cfg.seed).spawn(2)[0]
    fresh = gm.init_model_params(mg.kinds, values.shape[1], cfg.embed_dim,
                                 cfg.gcn_layers, cfg.bins, cfg.heads,
                                 cfg.two_stage_summary,
                                 np.random.default_rng(init_ss))
    for name, tensor in params.named_tensors().items():
        assert tensor.data.tobytes() == fresh.named_tensors()[name].data.tobytes()
    assert len(trace) == 3


def test_loss_decreases_on_small_fixture():
    values, _ = small_problem()
    cfg = small_cfg(epochs=30, learning_rate=5e-3)
    mg = build_multigraph(values, cfg.threshold, seed=cfg.seed)
    _, trace = gt.train_unsupervised(mg, cfg)
    assert len(trace) == 30
    assert trace[-1] < trace[0]


def test_training_is_bit_deterministic():
    values, _ = small_problem()
    cfg = small_cfg(epochs=4)
    runs = []
    for _ in range(2):
        mg = build_multigraph(values, cfg.threshold, seed=cfg.seed)
        params, trace = gt.train_unsupervised(mg, cfg)
        blob = b"".join(t.data.tobytes() for t in params.named_tensors().values())
        runs.append((blob, np.asarray(trace).tobytes()))
    assert runs[0] == runs[1]


def test_static_corruption_differs_from_fresh():
    values, _ = small_problem()
    mg = build_multigraph(values, 0.6, seed=0)
    _, trace_fresh = gt.train_unsupervised(mg, small_cfg(epochs=4))
    _, trace_static = gt.train_unsupervised(
        mg, small_cfg(epochs=4, fresh_corruption=False))
    # first epoch may already differ: the fresh stream is independent of
    # the permutation stored on the multigraph
    assert trace_fresh != trace_static


def test_divergence_raises_with_trace():
    import warnings
    values, _ = small_problem()
    # an absurd step size overflows the embeddings on the second epoch
    cfg = small_cfg(epochs=50, learning_rate=1e100, clip_norm=1e30)
    mg = build_multigraph(values, cfg.threshold, seed=cfg.seed)
    with pytest.raises(gt.TrainingDivergedError) as exc_info:
        with warnings.catch_warnings(), np.errstate(all="ignore"):
            warnings.simplefilter("ignore")
            gt.train_unsupervised(mg, cfg)
    err = exc_info.value
    assert err.epoch >= 1
    assert len(err.trace) == err.epoch - 1
    assert all(np.isfinite(v) for v in err.trace)


def test_adversarial_ablation_leaves_discriminators_untouched():
    values, _ = small_problem()
    cfg = small_cfg(use_adversarial=False, epochs=4)
    mg = build_multigraph(values, cfg.threshold, seed=cfg.seed)
    params, _ = gt.train_unsupervised(mg, cfg)
    init_ss = np.random.SeedSequence(cfg.seed).spawn(2)[0]
    fresh = gm.init_model_params(mg.kinds, values.shape[1], cfg.embed_dim,
                                 cfg.gcn_layers, cfg.bins, cfg.heads,
                                 cfg.two_stage_summary,
                                 np.random.default_rng(init_ss))
    for kind in mg.kinds:
        name = f"discriminator/{kind.value}/weight"
        assert (params.named_tensors()[name].data.tobytes()
                == fresh.named_tensors()[name].data.tobytes())
    # encoder weights must still move
    enc = f"encoder/{mg.kinds[0].value}/layer0/weight"
    assert (params.named_tensors()[enc].data.tobytes()
            != fresh.named_tensors()[enc].data.tobytes())


def test_attention_ablation_leaves_queries_untouched():
    values, _ = small_problem()
    cfg = small_cfg(use_attention=False, epochs=4)
    mg = build_multigraph(values, cfg.threshold, seed=cfg.seed)
    params, _ = gt.train_unsupervised(mg, cfg)
    init_ss = np.random.SeedSequence(cfg.seed).spawn(2)[0]
    fresh = gm.init_model_params(mg.kinds, values.shape[1], cfg.embed_dim,
                                 cfg.gcn_layers, cfg.bins, cfg.heads,
                                 cfg.two_stage_summary,
                                 np.random.default_rng(init_ss))
    for h in range(cfg.heads):
        for kind in mg.kinds:
            name = f"attention/head{h}/{kind.value}/query"
            assert (params.named_tensors()[name].data.tobytes()
                    == fresh.named_tensors()[name].data.tobytes())


# ---------------------------------------------------------------------------
# classifier head


def test_classifier_fits_separable_embeddings():
    rng = np.random.default_rng(0)
    n = 40
    emb = rng.normal(size=(n, 5))
    emb[: n // 2, 0] -= 4.0
    emb[n // 2:, 0] += 4.0
    labels = np.array([0] * (n // 2) + [1] * (n // 2))
    cfg = small_cfg(classifier_steps=300)
    head = gt.train_classifier(emb, labels, np.arange(n), cfg, seed=1)
    scores = gt.head_scores(head, emb)
    metrics = gt.threshold_metrics(scores, labels)
    assert metrics["accuracy"] == 1.0


def test_classifier_zero_steps_returns_init():
    rng = np.random.default_rng(2)
    emb = rng.normal(size=(10, 4))
    labels = np.array([0, 1] * 5)
    cfg = small_cfg(classifier_steps=0)
    head = gt.train_classifier(emb, labels, np.arange(10), cfg, seed=9)
    ref = np.random.default_rng(9)
    bound = 1.0 / np.sqrt(4)
    expected_w = ref.uniform(-bound, bound, size=(4, 2))
    assert head.weight.tobytes() == expected_w.tobytes()
    assert np.all(head.bias == 0.0)
    assert head.mean.tobytes() == emb.mean(axis=0).tobytes()
    assert head.scale.tobytes() == emb.std(axis=0).tobytes()


def test_head_standardization_is_scale_invariant():
    rng = np.random.default_rng(5)
    emb = rng.normal(size=(20, 4))
    emb[:10, 1] -= 3.0
    emb[10:, 1] += 3.0
    labels = np.array([0] * 10 + [1] * 10)
    cfg = small_cfg(classifier_steps=200)
    head_a = gt.train_classifier(emb, labels, np.arange(20), cfg, seed=2)
    head_b = gt.train_classifier(emb * 1e6, labels, np.arange(20), cfg, seed=2)
    s_a = gt.head_scores(head_a, emb)
    s_b = gt.head_scores(head_b, emb * 1e6)
    assert np.allclose(s_a, s_b, atol=1e-9)


def test_classifier_rejects_single_class_fold():
    emb = np.ones((6, 3))
    labels = np.array([0, 0, 0, 1, 1, 1])
    cfg = small_cfg()
    with pytest.raises(ValueError, match="single class"):
        gt.train_classifier(emb, labels, np.array([0, 1, 2]), cfg)


def test_classifier_rejects_empty_fold():
    cfg = small_cfg()
    with pytest.raises(ValueError, match="empty"):
        gt.train_classifier(np.ones((4, 2)), np.array([0, 1, 0, 1]),
                            np.array([], dtype=int), cfg)


# ---------------------------------------------------------------------------
# metrics


def test_threshold_metrics_hand_case():
    scores = np.array([0.9, 0.8, 0.4, 0.3, 0.6, 0.2])
    labels = np.array([1, 1, 1, 0, 0, 0])
    m = gt.threshold_metrics(scores, labels)
    # pred = [1, 1, 0, 0, 1, 0]: tp=2 fp=1 fn=1 tn=2
    assert m["accuracy"] == pytest.approx(4 / 6)
    assert m["precision"] == pytest.approx(2 / 3)
    assert m["recall"] == pytest.approx(2 / 3)
    assert m["f1"] == pytest.approx(2 / 3)


def test_threshold_is_strictly_greater():
    m = gt.threshold_metrics(np.array([0.5, 0.5]), np.array([1, 0]))
    # exactly 0.5 predicts negative
    assert m["recall"] == 0.0
    assert m["accuracy"] == 0.5


def test_precision_zero_when_nothing_predicted_positive():
    m = gt.threshold_metrics(np.array([0.1, 0.2]), np.array([1, 0]))
    assert m["precision"] == 0.0
    assert m["f1"] == 0.0


def test_auc_two_sample_cases():
    assert gt.auc_score(np.array([0.9, 0.1]), np.array([1, 0])) == 1.0
    assert gt.auc_score(np.array([0.1, 0.9]), np.array([1, 0])) == 0.0
    assert gt.auc_score(np.array([0.5, 0.5]), np.array([1, 0])) == 0.5


def test_auc_requires_both_classes():
    with pytest.raises(ValueError):
        gt.auc_score(np.array([0.5, 0.6]), np.array([1, 1]))


def auc_pair_count(scores, labels):
    """O(n^2) reference: fraction of (pos, neg) pairs ranked correctly,
    ties worth one half."""
    pos = scores[labels == 1]
    neg = scores[labels == 0]
    total = 0.0
    for p in pos:
        for q in neg:
            if p > q:
                total += 1.0
            elif p == q:
                total += 0.5
    return total / (len(pos) * len(neg))


def test_auc_matches_pair_count_oracle_exactly():
    rng = np.random.default_rng(11)
    for _ in range(100):
        n = int(rng.integers(3, 30))
        # coarse grid forces plenty of ties
        scores = rng.integers(0, 5, size=n) / 4.0
        labels = rng.integers(0, 2, size=n)
        if np.unique(labels).size < 2:
            labels[0] = 0
            labels[1] = 1
        # both are exact multiples of 0.5 over the same denominator so
        # equality is exact, not approximate
        assert gt.auc_score(scores, labels) == auc_pair_count(scores, labels)


def test_aggregate_rows_population_std():
    rows = [
        gt.MetricsRow(0, 0, accuracy=0.8, precision=1.0, recall=0.5,
                      f1=0.6, auc=0.9, n_test=4),
        gt.MetricsRow(0, 1, accuracy=0.6, precision=0.5, recall=0.5,
                      f1=0.5, auc=None, n_test=4),
    ]
    agg = gt.aggregate_rows(rows)
    assert agg["accuracy"]["mean"] == pytest.approx(0.7)
    assert agg["accuracy"]["std"] == pytest.approx(0.1)
    assert agg["accuracy"]["count"] == 2
    # the undefined AUC row is excluded, not coerced to a number
    assert agg["auc"]["mean"] == pytest.approx(0.9)
    assert agg["auc"]["count"] == 1


# ---------------------------------------------------------------------------
# cross-validation


def test_cross_validation_shape_and_determinism():
    values, labels = small_problem(n_per_class=9, n_features=8)
    cfg = small_cfg(eval_seeds=2, epochs=4, classifier_steps=30)
    r1 = gt.run_cross_validation(values, labels, cfg)
    r2 = gt.run_cross_validation(values, labels, cfg)
    assert len(r1.rows) == cfg.folds * cfg.eval_seeds
    assert [(-1 if r.auc is None else r.auc) for r in r1.rows] \
        == [(-1 if r.auc is None else r.auc) for r in r2.rows]
    assert gt.report_to_json(r1) == gt.report_to_json(r2)
    assert sum(r.n_test for r in r1.rows) == cfg.eval_seeds * values.shape[0]


def test_cross_validation_rejects_mismatched_labels():
    values, labels = small_problem()
    cfg = small_cfg()
    with pytest.raises(ValueError, match="labels shape"):
        gt.run_cross_validation(values, labels[:-1], cfg)


def test_parallel_jobs_match_serial():
    values, labels = small_problem(n_per_class=8, n_features=8)
    cfg = small_cfg(eval_seeds=2, epochs=3, classifier_steps=20)
    serial = gt.run_cross_validation(values, labels, cfg, jobs=1)
    parallel = gt.run_cross_validation(values, labels, cfg, jobs=2)
    assert gt.report_to_json(serial) == gt.report_to_json(parallel)


def test_checkpoint_evaluation_matches_first_seed():
    values, labels = small_problem(n_per_class=8, n_features=8)
    cfg = small_cfg(eval_seeds=1, epochs=4, classifier_steps=30)
    full = gt.run_cross_validation(values, labels, cfg)
    mg = build_multigraph(values, cfg.threshold, seed=cfg.seed)
    params, _ = gt.train_unsupervised(mg, cfg)
    from_params = gt.evaluate_with_params(values, labels, params, cfg)
    assert gt.report_to_json(from_params) == gt.report_to_json(full)


def test_report_text_renders_every_row():
    values, labels = small_problem()
    cfg = small_cfg(epochs=2, classifier_steps=10)
    report = gt.run_cross_validation(values, labels, cfg)
    text = gt.report_to_text(report)
    assert text.count("\n") >= len(report.rows) + len(gt._METRIC_NAMES)
    assert "accuracy" in text


# ---------------------------------------------------------------------------
# checkpoints


def trained_fixture():
    values, labels = small_problem(n_per_class=6, n_features=8)
    cfg = small_cfg(epochs=3)
    mg = build_multigraph(values, cfg.threshold, seed=cfg.seed)
    params, trace = gt.train_unsupervised(mg, cfg)
    return values, labels, cfg, params, trace


def test_checkpoint_round_trip_bytes(tmp_path):
    _, _, cfg, params, trace = trained_fixture()
    path = str(tmp_path / "model.ckpt")
    gt.save_checkpoint(path, params, cfg, trace)
    ckpt = gt.load_checkpoint(path)
    assert ckpt.version == 1
    assert ckpt.config == cfg.as_dict()
    assert np.asarray(ckpt.trace).tobytes() == np.asarray(trace).tobytes()
    restored, restored_cfg = gt.params_from_checkpoint(ckpt)
    assert restored_cfg == cfg
    rebuilt = gt.checkpoint_bytes(restored, restored_cfg, ckpt.trace)
    with open(path, "rb") as fh:
        assert rebuilt == fh.read()


def test_checkpoint_restored_params_embed_identically():
    values, _, cfg, params, trace = trained_fixture()
    blob = gt.checkpoint_bytes(params, cfg, trace)
    import io
    import tempfile
    import os
    fd, path = tempfile.mkstemp()
    try:
        with os.fdopen(fd, "wb") as fh:
            fh.write(blob)
        restored, rcfg = gt.params_from_checkpoint(gt.load_checkpoint(path))
    finally:
        os.unlink(path)
    mg = build_multigraph(values, cfg.threshold, seed=cfg.seed)
    e1 = gt.embeddings_for(mg, params, cfg)
    e2 = gt.embeddings_for(mg, restored, rcfg)
    assert e1.tobytes() == e2.tobytes()


def test_checkpoint_bad_magic(tmp_path):
    path = tmp_path / "bad.ckpt"
    path.write_bytes(b"NOPE" + b"\x00" * 32)
    with pytest.raises(gt.CheckpointError, match="magic"):
        gt.load_checkpoint(str(path))


def test_checkpoint_bad_version(tmp_path):
    _, _, cfg, params, trace = trained_fixture()
    blob = bytearray(gt.checkpoint_bytes(params, cfg, trace))
    blob[4:8] = struct.pack("<I", 99)
    path = tmp_path / "v99.ckpt"
    path.write_bytes(bytes(blob))
    with pytest.raises(gt.CheckpointError, match="version 99"):
        gt.load_checkpoint(str(path))


def test_checkpoint_truncation(tmp_path):
    _, _, cfg, params, trace = trained_fixture()
    blob = gt.checkpoint_bytes(params, cfg, trace)
    path = tmp_path / "cut.ckpt"
    path.write_bytes(blob[: len(blob) // 2])
    with pytest.raises(gt.CheckpointError, match="truncated"):
        gt.load_checkpoint(str(path))


def test_checkpoint_trailing_bytes(tmp_path):
    _, _, cfg, params, trace = trained_fixture()
    blob = gt.checkpoint_bytes(params, cfg, trace)
    path = tmp_path / "extra.ckpt"
    path.write_bytes(blob + b"\x00")
    with pytest.raises(gt.CheckpointError, match="trailing"):
        gt.load_checkpoint(str(path))


def test_checkpoint_missing_tensor(tmp_path):
    _, _, cfg, params, trace = trained_fixture()
    blob = gt.checkpoint_bytes(params, cfg, trace)
    ckpt_path = tmp_path / "full.ckpt"
    ckpt_path.write_bytes(blob)
    ckpt = gt.load_checkpoint(str(ckpt_path))
    del ckpt.tensors["eta_raw"]
    with pytest.raises(gt.CheckpointError, match="eta_raw"):
        gt.params_from_checkpoint(ckpt)


def test_atomic_write_replaces_existing(tmp_path):
    target = tmp_path / "out.txt"
    target.write_text("old")
    gt.atomic_write_text(str(target), "new")
    assert target.read_text() == "new"
    leftovers = [p for p in tmp_path.iterdir() if p.name.startswith(".tmp-")]
    assert leftovers == []
