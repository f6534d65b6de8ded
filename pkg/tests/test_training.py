"""
Test for the training loop, the held-out metrics, the cross-validation and the ablation runner
"""
from dataclasses import replace

import numpy as np
import pytest
import torch
from sklearn.metrics import f1_score

from solar_defect import (
    AblationFactor,
    Backbone,
    BackboneSpec,
    CVResult,
    DatasetSplits,
    Loss,
    LossConfig,
    ModelCheckpoint,
    ModelSpec,
    NonFiniteLossError,
    Partition,
    PreprocessSpec,
    ProtocolViolation,
    ScheduleMode,
    ScheduleSpec,
    SplitSpec,
    TrainConfig,
    build_model,
    compute_metrics,
    config_diff,
    evaluate,
    exclusive_device,
    fold_splits,
    kfold_cv,
    lr_at,
    measure_fps,
    run_ablation,
    stratified_folds,
    stratified_split,
    train,
    training_records,
)
from solar_defect import training as training_module
from solar_defect.training import Metrics

from .utils import TABLE_I_COUNTS, TestUtils


def _config(**kwargs):
    values = dict(
        epochs=2,
        batch_size_train=8,
        batch_size_eval=16,
        model=ModelSpec(num_classes=2),
        preprocess=PreprocessSpec(target_size=16),
        schedule=ScheduleSpec(lr_max=1e-3),
    )
    values.update(kwargs)
    return TrainConfig(**values)


def _splits(counts=None, seed=0):
    manifest = TestUtils.manifest(counts or {"a": 12, "b": 8})
    return stratified_split(manifest, SplitSpec(seed=seed))


def test_config_validation():
    with pytest.raises(RuntimeError):
        _config(epochs=0)
    with pytest.raises(RuntimeError):
        _config(batch_size_train=0)
    with pytest.raises(RuntimeError, match="horizon"):
        _config(epochs=10, schedule=ScheduleSpec(horizon_T=5))
    assert _config(epochs=4).resolved_schedule.horizon_T == 4


def test_training_records_balanced():
    splits = _splits()
    records, derivatives = training_records(_config(), splits)
    assert len(splits.train) == 13
    assert len(records) == 16
    assert len(derivatives) == 3
    assert all(d.is_derivative and d.origin_id in {r.provenance_id for r in splits.train} for d in derivatives)

    records, derivatives = training_records(_config(balance=False), splits)
    assert len(records) == 13 and derivatives == []


def test_train_history_and_checkpoint():
    config = _config(epochs=3)
    splits = _splits()
    checkpoint, history = train(config, splits)

    assert [e.epoch for e in history.epochs] == [0, 1, 2]
    for record in history.epochs:
        assert record.lr == lr_at(record.epoch, config.resolved_schedule)
        assert np.isfinite(record.train_loss)
        assert 0 <= record.val_accuracy <= 1
    best = max(history.epochs, key=lambda e: (e.val_macro_f1, -e.epoch))
    assert history.best_epoch == best.epoch
    assert history.best_val_macro_f1 == best.val_macro_f1
    assert checkpoint.metadata["epoch"] == history.best_epoch
    assert checkpoint.metadata["classes"] == ["a", "b"]
    assert checkpoint.metadata["seed"] == 0
    assert '"seconds"' not in history.to_json()


def test_train_deterministic():
    config = _config(epochs=2)
    splits = _splits()
    first_checkpoint, first = train(config, splits)
    second_checkpoint, second = train(config, splits)

    assert [e.train_loss for e in first.epochs] == [e.train_loss for e in second.epochs]
    assert first.to_json() == second.to_json()
    TestUtils.deep_assert(first_checkpoint.state, second_checkpoint.state)


def test_train_without_validation_keeps_last_epoch():
    splits = _splits()
    no_val = DatasetSplits(splits.classes, splits.train, (), splits.test)
    checkpoint, history = train(_config(epochs=2), no_val)
    assert history.best_epoch == 1
    assert history.best_val_macro_f1 is None
    assert checkpoint.metadata["epoch"] == 1


def test_train_refuses_leaky_splits():
    splits = _splits()
    leaked = replace(splits.test[0], provenance_id=splits.test[0].provenance_id + "@copy", partition=Partition.TRAIN)
    leaky = DatasetSplits(splits.classes, splits.train + (leaked,), splits.val, splits.test)
    with pytest.raises(ProtocolViolation) as error:
        train(_config(), leaky)
    assert error.value.report is not None
    assert not error.value.report.passed
    assert splits.test[0].provenance_id in error.value.record_ids


def test_train_class_count_mismatch():
    with pytest.raises(RuntimeError, match="num_classes"):
        train(_config(model=ModelSpec(num_classes=3)), _splits())


def test_train_non_finite_loss(monkeypatch):
    monkeypatch.setattr(training_module, "make_criterion", lambda config: lambda logits, t: logits.sum() * np.nan)
    with pytest.raises(NonFiniteLossError) as error:
        train(_config(), _splits())
    assert (error.value.epoch, error.value.batch) == (0, 0)


def test_evaluate_refuses_derivatives():
    splits = _splits()
    checkpoint, _ = train(_config(epochs=1), splits)
    derivative = replace(splits.test[0], provenance_id=splits.test[0].provenance_id + "#dup0")
    with pytest.raises(ProtocolViolation):
        evaluate(checkpoint, list(splits.test) + [derivative], PreprocessSpec(target_size=16))

    metrics, preds, scores = evaluate(checkpoint, splits.test, PreprocessSpec(target_size=16))
    assert preds.shape == (len(splits.test),)
    assert scores.shape == (len(splits.test), 2)
    np.testing.assert_almost_equal(scores.sum(axis=1), np.ones(len(splits.test)))
    assert sum(metrics.support.values()) == len(splits.test)


def test_evaluate_without_classes():
    checkpoint = ModelCheckpoint.from_model(build_model(ModelSpec(num_classes=2)))
    assert "classes" not in checkpoint.metadata
    with pytest.raises(RuntimeError, match="classes"):
        evaluate(checkpoint, [], PreprocessSpec(target_size=16))


def test_metrics_hand_example():
    metrics = compute_metrics([0, 1, 1, 1], [0, 0, 1, 1], ["A", "B"])
    np.testing.assert_almost_equal(metrics.per_class["A"]["f1"], 2 / 3)
    np.testing.assert_almost_equal(metrics.accuracy, 0.75)

    perfect = compute_metrics([0, 1, 2], [0, 1, 2], ["a", "b", "c"])
    assert perfect.accuracy == 1.0 and perfect.macro_f1 == 1.0


@pytest.mark.parametrize("seed", range(5))
def test_metrics_match_independent_recomputation(seed):
    rng = np.random.default_rng(seed)
    labels = rng.integers(0, 4, 60)
    preds = np.where(rng.random(60) < 0.6, labels, rng.integers(0, 4, 60))
    metrics = compute_metrics(preds, labels, ["a", "b", "c", "d"])
    np.testing.assert_almost_equal(metrics.accuracy, np.mean(preds == labels))
    expected = f1_score(labels, preds, labels=[0, 1, 2, 3], average="macro", zero_division=0)
    np.testing.assert_almost_equal(metrics.macro_f1, expected)


def test_folds_table_counts():
    manifest = TestUtils.manifest(TABLE_I_COUNTS)
    folds = stratified_folds(manifest, 5, seed=0)
    assert [len(f) for f in folds] == [175] * 5

    ids = [r.provenance_id for f in folds for r in f]
    assert len(ids) == len(set(ids)) == 875
    for class_name in manifest.classes:
        per_fold = [sum(r.class_label == class_name for r in f) for f in folds]
        assert max(per_fold) - min(per_fold) <= 1
    assert [sum(r.class_label == "Physical-damage" for r in f) for f in folds] == [14] * 5


def test_folds_class_too_small():
    with pytest.raises(Exception) as error:
        stratified_folds(TestUtils.manifest({"a": 10, "b": 3}), 5, seed=0)
    assert error.value.class_name == "b"


def test_fold_splits_partition():
    manifest = TestUtils.manifest({"a": 20, "b": 15})
    folds = stratified_folds(manifest, 5, seed=1)
    for i in range(5):
        splits = fold_splits(manifest, folds, i, validation_ratio=0.15, seed=1)
        assert {r.provenance_id for r in splits.test} == {r.provenance_id for r in folds[i]}
        ids = [r.provenance_id for r in splits.all_records()]
        assert len(ids) == len(set(ids)) == 35
        assert len(splits.val) > 0
        assert all(r.partition == Partition.VAL for r in splits.val)


def test_cv_result_statistics():
    accuracies = [0.9, 0.8, 0.85, 0.95, 0.7]
    f1s = [0.88, 0.79, 0.84, 0.93, 0.71]
    folds = [Metrics(a, f, {}, {}) for a, f in zip(accuracies, f1s)]
    result = CVResult.from_folds(folds)
    assert abs(result.mean_accuracy - np.mean(accuracies)) <= 1e-12
    assert abs(result.std_accuracy - np.std(accuracies)) <= 1e-12
    assert abs(result.mean_f1 - np.mean(f1s)) <= 1e-12
    assert abs(result.std_f1 - np.std(f1s, ddof=0)) <= 1e-12


def test_kfold_cv_reproducible():
    manifest = TestUtils.manifest({"a": 8, "b": 8})
    config = _config(epochs=1)
    first = kfold_cv(manifest, k=2, config=config)
    second = kfold_cv(manifest, k=2, config=config)
    assert len(first.per_fold) == 2
    assert first.to_json() == second.to_json()
    for metrics in first.per_fold:
        assert sum(metrics.support.values()) == 8


def test_ablation_grid(monkeypatch):
    calls = []

    def fake(config, splits):
        calls.append(config)
        accuracy = 0.5 + 0.1 * config.model.use_cbam + 0.05 * (config.loss.kind == Loss.FOCAL)
        return Metrics(accuracy, accuracy - 0.01, {}, {}), 100 + 10 * config.model.use_cbam, 0.5

    monkeypatch.setattr(training_module, "_train_and_evaluate", fake)
    base = _config()
    table = run_ablation(base, _splits())

    assert len(calls) == 4
    assert list(table.tables) == ["CBAM Ablation", "Loss Ablation", "Scheduler Ablation"]
    assert [r.label for r in table.tables["CBAM Ablation"]] == ["TinyBackbone", "HybridSolarNet (CBAM)"]
    assert [r.label for r in table.tables["Loss Ablation"]] == ["Cross-Entropy", "Focal (γ=2, α=1)"]
    assert [r.label for r in table.tables["Scheduler Ablation"]] == ["Fixed LR", "Cosine Annealing"]
    for rows in table.tables.values():
        assert len(rows) == 2
        assert rows[1].config_diff == {}
        assert len(rows[0].config_diff) == 1
    assert table.tables["CBAM Ablation"][0].config_diff == {"model.use_cbam": [True, False]}
    assert "### Loss Ablation" in table.to_markdown()


def test_ablation_cbam_adds_parameters():
    base = _config(epochs=1)
    table = run_ablation(base, _splits(), factors=(AblationFactor.CBAM,))
    off, on = table.tables["CBAM Ablation"]
    assert on.parameters > off.parameters
    assert on.size_mb > off.size_mb


def test_ablation_variants_differ_in_one_factor():
    base = _config()
    assert config_diff(base, AblationFactor.LOSS.variant(base, False)) == {"loss.kind": ["FOCAL", "CROSS_ENTROPY"]}
    fixed = AblationFactor.SCHEDULE.variant(base, False)
    assert fixed.schedule.mode == ScheduleMode.FIXED
    assert config_diff(base, fixed) == {"schedule.mode": ["cosine", "fixed"]}
    assert AblationFactor.LOSS.variant(base, True).loss == LossConfig()


def test_ablation_row_labels_follow_the_backbone():
    base = _config()
    reference = replace(base, model=replace(base.model, backbone=BackboneSpec(Backbone.EFFICIENTNET_B0)))
    assert AblationFactor.CBAM.label(AblationFactor.CBAM.variant(reference, False)) == "EfficientNet-B0"
    assert AblationFactor.CBAM.label(reference) == "HybridSolarNet (CBAM)"
    assert [factor.value[1] for factor in AblationFactor] == ["CBAM Ablation", "Loss Ablation", "Scheduler Ablation"]


def test_fps_measurement_refused_during_training(monkeypatch):
    def measuring_criterion(config):
        def criterion(logits, targets):
            measure_fps(torch.nn.Conv2d(3, 1, 1), batch_size=1, warmup_iters=0, timed_iters=1, image_size=8)
            return logits.sum()

        return criterion

    monkeypatch.setattr(training_module, "make_criterion", measuring_criterion)
    with pytest.raises(RuntimeError, match="busy with training"):
        train(_config(epochs=1), _splits())

    measure_fps(torch.nn.Conv2d(3, 1, 1), batch_size=1, warmup_iters=0, timed_iters=1, image_size=8)


def test_training_refused_while_device_held():
    with exclusive_device("fps measurement"):
        with pytest.raises(RuntimeError, match="busy with fps measurement"):
            train(_config(epochs=1), _splits())
