import json
import logging
import os
import random
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field, replace
from enum import Enum
from typing import Dict, List, Optional

import numpy as np
import torch
from torch.utils.data import DataLoader

from .augmentation import AugmentationPolicy, PreprocessSpec, RecordDataset
from .benchmark import exclusive_device
from .checkpoint import ModelCheckpoint
from .data_pipeline import (
    DatasetManifest,
    DatasetSplits,
    SplitSpec,
    balance_by_oversampling,
    stratified_split,
    verify_no_leakage,
)
from .enums import Partition, ScheduleMode
from .errors import DatasetError, NonFiniteLossError, ProtocolViolation
from .evaluation import confusion
from .model_zoo import ModelSpec, build_model, count_parameters
from .optimization import (
    Loss,
    LossConfig,
    OptimizerConfig,
    ScheduleSpec,
    build_optimizer,
    lr_at,
    make_criterion,
    set_learning_rate,
)
from .serialization import as_plain

logger = logging.getLogger(__name__)

DETERMINISM_ENV = "SOLAR_DEFECT_DETERMINISTIC"


@dataclass(frozen=True)
class TrainConfig:
    epochs: int = 15
    batch_size_train: int = 16
    batch_size_eval: int = 32
    seed: int = 0
    balance: bool = True
    oversample_target: Optional[int] = None
    num_workers: int = 0
    model: ModelSpec = field(default_factory=ModelSpec)
    loss: LossConfig = field(default_factory=LossConfig)
    optimizer: OptimizerConfig = field(default_factory=OptimizerConfig)
    schedule: ScheduleSpec = field(default_factory=ScheduleSpec)
    augmentation: AugmentationPolicy = field(default_factory=AugmentationPolicy)
    preprocess: PreprocessSpec = field(default_factory=PreprocessSpec)
    split: SplitSpec = field(default_factory=SplitSpec)

    def __post_init__(self):
        if self.epochs < 1:
            raise RuntimeError(f"epochs must be at least 1, got {self.epochs}")
        if self.batch_size_train < 1 or self.batch_size_eval < 1:
            raise RuntimeError("Batch sizes must be at least 1")
        if self.oversample_target is not None and self.oversample_target < 1:
            raise RuntimeError(f"oversample_target must be at least 1, got {self.oversample_target}")
        if self.num_workers < 0:
            raise RuntimeError(f"num_workers must be positive, got {self.num_workers}")
        if self.schedule.horizon_T is not None and self.schedule.horizon_T < self.epochs - 1:
            raise RuntimeError(
                f"The schedule horizon ({self.schedule.horizon_T}) ends before the last epoch ({self.epochs - 1})"
            )

    @property
    def resolved_schedule(self):
        return self.schedule.resolved(self.epochs)


def set_determinism(seed):
    random.seed(seed)
    np.random.seed(seed % 2 ** 32)
    torch.manual_seed(seed)
    torch.backends.cudnn.benchmark = False
    if os.environ.get(DETERMINISM_ENV) == "1":
        torch.use_deterministic_algorithms(True)


@dataclass
class Metrics:
    accuracy: float
    macro_f1: float
    per_class: Dict[str, Dict[str, float]]
    support: Dict[str, int]

    def to_dict(self):
        return as_plain(self)

    @staticmethod
    def from_dict(data):
        return Metrics(data["accuracy"], data["macro_f1"], data["per_class"], data["support"])


def compute_metrics(predictions, labels, classes):
    """
    Accuracy and unweighted mean of the per-class F1 over every class (0 for a class never predicted nor seen)
    """
    matrix = confusion(predictions, labels, len(classes), classes)
    precision, recall, f1 = matrix.per_class()
    per_class = {
        c: {"precision": float(precision[i]), "recall": float(recall[i]), "f1": float(f1[i])}
        for i, c in enumerate(classes)
    }
    support = {c: int(s) for c, s in zip(classes, matrix.support)}
    return Metrics(matrix.accuracy, float(np.mean(f1)), per_class, support)


@dataclass
class EpochRecord:
    epoch: int
    lr: float
    train_loss: float
    val_accuracy: Optional[float]
    val_macro_f1: Optional[float]


@dataclass
class TrainHistory:
    epochs: List[EpochRecord] = field(default_factory=list)
    best_epoch: int = -1
    best_val_macro_f1: Optional[float] = None

    def to_dict(self):
        return as_plain(self)

    def to_json(self):
        return json.dumps(self.to_dict(), indent=2, sort_keys=True)

    @staticmethod
    def from_dict(data):
        return TrainHistory(
            [EpochRecord(**e) for e in data["epochs"]], data["best_epoch"], data["best_val_macro_f1"]
        )


def training_records(config, splits):
    """
    The train partition, balanced when requested, and the derivatives it produced
    """
    if not config.balance or not splits.train:
        return list(splits.train), []
    counts = {}
    for record in splits.train:
        counts[record.class_label] = counts.get(record.class_label, 0) + 1
    target = config.oversample_target if config.oversample_target is not None else max(counts.values())
    balanced = balance_by_oversampling(splits.train, target, config.seed)
    return balanced, balanced[len(splits.train) :]


def predict(model, records, classes, preprocess_spec, batch_size=32):
    """
    Eval mode forward over raw records
    :return: predicted class indices, class probabilities (N x K), true class indices
    """
    dataset = RecordDataset(records, classes, preprocess_spec)
    loader = DataLoader(dataset, batch_size=batch_size, shuffle=False)
    was_training = model.training
    model.eval()
    probabilities = []
    with torch.no_grad():
        for images, _ in loader:
            probabilities.append(torch.softmax(model(images), dim=1).double().numpy())
    model.train(was_training)
    scores = np.concatenate(probabilities) if probabilities else np.zeros((0, len(classes)))
    return scores.argmax(axis=1), scores, np.asarray(dataset.labels(), dtype=int)


def train(config, splits):
    """
    Trains one model on splits.train and keeps the weights of the epoch with the best validation macro-F1.
    Refuses to start when the leakage audit of the splits (and of the oversampled duplicates) fails,
    or when the compute device is already held (e.g. by an FPS measurement).
    :return: (ModelCheckpoint, TrainHistory)
    """
    with exclusive_device("training"):
        return _fit(config, splits)


def _fit(config, splits):
    classes = list(splits.classes)
    if config.model.num_classes != len(classes):
        raise RuntimeError(
            f"model.num_classes ({config.model.num_classes}) does not match the {len(classes)} dataset classes"
        )
    if not splits.train:
        raise DatasetError("The train partition is empty")

    records, derivatives = training_records(config, splits)
    report = verify_no_leakage(splits, derivatives)
    if not report.passed:
        raise ProtocolViolation(
            f"Leakage audit failed, training refused. Violations: {list(report.violations)[:10]}",
            report=report,
            record_ids=report.violations,
        )

    set_determinism(config.seed)
    schedule = config.resolved_schedule
    model = build_model(config.model)
    optimizer = build_optimizer(model.parameters(), config.optimizer, schedule.lr_max)
    criterion = make_criterion(config.loss)
    dataset = RecordDataset(records, classes, config.preprocess, config.augmentation, config.seed)

    history = TrainHistory()
    best = None
    for epoch in range(config.epochs):
        lr = lr_at(epoch, schedule)
        set_learning_rate(optimizer, lr)
        dataset.set_epoch(epoch)
        order = np.random.default_rng([config.seed, epoch]).permutation(len(dataset)).tolist()
        loader = DataLoader(
            dataset, batch_size=config.batch_size_train, sampler=order, num_workers=config.num_workers
        )

        model.train()
        total_loss = 0.0
        for batch_idx, (images, targets) in enumerate(loader):
            loss = criterion(model(images), targets)
            if not torch.isfinite(loss):
                raise NonFiniteLossError(epoch, batch_idx, float(loss.item()))
            optimizer.zero_grad()
            loss.backward()
            optimizer.step()
            total_loss += float(loss.item()) * images.shape[0]
        train_loss = total_loss / len(dataset)

        val_accuracy, val_f1 = None, None
        if splits.val:
            preds, _, labels = predict(model, splits.val, classes, config.preprocess, config.batch_size_eval)
            metrics = compute_metrics(preds, labels, classes)
            val_accuracy, val_f1 = metrics.accuracy, metrics.macro_f1
        history.epochs.append(EpochRecord(epoch, lr, train_loss, val_accuracy, val_f1))
        logger.info(
            "epoch %d/%d lr=%.3g train_loss=%.4f val_acc=%s val_f1=%s",
            epoch + 1,
            config.epochs,
            lr,
            train_loss,
            "-" if val_accuracy is None else f"{val_accuracy:.4f}",
            "-" if val_f1 is None else f"{val_f1:.4f}",
        )

        # without a validation set the last epoch is kept
        score = val_f1 if val_f1 is not None else float(epoch)
        if best is None or score > best:
            best = score
            history.best_epoch = epoch
            history.best_val_macro_f1 = val_f1
            checkpoint = ModelCheckpoint.from_model(
                model,
                {
                    "seed": config.seed,
                    "epoch": epoch,
                    "classes": classes,
                    "val_accuracy": val_accuracy,
                    "val_macro_f1": val_f1,
                },
            )
    return checkpoint, history


def evaluate(checkpoint, records, preprocess_spec, batch_size=32, classes=None):
    """
    Held-out evaluation of a checkpoint. Derivative records are refused.
    :return: (Metrics, predictions, class probabilities)
    """
    derivatives = [r.provenance_id for r in records if r.is_derivative]
    if derivatives:
        raise ProtocolViolation(
            f"Evaluation sets must hold raw records only, got derivative(s) {derivatives[:10]}",
            record_ids=derivatives,
        )
    if classes is None:
        classes = checkpoint.metadata.get("classes")
        if classes is None:
            raise RuntimeError("The checkpoint does not record its classes, pass them explicitly")
    preds, scores, labels = predict(checkpoint.build(), records, list(classes), preprocess_spec, batch_size)
    return compute_metrics(preds, labels, list(classes)), preds, scores


@dataclass
class CVResult:
    per_fold: List[Metrics]
    mean_accuracy: float
    std_accuracy: float
    mean_f1: float
    std_f1: float

    @staticmethod
    def from_folds(per_fold):
        accuracy = np.array([m.accuracy for m in per_fold])
        f1 = np.array([m.macro_f1 for m in per_fold])
        return CVResult(
            list(per_fold), float(accuracy.mean()), float(accuracy.std()), float(f1.mean()), float(f1.std())
        )

    def to_dict(self):
        return as_plain(self)

    def to_json(self):
        return json.dumps(self.to_dict(), indent=2, sort_keys=True)


def stratified_folds(manifest, k, seed):
    """
    Deals every class into k folds after a seeded shuffle. Dealing continues where the previous class
    stopped, so fold totals differ by at most one as well.
    """
    if k < 2:
        raise RuntimeError(f"k must be at least 2, got {k}")
    for class_name in manifest.classes:
        if manifest.counts[class_name] < k:
            raise DatasetError(
                f"Class '{class_name}' has {manifest.counts[class_name]} sample(s), fewer than the {k} folds",
                class_name=class_name,
            )
    folds = [[] for _ in range(k)]
    offset = 0
    for class_idx, class_name in enumerate(manifest.classes):
        members = sorted(manifest.records_of(class_name), key=lambda r: r.provenance_id)
        order = np.random.default_rng([seed, class_idx]).permutation(len(members))
        for rank, idx in enumerate(order):
            folds[(offset + rank) % k].append(members[idx])
        offset += len(members)
    return folds


def fold_splits(manifest, folds, fold_idx, validation_ratio=0.15, seed=0):
    """
    Fold fold_idx becomes the test partition, the validation set is carved from the remaining folds
    """
    test = [replace(r, partition=Partition.TEST) for r in folds[fold_idx]]
    rest = [replace(r, partition=Partition.UNASSIGNED) for i, f in enumerate(folds) if i != fold_idx for r in f]
    inner = stratified_split(
        DatasetManifest(manifest.classes, rest), SplitSpec((1 - validation_ratio, 0.0, validation_ratio), seed)
    )
    val = [replace(r, partition=Partition.VAL) for r in inner.test]
    return DatasetSplits(manifest.classes, inner.train, val, test)


def _run_fold(config, splits):
    checkpoint, _ = train(config, splits)
    metrics, _, _ = evaluate(checkpoint, splits.test, config.preprocess, config.batch_size_eval, splits.classes)
    return metrics


def kfold_cv(manifest, k=5, config=None, jobs=1):
    config = config if config is not None else TrainConfig()
    folds = stratified_folds(manifest, k, config.seed)
    validation_ratio = config.split.ratios[1] if config.split.ratios[1] > 0 else 0.15
    all_splits = [fold_splits(manifest, folds, i, validation_ratio, config.seed) for i in range(k)]
    if jobs > 1:
        with ProcessPoolExecutor(max_workers=jobs) as pool:
            per_fold = list(pool.map(_run_fold, [config] * k, all_splits))
    else:
        per_fold = []
        for i, splits in enumerate(all_splits):
            logger.info(
                "Fold %d/%d: train=%d, val=%d, test=%d", i + 1, k, len(splits.train), len(splits.val), len(splits.test)
            )
            per_fold.append(_run_fold(config, splits))
    result = CVResult.from_folds(per_fold)
    logger.info(
        "%d-fold CV: accuracy %.4f +/- %.4f, macro-F1 %.4f +/- %.4f",
        k,
        result.mean_accuracy,
        result.std_accuracy,
        result.mean_f1,
        result.std_f1,
    )
    return result


ATTENTION_ROW_LABEL = "HybridSolarNet (CBAM)"


def _with_cbam(config, on):
    return replace(config, model=replace(config.model, use_cbam=on))


def _with_focal(config, on):
    return replace(config, loss=replace(config.loss, kind=Loss.FOCAL if on else Loss.CROSS_ENTROPY))


def _with_cosine(config, on):
    return replace(config, schedule=replace(config.schedule, mode=ScheduleMode.COSINE if on else ScheduleMode.FIXED))


class AblationFactor(Enum):
    """
    Single factors of the ablation grid: (config modifier, table title)
    CBAM: attention after the backbone or not.
    LOSS: focal loss or cross-entropy.
    SCHEDULE: cosine annealing or fixed learning rate.
    """

    CBAM = (_with_cbam, "CBAM Ablation")
    LOSS = (_with_focal, "Loss Ablation")
    SCHEDULE = (_with_cosine, "Scheduler Ablation")

    def variant(self, base, on):
        return self.value[0](base, on)

    def label(self, config):
        if self == AblationFactor.CBAM:
            return ATTENTION_ROW_LABEL if config.model.use_cbam else config.model.backbone.display_name
        elif self == AblationFactor.LOSS:
            return config.loss.label
        return config.schedule.label


def flatten_config(config):
    out = {}

    def walk(prefix, value):
        if isinstance(value, dict):
            for key, item in value.items():
                walk(f"{prefix}.{key}" if prefix else key, item)
        else:
            out[prefix] = value

    walk("", as_plain(config))
    return out


def config_diff(reference, other):
    a, b = flatten_config(reference), flatten_config(other)
    return {key: [a.get(key), b.get(key)] for key in sorted(set(a) | set(b)) if a.get(key) != b.get(key)}


@dataclass
class AblationRow:
    label: str
    accuracy: float
    macro_f1: float
    parameters: int
    size_mb: float
    config_diff: Dict[str, list]


@dataclass
class AblationTable:
    """
    One two-row table per factor, off row first
    """

    tables: Dict[str, List[AblationRow]]

    def to_dict(self):
        return as_plain(self.tables)

    def to_json(self):
        return json.dumps(self.to_dict(), indent=2, sort_keys=True)

    def to_markdown(self):
        lines = []
        for title, rows in self.tables.items():
            lines += [f"### {title}", "", "| Configuration | Acc. | F1 | Params | Size (MB) |", "|---|---|---|---|---|"]
            for row in rows:
                lines.append(
                    f"| {row.label} | {100 * row.accuracy:.2f}% | {row.macro_f1:.4f} | {row.parameters} | "
                    f"{row.size_mb:.3f} |"
                )
            lines.append("")
        return "\n".join(lines)


def _train_and_evaluate(config, splits):
    checkpoint, _ = train(config, splits)
    metrics, _, _ = evaluate(checkpoint, splits.test, config.preprocess, config.batch_size_eval, splits.classes)
    size_mb = len(checkpoint.to_bytes()) / 2 ** 20
    return metrics, count_parameters(checkpoint.build()), size_mb


def run_ablation(base, splits, factors=tuple(AblationFactor), jobs=1):
    """
    Trains every (factor, on/off) cell once; cells equal to another cell (the base one in general) are shared
    """
    cells = {}
    layout = []
    for factor in factors:
        pair = []
        for on in (False, True):
            config = factor.variant(base, on)
            key = json.dumps(as_plain(config), sort_keys=True)
            cells.setdefault(key, config)
            pair.append((key, config))
        layout.append((factor, pair))

    keys = list(cells)
    if jobs > 1:
        with ProcessPoolExecutor(max_workers=jobs) as pool:
            outcomes = list(pool.map(_train_and_evaluate, [cells[k] for k in keys], [splits] * len(keys)))
    else:
        outcomes = []
        for i, key in enumerate(keys):
            logger.info("Ablation cell %d/%d", i + 1, len(keys))
            outcomes.append(_train_and_evaluate(cells[key], splits))
    results = dict(zip(keys, outcomes))

    tables = {}
    for factor, pair in layout:
        rows = []
        for key, config in pair:
            metrics, parameters, size_mb = results[key]
            rows.append(
                AblationRow(
                    factor.label(config),
                    metrics.accuracy,
                    metrics.macro_f1,
                    parameters,
                    size_mb,
                    config_diff(base, config),
                )
            )
        tables[factor.value[1]] = rows
    return AblationTable(tables)
