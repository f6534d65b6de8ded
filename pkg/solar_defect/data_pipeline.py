import json
import logging
from dataclasses import dataclass, field, replace
from fractions import Fraction
from pathlib import Path
from typing import Dict, Optional, Sequence, Tuple

import numpy as np
from PIL import Image, UnidentifiedImageError

from .enums import Partition
from .errors import DatasetError, ProtocolViolation

logger = logging.getLogger(__name__)

IMAGE_EXTENSIONS = (".png", ".jpg", ".jpeg")
MANIFEST_FIELDS = ("provenance_id", "origin_id", "class_label", "image_ref", "partition")


@dataclass(frozen=True)
class SampleRecord:
    """
    One image of the corpus.
    provenance_id is unique over a run, origin_id points to the raw image a derivative comes from
    (a raw image is its own origin). image_ref is either a path or an in-memory H x W x 3 array.
    """

    provenance_id: str
    origin_id: str
    class_label: str
    image_ref: object = field(compare=False, hash=False)
    partition: Partition = Partition.UNASSIGNED

    @property
    def is_derivative(self):
        return self.provenance_id != self.origin_id

    def to_dict(self):
        if not isinstance(self.image_ref, (str, Path)):
            raise RuntimeError(
                f"Record {self.provenance_id} holds an in-memory image, only path based records can be serialized"
            )
        values = {
            "provenance_id": self.provenance_id,
            "origin_id": self.origin_id,
            "class_label": self.class_label,
            "image_ref": str(self.image_ref),
            "partition": self.partition.value,
        }
        return {key: values[key] for key in MANIFEST_FIELDS}

    @staticmethod
    def from_dict(data):
        missing = [key for key in MANIFEST_FIELDS if key not in data]
        if missing:
            raise RuntimeError(f"Manifest line is missing the field(s) {missing}")
        return SampleRecord(
            provenance_id=data["provenance_id"],
            origin_id=data["origin_id"],
            class_label=data["class_label"],
            image_ref=data["image_ref"],
            partition=Partition(data["partition"]),
        )


@dataclass(frozen=True)
class DatasetManifest:
    classes: Tuple[str, ...]
    records: Tuple[SampleRecord, ...]
    counts: Dict[str, int] = field(init=False, compare=False)

    def __post_init__(self):
        object.__setattr__(self, "classes", tuple(self.classes))
        object.__setattr__(self, "records", tuple(self.records))
        if len(self.classes) < 2:
            raise DatasetError(f"A manifest needs at least two classes, got {len(self.classes)}")
        if len(set(self.classes)) != len(self.classes):
            raise DatasetError("Class names of a manifest must be unique")
        counts = {c: 0 for c in self.classes}
        for record in self.records:
            if record.class_label not in counts:
                raise DatasetError(
                    f"Record {record.provenance_id} has class '{record.class_label}' which is not in {self.classes}",
                    class_name=record.class_label,
                )
            counts[record.class_label] += 1
        ids = [r.provenance_id for r in self.records]
        if len(set(ids)) != len(ids):
            raise DatasetError("provenance_id must be unique across the manifest")
        object.__setattr__(self, "counts", counts)

    @property
    def total(self):
        return len(self.records)

    def records_of(self, class_name):
        return [r for r in self.records if r.class_label == class_name]


@dataclass(frozen=True)
class SplitSpec:
    ratios: Tuple[float, float, float] = (0.70, 0.15, 0.15)
    seed: int = 0

    def __post_init__(self):
        object.__setattr__(self, "ratios", tuple(float(r) for r in self.ratios))
        if len(self.ratios) != 3:
            raise RuntimeError("ratios must hold exactly three fractions (train, val, test)")
        for r in self.ratios:
            if r < 0 or r > 1:
                raise RuntimeError(f"Each split ratio must be in [0, 1], got {r}")
        if sum(_exact(r) for r in self.ratios) != 1:
            raise RuntimeError(f"Split ratios must sum to 1, got {self.ratios} (sum={sum(self.ratios)})")

    def partition_sizes(self, n):
        """
        Floor for train, floor for val, remainder for test.
        """
        n_train = int(_exact(self.ratios[0]) * n)
        n_val = int(_exact(self.ratios[1]) * n)
        return n_train, n_val, n - n_train - n_val


@dataclass(frozen=True)
class DatasetSplits:
    classes: Tuple[str, ...]
    train: Tuple[SampleRecord, ...]
    val: Tuple[SampleRecord, ...]
    test: Tuple[SampleRecord, ...]

    def __post_init__(self):
        for name in ("classes", "train", "val", "test"):
            object.__setattr__(self, name, tuple(getattr(self, name)))

    def partition(self, partition):
        if partition == Partition.TRAIN:
            return self.train
        elif partition == Partition.VAL:
            return self.val
        elif partition == Partition.TEST:
            return self.test
        raise RuntimeError(f"{partition} is not a split partition")

    def all_records(self):
        return self.train + self.val + self.test

    def counts(self):
        out = {}
        for partition in (Partition.TRAIN, Partition.VAL, Partition.TEST):
            tally = {c: 0 for c in self.classes}
            for record in self.partition(partition):
                tally[record.class_label] += 1
            out[partition.value] = tally
        return out

    def write(self, directory):
        directory = Path(directory)
        directory.mkdir(parents=True, exist_ok=True)
        paths = {}
        for partition in (Partition.TRAIN, Partition.VAL, Partition.TEST):
            path = directory / f"manifest_{partition.value}.jsonl"
            write_manifest(self.partition(partition), path)
            paths[partition.value] = path
        with open(directory / "classes.json", "w") as file:
            json.dump(list(self.classes), file)
        return paths

    @staticmethod
    def read(directory):
        directory = Path(directory)
        classes_path = directory / "classes.json"
        if not classes_path.is_file():
            raise DatasetError(f"No prepared splits in {directory} (classes.json is missing)")
        with open(classes_path, "r") as file:
            classes = json.load(file)
        parts = {
            p: read_manifest(directory / f"manifest_{p.value}.jsonl")
            for p in (Partition.TRAIN, Partition.VAL, Partition.TEST)
        }
        return DatasetSplits(classes, parts[Partition.TRAIN], parts[Partition.VAL], parts[Partition.TEST])


@dataclass(frozen=True)
class LeakageReport:
    passed: bool
    intersection_size: int
    violations: Tuple[str, ...]
    reasons: Dict[str, str]

    def to_dict(self):
        return {
            "pass": self.passed,
            "intersection_size": self.intersection_size,
            "violations": list(self.violations),
            "reasons": dict(self.reasons),
        }

    def to_json(self):
        return json.dumps(self.to_dict(), indent=2, sort_keys=True)


def _exact(ratio):
    return Fraction(ratio).limit_denominator(10 ** 6)


def load_manifest(root_dir, expected_classes: Optional[Sequence[str]] = None):
    """
    Reads a directory of class folders, one SampleRecord per image file.
    :param root_dir: Folder holding one sub-folder per class
    :param expected_classes: Optional class list, its order becomes the manifest class order
    """
    root = Path(root_dir)
    if not root.is_dir():
        raise DatasetError(f"Dataset root '{root}' does not exist or is not a directory")

    class_dirs = {d.name: d for d in sorted(root.iterdir()) if d.is_dir() and not d.name.startswith(".")}
    if not class_dirs:
        raise DatasetError(f"no class directories found in '{root}'")

    if expected_classes is not None:
        classes = list(expected_classes)
        for class_name in classes:
            if class_name not in class_dirs:
                raise DatasetError(f"Class directory '{class_name}' is missing in '{root}'", class_name=class_name)
        for class_name in class_dirs:
            if class_name not in classes:
                raise DatasetError(f"Unexpected class directory '{class_name}' in '{root}'", class_name=class_name)
    else:
        classes = sorted(class_dirs)

    records = []
    unreadable = []
    for class_name in classes:
        files = sorted(p for p in class_dirs[class_name].iterdir() if p.suffix.lower() in IMAGE_EXTENSIONS)
        if not files:
            raise DatasetError(f"Class directory '{class_name}' holds no images", class_name=class_name)
        for path in files:
            try:
                with Image.open(path) as image:
                    image.verify()
            except (UnidentifiedImageError, OSError):
                unreadable.append(str(path))
                continue
            provenance_id = f"{class_name}/{path.name}"
            records.append(SampleRecord(provenance_id, provenance_id, class_name, str(path)))

    if unreadable:
        raise DatasetError(f"{len(unreadable)} unreadable image(s): {', '.join(unreadable)}", files=unreadable)

    manifest = DatasetManifest(classes, records)
    logger.info("Loaded %d images in %d classes from %s: %s", manifest.total, len(classes), root, manifest.counts)
    return manifest


def stratified_split(manifest, spec):
    """
    Splits every class on its own with a seeded shuffle, before any augmentation takes place.
    """
    needed = sum(1 for r in spec.ratios if r > 0)
    for class_name in manifest.classes:
        if manifest.counts[class_name] < needed:
            raise DatasetError(
                f"Class '{class_name}' has {manifest.counts[class_name]} sample(s), at least {needed} are needed "
                f"to split with ratios {spec.ratios}",
                class_name=class_name,
            )

    train, val, test = [], [], []
    for class_idx, class_name in enumerate(manifest.classes):
        members = sorted(manifest.records_of(class_name), key=lambda r: r.provenance_id)
        n_train, n_val, _ = spec.partition_sizes(len(members))
        order = np.random.default_rng([spec.seed, class_idx]).permutation(len(members))
        for rank, idx in enumerate(order):
            if rank < n_train:
                train.append(replace(members[idx], partition=Partition.TRAIN))
            elif rank < n_train + n_val:
                val.append(replace(members[idx], partition=Partition.VAL))
            else:
                test.append(replace(members[idx], partition=Partition.TEST))

    splits = DatasetSplits(manifest.classes, train, val, test)
    logger.info("Split %d records into train=%d, val=%d, test=%d", manifest.total, len(train), len(val), len(test))
    return splits


def balance_by_oversampling(train_records, target_per_class, seed):
    """
    Tops every class of the train partition up to target_per_class with duplicates drawn uniformly with
    replacement. Duplicates get a fresh provenance_id and keep the origin_id of their source.
    """
    offenders = [r.provenance_id for r in train_records if r.partition != Partition.TRAIN]
    if offenders:
        raise ProtocolViolation(
            f"Oversampling is restricted to the train partition, offending record(s): {offenders[:10]}",
            record_ids=offenders,
        )

    by_class = {}
    for record in train_records:
        by_class.setdefault(record.class_label, []).append(record)
    if not by_class:
        return list(train_records)

    largest = max(len(v) for v in by_class.values())
    if target_per_class < largest:
        raise RuntimeError(
            f"target_per_class ({target_per_class}) is below the largest class count ({largest}), "
            f"downsampling is refused"
        )

    balanced = list(train_records)
    for class_idx, class_name in enumerate(sorted(by_class)):
        members = by_class[class_name]
        missing = target_per_class - len(members)
        if missing == 0:
            continue
        picks = np.random.default_rng([seed, class_idx]).integers(0, len(members), size=missing)
        for k, idx in enumerate(picks):
            source = members[idx]
            balanced.append(replace(source, provenance_id=f"{source.provenance_id}#dup{k}", origin_id=source.origin_id))
    return balanced


def verify_no_leakage(splits, train_derivatives=()):
    """
    Audits the provenance bookkeeping. A failing audit is reported, never raised.
    :param splits: The finalized DatasetSplits
    :param train_derivatives: Records generated from the train partition (duplicates, augmented copies)
    """
    eval_records = splits.val + splits.test
    eval_ids = {r.provenance_id for r in eval_records}
    reasons = {}

    derivative_origins = {d.origin_id for d in train_derivatives}
    derivative_origins.update(r.origin_id for r in splits.train if r.is_derivative)
    intersection = derivative_origins & eval_ids
    for provenance_id in intersection:
        reasons[provenance_id] = "evaluation record has a derivative in training"

    for record in eval_records:
        if record.is_derivative:
            reasons[record.provenance_id] = "derivative in evaluation split"

    seen = {}
    for partition in (Partition.TRAIN, Partition.VAL, Partition.TEST):
        for record in splits.partition(partition):
            if record.provenance_id in seen and seen[record.provenance_id] != partition:
                reasons[record.provenance_id] = "record in multiple partitions"
            seen.setdefault(record.provenance_id, partition)

    violations = tuple(sorted(reasons))
    report = LeakageReport(len(violations) == 0, len(intersection), violations, reasons)
    if report.passed:
        logger.info("Leakage audit passed (%d derivatives checked)", len(train_derivatives))
    else:
        logger.warning("Leakage audit failed with %d violation(s)", len(violations))
    return report


def write_manifest(records, path):
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", encoding="utf-8", newline="\n") as file:
        for record in records:
            file.write(json.dumps(record.to_dict()) + "\n")


def read_manifest(path):
    path = Path(path)
    if not path.is_file():
        raise DatasetError(f"Manifest file '{path}' does not exist")
    records = []
    with open(path, "r", encoding="utf-8") as file:
        for line in file:
            if line.strip():
                records.append(SampleRecord.from_dict(json.loads(line)))
    return records
