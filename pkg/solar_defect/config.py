"""
Run configuration: one YAML file with one mapping per section, plus "section.key=value" overrides.
"""
import copy
from dataclasses import dataclass, field, fields, replace
from pathlib import Path
from typing import Optional, Tuple

import yaml

from .augmentation import AugmentationPolicy, PreprocessSpec
from .data_pipeline import SplitSpec
from .errors import ConfigurationError
from .model_zoo import ModelSpec
from .optimization import LossConfig, OptimizerConfig, ScheduleSpec
from .serialization import as_plain, from_plain
from .synthetic import SynthSpec
from .training import TrainConfig


@dataclass(frozen=True)
class PathsSection:
    data_root: str = "data/images"
    output_dir: str = "runs/default"


@dataclass(frozen=True)
class TrainingSection:
    epochs: int = 15
    batch_size_train: int = 16
    batch_size_eval: int = 32
    seed: int = 0
    balance: bool = True
    oversample_target: Optional[int] = None
    num_workers: int = 0


@dataclass(frozen=True)
class CVSection:
    k: int = 5
    jobs: int = 1

    def __post_init__(self):
        if self.k < 2:
            raise RuntimeError(f"k must be at least 2, got {self.k}")
        if self.jobs < 1:
            raise RuntimeError(f"jobs must be at least 1, got {self.jobs}")


@dataclass(frozen=True)
class AblationSection:
    factors: Tuple[str, ...] = ("cbam", "loss", "schedule")
    jobs: int = 1

    def __post_init__(self):
        for factor in self.factors:
            if factor not in ("cbam", "loss", "schedule"):
                raise RuntimeError(f"Unknown ablation factor '{factor}', use cbam, loss or schedule")
        if self.jobs < 1:
            raise RuntimeError(f"jobs must be at least 1, got {self.jobs}")


@dataclass(frozen=True)
class BenchmarkSection:
    batch_size: int = 32
    warmup_iters: int = 10
    timed_iters: int = 50
    device: str = "cpu"
    hardware_label: Optional[str] = None
    baselines: Tuple[str, ...] = ("custom_cnn",)


@dataclass(frozen=True)
class GradCAMSection:
    layer: str = "cbam"
    per_class: int = 4
    target: str = "predicted"

    def __post_init__(self):
        if self.target not in ("predicted", "true"):
            raise RuntimeError(f"target must be 'predicted' or 'true', got '{self.target}'")
        if self.per_class < 1:
            raise RuntimeError(f"per_class must be at least 1, got {self.per_class}")


@dataclass(frozen=True)
class ReportSection:
    baseline: Optional[str] = None
    include_published: bool = True


@dataclass(frozen=True)
class RunConfig:
    paths: PathsSection = field(default_factory=PathsSection)
    split: SplitSpec = field(default_factory=SplitSpec)
    preprocess: PreprocessSpec = field(default_factory=PreprocessSpec)
    augmentation: AugmentationPolicy = field(default_factory=AugmentationPolicy)
    model: ModelSpec = field(default_factory=ModelSpec)
    loss: LossConfig = field(default_factory=LossConfig)
    optimizer: OptimizerConfig = field(default_factory=OptimizerConfig)
    schedule: ScheduleSpec = field(default_factory=ScheduleSpec)
    training: TrainingSection = field(default_factory=TrainingSection)
    cv: CVSection = field(default_factory=CVSection)
    ablation: AblationSection = field(default_factory=AblationSection)
    benchmark: BenchmarkSection = field(default_factory=BenchmarkSection)
    gradcam: GradCAMSection = field(default_factory=GradCAMSection)
    synth: SynthSpec = field(default_factory=SynthSpec)
    report: ReportSection = field(default_factory=ReportSection)

    def train_config(self, num_classes=None):
        model = self.model if num_classes is None else replace(self.model, num_classes=num_classes)
        training = {f.name: getattr(self.training, f.name) for f in fields(self.training)}
        return TrainConfig(
            model=model,
            loss=self.loss,
            optimizer=self.optimizer,
            schedule=self.schedule,
            augmentation=self.augmentation,
            preprocess=self.preprocess,
            split=self.split,
            **training,
        )

    def to_dict(self):
        return as_plain(self)

    @staticmethod
    def from_dict(data):
        if data is None:
            data = {}
        if not isinstance(data, dict):
            raise ConfigurationError("A run configuration must be a mapping of sections")
        return from_plain(RunConfig, data)

    def to_yaml(self):
        return yaml.safe_dump(self.to_dict(), sort_keys=False, default_flow_style=False)

    @staticmethod
    def from_yaml(text):
        try:
            data = yaml.safe_load(text)
        except yaml.YAMLError as e:
            raise ConfigurationError(f"Configuration is not valid YAML: {e}")
        return RunConfig.from_dict(data)

    @staticmethod
    def load(path):
        path = Path(path)
        if not path.is_file():
            raise ConfigurationError(f"Configuration file '{path}' does not exist")
        return RunConfig.from_yaml(path.read_text())

    def save(self, path):
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        path.write_text(self.to_yaml())
        return path

    def with_overrides(self, assignments):
        """
        :param assignments: "section.key=value" strings, nested keys allowed, values parsed as YAML scalars
        """
        data = copy.deepcopy(self.to_dict())
        for assignment in assignments:
            if "=" not in assignment:
                raise ConfigurationError(f"Override '{assignment}' must have the form section.key=value")
            dotted, raw = assignment.split("=", 1)
            keys = dotted.strip().split(".")
            if len(keys) < 2:
                raise ConfigurationError(f"Override '{dotted}' must name a section and a key", key=dotted)
            target = data
            for key in keys[:-1]:
                if not isinstance(target, dict) or key not in target:
                    raise ConfigurationError(f"Unknown configuration key '{dotted}'", key=dotted)
                target = target[key]
            if not isinstance(target, dict) or keys[-1] not in target:
                raise ConfigurationError(f"Unknown configuration key '{dotted}'", key=dotted)
            target[keys[-1]] = yaml.safe_load(raw) if raw.strip() else None
        return RunConfig.from_dict(data)
