import logging
import math
from dataclasses import dataclass, replace
from pathlib import Path
from typing import Tuple

import numpy as np
import torch
import torch.nn.functional as F
from PIL import Image
from torch.utils.data import Dataset
from torchvision.transforms import InterpolationMode
from torchvision.transforms import functional as TF

from .enums import Partition
from .errors import ProtocolViolation

logger = logging.getLogger(__name__)


@dataclass(frozen=True)
class AugmentationPolicy:
    hflip_prob: float = 0.5
    vflip_prob: float = 0.5
    rotation_limit_deg: float = 20.0
    brightness_jitter: float = 0.2
    contrast_jitter: float = 0.2
    enabled: bool = True

    def __post_init__(self):
        for name in ("hflip_prob", "vflip_prob"):
            value = getattr(self, name)
            if value < 0 or value > 1:
                raise RuntimeError(f"{name} must be a probability in [0, 1], got {value}")
        if self.rotation_limit_deg < 0:
            raise RuntimeError(f"rotation_limit_deg must be positive, got {self.rotation_limit_deg}")
        for name in ("brightness_jitter", "contrast_jitter"):
            value = getattr(self, name)
            if value < 0 or value >= 1:
                raise RuntimeError(f"{name} must be a fraction in [0, 1), got {value}")


@dataclass(frozen=True)
class AugmentationParams:
    """
    The geometry and color factors of one augmentation draw
    """

    hflip: bool = False
    vflip: bool = False
    angle_deg: float = 0.0
    brightness: float = 1.0
    contrast: float = 1.0

    @property
    def is_identity(self):
        return self == AugmentationParams()


@dataclass(frozen=True)
class PreprocessSpec:
    target_size: int = 380
    channel_means: Tuple[float, float, float] = (0.485, 0.456, 0.406)
    channel_stds: Tuple[float, float, float] = (0.229, 0.224, 0.225)

    def __post_init__(self):
        object.__setattr__(self, "channel_means", tuple(float(m) for m in self.channel_means))
        object.__setattr__(self, "channel_stds", tuple(float(s) for s in self.channel_stds))
        if self.target_size <= 0:
            raise RuntimeError(f"target_size must be positive, got {self.target_size}")
        if len(self.channel_means) != 3 or len(self.channel_stds) != 3:
            raise RuntimeError("channel_means and channel_stds must hold one value per RGB channel")
        if any(s <= 0 for s in self.channel_stds):
            raise RuntimeError(f"channel_stds must be strictly positive, got {self.channel_stds}")


def load_image(image_ref):
    """
    Decodes an image reference into an H x W x 3 float32 array in [0, 1]
    :param image_ref: Path to a PNG/JPEG file or an already decoded array
    """
    if isinstance(image_ref, np.ndarray):
        image = image_ref.astype(np.float32, copy=False)
    elif isinstance(image_ref, (str, Path)):
        with Image.open(image_ref) as file:
            image = np.asarray(file.convert("RGB"), dtype=np.float32) / 255.0
    else:
        raise RuntimeError(f"image_ref must be a path or a numpy array, got {type(image_ref)}")
    if image.ndim != 3 or image.shape[2] != 3:
        raise RuntimeError(f"Images must have 3 channels (H x W x 3), got shape {image.shape}")
    return image


def sample_augmentation(policy, rng_key):
    """
    Draws the transform parameters of one sample. The draw only depends on rng_key = (seed, epoch, index).
    """
    if not policy.enabled:
        return AugmentationParams()
    rng = np.random.default_rng([int(k) for k in rng_key])
    hflip = bool(rng.random() < policy.hflip_prob)
    vflip = bool(rng.random() < policy.vflip_prob)
    angle = float(rng.uniform(-policy.rotation_limit_deg, policy.rotation_limit_deg))
    brightness = float(rng.uniform(1 - policy.brightness_jitter, 1 + policy.brightness_jitter))
    contrast = float(rng.uniform(1 - policy.contrast_jitter, 1 + policy.contrast_jitter))
    return AugmentationParams(hflip, vflip, angle, brightness, contrast)


def _rotate_reflect(tensor, angle_deg):
    height, width = tensor.shape[-2:]
    theta = math.radians(angle_deg)
    cos, sin = abs(math.cos(theta)), abs(math.sin(theta))
    # margin covering the corners of the rotated frame, reflect padding needs pad < size
    pad_x = max(min(math.ceil((width * cos + height * sin - width) / 2) + 2, width - 1), 0)
    pad_y = max(min(math.ceil((height * cos + width * sin - height) / 2) + 2, height - 1), 0)
    padded = TF.pad(tensor, [pad_x, pad_y, pad_x, pad_y], padding_mode="reflect")
    rotated = TF.rotate(padded, angle_deg, interpolation=InterpolationMode.BILINEAR)
    return rotated[:, pad_y : pad_y + height, pad_x : pad_x + width]


def apply_augmentation(image, params):
    """
    Applies one drawn AugmentationParams to an H x W x 3 image in [0, 1]:
    flips, rotation about the center (reflect padded), then brightness and contrast
    """
    tensor = torch.from_numpy(np.array(image, dtype=np.float32, copy=True)).permute(2, 0, 1)
    if params.hflip:
        tensor = TF.hflip(tensor)
    if params.vflip:
        tensor = TF.vflip(tensor)
    if params.angle_deg != 0 and min(tensor.shape[-2:]) > 1:
        tensor = _rotate_reflect(tensor, params.angle_deg)
    if params.brightness != 1:
        tensor = TF.adjust_brightness(tensor, params.brightness)
    if params.contrast != 1:
        tensor = TF.adjust_contrast(tensor, params.contrast)
    return np.ascontiguousarray(tensor.permute(1, 2, 0).numpy(), dtype=np.float32)


def augment(record, policy, rng_key):
    """
    Returns a new train record holding the augmented image in memory.
    Augmenting anything but a train record is a protocol violation.
    """
    if record.partition != Partition.TRAIN:
        raise ProtocolViolation(
            f"Record {record.provenance_id} belongs to the {record.partition.value} partition, "
            f"only train records may be augmented",
            record_ids=(record.provenance_id,),
        )
    params = sample_augmentation(policy, rng_key)
    image = apply_augmentation(load_image(record.image_ref), params)
    key = ".".join(str(int(k)) for k in rng_key)
    return replace(record, provenance_id=f"{record.provenance_id}@aug{key}", image_ref=image)


def preprocess(image, spec):
    """
    Resizes (bilinear) and normalizes an H x W x 3 image into a 3 x S x S float tensor
    """
    array = np.asarray(image, dtype=np.float32)
    if array.ndim != 3 or array.shape[2] != 3:
        raise RuntimeError(f"preprocess expects an H x W x 3 image, got shape {array.shape}")
    tensor = torch.from_numpy(np.ascontiguousarray(array)).permute(2, 0, 1).unsqueeze(0)
    size = spec.target_size
    if tensor.shape[-2:] != (size, size):
        tensor = F.interpolate(tensor, size=(size, size), mode="bilinear", align_corners=False)
    means = torch.tensor(spec.channel_means, dtype=torch.float32).view(1, 3, 1, 1)
    stds = torch.tensor(spec.channel_stds, dtype=torch.float32).view(1, 3, 1, 1)
    return ((tensor - means) / stds)[0]


class RecordDataset(Dataset):
    """
    Torch view over a list of records. Train records are augmented freshly each epoch when a policy is
    given, keyed by (seed, epoch, index) so that the result does not depend on the worker layout.
    """

    def __init__(self, records, classes, preprocess_spec, policy=None, seed=0, cache_images=True):
        self.records = list(records)
        self.class_to_index = {c: i for i, c in enumerate(classes)}
        self.preprocess_spec = preprocess_spec
        self.policy = policy
        self.seed = seed
        self.epoch = 0
        self.cache_images = cache_images
        self._cache = {}
        for record in self.records:
            if record.class_label not in self.class_to_index:
                raise RuntimeError(f"Record {record.provenance_id} has unknown class '{record.class_label}'")

    def set_epoch(self, epoch):
        self.epoch = epoch

    def __len__(self):
        return len(self.records)

    def _image(self, record):
        if isinstance(record.image_ref, np.ndarray) or not self.cache_images:
            return load_image(record.image_ref)
        key = str(record.image_ref)
        if key not in self._cache:
            self._cache[key] = load_image(record.image_ref)
        return self._cache[key]

    def labels(self):
        return [self.class_to_index[r.class_label] for r in self.records]

    def __getitem__(self, index):
        record = self.records[index]
        image = self._image(record)
        if self.policy is not None and record.partition == Partition.TRAIN:
            record = augment(replace(record, image_ref=image), self.policy, (self.seed, self.epoch, index))
            image = record.image_ref
        return preprocess(image, self.preprocess_spec), self.class_to_index[record.class_label]
