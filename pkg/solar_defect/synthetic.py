"""
Generator of a small class-discriminable corpus: one colored square per image on a noisy background.
The class fixes both the color and the quadrant of the square, the square masks are saved next to the images.
"""
import colorsys
import json
import logging
import shutil
from dataclasses import dataclass
from pathlib import Path
from typing import Optional, Tuple

import numpy as np
from PIL import Image

from .errors import ConfigurationError
from .serialization import as_plain

logger = logging.getLogger(__name__)

PALETTE = (
    (0.90, 0.10, 0.10),
    (0.10, 0.80, 0.10),
    (0.15, 0.25, 0.95),
    (0.95, 0.85, 0.10),
    (0.85, 0.15, 0.85),
    (0.10, 0.85, 0.85),
)


@dataclass(frozen=True)
class SynthSpec:
    num_classes: int = 6
    per_class: int = 50
    image_size: int = 64
    seed: int = 0
    class_names: Optional[Tuple[str, ...]] = None
    per_class_counts: Optional[Tuple[int, ...]] = None

    def __post_init__(self):
        if self.num_classes < 2:
            raise RuntimeError(f"num_classes must be at least 2, got {self.num_classes}")
        if self.per_class < 1:
            raise RuntimeError(f"per_class must be at least 1, got {self.per_class}")
        if self.image_size < 8:
            raise RuntimeError(f"image_size must be at least 8 pixels, got {self.image_size}")
        if self.class_names is not None and len(self.class_names) != self.num_classes:
            raise RuntimeError(f"{len(self.class_names)} class names given for {self.num_classes} classes")
        if self.per_class_counts is not None:
            if len(self.per_class_counts) != self.num_classes or min(self.per_class_counts) < 1:
                raise RuntimeError("per_class_counts needs one count of at least 1 per class")

    def names(self):
        if self.class_names is not None:
            return list(self.class_names)
        return [f"class_{i}" for i in range(self.num_classes)]

    def counts(self):
        if self.per_class_counts is not None:
            return list(self.per_class_counts)
        return [self.per_class] * self.num_classes


def class_layout(num_classes):
    """
    (quadrant, rgb color) of each class
    """
    layout = []
    for i in range(num_classes):
        if i < len(PALETTE):
            color = PALETTE[i]
        else:
            color = colorsys.hsv_to_rgb((i * 0.618034) % 1.0, 0.85, 0.9)
        layout.append((i % 4, tuple(float(c) for c in color)))
    return layout


def generate_image(rng, size, quadrant, color):
    """
    :return: uint8 image (size x size x 3), boolean mask of the square, box (row, col, side)
    """
    background = np.clip(0.45 + rng.normal(0.0, 0.08, (size, size, 3)), 0, 1)
    side = max(2, size // 4)
    half = size // 2
    row0 = 0 if quadrant < 2 else half
    col0 = 0 if quadrant % 2 == 0 else half
    row = row0 + int(rng.integers(0, half - side + 1))
    col = col0 + int(rng.integers(0, half - side + 1))
    patch = np.asarray(color)[None, None, :] + rng.normal(0.0, 0.03, (side, side, 3))
    background[row : row + side, col : col + side] = np.clip(patch, 0, 1)
    mask = np.zeros((size, size), dtype=bool)
    mask[row : row + side, col : col + side] = True
    return np.round(background * 255).astype(np.uint8), mask, (row, col, side)


def generate_corpus(out_dir, spec, force=False):
    """
    Writes images/<class>/<n>.png, masks/<class>/<n>.png and synth.json under out_dir
    """
    out_dir = Path(out_dir)
    if out_dir.exists() and any(out_dir.iterdir()):
        if not force:
            raise ConfigurationError(f"Target directory '{out_dir}' is not empty, use --force", key="force")
        for name in ("images", "masks"):
            if (out_dir / name).exists():
                shutil.rmtree(out_dir / name)
    names = spec.names()
    layout = class_layout(spec.num_classes)
    boxes = {}
    for class_idx, (name, count) in enumerate(zip(names, spec.counts())):
        quadrant, color = layout[class_idx]
        (out_dir / "images" / name).mkdir(parents=True, exist_ok=True)
        (out_dir / "masks" / name).mkdir(parents=True, exist_ok=True)
        for i in range(count):
            rng = np.random.default_rng([spec.seed, class_idx, i])
            image, mask, box = generate_image(rng, spec.image_size, quadrant, color)
            file_name = f"{i:04d}.png"
            Image.fromarray(image).save(out_dir / "images" / name / file_name)
            Image.fromarray((mask * 255).astype(np.uint8)).save(out_dir / "masks" / name / file_name)
            boxes[f"{name}/{file_name}"] = list(box)

    description = {
        "spec": as_plain(spec),
        "classes": [
            {"name": name, "quadrant": quadrant, "color": list(color)}
            for name, (quadrant, color) in zip(names, layout)
        ],
        "boxes": boxes,
    }
    with open(out_dir / "synth.json", "w") as file:
        json.dump(description, file, indent=2, sort_keys=True)
    logger.info("Wrote %d synthetic images in %d classes to %s", len(boxes), len(names), out_dir)
    return description


def load_mask(out_dir, provenance_id):
    with Image.open(Path(out_dir) / "masks" / provenance_id) as file:
        return np.asarray(file) > 127
