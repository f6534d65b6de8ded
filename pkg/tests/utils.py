import dataclasses
from enum import Enum

import numpy as np
import torch
from PIL import Image

from solar_defect import DatasetManifest, ModelCheckpoint, Partition, SampleRecord


class TestUtils:
    @staticmethod
    def save_and_load(checkpoint, tmp_path, name="test"):
        file_path = checkpoint.save(tmp_path / name)
        checkpoint_load = ModelCheckpoint.load(file_path)

        TestUtils.deep_assert(checkpoint, checkpoint_load)
        TestUtils.deep_assert(checkpoint_load, checkpoint)
        return checkpoint_load

    @staticmethod
    def deep_assert(first_elem, second_elem):
        if isinstance(first_elem, dict):
            assert set(first_elem) == set(second_elem)
            for key in first_elem:
                TestUtils.deep_assert(first_elem[key], second_elem[key])
        elif isinstance(first_elem, (list, tuple)):
            assert len(first_elem) == len(second_elem)
            for i in range(len(first_elem)):
                TestUtils.deep_assert(first_elem[i], second_elem[i])
        elif dataclasses.is_dataclass(first_elem):
            for f in dataclasses.fields(first_elem):
                TestUtils.deep_assert(getattr(first_elem, f.name), getattr(second_elem, f.name))
        elif isinstance(first_elem, torch.Tensor):
            assert first_elem.dtype == second_elem.dtype
            np.testing.assert_array_equal(first_elem.numpy(), second_elem.numpy())
        elif isinstance(first_elem, np.ndarray):
            np.testing.assert_array_equal(first_elem, second_elem)
        elif isinstance(first_elem, Enum) or first_elem is None or isinstance(first_elem, (str, bool)):
            assert first_elem == second_elem
        else:
            np.testing.assert_almost_equal(second_elem, first_elem)

    @staticmethod
    def gradient_check(function, inputs, step=1e-3, rtol=1e-4, atol=1e-5):
        """
        torch.autograd.gradcheck (central differences) of the function at float64 inputs, all differentiated
        """
        inputs = tuple(x.detach().clone().requires_grad_(True) for x in inputs)
        return torch.autograd.gradcheck(function, inputs, eps=step, atol=atol, rtol=rtol, raise_exception=False)

    @staticmethod
    def image(value=0.5, size=8, seed=None):
        if seed is None:
            return np.full((size, size, 3), value, dtype=np.float32)
        return np.random.default_rng(seed).random((size, size, 3)).astype(np.float32)

    @staticmethod
    def records(counts, partition=Partition.UNASSIGNED, size=8):
        """
        In-memory raw records, counts maps class name -> number of images
        """
        records = []
        for class_idx, (name, count) in enumerate(counts.items()):
            for i in range(count):
                provenance_id = f"{name}/{i:04d}.png"
                image = TestUtils.image(seed=class_idx * 100000 + i, size=size)
                records.append(SampleRecord(provenance_id, provenance_id, name, image, partition))
        return records

    @staticmethod
    def manifest(counts, size=8):
        return DatasetManifest(tuple(counts), TestUtils.records(counts, size=size))

    @staticmethod
    def write_corpus(root, counts, size=8):
        """
        One PNG per record under root/<class>/
        """
        for class_idx, (name, count) in enumerate(counts.items()):
            (root / name).mkdir(parents=True, exist_ok=True)
            for i in range(count):
                pixels = np.random.default_rng([class_idx, i]).integers(0, 256, (size, size, 3), dtype=np.uint8)
                Image.fromarray(pixels).save(root / name / f"{i:04d}.png")
        return root


TABLE_I_COUNTS = {
    "Clean": 194,
    "Dusty": 191,
    "Bird-drop": 192,
    "Electrical-damage": 104,
    "Physical-damage": 70,
    "Snow-covered": 124,
}
