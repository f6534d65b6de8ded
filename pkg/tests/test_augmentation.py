"""
Test for the train-time augmentation and the preprocessing of images
"""
import numpy as np
import pytest
import torch
from torchvision.transforms import InterpolationMode
from torchvision.transforms import functional as TF

from solar_defect import (
    AugmentationParams,
    AugmentationPolicy,
    Partition,
    PreprocessSpec,
    ProtocolViolation,
    RecordDataset,
    SampleRecord,
    apply_augmentation,
    augment,
    load_image,
    preprocess,
    sample_augmentation,
)

from .utils import TestUtils


def _record(partition=Partition.TRAIN, seed=0):
    return SampleRecord("a/0000.png", "a/0000.png", "a", TestUtils.image(seed=seed), partition)


@pytest.mark.parametrize("rng_key", [(0, 0, 0), (1, 4, 17), (42, 14, 3)])
def test_sample_augmentation_deterministic(rng_key):
    policy = AugmentationPolicy()
    first = sample_augmentation(policy, rng_key)
    second = sample_augmentation(policy, rng_key)
    assert first == second
    assert -20 <= first.angle_deg <= 20
    assert 0.8 <= first.brightness <= 1.2
    assert 0.8 <= first.contrast <= 1.2


def test_sample_augmentation_keys_differ():
    policy = AugmentationPolicy()
    draws = {sample_augmentation(policy, (0, epoch, 0)) for epoch in range(10)}
    assert len(draws) > 1


def test_disabled_policy_is_identity():
    params = sample_augmentation(AugmentationPolicy(enabled=False), (0, 0, 0))
    assert params.is_identity

    image = TestUtils.image(seed=1)
    np.testing.assert_array_equal(apply_augmentation(image, params), image)


def test_flips():
    image = TestUtils.image(seed=2)
    np.testing.assert_array_equal(apply_augmentation(image, AugmentationParams(hflip=True)), image[:, ::-1, :])
    np.testing.assert_array_equal(apply_augmentation(image, AugmentationParams(vflip=True)), image[::-1, :, :])


def test_rotation_keeps_constant_image():
    image = TestUtils.image(0.3)
    rotated = apply_augmentation(image, AugmentationParams(angle_deg=13.0))
    assert rotated.shape == image.shape
    np.testing.assert_almost_equal(rotated, image, decimal=5)


def test_brightness_clipped():
    image = TestUtils.image(0.9)
    out = apply_augmentation(image, AugmentationParams(brightness=1.2))
    np.testing.assert_almost_equal(out, np.ones_like(image))

    out = apply_augmentation(TestUtils.image(0.5), AugmentationParams(brightness=0.8))
    np.testing.assert_almost_equal(out, np.full_like(image, 0.4))


def test_contrast_about_grayscale_mean():
    image = TestUtils.image(seed=3)
    out = apply_augmentation(image, AugmentationParams(contrast=0.8))
    gray = (0.2989 * image[..., 0] + 0.587 * image[..., 1] + 0.114 * image[..., 2]).mean()
    np.testing.assert_almost_equal(out, 0.8 * image + 0.2 * gray, decimal=5)
    assert out.std() < image.std()


def test_augment_refuses_evaluation_records():
    for partition in (Partition.VAL, Partition.TEST, Partition.UNASSIGNED):
        with pytest.raises(ProtocolViolation) as error:
            augment(_record(partition), AugmentationPolicy(), (0, 0, 0))
        assert error.value.record_ids == ("a/0000.png",)


def test_augment_keeps_provenance():
    record = _record()
    augmented = augment(record, AugmentationPolicy(), (7, 2, 5))
    assert augmented.provenance_id == "a/0000.png@aug7.2.5"
    assert augmented.origin_id == record.origin_id
    assert augmented.is_derivative
    assert augmented.partition == Partition.TRAIN
    assert augmented.image_ref.shape == record.image_ref.shape


def test_load_image_from_file(tmp_path):
    TestUtils.write_corpus(tmp_path, {"a": 1}, size=10)
    image = load_image(tmp_path / "a" / "0000.png")
    assert image.shape == (10, 10, 3)
    assert image.dtype == np.float32
    assert 0 <= image.min() and image.max() <= 1


def test_load_image_rejects_gray():
    with pytest.raises(RuntimeError):
        load_image(np.zeros((4, 4), dtype=np.float32))


def test_preprocess_normalizes():
    spec = PreprocessSpec(target_size=16)
    image = np.broadcast_to(np.array(spec.channel_means, dtype=np.float32), (8, 8, 3))
    tensor = preprocess(image, spec)
    assert tensor.shape == (3, 16, 16)
    np.testing.assert_almost_equal(tensor.numpy(), np.zeros((3, 16, 16)), decimal=5)

    tensor = preprocess(TestUtils.image(1.0, size=16), spec)
    expected = (1 - np.array(spec.channel_means)) / np.array(spec.channel_stds)
    np.testing.assert_almost_equal(tensor[:, 3, 5].numpy(), expected, decimal=5)


def test_preprocess_spec_validation():
    with pytest.raises(RuntimeError):
        PreprocessSpec(target_size=0)
    with pytest.raises(RuntimeError):
        PreprocessSpec(channel_stds=(0.2, 0.0, 0.2))


def test_record_dataset_augments_train_only():
    spec = PreprocessSpec(target_size=8)
    records = [_record(Partition.TRAIN, seed=4), _record(Partition.VAL, seed=4)]
    records[1] = SampleRecord("a/0001.png", "a/0001.png", "a", records[1].image_ref, Partition.VAL)
    dataset = RecordDataset(records, ["a", "b"], spec, policy=AugmentationPolicy(), seed=0)

    plain = preprocess(records[0].image_ref, spec)
    changed = False
    for epoch in range(5):
        dataset.set_epoch(epoch)
        train_tensor, train_label = dataset[0]
        val_tensor, val_label = dataset[1]
        assert train_label == val_label == 0
        torch.testing.assert_close(val_tensor, plain)
        changed = changed or not torch.allclose(train_tensor, plain)
    assert changed

    dataset.set_epoch(3)
    torch.testing.assert_close(dataset[0][0], dataset[0][0])
    assert dataset.labels() == [0, 0]


def test_record_dataset_unknown_class():
    with pytest.raises(RuntimeError):
        RecordDataset([_record()], ["b", "c"], PreprocessSpec(target_size=8))


@pytest.mark.parametrize("seed", range(5))
def test_hflip_twice_is_identity(seed):
    image = TestUtils.image(seed=seed, size=9)
    flip = AugmentationParams(hflip=True)
    np.testing.assert_array_equal(apply_augmentation(apply_augmentation(image, flip), flip), image)


def test_rotation_within_limit_over_many_draws():
    policy = AugmentationPolicy(rotation_limit_deg=20)
    angles = np.array([sample_augmentation(policy, (0, 0, index)).angle_deg for index in range(1000)])
    assert np.all(np.abs(angles) <= 20)
    assert angles.min() < -15 and angles.max() > 15


@pytest.mark.parametrize("target_size", [8, 16])
def test_preprocess_known_channel_value(target_size):
    image = TestUtils.image(0.5)
    image[..., 0] = 0.714
    tensor = preprocess(image, PreprocessSpec(target_size=target_size))
    np.testing.assert_allclose(tensor[0].numpy(), np.ones((target_size, target_size)), atol=1e-6)


def test_rotation_matches_torchvision_inside_frame():
    image = TestUtils.image(seed=6, size=32)
    rotated = apply_augmentation(image, AugmentationParams(angle_deg=10.0))
    reference = TF.rotate(torch.from_numpy(image).permute(2, 0, 1), 10.0, interpolation=InterpolationMode.BILINEAR)
    np.testing.assert_allclose(rotated[12:20, 12:20], reference.permute(1, 2, 0).numpy()[12:20, 12:20], atol=1e-5)
