"""
Test for file IO
"""
import json
import logging
import struct

import numpy as np
import pytest
import torch

from solar_defect import ModelCheckpoint, ModelSpec, build_model, count_parameters
from solar_defect.checkpoint import MAGIC

from .utils import TestUtils


def _checkpoint(seed=0, **spec):
    torch.manual_seed(seed)
    model = build_model(ModelSpec(**spec))
    return ModelCheckpoint.from_model(model, {"seed": seed, "epoch": 3, "val_macro_f1": 0.5})


def test_save_and_load_forward_identical(tmp_path):
    checkpoint = _checkpoint()
    loaded = TestUtils.save_and_load(checkpoint, tmp_path)

    x = torch.randn(2, 3, 64, 64, generator=torch.Generator().manual_seed(1))
    with torch.no_grad():
        np.testing.assert_array_equal(checkpoint.build()(x).numpy(), loaded.build()(x).numpy())
    assert count_parameters(checkpoint.build()) == count_parameters(loaded.build())
    assert loaded.metadata == {"seed": 0, "epoch": 3, "val_macro_f1": 0.5}


def test_save_extension(tmp_path):
    checkpoint = _checkpoint(use_cbam=False)
    assert checkpoint.save(tmp_path / "model").endswith("model.ckpt")
    assert checkpoint.save(tmp_path / "sub" / "model.ckpt").endswith("model.ckpt")
    with pytest.raises(RuntimeError, match="Incorrect extension"):
        checkpoint.save(tmp_path / "model.pt")


def test_container_layout():
    checkpoint = _checkpoint()
    data = checkpoint.to_bytes()
    assert data[:8] == MAGIC
    (header_length,) = struct.unpack("<Q", data[8:16])
    header = json.loads(data[16 : 16 + header_length].decode("utf-8"))

    assert header["format_version"] == 2
    assert header["spec"]["backbone"]["name"] == "TINY"
    names = [entry["name"] for entry in header["manifest"]]
    assert names == list(checkpoint.state)
    payload = len(data) - 16 - header_length
    assert payload == sum(entry["nbytes"] for entry in header["manifest"])
    assert payload == len(checkpoint.parameter_blob)


def test_serialization_is_stable():
    first = _checkpoint(seed=4).to_bytes()
    second = _checkpoint(seed=4).to_bytes()
    assert first == second


def test_head_payload_size():
    checkpoint = ModelCheckpoint.from_model(torch.nn.Linear(32, 6))
    assert len(checkpoint.parameter_blob) == 792
    loaded = ModelCheckpoint.from_bytes(checkpoint.to_bytes())
    assert loaded.spec is None
    TestUtils.deep_assert(checkpoint.state, loaded.state)
    with pytest.raises(RuntimeError):
        loaded.build()


def test_integer_buffers_keep_dtype_and_value():
    model = torch.nn.Sequential(torch.nn.Conv2d(3, 4, 3), torch.nn.BatchNorm2d(4))
    model[1].num_batches_tracked.fill_(2 ** 40 + 1)
    checkpoint = ModelCheckpoint.from_model(model)
    loaded = ModelCheckpoint.from_bytes(checkpoint.to_bytes())

    counter = loaded.state["1.num_batches_tracked"]
    assert counter.dtype == torch.int64
    assert counter.item() == 2 ** 40 + 1
    entry = {e["name"]: e for e in checkpoint.header()["manifest"]}["1.num_batches_tracked"]
    assert (entry["dtype"], entry["storage"], entry["nbytes"]) == ("int64", "<i8", 8)
    TestUtils.deep_assert(checkpoint.state, loaded.state)


def test_wrong_magic():
    with pytest.raises(RuntimeError, match="magic"):
        ModelCheckpoint.from_bytes(b"NOTACKPT" + bytes(16))


def _rewrite_header(data, **changes):
    (header_length,) = struct.unpack("<Q", data[8:16])
    header = json.loads(data[16 : 16 + header_length].decode("utf-8"))
    header.update(changes)
    encoded = json.dumps(header).encode("utf-8")
    return MAGIC + struct.pack("<Q", len(encoded)) + encoded + data[16 + header_length :]


def test_format_version_mismatch():
    data = _rewrite_header(_checkpoint().to_bytes(), format_version=99)
    with pytest.raises(RuntimeError, match="format version"):
        ModelCheckpoint.from_bytes(data)


def test_library_version_mismatch_warns(caplog):
    data = _rewrite_header(_checkpoint().to_bytes(), versions={"solar_defect": "0.0.0", "torch": torch.__version__})
    with caplog.at_level(logging.WARNING, logger="solar_defect.checkpoint"):
        loaded = ModelCheckpoint.from_bytes(data)
    assert "0.0.0" in caplog.text
    assert loaded.spec == ModelSpec()
