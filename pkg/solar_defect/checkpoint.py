"""
Self-describing checkpoint container:
magic (8 bytes) | header length (uint64 little endian) | JSON header | little endian payloads.
Floating point tensors are stored as float32, integer and boolean ones (BatchNorm counters) as int64.
The header holds the model spec, the metadata, the library versions and the parameter manifest.
"""
import json
import logging
import os
import struct
from dataclasses import dataclass, field
from typing import Dict, Optional

import numpy as np
import torch

from .__version__ import __checkpoint_format_version__, __version__
from .model_zoo import ModelSpec, build_model
from .serialization import as_plain, from_plain

logger = logging.getLogger(__name__)

MAGIC = b"SDCKPT01"
EXTENSION = ".ckpt"


def _versions():
    return {"solar_defect": __version__, "torch": torch.__version__}


@dataclass
class ModelCheckpoint:
    spec: Optional[ModelSpec]
    state: Dict[str, torch.Tensor]
    metadata: Dict = field(default_factory=dict)

    @staticmethod
    def from_model(model, metadata=None):
        """
        :param model: A built ClassifierModel, or any module (its checkpoint then stores weights only)
        """
        state = {name: tensor.detach().cpu().clone() for name, tensor in model.state_dict().items()}
        return ModelCheckpoint(getattr(model, "spec", None), state, dict(metadata or {}))

    def build(self):
        """
        Rebuilds the model in eval mode with the stored weights
        """
        if self.spec is None:
            raise RuntimeError("This checkpoint holds weights only, it has no model spec to build from")
        model = build_model(self.spec)
        model.load_state_dict(self.state)
        model.eval()
        return model

    @property
    def parameter_blob(self):
        return b"".join(_payload(tensor) for tensor in self.state.values())

    def header(self):
        manifest = []
        offset = 0
        for name, tensor in self.state.items():
            storage = _storage(tensor)
            nbytes = tensor.numel() * np.dtype(storage).itemsize
            manifest.append(
                {
                    "name": name,
                    "shape": list(tensor.shape),
                    "dtype": str(tensor.dtype).replace("torch.", ""),
                    "storage": storage,
                    "offset": offset,
                    "nbytes": nbytes,
                }
            )
            offset += nbytes
        return {
            "format_version": __checkpoint_format_version__,
            "versions": _versions(),
            "spec": as_plain(self.spec),
            "metadata": as_plain(self.metadata),
            "manifest": manifest,
        }

    def to_bytes(self):
        header = json.dumps(self.header(), sort_keys=True, separators=(",", ":")).encode("utf-8")
        return MAGIC + struct.pack("<Q", len(header)) + header + self.parameter_blob

    @staticmethod
    def from_bytes(data):
        if data[: len(MAGIC)] != MAGIC:
            raise RuntimeError("This is not a solar_defect checkpoint (wrong magic number)")
        start = len(MAGIC) + 8
        (header_length,) = struct.unpack("<Q", data[len(MAGIC) : start])
        header = json.loads(data[start : start + header_length].decode("utf-8"))
        if header["format_version"] != __checkpoint_format_version__:
            raise RuntimeError(
                f"Checkpoint format version from file ({header['format_version']}) is not the same as the "
                f"supported version ({__checkpoint_format_version__})"
            )
        installed = _versions()
        for key, version in header["versions"].items():
            if installed.get(key) != version:
                logger.warning(
                    "Version of %s from file (%s) is not the same as the installed version (%s)",
                    key,
                    version,
                    installed.get(key),
                )

        payload = data[start + header_length :]
        state = {}
        for entry in header["manifest"]:
            storage = np.dtype(entry["storage"])
            count = entry["nbytes"] // storage.itemsize
            values = np.frombuffer(payload, dtype=storage, count=count, offset=entry["offset"])
            tensor = torch.from_numpy(values.astype(storage.newbyteorder("="))).reshape(entry["shape"])
            state[entry["name"]] = tensor.to(getattr(torch, entry["dtype"]))
        spec = None if header["spec"] is None else from_plain(ModelSpec, header["spec"], "spec")
        return ModelCheckpoint(spec, state, header["metadata"])

    def save(self, file_path):
        file_path = str(file_path)
        _, ext = os.path.splitext(file_path)
        if ext == "":
            file_path = file_path + EXTENSION
        elif ext != EXTENSION:
            raise RuntimeError(f"Incorrect extension({ext}), it should be ({EXTENSION})")
        directory, _ = os.path.split(file_path)
        if directory != "" and not os.path.isdir(directory):
            os.makedirs(directory)
        with open(file_path, "wb") as file:
            file.write(self.to_bytes())
        return file_path

    @staticmethod
    def load(file_path):
        with open(file_path, "rb") as file:
            return ModelCheckpoint.from_bytes(file.read())


def _storage(tensor):
    return "<f4" if tensor.is_floating_point() else "<i8"


def _payload(tensor):
    wide = torch.float32 if tensor.is_floating_point() else torch.int64
    return tensor.detach().cpu().to(wide).contiguous().numpy().astype(_storage(tensor)).tobytes()
