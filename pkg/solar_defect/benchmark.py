import json
import logging
import platform
import threading
import time
from contextlib import contextmanager
from dataclasses import dataclass
from typing import Optional

import torch

from .checkpoint import ModelCheckpoint
from .serialization import as_plain

logger = logging.getLogger(__name__)

_device_lock = threading.Lock()
_device_owner = None


@contextmanager
def exclusive_device(purpose):
    """
    Holds the compute device of this process. A second holder is refused, not queued.
    """
    global _device_owner
    if not _device_lock.acquire(blocking=False):
        raise RuntimeError(f"The compute device is busy with {_device_owner}, refusing to start {purpose}")
    _device_owner = purpose
    try:
        yield
    finally:
        _device_owner = None
        _device_lock.release()


def hardware_label(device="cpu"):
    device = torch.device(device)
    if device.type == "cuda":
        return f"cuda:{torch.cuda.get_device_name(device)}"
    return f"cpu:{platform.processor() or platform.machine()} ({torch.get_num_threads()} threads)"


@dataclass
class BenchmarkResult:
    fps: float
    batch_size: int
    warmup_iters: int
    timed_iters: int
    size_mb: Optional[float] = None
    train_time_s: Optional[float] = None
    hardware_label: str = ""
    measurement: str = "pure forward pass on synthetic inputs"

    def __post_init__(self):
        if self.fps <= 0:
            raise RuntimeError(f"fps must be strictly positive, got {self.fps}")
        if self.timed_iters < 1:
            raise RuntimeError(f"timed_iters must be at least 1, got {self.timed_iters}")

    def to_dict(self):
        return as_plain(self)

    def to_json(self):
        return json.dumps(self.to_dict(), indent=2, sort_keys=True)


def _synchronize(device):
    if device.type == "cuda":
        torch.cuda.synchronize(device)


def measure_size(checkpoint):
    return len(checkpoint.to_bytes()) / 2 ** 20


def measure_fps(model, batch_size=32, warmup_iters=10, timed_iters=50, image_size=380, device="cpu"):
    """
    Images per second of the forward pass alone, timed per iteration on a monotonic clock
    :param model: A ModelCheckpoint (rebuilt, left untouched) or an already built module
    """
    if timed_iters < 1:
        raise RuntimeError(f"timed_iters must be at least 1, got {timed_iters}")
    if warmup_iters < 0 or batch_size < 1:
        raise RuntimeError("warmup_iters must be positive and batch_size at least 1")
    size_mb = None
    if isinstance(model, ModelCheckpoint):
        size_mb = measure_size(model)
        model = model.build()
    device = torch.device(device)
    model = model.to(device).eval()
    generator = torch.Generator().manual_seed(0)
    batch = torch.randn(batch_size, 3, image_size, image_size, generator=generator).to(device)

    with exclusive_device("fps measurement"), torch.no_grad():
        for _ in range(warmup_iters):
            model(batch)
            _synchronize(device)
        elapsed = 0.0
        for _ in range(timed_iters):
            start = time.perf_counter()
            model(batch)
            _synchronize(device)
            elapsed += time.perf_counter() - start

    result = BenchmarkResult(
        fps=timed_iters * batch_size / elapsed,
        batch_size=batch_size,
        warmup_iters=warmup_iters,
        timed_iters=timed_iters,
        size_mb=size_mb,
        hardware_label=hardware_label(device),
    )
    logger.info(
        "%.1f FPS (batch %d, %d timed iterations) on %s", result.fps, batch_size, timed_iters, result.hardware_label
    )
    return result


@dataclass
class TimedRun:
    checkpoint: object
    history: object
    train_time_s: float
    started_at: float
    finished_at: float


def time_training(config, splits, trainer=None):
    """
    Wall clock of one training run. The regular train holds the compute device itself.
    :param trainer: Callable (config, splits) -> (checkpoint, history), the regular train by default
    """
    if trainer is None:
        from .training import train as trainer

    started_at = time.time()
    start = time.perf_counter()
    checkpoint, history = trainer(config, splits)
    train_time_s = time.perf_counter() - start
    finished_at = time.time()
    logger.info("Training took %.2f s", train_time_s)
    return TimedRun(checkpoint, history, train_time_s, started_at, finished_at)
