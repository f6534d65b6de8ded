import math
from dataclasses import dataclass, field, replace
from enum import Enum
from typing import Optional, Tuple

import torch
import torch.nn.functional as F

from .enums import Reduction, ScheduleMode


@dataclass(frozen=True)
class FocalLossSpec:
    gamma: float = 2.0
    alpha: float = 1.0
    reduction: Reduction = Reduction.MEAN

    def __post_init__(self):
        if self.gamma < 0:
            raise RuntimeError(f"gamma must be positive, got {self.gamma}")
        if self.alpha <= 0:
            raise RuntimeError(f"alpha must be strictly positive, got {self.alpha}")


def _target_log_probs(logits, targets):
    if logits.dim() != 2 or logits.shape[0] < 1:
        raise RuntimeError(f"logits must be a non empty batch x K matrix, got shape {tuple(logits.shape)}")
    targets = torch.as_tensor(targets, device=logits.device).long()
    if targets.shape != (logits.shape[0],):
        raise RuntimeError(f"Expected {logits.shape[0]} targets, got shape {tuple(targets.shape)}")
    if targets.min() < 0 or targets.max() >= logits.shape[1]:
        raise RuntimeError(f"targets must be class indices in [0, {logits.shape[1] - 1}]")
    return F.log_softmax(logits, dim=1).gather(1, targets.unsqueeze(1)).squeeze(1)


def _reduce(losses, reduction):
    if reduction == Reduction.MEAN:
        return losses.mean()
    elif reduction == Reduction.SUM:
        return losses.sum()
    return losses


def focal_loss(logits, targets, spec=FocalLossSpec()):
    """
    -alpha * (1 - p_t)^gamma * log(p_t), with log(p_t) taken from log_softmax
    """
    log_pt = _target_log_probs(logits, targets)
    modulation = torch.clamp(1 - log_pt.exp(), min=0) ** spec.gamma
    return _reduce(-spec.alpha * modulation * log_pt, spec.reduction)


def cross_entropy(logits, targets, reduction=Reduction.MEAN):
    return _reduce(-_target_log_probs(logits, targets), reduction)


class LossFunction:
    @staticmethod
    def focal(logits, targets, config):
        return focal_loss(logits, targets, config.focal)

    @staticmethod
    def cross_entropy(logits, targets, config):
        return cross_entropy(logits, targets, config.focal.reduction)


class Loss(Enum):
    """
    Training criteria.
    FOCAL: focal loss with the gamma/alpha of LossConfig.focal.
    CROSS_ENTROPY: plain log-softmax negative log-likelihood.
    """

    FOCAL = (LossFunction.focal,)
    CROSS_ENTROPY = (LossFunction.cross_entropy,)


@dataclass(frozen=True)
class LossConfig:
    kind: Loss = Loss.FOCAL
    focal: FocalLossSpec = field(default_factory=FocalLossSpec)

    @property
    def label(self):
        if self.kind == Loss.CROSS_ENTROPY:
            return "Cross-Entropy"
        return f"Focal (γ={self.focal.gamma:g}, α={self.focal.alpha:g})"


def make_criterion(loss_config):
    function = loss_config.kind.value[0]

    def criterion(logits, targets):
        return function(logits, targets, loss_config)

    return criterion


@dataclass(frozen=True)
class ScheduleSpec:
    """
    horizon_T defaults to the number of training epochs when left to None
    """

    lr_max: float = 1e-4
    lr_min: float = 0.0
    horizon_T: Optional[int] = None
    mode: ScheduleMode = ScheduleMode.COSINE

    def __post_init__(self):
        if self.lr_max <= 0:
            raise RuntimeError(f"lr_max must be strictly positive, got {self.lr_max}")
        if self.lr_min < 0 or self.lr_min > self.lr_max:
            raise RuntimeError(f"lr_min must be in [0, lr_max], got {self.lr_min}")
        if self.horizon_T is not None and self.horizon_T < 1:
            raise RuntimeError(f"horizon_T must be at least 1, got {self.horizon_T}")

    def resolved(self, epochs):
        return self if self.horizon_T is not None else replace(self, horizon_T=epochs)

    @property
    def label(self):
        return "Cosine Annealing" if self.mode == ScheduleMode.COSINE else "Fixed LR"


def lr_at(epoch, spec):
    if spec.horizon_T is None:
        raise RuntimeError("The schedule horizon is not resolved, call spec.resolved(epochs) first")
    if epoch < 0 or epoch > spec.horizon_T:
        raise RuntimeError(f"epoch must be in [0, {spec.horizon_T}], got {epoch}")
    if spec.mode == ScheduleMode.FIXED:
        return spec.lr_max
    return spec.lr_min + 0.5 * (spec.lr_max - spec.lr_min) * (1 + math.cos(math.pi * epoch / spec.horizon_T))


@dataclass(frozen=True)
class OptimizerConfig:
    kind: str = "adamw"
    weight_decay: float = 1e-4
    betas: Tuple[float, float] = (0.9, 0.999)
    eps: float = 1e-8

    def __post_init__(self):
        if self.kind != "adamw":
            raise RuntimeError(f"Only the 'adamw' optimizer is supported, got '{self.kind}'")
        if self.weight_decay < 0:
            raise RuntimeError(f"weight_decay must be positive, got {self.weight_decay}")


def build_optimizer(parameters, config, lr):
    if lr <= 0:
        raise RuntimeError(f"The learning rate must be strictly positive, got {lr}")
    trainable = [p for p in parameters if p.requires_grad]
    return torch.optim.AdamW(trainable, lr=lr, betas=config.betas, eps=config.eps, weight_decay=config.weight_decay)


def set_learning_rate(optimizer, lr):
    for group in optimizer.param_groups:
        group["lr"] = lr
