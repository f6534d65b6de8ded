"""
Convolutional block attention: a channel gate followed by a spatial gate, both multiplicative.
The functional forms work on C x H x W maps as well as on N x C x H x W batches.
"""
import math
from dataclasses import dataclass

import torch
import torch.nn as nn
import torch.nn.functional as F


@dataclass
class ChannelAttentionParams:
    """
    Shared two-layer perceptron C -> hidden -> C applied to the average and the max pooled descriptors
    """

    w1: torch.Tensor
    b1: torch.Tensor
    w2: torch.Tensor
    b2: torch.Tensor
    reduction_ratio: int = 16

    def __post_init__(self):
        if self.w1.dim() != 2 or self.w2.dim() != 2:
            raise RuntimeError("Channel attention weights must be matrices")
        hidden, channels = self.w1.shape
        if tuple(self.w2.shape) != (channels, hidden):
            raise RuntimeError(f"w2 must have shape {(channels, hidden)}, got {tuple(self.w2.shape)}")
        if tuple(self.b1.shape) != (hidden,) or tuple(self.b2.shape) != (channels,):
            raise RuntimeError("Channel attention biases do not match the perceptron dimensions")

    @property
    def channels(self):
        return self.w1.shape[1]

    @property
    def hidden(self):
        return self.w1.shape[0]

    @staticmethod
    def hidden_units(channels, reduction_ratio):
        if reduction_ratio < 1:
            raise RuntimeError(f"reduction_ratio must be at least 1, got {reduction_ratio}")
        return max(1, channels // reduction_ratio)

    @staticmethod
    def zeros(channels, reduction_ratio=16, dtype=torch.float32):
        hidden = ChannelAttentionParams.hidden_units(channels, reduction_ratio)
        return ChannelAttentionParams(
            torch.zeros(hidden, channels, dtype=dtype),
            torch.zeros(hidden, dtype=dtype),
            torch.zeros(channels, hidden, dtype=dtype),
            torch.zeros(channels, dtype=dtype),
            reduction_ratio,
        )

    @staticmethod
    def identity(channels, dtype=torch.float32):
        """
        A perceptron computing d -> d exactly: relu(d) - relu(-d) = d
        """
        eye = torch.eye(channels, dtype=dtype)
        return ChannelAttentionParams(
            torch.cat((eye, -eye), dim=0),
            torch.zeros(2 * channels, dtype=dtype),
            torch.cat((eye, -eye), dim=1),
            torch.zeros(channels, dtype=dtype),
            reduction_ratio=1,
        )


@dataclass
class SpatialAttentionParams:
    weight: torch.Tensor
    bias: torch.Tensor

    def __post_init__(self):
        if self.weight.dim() != 4 or tuple(self.weight.shape[:2]) != (1, 2):
            raise RuntimeError(f"Spatial attention kernel must have shape (1, 2, k, k), got {tuple(self.weight.shape)}")
        k_h, k_w = self.weight.shape[2:]
        if k_h != k_w or k_h % 2 == 0:
            raise RuntimeError(f"Spatial attention kernel must be square with an odd size, got {k_h}x{k_w}")
        if self.bias.numel() != 1:
            raise RuntimeError("Spatial attention has a single output channel, thus a single bias")

    @property
    def kernel_size(self):
        return self.weight.shape[-1]

    @staticmethod
    def zeros(kernel_size=7, dtype=torch.float32):
        if kernel_size % 2 == 0:
            raise RuntimeError(f"kernel_size must be odd, got {kernel_size}")
        return SpatialAttentionParams(
            torch.zeros(1, 2, kernel_size, kernel_size, dtype=dtype), torch.zeros(1, dtype=dtype)
        )


def _as_batch(feature_map):
    if feature_map.dim() == 3:
        return feature_map.unsqueeze(0), True
    if feature_map.dim() == 4:
        return feature_map, False
    raise RuntimeError(f"Feature maps must be C x H x W or N x C x H x W, got shape {tuple(feature_map.shape)}")


def _mlp(descriptor, params):
    hidden = torch.relu(F.linear(descriptor, params.w1, params.b1))
    return F.linear(hidden, params.w2, params.b2)


def channel_attention(feature_map, params):
    """
    Returns the channel gate, shape (C,) for a single map or (N, C) for a batch
    """
    batch, single = _as_batch(feature_map)
    if batch.shape[1] != params.channels:
        raise RuntimeError(f"Feature map has {batch.shape[1]} channels, the attention expects {params.channels}")
    avg = batch.mean(dim=(2, 3))
    mx = batch.amax(dim=(2, 3))
    gate = torch.sigmoid(_mlp(avg, params) + _mlp(mx, params))
    return gate[0] if single else gate


def spatial_attention(feature_map, params):
    """
    Returns the spatial gate, shape (H, W) for a single map or (N, H, W) for a batch
    """
    batch, single = _as_batch(feature_map)
    pooled = torch.cat((batch.mean(dim=1, keepdim=True), batch.amax(dim=1, keepdim=True)), dim=1)
    logits = F.conv2d(pooled, params.weight, params.bias, padding=params.kernel_size // 2)
    gate = torch.sigmoid(logits)[:, 0]
    return gate[0] if single else gate


def cbam_forward(feature_map, channel_params, spatial_params):
    batch, single = _as_batch(feature_map)
    refined = channel_attention(batch, channel_params)[:, :, None, None] * batch
    out = spatial_attention(refined, spatial_params)[:, None, :, :] * refined
    return out[0] if single else out


def _fan_in_uniform(weight, fan_in):
    bound = 1.0 / math.sqrt(fan_in)
    nn.init.uniform_(weight, -bound, bound)


class ChannelAttention(nn.Module):
    def __init__(self, channels, reduction_ratio=16):
        super(ChannelAttention, self).__init__()
        hidden = ChannelAttentionParams.hidden_units(channels, reduction_ratio)
        self.reduction_ratio = reduction_ratio
        self.fc1 = nn.Linear(channels, hidden)
        self.fc2 = nn.Linear(hidden, channels)
        self.reset_parameters()

    def reset_parameters(self):
        _fan_in_uniform(self.fc1.weight, self.fc1.in_features)
        _fan_in_uniform(self.fc2.weight, self.fc2.in_features)
        nn.init.zeros_(self.fc1.bias)
        nn.init.zeros_(self.fc2.bias)

    def params(self):
        return ChannelAttentionParams(
            self.fc1.weight, self.fc1.bias, self.fc2.weight, self.fc2.bias, self.reduction_ratio
        )

    def forward(self, x):
        return channel_attention(x, self.params())


class SpatialAttention(nn.Module):
    def __init__(self, kernel_size=7):
        super(SpatialAttention, self).__init__()
        if kernel_size % 2 == 0:
            raise RuntimeError(f"kernel_size must be odd, got {kernel_size}")
        self.conv = nn.Conv2d(2, 1, kernel_size, padding=kernel_size // 2)
        self.reset_parameters()

    def reset_parameters(self):
        _fan_in_uniform(self.conv.weight, 2 * self.conv.kernel_size[0] * self.conv.kernel_size[1])
        nn.init.zeros_(self.conv.bias)

    def params(self):
        return SpatialAttentionParams(self.conv.weight, self.conv.bias)

    def forward(self, x):
        return spatial_attention(x, self.params())


class CBAM(nn.Module):
    """
    Refines a feature map in place of shape: channel gate first, spatial gate second
    """

    def __init__(self, channels, reduction_ratio=16, kernel_size=7):
        super(CBAM, self).__init__()
        self.channel = ChannelAttention(channels, reduction_ratio)
        self.spatial = SpatialAttention(kernel_size)

    def zero_init(self):
        with torch.no_grad():
            for p in self.parameters():
                p.zero_()

    def forward(self, x):
        return cbam_forward(x, self.channel.params(), self.spatial.params())
