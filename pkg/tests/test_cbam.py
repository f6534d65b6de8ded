"""
Test for the channel and spatial attention gates
"""
import numpy as np
import pytest
import torch

from solar_defect import (
    CBAM,
    ChannelAttentionParams,
    SpatialAttention,
    SpatialAttentionParams,
    cbam_forward,
    channel_attention,
    spatial_attention,
)

from .utils import TestUtils


def _random_params(channels, reduction_ratio, kernel_size, seed, dtype=torch.float64):
    generator = torch.Generator().manual_seed(seed)
    hidden = ChannelAttentionParams.hidden_units(channels, reduction_ratio)

    def draw(*shape):
        return torch.randn(*shape, generator=generator, dtype=dtype)

    cp = ChannelAttentionParams(
        draw(hidden, channels), draw(hidden), draw(channels, hidden), draw(channels), reduction_ratio
    )
    sp = SpatialAttentionParams(draw(1, 2, kernel_size, kernel_size) * 0.3, draw(1))
    return cp, sp


def test_channel_gate_zero_params():
    feature_map = torch.randn(8, 5, 6)
    gate = channel_attention(feature_map, ChannelAttentionParams.zeros(8, reduction_ratio=4))
    np.testing.assert_almost_equal(gate.numpy(), np.full(8, 0.5))


def test_channel_gate_identity_perceptron():
    feature_map = torch.ones(2, 3, 4)
    feature_map[1] = -1
    gate = channel_attention(feature_map, ChannelAttentionParams.identity(2))
    np.testing.assert_almost_equal(gate.numpy(), [0.8808, 0.1192], decimal=4)


def test_channel_gate_shape_mismatch():
    with pytest.raises(RuntimeError):
        channel_attention(torch.randn(6, 4, 4), ChannelAttentionParams.zeros(8))


def test_channel_gate_batch_matches_single():
    cp, _ = _random_params(8, 2, 7, seed=3, dtype=torch.float32)
    batch = torch.randn(3, 8, 5, 5)
    gates = channel_attention(batch, cp)
    assert gates.shape == (3, 8)
    for i in range(3):
        torch.testing.assert_close(gates[i], channel_attention(batch[i], cp))


def test_spatial_gate_zero_kernel():
    gate = spatial_attention(torch.randn(4, 7, 11), SpatialAttentionParams.zeros(7))
    assert gate.shape == (7, 11)
    np.testing.assert_almost_equal(gate.numpy(), np.full((7, 11), 0.5))


@pytest.mark.parametrize("value", [-1.5, 0.0, 0.7, 3.0])
def test_spatial_gate_average_channel(value):
    weight = torch.zeros(1, 2, 1, 1)
    weight[0, 0, 0, 0] = 1.0
    params = SpatialAttentionParams(weight, torch.zeros(1))
    gate = spatial_attention(torch.full((3, 4, 5), value), params)
    np.testing.assert_almost_equal(gate.numpy(), np.full((4, 5), 1 / (1 + np.exp(-value))), decimal=6)


@pytest.mark.parametrize("kernel_size", [2, 4])
def test_spatial_even_kernel_rejected(kernel_size):
    with pytest.raises(RuntimeError):
        SpatialAttention(kernel_size)
    with pytest.raises(RuntimeError):
        SpatialAttentionParams.zeros(kernel_size)


@pytest.mark.parametrize("seed", range(50))
def test_cbam_zero_params_scale_by_quarter(seed):
    generator = torch.Generator().manual_seed(seed)
    channels, height, width = [int(v) for v in torch.randint(1, 9, (3,), generator=generator)]
    feature_map = torch.randn(channels, height, width, generator=generator) * 5
    out = cbam_forward(feature_map, ChannelAttentionParams.zeros(channels), SpatialAttentionParams.zeros(7))
    assert out.shape == feature_map.shape
    np.testing.assert_allclose(out.numpy(), 0.25 * feature_map.numpy(), rtol=0, atol=1e-12)


def test_cbam_module_zero_init():
    feature_map = torch.randn(6, 5, 4)

    module = CBAM(6, reduction_ratio=2)
    module.zero_init()
    np.testing.assert_almost_equal(module(feature_map.unsqueeze(0))[0].detach().numpy(), 0.25 * feature_map.numpy())


def test_cbam_zero_input():
    cp, sp = _random_params(4, 2, 3, seed=0)
    out = cbam_forward(torch.zeros(4, 5, 6, dtype=torch.float64), cp, sp)
    np.testing.assert_array_equal(out.numpy(), np.zeros((4, 5, 6)))


@pytest.mark.parametrize("seed", range(5))
def test_cbam_shape_and_contraction(seed):
    cp, sp = _random_params(4, 2, 7, seed=seed)
    feature_map = torch.randn(4, 5, 6, dtype=torch.float64, generator=torch.Generator().manual_seed(100 + seed))
    out = cbam_forward(feature_map, cp, sp)
    assert out.shape == feature_map.shape
    assert torch.all(out.abs() <= feature_map.abs())


def test_cbam_order_matters():
    cp, sp = _random_params(4, 2, 7, seed=11)
    feature_map = torch.randn(4, 5, 6, dtype=torch.float64, generator=torch.Generator().manual_seed(7))
    channel_first = cbam_forward(feature_map, cp, sp)
    refined = spatial_attention(feature_map, sp)[None] * feature_map
    spatial_first = channel_attention(refined, cp)[:, None, None] * refined
    assert not torch.allclose(channel_first, spatial_first)


def _top_gap(values, dim):
    top = torch.topk(values, 2, dim=dim).values
    return (top.select(dim, 0) - top.select(dim, 1)).min().item()


def _is_smooth_point(feature_map, cp):
    """
    True when no max pooling tie nor rectifier kink lies within the finite difference step
    """
    avg = feature_map.mean(dim=(1, 2))
    mx = feature_map.amax(dim=(1, 2))
    for descriptor in (avg, mx):
        if (torch.nn.functional.linear(descriptor, cp.w1, cp.b1).abs() < 0.05).any():
            return False
    if _top_gap(feature_map.flatten(1), 1) < 0.02:
        return False
    refined = channel_attention(feature_map, cp)[:, None, None] * feature_map
    return _top_gap(refined, 0) >= 0.02


def test_cbam_gradient_finite_differences():
    checked = 0
    for seed in range(2000):
        cp, sp = _random_params(4, 2, 3, seed=seed)
        generator = torch.Generator().manual_seed(1000 + seed)
        feature_map = torch.randn(4, 5, 6, dtype=torch.float64, generator=generator)
        weights = torch.randn(4, 5, 6, dtype=torch.float64, generator=generator)
        if not _is_smooth_point(feature_map, cp):
            continue

        def loss(f, w1, b1, w2, b2, sw, sb):
            out = cbam_forward(f, ChannelAttentionParams(w1, b1, w2, b2, 2), SpatialAttentionParams(sw, sb))
            return (out * weights).sum()

        inputs = [feature_map, cp.w1, cp.b1, cp.w2, cp.b2, sp.weight, sp.bias]
        assert TestUtils.gradient_check(loss, inputs, step=1e-3)
        checked += 1
        if checked == 20:
            break
    assert checked == 20


def test_module_initialization():
    module = CBAM(64, reduction_ratio=16, kernel_size=7)
    assert module.channel.fc1.weight.shape == (4, 64)
    assert module.spatial.conv.weight.shape == (1, 2, 7, 7)
    for bias in (module.channel.fc1.bias, module.channel.fc2.bias, module.spatial.conv.bias):
        np.testing.assert_array_equal(bias.detach().numpy(), 0)
    assert module.channel.fc1.weight.abs().max() <= 1 / np.sqrt(64)
