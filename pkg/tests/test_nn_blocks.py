import pytest
import torch

from src.config import GraphError, NormMode, ShapeError
from src.nn_blocks import (
    AffineStats,
    ConvBlock,
    ConvSpec,
    ResidualBlock,
    ResidualParams,
    activation,
    adain,
    backward,
    conv2d,
    downsample_avg2x,
    fully_connected,
    global_avg_pool,
    instance_norm,
    leaky_relu,
    nearest_upsample2x,
    residual_block,
)

GRADCHECK = dict(eps=1e-4, atol=1e-6, rtol=1e-3)


def rand(*shape, seed=0):
    g = torch.Generator().manual_seed(seed)
    return torch.randn(*shape, generator=g, dtype=torch.float64)


def test_conv2d_sums_window():
    x = torch.arange(9, dtype=torch.float64).view(1, 1, 3, 3)
    spec = ConvSpec(1, 1, 2, has_bias=False)
    out = conv2d(x, spec, torch.ones(1, 1, 2, 2, dtype=torch.float64))
    assert out.squeeze().tolist() == [[8.0, 12.0], [20.0, 24.0]]


@pytest.mark.parametrize("size, kernel, stride, padding, expected", [
    (32, 7, 1, 3, 32),
    (32, 4, 2, 1, 16),
    (16, 4, 2, 1, 8),
    (1, 4, 2, 1, 1),
])
def test_conv_output_size(size, kernel, stride, padding, expected):
    assert ConvSpec(1, 1, kernel, stride, padding).output_size(size) == expected


def test_conv_rejects_too_small_input():
    spec = ConvSpec(1, 1, 5)
    with pytest.raises(ShapeError, match="too small"):
        conv2d(torch.zeros(1, 1, 3, 3), spec, torch.zeros(1, 1, 5, 5), torch.zeros(1))


def test_conv_rejects_channel_mismatch():
    spec = ConvSpec(2, 1, 3, padding=1)
    with pytest.raises(ShapeError, match="input channels"):
        conv2d(torch.zeros(1, 3, 4, 4), spec, torch.zeros(1, 2, 3, 3), torch.zeros(1))


def test_instance_norm_standardizes_each_channel():
    x = rand(1, 1000, 8, 8) * 3.0 + 5.0
    y = instance_norm(x)
    assert y.mean(dim=(2, 3)).abs().max() < 1e-6
    std = y.var(dim=(2, 3), correction=0).sqrt()
    assert (std - 1.0).abs().max() < 1e-3


def test_adain_moves_statistics_to_gamma_beta():
    x = rand(1, 1000, 8, 8, seed=1) * 2.0 - 1.0
    gamma = rand(1000, seed=2)
    beta = rand(1000, seed=3)
    y = adain(x, AffineStats(gamma, beta))
    assert torch.allclose(y.mean(dim=(2, 3))[0], beta, atol=1e-6)
    std = y.var(dim=(2, 3), correction=0).sqrt()[0]
    assert torch.allclose(std, gamma.abs(), atol=1e-3)


def test_adain_accepts_per_sample_parameters():
    x = rand(2, 3, 4, 4)
    stats = AffineStats(torch.ones(2, 3, dtype=torch.float64), torch.zeros(2, 3, dtype=torch.float64))
    assert torch.allclose(adain(x, stats), instance_norm(x))
    with pytest.raises(ShapeError):
        adain(x, AffineStats(torch.ones(4, dtype=torch.float64), torch.zeros(4, dtype=torch.float64)))


def test_upsample_and_downsample():
    x = torch.tensor([[1.0, 2.0], [3.0, 4.0]]).view(1, 1, 2, 2)
    up = nearest_upsample2x(x)
    assert up.shape == (1, 1, 4, 4)
    assert up[0, 0, :2, :2].eq(1.0).all() and up[0, 0, 2:, 2:].eq(4.0).all()
    assert torch.equal(downsample_avg2x(up), x)
    with pytest.raises(ShapeError, match="even"):
        downsample_avg2x(torch.zeros(1, 1, 3, 4))


def test_leaky_relu_and_activation_names():
    x = torch.tensor([-1.0, 2.0])
    assert leaky_relu(x).tolist() == pytest.approx([-0.2, 2.0])
    assert activation(x, "relu").tolist() == [0.0, 2.0]
    with pytest.raises(ValueError, match="Unknown activation"):
        activation(x, "gelu")


def test_global_pool_and_fully_connected():
    x = rand(2, 3, 4, 4)
    pooled = global_avg_pool(x)
    assert pooled.shape == (2, 3)
    out = fully_connected(pooled, rand(5, 3), rand(5))
    assert out.shape == (2, 5)
    with pytest.raises(ShapeError):
        fully_connected(pooled, rand(5, 4))


def _residual_params(channels, seed=0):
    return ResidualParams(
        rand(channels, channels, 3, 3, seed=seed) * 0.3,
        rand(channels, seed=seed + 1) * 0.1,
        rand(channels, channels, 3, 3, seed=seed + 2) * 0.3,
        rand(channels, seed=seed + 3) * 0.1,
    )


def test_adain_residual_block_needs_two_stats():
    with pytest.raises(ShapeError, match="two AffineStats"):
        residual_block(rand(1, 2, 4, 4), _residual_params(2), NormMode.ADAIN, stats=None)


@pytest.mark.parametrize("name, fn, shapes", [
    ("conv2d", lambda x, w, b: conv2d(x, ConvSpec(2, 3, 3, 2, 1), w, b), [(1, 2, 6, 6), (3, 2, 3, 3), (3,)]),
    ("instance_norm", lambda x: instance_norm(x), [(2, 3, 4, 4)]),
    ("adain", lambda x, g, b: adain(x, AffineStats(g, b)), [(1, 3, 4, 4), (3,), (3,)]),
    ("leaky_relu", lambda x: leaky_relu(x), [(1, 2, 3, 3)]),
    ("upsample", lambda x: nearest_upsample2x(x), [(1, 2, 3, 3)]),
    ("downsample", lambda x: downsample_avg2x(x), [(1, 2, 4, 4)]),
    ("global_avg_pool", lambda x: global_avg_pool(x), [(2, 2, 3, 3)]),
    ("fully_connected", lambda v, w, b: fully_connected(v, w, b), [(2, 3), (4, 3), (4,)]),
])
def test_block_gradients_match_finite_differences(name, fn, shapes):
    inputs = [rand(*shape, seed=i).requires_grad_() for i, shape in enumerate(shapes)]
    if name == "leaky_relu":
        # Keep samples away from the kink at zero.
        inputs[0] = (inputs[0].detach() + inputs[0].detach().sign() * 0.1).requires_grad_()
    assert torch.autograd.gradcheck(fn, inputs, **GRADCHECK)


@pytest.mark.parametrize("norm_mode", [NormMode.IN, NormMode.ADAIN])
def test_residual_block_gradients(norm_mode):
    channels = 2
    x = rand(1, channels, 5, 5, seed=7).requires_grad_()
    p = _residual_params(channels, seed=11)
    tensors = [t.clone().requires_grad_() for t in (p.weight1, p.bias1, p.weight2, p.bias2)]
    gammas = [(1.0 + 0.2 * rand(channels, seed=20 + i)).requires_grad_() for i in range(2)]
    betas = [(0.1 * rand(channels, seed=30 + i)).requires_grad_() for i in range(2)]

    def fn(x, w1, b1, w2, b2, g1, g2, c1, c2):
        stats = [AffineStats(g1, c1), AffineStats(g2, c2)] if norm_mode is NormMode.ADAIN else None
        return residual_block(x, ResidualParams(w1, b1, w2, b2), norm_mode, stats, act="tanh")

    assert torch.autograd.gradcheck(fn, [x, *tensors, *gammas, *betas], **GRADCHECK)


def test_backward_matches_closed_form():
    x = rand(3).requires_grad_()
    (grad,) = backward((x**2).sum(), [x])
    assert torch.allclose(grad, 2 * x.detach())


def test_backward_seed_gradient_scales_result():
    x = rand(3).requires_grad_()
    (grad,) = backward(x * 3.0, [x], torch.full((3,), 2.0, dtype=torch.float64))
    assert torch.allclose(grad, torch.full((3,), 6.0, dtype=torch.float64))


def test_backward_rejects_inputs_outside_graph():
    x = rand(3).requires_grad_()
    unused = rand(3).requires_grad_()
    with pytest.raises(GraphError, match="not part of the recorded graph"):
        backward((x**2).sum(), [x, unused])
    with pytest.raises(GraphError, match="do not require gradients"):
        backward((x**2).sum(), [x, rand(3)])


def test_conv_block_and_residual_block_shapes():
    block = ConvBlock(1, 4, 4, 2, 1, norm="ln")
    assert block(torch.randn(2, 1, 8, 8)).shape == (2, 4, 4, 4)
    res = ResidualBlock(4)
    x = torch.randn(1, 4, 6, 6)
    assert res(x).shape == x.shape
    with pytest.raises(ValueError, match="Unknown norm"):
        ConvBlock(1, 1, 3, norm="bn")


# --- Direct oracles ---
def conv2d_loops(x, weight, bias, stride, padding):
    batch, _, height, width = x.shape
    out_channels, in_channels, k, _ = weight.shape
    padded = torch.zeros(batch, in_channels, height + 2 * padding, width + 2 * padding, dtype=x.dtype)
    padded[:, :, padding: padding + height, padding: padding + width] = x
    out_h = (height + 2 * padding - k) // stride + 1
    out_w = (width + 2 * padding - k) // stride + 1
    out = torch.zeros(batch, out_channels, out_h, out_w, dtype=x.dtype)
    for b in range(batch):
        for o in range(out_channels):
            for i in range(out_h):
                for j in range(out_w):
                    total = float(bias[o])
                    for c in range(in_channels):
                        for u in range(k):
                            for v in range(k):
                                total += float(padded[b, c, i * stride + u, j * stride + v]) * float(weight[o, c, u, v])
                    out[b, o, i, j] = total
    return out


@pytest.mark.parametrize("stride, padding", [(1, 0), (1, 1), (2, 1)])
def test_conv2d_matches_nested_loops(stride, padding):
    x, weight, bias = rand(2, 2, 5, 5), rand(3, 2, 3, 3, seed=1), rand(3, seed=2)
    out = conv2d(x, ConvSpec(2, 3, 3, stride, padding), weight, bias)
    assert torch.allclose(out, conv2d_loops(x, weight, bias, stride, padding), rtol=0, atol=1e-10)


def test_identity_kernel_returns_input():
    x = rand(1, 1, 3, 3)
    out = conv2d(x, ConvSpec(1, 1, 1, has_bias=False), torch.ones(1, 1, 1, 1, dtype=torch.float64))
    assert torch.equal(out, x)


def test_instance_norm_of_constant_channel_is_zero():
    x = torch.full((1, 2, 4, 4), 5.0, dtype=torch.float64)
    assert instance_norm(x, eps=1e-5).eq(0.0).all()


def test_adain_of_constant_channel_is_beta():
    x = torch.full((1, 3, 4, 4), 5.0, dtype=torch.float64)
    beta = torch.tensor([0.5, -1.0, 2.0], dtype=torch.float64)
    y = adain(x, AffineStats(torch.tensor([3.0, 0.1, -2.0], dtype=torch.float64), beta))
    assert torch.equal(y, beta.view(1, 3, 1, 1).expand_as(y))


def test_downsample_matches_window_means():
    x = rand(2, 3, 6, 4)
    out = downsample_avg2x(x)
    assert out.shape == (2, 3, 3, 2)
    for i in range(3):
        for j in range(2):
            window = x[:, :, 2 * i: 2 * i + 2, 2 * j: 2 * j + 2]
            assert torch.allclose(out[:, :, i, j], window.mean(dim=(2, 3)), rtol=0, atol=1e-12)


def test_global_pool_of_constant_channel():
    assert global_avg_pool(torch.full((1, 2, 3, 3), 0.7, dtype=torch.float64)).tolist() == [[pytest.approx(0.7)] * 2]


def test_fully_connected_matches_dot_products():
    v, weight, bias = rand(2, 3), rand(4, 3, seed=1), rand(4, seed=2)
    out = fully_connected(v, weight, bias)
    for b in range(2):
        for o in range(4):
            expected = sum(float(v[b, i]) * float(weight[o, i]) for i in range(3)) + float(bias[o])
            assert float(out[b, o]) == pytest.approx(expected, abs=1e-12)
    eye = torch.eye(3, dtype=torch.float64)
    assert torch.equal(fully_connected(v, eye, torch.zeros(3, dtype=torch.float64)), v)


def test_residual_block_with_zero_weights_is_identity():
    x = rand(1, 2, 5, 5)
    zeros = ResidualParams(*(torch.zeros_like(t) for t in _residual_params(2)))
    assert torch.equal(residual_block(x, zeros), x)
    stats = [AffineStats(rand(2, seed=4), torch.zeros(2, dtype=torch.float64)) for _ in range(2)]
    assert torch.equal(residual_block(x, zeros, NormMode.ADAIN, stats), x)
