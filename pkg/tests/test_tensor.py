import math
import zlib

import numpy as np
import pytest
import torch
import torch.nn.functional as F

from fuse_depth.tensor import (
    ShapeError,
    check_same_shape,
    cosine_similarity,
    downsample2,
    grad_check,
    grouped_conv1x1,
    precision,
    reflect101_index,
    resize_bilinear,
    safe_log,
    separable_blur,
    upsample2,
)


def test_matmul_identity():
    a = torch.tensor([[1.0, 2.0], [3.0, 4.0]])
    assert torch.equal(a @ torch.eye(2), a)


def test_softmax_uniform():
    out = torch.softmax(torch.zeros(3, dtype=torch.float64), -1)
    np.testing.assert_allclose(out.numpy(), [1 / 3] * 3, atol=1e-15)


def test_layer_norm_population_variance(f64):
    x = torch.tensor([1.0, 2.0, 3.0])
    out = F.layer_norm(x, (3,), eps=0.0)
    # population variance of [1,2,3] is 2/3
    expected = (x - 2.0) / math.sqrt(2.0 / 3.0)
    np.testing.assert_allclose(out.numpy(), expected.numpy(), atol=1e-12)
    np.testing.assert_allclose(out.numpy(), [-1.2247, 0.0, 1.2247], atol=1e-4)


def test_shape_mismatch_names_op_and_shapes():
    with pytest.raises(ShapeError, match=r"myop.*\(2, 3\).*\(3, 2\)"):
        check_same_shape("myop", torch.zeros(2, 3), torch.zeros(3, 2))


def test_log_rejects_non_positive():
    with pytest.raises(ValueError, match="non-positive"):
        safe_log(torch.tensor([1.0, 0.0]))


def test_precision_context_restores():
    before = torch.get_default_dtype()
    with precision("float64"):
        assert torch.zeros(1).dtype == torch.float64
    assert torch.get_default_dtype() == before
    with pytest.raises(ValueError):
        with precision("float16"):
            pass


@pytest.mark.parametrize("n,pad", [(1, 2), (2, 2), (3, 2), (7, 2), (4, 12)])
def test_reflect101_matches_numpy_symmetric_excluding_edge(n, pad):
    idx = reflect101_index(n, pad)
    # numpy's "reflect" mode is reflect-101; it supports pads larger than the axis
    expected = np.pad(np.arange(n), pad, mode="reflect") if n > 1 else np.zeros(n + 2 * pad, int)
    np.testing.assert_array_equal(idx.numpy(), expected)


def test_grad_check_sum_of_squares(f64):
    x = torch.tensor([1.0, 2.0, 3.0], requires_grad=True)
    err = grad_check(lambda t: (t * t).sum(), [x])
    assert err < 1e-6
    (g,) = torch.autograd.grad((x * x).sum(), [x])
    np.testing.assert_allclose(g.numpy(), [2.0, 4.0, 6.0])


def test_grad_check_softmax_component(f64, gen):
    x = torch.randn(4, generator=gen)
    assert grad_check(lambda t: torch.softmax(t, -1)[0], [x]) < 1e-4


def test_grad_check_plain_sum_is_exact(f64, gen):
    x = torch.randn(5, generator=gen)
    assert grad_check(lambda t: t.sum(), [x]) == pytest.approx(0.0, abs=1e-9)


def test_grad_check_rejects_non_scalar_and_float32():
    x64 = torch.zeros(3, dtype=torch.float64)
    with pytest.raises(ShapeError):
        grad_check(lambda t: t * 2, [x64])
    with pytest.raises(TypeError):
        grad_check(lambda t: t.sum(), [torch.zeros(3, dtype=torch.float32)])


def test_grad_check_detects_wrong_gradient(f64):
    class Bad(torch.autograd.Function):
        @staticmethod
        def forward(ctx, x):
            return x * x

        @staticmethod
        def backward(ctx, g):
            return g  # should be 2x * g

    x = torch.tensor([1.5, -2.0])
    assert grad_check(lambda t: Bad.apply(t).sum(), [x]) > 0.1


def test_forward_is_bitwise_deterministic(gen):
    x = torch.randn(2, 5, 6, 4, generator=gen)
    taps = torch.tensor([1.0, 4.0, 6.0, 4.0, 1.0]) / 16
    a = separable_blur(x, taps)
    b = separable_blur(x.clone(), taps)
    assert torch.equal(a, b)


def test_reshape_transpose_concat_preserve_values(gen):
    x = torch.randn(3, 4, generator=gen)
    y = torch.randn(2, 4, generator=gen)
    ref = np.sort(np.concatenate([x.flatten().numpy(), y.flatten().numpy()]))
    for out in (torch.cat([x, y], 0), torch.cat([x.t(), y.t()], 1), torch.cat([x.reshape(-1), y.reshape(-1)])):
        np.testing.assert_array_equal(np.sort(out.flatten().numpy()), ref)


def test_upsample_downsample_shapes(gen):
    x = torch.randn(1, 5, 3, 2, generator=gen)
    assert downsample2(x).shape == (1, 3, 2, 2)
    assert downsample2(x, "average").shape == (1, 3, 2, 2)
    assert upsample2(x).shape == (1, 10, 6, 2)
    near = upsample2(x, "nearest")
    assert torch.equal(near[:, ::2, ::2], x)
    assert resize_bilinear(x, (5, 3)) is x


def test_grouped_conv_matches_dense_block_diagonal(f64, gen):
    x = torch.randn(2, 3, 3, 4, generator=gen)
    w = torch.randn(6, 2, generator=gen)
    b = torch.randn(6, generator=gen)
    out = grouped_conv1x1(x, w, b, groups=2)
    dense = torch.zeros(6, 4)
    dense[:3, :2] = w[:3]
    dense[3:, 2:] = w[3:]
    np.testing.assert_allclose(out.numpy(), (x @ dense.t() + b).numpy(), atol=1e-12)
    with pytest.raises(ShapeError):
        grouped_conv1x1(x, torch.randn(6, 3), None, groups=2)


def test_cosine_similarity_channel_axis(f64):
    a = torch.tensor([[1.0, 0.0], [1.0, 1.0]])
    b = torch.tensor([[0.0, 1.0], [2.0, 2.0]])
    np.testing.assert_allclose(cosine_similarity(a, b).numpy(), [0.0, 1.0], atol=1e-15)


# O(h^2) truncation error dominates near-zero gradients at the default step;
# 1e-6 keeps it negligible while rounding error stays ~1e-10 in 64-bit
GRAD_STEP = 1e-6


# every op in the substrate, each grad-checked on 20 random instances (<= 64 elements)
def _ops():
    taps = torch.tensor([1.0, 4.0, 6.0, 4.0, 1.0], dtype=torch.float64) / 16
    return {
        "add": (lambda a, b: (a + b).pow(2).sum(), [(3, 4), (3, 4)]),
        "sub": (lambda a, b: (a - b).pow(2).sum(), [(3, 4), (3, 4)]),
        "mul": (lambda a, b: (a * b).sum(), [(3, 4), (3, 4)]),
        "scalar": (lambda a: ((a * 2.5 + 1.0) / 3.0).pow(2).sum(), [(5,)]),
        "matmul": (lambda a, b: (a @ b).pow(2).sum(), [(3, 4), (4, 2)]),
        "reshape": (lambda a: (a.reshape(4, 3) @ torch.arange(3.0, dtype=a.dtype)).pow(2).sum(), [(3, 4)]),
        "transpose": (lambda a: (a.t() @ torch.arange(3.0, dtype=a.dtype)).pow(2).sum(), [(3, 4)]),
        "concat": (lambda a, b: (torch.cat([a, b], -1) ** 2 * torch.arange(6.0, dtype=a.dtype)).sum(), [(2, 3), (2, 3)]),
        "upsample_bilinear": (lambda a: (upsample2(a) ** 2).sum(), [(1, 3, 2, 2)]),
        "upsample_nearest": (lambda a: (upsample2(a, "nearest") ** 3).sum(), [(1, 2, 3, 2)]),
        "downsample": (lambda a: (downsample2(a) ** 2).sum() + (downsample2(a, "average") ** 2).sum(), [(1, 5, 4, 2)]),
        "resize_bilinear": (lambda a: (resize_bilinear(a, (5, 3)) ** 2).sum(), [(1, 3, 2, 2)]),
        "grouped_conv1x1": (lambda x, w, b: (grouped_conv1x1(x, w, b, 2) ** 2).sum(), [(1, 2, 2, 4), (4, 2), (4,)]),
        "separable_blur": (lambda a: (separable_blur(a, taps) ** 2).sum(), [(1, 4, 5, 2)]),
        "softmax": (lambda a: (torch.softmax(a, -1) * torch.arange(5.0, dtype=a.dtype)).sum(), [(3, 5)]),
        "layer_norm": (lambda a, g, b: (F.layer_norm(a, (4,), g, b) * torch.arange(1.0, 13.0, dtype=a.dtype).view(3, 4)).sum(),
                       [(3, 4), (4,), (4,)]),
        "linear": (lambda x, w, b: torch.tanh(F.linear(x, w, b)).sum(), [(3, 4), (2, 4), (2,)]),
        "mean_sum": (lambda a: a.mean(0).pow(2).sum() + a.sum(1).pow(2).mean(), [(3, 4)]),
        "log": (lambda a: safe_log(a.abs() + 0.5).pow(2).sum(), [(6,)]),
        "clamp": (lambda a: a.clamp(-0.5, 0.5).pow(2).sum(), [(8,)]),
        "cosine": (lambda a, b: cosine_similarity(a, b).pow(2).sum(), [(3, 4), (3, 4)]),
    }


def op_grad_error(name, instances=20):
    """Worst relative error of ``name`` over ``instances`` seeded random inputs."""
    fn, shapes = _ops()[name]
    g = torch.Generator().manual_seed(zlib.crc32(name.encode()))
    worst = 0.0
    for _ in range(instances):
        inputs = [torch.randn(*s, generator=g, dtype=torch.float64) for s in shapes]
        if name == "clamp":
            # keep samples away from the kinks at +/-0.5
            inputs = [x + 0.2 * torch.sign(x) * (x.abs() - 0.5).abs().lt(0.01) for x in inputs]
        if name == "log":
            inputs = [x + 0.1 * torch.sign(x) for x in inputs]
        worst = max(worst, grad_check(fn, inputs, step=GRAD_STEP))
    return worst


@pytest.mark.parametrize("name", sorted(_ops()))
def test_every_op_passes_grad_check(name, f64):
    worst = op_grad_error(name)
    assert worst < 1e-4, f"{name}: max relative error {worst:.2e}"
