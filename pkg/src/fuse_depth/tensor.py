"""Tensor substrate shared by every module.

Reverse-mode differentiation is delegated to ``torch.autograd``; this module
adds the few spatial ops torch does not provide in the exact form needed
(reflect-101 separable blur, exact-size bilinear resize on channel-last maps,
grouped 1x1 convolution on channel-last maps) and an independent
central-difference gradient checker.

Axis conventions, used everywhere in the package:

* token sequences are ``(batch, tokens, channels)``
* 2D feature maps are channel-last ``(batch, height, width, channels)``
* network image inputs are channel-first ``(batch, 3, height, width)``
* voxel grids are ``(height, width, bins)`` and become ``(bins, height, width)``
  when fed to an encoder
"""

from __future__ import annotations

import contextlib
from typing import Callable, Iterator, Sequence

import torch
import torch.nn.functional as F

PRECISIONS = {"float32": torch.float32, "float64": torch.float64}


class ShapeError(ValueError):
    """Raised when an op receives operands with incompatible shapes."""


def set_precision(name: str) -> torch.dtype:
    """Set the default floating dtype ("float32" for training, "float64" for checks)."""
    try:
        dtype = PRECISIONS[name]
    except KeyError:
        raise ValueError(f"unknown precision {name!r}; expected one of {sorted(PRECISIONS)}") from None
    torch.set_default_dtype(dtype)
    return dtype


@contextlib.contextmanager
def precision(name: str) -> Iterator[torch.dtype]:
    previous = torch.get_default_dtype()
    try:
        yield set_precision(name)
    finally:
        torch.set_default_dtype(previous)


def check_same_shape(op: str, a: torch.Tensor, b: torch.Tensor) -> None:
    if a.shape != b.shape:
        raise ShapeError(f"{op}: shape mismatch {tuple(a.shape)} vs {tuple(b.shape)}")


def check_map(op: str, x: torch.Tensor) -> None:
    if x.dim() != 4:
        raise ShapeError(f"{op}: expected a (batch, H, W, C) map, got shape {tuple(x.shape)}")


def safe_log(x: torch.Tensor) -> torch.Tensor:
    """Natural log that refuses non-positive input instead of returning nan/-inf."""
    if bool((x <= 0).any()):
        raise ValueError(f"log: non-positive value (min={float(x.min()):.6g})")
    return torch.log(x)


def reflect101_index(n: int, pad: int) -> torch.Tensor:
    """Source indices for padding a length-``n`` axis by ``pad`` on both sides.

    Reflect-101 (``dcb|abcd|cba``) folded repeatedly so any pad works for any
    ``n >= 1``; a length-1 axis maps everything to index 0.
    """
    idx = torch.arange(-pad, n + pad)
    if n == 1:
        return torch.zeros_like(idx)
    period = 2 * (n - 1)
    idx = idx.remainder(period)
    return torch.where(idx >= n, period - idx, idx)


def separable_blur(x: torch.Tensor, taps: torch.Tensor) -> torch.Tensor:
    """Blur every channel of a channel-last map with ``taps`` along H then W."""
    check_map("separable_blur", x)
    k = taps.numel()
    if k % 2 == 0:
        raise ValueError(f"separable_blur: kernel length must be odd, got {k}")
    pad = k // 2
    b, h, w, c = x.shape
    taps = taps.to(dtype=x.dtype)
    y = x.index_select(1, reflect101_index(h, pad))
    # (b, H+2p, w, c) -> (b*w*c, 1, H+2p)
    y = y.permute(0, 2, 3, 1).reshape(b * w * c, 1, h + 2 * pad)
    y = F.conv1d(y, taps.view(1, 1, k)).reshape(b, w, c, h).permute(0, 3, 1, 2)
    y = y.index_select(2, reflect101_index(w, pad))
    y = y.permute(0, 1, 3, 2).reshape(b * h * c, 1, w + 2 * pad)
    y = F.conv1d(y, taps.view(1, 1, k)).reshape(b, h, c, w).permute(0, 1, 3, 2)
    return y


def resize_bilinear(x: torch.Tensor, size: tuple[int, int]) -> torch.Tensor:
    """Bilinear resize of a channel-last map to exactly ``size`` (half-pixel centres)."""
    check_map("resize_bilinear", x)
    if tuple(x.shape[1:3]) == tuple(size):
        return x
    y = F.interpolate(x.permute(0, 3, 1, 2), size=size, mode="bilinear", align_corners=False)
    return y.permute(0, 2, 3, 1)


def upsample2(x: torch.Tensor, mode: str = "bilinear") -> torch.Tensor:
    check_map("upsample2", x)
    h, w = x.shape[1:3]
    if mode == "bilinear":
        return resize_bilinear(x, (2 * h, 2 * w))
    if mode == "nearest":
        return x.repeat_interleave(2, dim=1).repeat_interleave(2, dim=2)
    raise ValueError(f"upsample2: unknown mode {mode!r}")


def downsample2(x: torch.Tensor, mode: str = "decimate") -> torch.Tensor:
    """Halve spatial dims (ceil): ``decimate`` keeps even rows/cols, ``average`` pools 2x2."""
    check_map("downsample2", x)
    if mode == "decimate":
        return x[:, ::2, ::2, :]
    if mode == "average":
        y = F.avg_pool2d(x.permute(0, 3, 1, 2), 2, ceil_mode=True)
        return y.permute(0, 2, 3, 1)
    raise ValueError(f"downsample2: unknown mode {mode!r}")


def grouped_conv1x1(
    x: torch.Tensor, weight: torch.Tensor, bias: torch.Tensor | None, groups: int
) -> torch.Tensor:
    """1x1 grouped convolution on a channel-last map.

    ``weight`` has shape ``(C_out, C_in // groups)`` as in ``torch.nn.Conv2d``.
    """
    check_map("grouped_conv1x1", x)
    c_in = x.shape[-1]
    c_out, per_group = weight.shape
    if c_in % groups or c_out % groups or per_group * groups != c_in:
        raise ShapeError(
            f"grouped_conv1x1: input channels {c_in}, weight {tuple(weight.shape)}, groups {groups}"
        )
    y = F.conv2d(x.permute(0, 3, 1, 2), weight[:, :, None, None], bias, groups=groups)
    return y.permute(0, 2, 3, 1)


def cosine_similarity(a: torch.Tensor, b: torch.Tensor, eps: float = 1e-12) -> torch.Tensor:
    """Cosine similarity along the last (channel) axis."""
    check_same_shape("cosine_similarity", a, b)
    num = (a * b).sum(-1)
    den = a.norm(dim=-1) * b.norm(dim=-1)
    return num / den.clamp_min(eps)


def grad_check(
    fn: Callable[..., torch.Tensor],
    inputs: Sequence[torch.Tensor],
    step: float = 1e-3,
) -> float:
    """Max relative error between autograd and central finite differences.

    ``fn(*inputs)`` must return a scalar. Every input is perturbed element by
    element in place (under ``no_grad``) and restored afterwards, so module
    parameters captured by ``fn`` may be passed as inputs too.
    """
    inputs = list(inputs)
    for t in inputs:
        if t.dtype != torch.float64:
            raise TypeError(f"grad_check needs float64 inputs, got {t.dtype}")
    leaves = [t if t.requires_grad else t.requires_grad_(True) for t in inputs]
    out = fn(*leaves)
    if out.numel() != 1:
        raise ShapeError(f"grad_check: function output must be scalar, got shape {tuple(out.shape)}")
    analytic = torch.autograd.grad(out, leaves, allow_unused=True)

    worst = 0.0
    with torch.no_grad():
        for t, a in zip(leaves, analytic):
            a = torch.zeros_like(t) if a is None else a
            flat = t.view(-1)
            a = a.reshape(-1)
            for i in range(flat.numel()):
                orig = flat[i].item()
                flat[i] = orig + step
                f_plus = fn(*leaves).item()
                flat[i] = orig - step
                f_minus = fn(*leaves).item()
                flat[i] = orig
                numeric = (f_plus - f_minus) / (2 * step)
                ai = a[i].item()
                err = abs(ai - numeric) / max(abs(ai), abs(numeric), 1e-8)
                worst = max(worst, err)
    return worst
