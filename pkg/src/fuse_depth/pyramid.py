"""Gaussian/Laplacian frequency decomposition of token feature maps."""

from __future__ import annotations

from dataclasses import dataclass

import torch

from .tensor import ShapeError, check_map, downsample2, resize_bilinear, separable_blur

BINOMIAL_TAPS = (1.0, 4.0, 6.0, 4.0, 1.0)
DEFAULT_LEVELS = 3


def tokens_to_grid(tokens: torch.Tensor, grid_h: int, grid_w: int) -> torch.Tensor:
    """``(batch, N, C)`` tokens to a row-major ``(batch, grid_h, grid_w, C)`` map."""
    if tokens.dim() != 3:
        raise ShapeError(f"tokens_to_grid: expected (batch, N, C), got {tuple(tokens.shape)}")
    b, n, c = tokens.shape
    if n != grid_h * grid_w:
        raise ShapeError(f"tokens_to_grid: {n} tokens do not fill a {grid_h}x{grid_w} grid")
    return tokens.reshape(b, grid_h, grid_w, c)


def grid_to_tokens(grid: torch.Tensor) -> torch.Tensor:
    check_map("grid_to_tokens", grid)
    b, h, w, c = grid.shape
    return grid.reshape(b, h * w, c)


def gaussian_blur(x: torch.Tensor) -> torch.Tensor:
    """5-tap binomial blur per channel with reflect-101 borders."""
    taps = torch.tensor(BINOMIAL_TAPS, dtype=x.dtype) / 16.0
    return separable_blur(x, taps)


@dataclass
class FrequencyPyramid:
    gaussian_levels: list[torch.Tensor]
    laplacian_levels: list[torch.Tensor]

    @property
    def levels(self) -> int:
        return len(self.laplacian_levels)


def build_pyramid(x: torch.Tensor, levels: int = DEFAULT_LEVELS) -> FrequencyPyramid:
    """Blur-and-decimate Gaussian levels plus their Laplacian differences.

    Coarse levels are upsampled bilinearly to the exact size of the finer
    level, so odd sizes need no padding.
    """
    if levels < 1:
        raise ValueError(f"build_pyramid: levels must be >= 1, got {levels}")
    check_map("build_pyramid", x)
    gauss = [x]
    for _ in range(levels):
        gauss.append(downsample2(gaussian_blur(gauss[-1])))
    lap = [
        gauss[l] - resize_bilinear(gauss[l + 1], tuple(gauss[l].shape[1:3]))
        for l in range(levels)
    ]
    return FrequencyPyramid(gauss, lap)


def reconstruct(pyramid: FrequencyPyramid) -> torch.Tensor:
    """Invert the Laplacian decomposition starting from the coarsest Gaussian level."""
    lap = pyramid.laplacian_levels
    if len(pyramid.gaussian_levels) != len(lap) + 1:
        raise ShapeError("reconstruct: need exactly one more Gaussian level than Laplacian levels")
    current = pyramid.gaussian_levels[-1]
    for level in reversed(lap):
        up = resize_bilinear(current, tuple(level.shape[1:3]))
        if up.shape != level.shape:
            raise ShapeError(
                f"reconstruct: upsampled {tuple(up.shape)} vs Laplacian level {tuple(level.shape)}"
            )
        current = level + up
    return current
