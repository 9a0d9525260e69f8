"""Frequency-decoupled image/event fusion.

Both modalities are split into Gaussian (low-frequency) and Laplacian
(high-frequency) pyramids. Each of the four pyramids is collapsed top-down
with grouped 1x1 convolutions and a channel shuffle. Two cross-attention
branches then combine them: events query images in the high band, images
query events in the low band.
"""

from __future__ import annotations

import math

import torch
import torch.nn as nn

from .pyramid import DEFAULT_LEVELS, build_pyramid, grid_to_tokens, tokens_to_grid
from .tensor import ShapeError, check_map, check_same_shape, grouped_conv1x1, resize_bilinear

INIT_STD = 0.02


def shuffle_permutation(channels: int, groups: int) -> torch.Tensor:
    """``perm[j]`` is the source channel written to output position ``j``."""
    if groups < 1 or channels % groups:
        raise ShapeError(f"channel_shuffle: {channels} channels not divisible by {groups} groups")
    per = channels // groups
    return torch.arange(channels).view(groups, per).t().reshape(-1)


def channel_shuffle(x: torch.Tensor, groups: int) -> torch.Tensor:
    """Interleave channel groups of a channel-last map.

    Source channel ``c`` lands at ``(c % per) * groups + c // per`` where
    ``per = C // groups``; with C=6, g=2 the order becomes [0, 3, 1, 4, 2, 5].
    """
    return x.index_select(-1, shuffle_permutation(x.shape[-1], groups))


def channel_unshuffle(x: torch.Tensor, groups: int) -> torch.Tensor:
    perm = shuffle_permutation(x.shape[-1], groups)
    return x.index_select(-1, torch.argsort(perm))


def init_linear(layer: nn.Linear) -> nn.Linear:
    nn.init.normal_(layer.weight, 0.0, INIT_STD)
    if layer.bias is not None:
        nn.init.zeros_(layer.bias)
    return layer


class GroupConv1x1(nn.Module):
    def __init__(self, in_channels: int, out_channels: int, groups: int):
        super().__init__()
        if in_channels % groups or out_channels % groups:
            raise ShapeError(
                f"GroupConv1x1: channels {in_channels}->{out_channels} not divisible by {groups}"
            )
        self.groups = groups
        fan_in = in_channels // groups
        self.weight = nn.Parameter(torch.empty(out_channels, fan_in))
        self.bias = nn.Parameter(torch.zeros(out_channels))
        bound = 1.0 / math.sqrt(fan_in)
        nn.init.uniform_(self.weight, -bound, bound)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        return grouped_conv1x1(x, self.weight, self.bias, self.groups)


class TopDownFusion(nn.Module):
    """Collapse a fine-to-coarse list of maps into one finest-resolution map."""

    def __init__(self, num_levels: int, channels: int, groups: int):
        super().__init__()
        self.groups = groups
        self.compress = nn.ModuleList(
            GroupConv1x1(2 * channels, channels, groups) for _ in range(num_levels - 1)
        )
        self.mix = nn.ModuleList(
            GroupConv1x1(channels, channels, groups) for _ in range(num_levels - 1)
        )

    def forward(self, levels: list[torch.Tensor]) -> torch.Tensor:
        if len(levels) != len(self.compress) + 1:
            raise ShapeError(
                f"TopDownFusion: built for {len(self.compress) + 1} levels, got {len(levels)}"
            )
        running = levels[-1]
        # transition i merges level i (finer) with the running coarser map
        for i in reversed(range(len(levels) - 1)):
            finer = levels[i]
            check_map("topdown_fuse", finer)
            up = resize_bilinear(running, tuple(finer.shape[1:3]))
            cat = torch.cat([finer, up], dim=-1)
            comp = self.compress[i](cat)
            running = self.mix[i](channel_shuffle(comp, self.groups))
        return running


class CrossAttention(nn.Module):
    """Multi-head attention with queries from one sequence and keys/values from another."""

    def __init__(self, channels: int, heads: int):
        super().__init__()
        if channels % heads:
            raise ShapeError(f"CrossAttention: {channels} channels not divisible by {heads} heads")
        self.heads = heads
        self.head_dim = channels // heads
        self.q = init_linear(nn.Linear(channels, channels))
        self.k = init_linear(nn.Linear(channels, channels))
        self.v = init_linear(nn.Linear(channels, channels))
        self.out = init_linear(nn.Linear(channels, channels))
        self.last_attention: torch.Tensor | None = None

    def _split(self, x: torch.Tensor) -> torch.Tensor:
        b, n, _ = x.shape
        return x.view(b, n, self.heads, self.head_dim).transpose(1, 2)

    def forward(self, query: torch.Tensor, kv: torch.Tensor) -> torch.Tensor:
        if query.dim() != 3 or kv.dim() != 3:
            raise ShapeError("CrossAttention: inputs must be (batch, N, C)")
        if query.shape[0] != kv.shape[0] or query.shape[2] != kv.shape[2]:
            raise ShapeError(
                f"CrossAttention: query {tuple(query.shape)} and kv {tuple(kv.shape)} "
                "must share batch and channels"
            )
        q = self._split(self.q(query))
        k = self._split(self.k(kv))
        v = self._split(self.v(kv))
        attn = torch.softmax(q @ k.transpose(-2, -1) / math.sqrt(self.head_dim), dim=-1)
        self.last_attention = attn.detach()
        y = (attn @ v).transpose(1, 2).reshape(query.shape)
        return self.out(y)


class FreDFuse(nn.Module):
    """Frequency-decoupled fusion of image and event token sequences.

    ``swap_guidance`` flips which modality queries each band (ablation switch).
    """

    def __init__(
        self,
        channels: int,
        grid_hw: tuple[int, int],
        levels: int = DEFAULT_LEVELS,
        groups: int = 4,
        heads: int = 4,
        swap_guidance: bool = False,
    ):
        super().__init__()
        self.grid_hw = tuple(grid_hw)
        self.levels = levels
        self.swap_guidance = swap_guidance
        self.low_image = TopDownFusion(levels + 1, channels, groups)
        self.high_image = TopDownFusion(levels, channels, groups)
        self.low_event = TopDownFusion(levels + 1, channels, groups)
        self.high_event = TopDownFusion(levels, channels, groups)
        self.attn_high = CrossAttention(channels, heads)
        self.attn_low = CrossAttention(channels, heads)
        self.proj = init_linear(nn.Linear(channels, channels))
        self.norm = nn.LayerNorm(channels)

    def bands(self, tokens: torch.Tensor, low: TopDownFusion, high: TopDownFusion):
        pyr = build_pyramid(tokens_to_grid(tokens, *self.grid_hw), self.levels)
        return (
            grid_to_tokens(low(pyr.gaussian_levels)),
            grid_to_tokens(high(pyr.laplacian_levels)),
        )

    def forward(self, f_image: torch.Tensor, f_event: torch.Tensor) -> torch.Tensor:
        check_same_shape("fredfuse", f_image, f_event)
        img_low, img_high = self.bands(f_image, self.low_image, self.high_image)
        evt_low, evt_high = self.bands(f_event, self.low_event, self.high_event)
        if self.swap_guidance:
            f_high = self.attn_high(img_high, evt_high)
            f_low = self.attn_low(evt_low, img_low)
        else:
            f_high = self.attn_high(evt_high, img_high)
            f_low = self.attn_low(img_low, evt_low)
        return self.norm(self.proj(f_low + f_high))

    def attention_maps(self) -> list[torch.Tensor]:
        return [a.last_attention for a in (self.attn_high, self.attn_low) if a.last_attention is not None]


class CrossAttentionFusion(nn.Module):
    """Single-band bidirectional cross-attention fusion used as the plain baseline."""

    def __init__(self, channels: int, heads: int = 4):
        super().__init__()
        self.image_query = CrossAttention(channels, heads)
        self.event_query = CrossAttention(channels, heads)
        self.proj = init_linear(nn.Linear(channels, channels))
        self.norm = nn.LayerNorm(channels)

    def forward(self, f_image: torch.Tensor, f_event: torch.Tensor) -> torch.Tensor:
        check_same_shape("cross_attention_fusion", f_image, f_event)
        fused = self.image_query(f_image, f_event) + self.event_query(f_event, f_image)
        return self.norm(self.proj(fused))
