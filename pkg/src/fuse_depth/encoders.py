"""Toy ViT encoders with LoRA adapters, and a small convolutional depth head."""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass
from typing import Iterable

import torch
import torch.nn as nn
import torch.nn.functional as F

from .fredfuse import init_linear
from .tensor import ShapeError

LORA_TARGETS = ("q", "k", "v", "proj")

PARAM_GROUPS = ("lora", "patch_embed", "fredfuse", "decoder")


@dataclass(frozen=True)
class EncoderConfig:
    image_size: tuple[int, int] = (32, 32)
    patch_size: int = 8
    embed_dim: int = 64
    depth: int = 4
    heads: int = 4
    mlp_ratio: float = 4.0
    in_chans: int = 3

    def __post_init__(self):
        h, w = self.image_size
        if h % self.patch_size or w % self.patch_size:
            raise ValueError(f"image size {self.image_size} not divisible by patch {self.patch_size}")
        if self.embed_dim % self.heads:
            raise ValueError(f"embed_dim {self.embed_dim} not divisible by heads {self.heads}")

    @property
    def grid(self) -> tuple[int, int]:
        return self.image_size[0] // self.patch_size, self.image_size[1] // self.patch_size

    @property
    def num_tokens(self) -> int:
        gh, gw = self.grid
        return gh * gw

    def to_dict(self) -> dict:
        d = asdict(self)
        d["image_size"] = list(self.image_size)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "EncoderConfig":
        d = dict(d)
        d["image_size"] = tuple(d["image_size"])
        return cls(**d)


class LoRALinear(nn.Linear):
    """Linear layer whose weight can be adapted as ``W + (alpha / r) B A``.

    ``lora_B`` starts at zero, so enabling an adapter leaves outputs unchanged.
    """

    def __init__(self, in_features: int, out_features: int, bias: bool = True):
        super().__init__(in_features, out_features, bias=bias)
        self.lora_A: nn.Parameter | None = None
        self.lora_B: nn.Parameter | None = None
        self.lora_scale = 0.0

    def enable_lora(self, rank: int, alpha: float | None = None, generator=None) -> None:
        if rank < 1:
            raise ValueError(f"LoRA rank must be >= 1, got {rank}")
        alpha = 2.0 * rank if alpha is None else alpha
        a = torch.randn(rank, self.in_features, generator=generator) / math.sqrt(rank)
        self.lora_A = nn.Parameter(a.to(self.weight.dtype))
        self.lora_B = nn.Parameter(torch.zeros(self.out_features, rank, dtype=self.weight.dtype))
        self.lora_scale = alpha / rank

    @property
    def has_lora(self) -> bool:
        return self.lora_A is not None

    def effective_weight(self) -> torch.Tensor:
        if not self.has_lora:
            return self.weight
        return self.weight + self.lora_scale * (self.lora_B @ self.lora_A)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        return F.linear(x, self.effective_weight(), self.bias)


class SelfAttention(nn.Module):
    def __init__(self, dim: int, heads: int):
        super().__init__()
        self.heads = heads
        self.head_dim = dim // heads
        self.q = init_linear(LoRALinear(dim, dim))
        self.k = init_linear(LoRALinear(dim, dim))
        self.v = init_linear(LoRALinear(dim, dim))
        self.proj = init_linear(LoRALinear(dim, dim))

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        b, n, c = x.shape

        def split(t):
            return t.view(b, n, self.heads, self.head_dim).transpose(1, 2)

        q, k, v = split(self.q(x)), split(self.k(x)), split(self.v(x))
        attn = torch.softmax(q @ k.transpose(-2, -1) / math.sqrt(self.head_dim), dim=-1)
        return self.proj((attn @ v).transpose(1, 2).reshape(b, n, c))


class Block(nn.Module):
    def __init__(self, dim: int, heads: int, mlp_ratio: float):
        super().__init__()
        hidden = int(dim * mlp_ratio)
        self.norm1 = nn.LayerNorm(dim)
        self.attn = SelfAttention(dim, heads)
        self.norm2 = nn.LayerNorm(dim)
        self.fc1 = init_linear(nn.Linear(dim, hidden))
        self.fc2 = init_linear(nn.Linear(hidden, dim))

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        x = x + self.attn(self.norm1(x))
        return x + self.fc2(F.gelu(self.fc1(self.norm2(x))))


class ViTEncoder(nn.Module):
    """Patch embedding, learned positions, pre-norm blocks and a final LayerNorm."""

    def __init__(self, config: EncoderConfig):
        super().__init__()
        self.config = config
        c = config.embed_dim
        self.patch_embed = nn.Conv2d(config.in_chans, c, config.patch_size, stride=config.patch_size)
        self.pos_embed = nn.Parameter(torch.zeros(1, config.num_tokens, c))
        nn.init.normal_(self.pos_embed, 0.0, 0.02)
        self.blocks = nn.ModuleList(
            Block(c, config.heads, config.mlp_ratio) for _ in range(config.depth)
        )
        self.norm = nn.LayerNorm(c)

    def attach_lora(self, rank: int = 4, alpha: float | None = None, seed: int = 0) -> None:
        gen = torch.Generator().manual_seed(seed)
        for block in self.blocks:
            for name in LORA_TARGETS:
                getattr(block.attn, name).enable_lora(rank, alpha, generator=gen)

    @property
    def has_lora(self) -> bool:
        return any(isinstance(m, LoRALinear) and m.has_lora for m in self.modules())

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        cfg = self.config
        if x.dim() != 4 or x.shape[1] != cfg.in_chans or tuple(x.shape[2:]) != tuple(cfg.image_size):
            raise ShapeError(
                f"encode: expected (batch, {cfg.in_chans}, {cfg.image_size[0]}, {cfg.image_size[1]}), "
                f"got {tuple(x.shape)}"
            )
        t = self.patch_embed(x).flatten(2).transpose(1, 2) + self.pos_embed
        for block in self.blocks:
            t = block(t)
        return self.norm(t)


def encode(x: torch.Tensor, encoder: ViTEncoder) -> torch.Tensor:
    return encoder(x)


class DepthHead(nn.Module):
    """Tokens -> strictly positive depth map of the input resolution.

    Projection, two (upsample x2, 3x3 conv, GELU) stages, a 1x1 projection
    to one channel, bilinear resize to full size, then ``scale * softplus``.
    """

    def __init__(self, config: EncoderConfig, hidden: int = 32, depth_scale: float = 10.0):
        super().__init__()
        self.config = config
        self.depth_scale = depth_scale
        self.proj = nn.Conv2d(config.embed_dim, hidden, 1)
        self.conv1 = nn.Conv2d(hidden, hidden, 3, padding=1)
        self.conv2 = nn.Conv2d(hidden, hidden // 2, 3, padding=1)
        self.out = nn.Conv2d(hidden // 2, 1, 1)

    def forward(self, tokens: torch.Tensor) -> torch.Tensor:
        gh, gw = self.config.grid
        b, n, c = tokens.shape
        if n != gh * gw or c != self.config.embed_dim:
            raise ShapeError(f"decode: tokens {tuple(tokens.shape)} do not match a {gh}x{gw}x{self.config.embed_dim} grid")
        x = tokens.transpose(1, 2).reshape(b, c, gh, gw)
        x = self.proj(x)
        x = F.gelu(self.conv1(F.interpolate(x, scale_factor=2, mode="bilinear", align_corners=False)))
        x = F.gelu(self.conv2(F.interpolate(x, scale_factor=2, mode="bilinear", align_corners=False)))
        x = self.out(x)
        x = F.interpolate(x, size=tuple(self.config.image_size), mode="bilinear", align_corners=False)
        return self.depth_scale * F.softplus(x[:, 0]) + 1e-3


def decode(tokens: torch.Tensor, head: DepthHead) -> torch.Tensor:
    return head(tokens)


def lora_param_count(rank: int, out_features: int, in_features: int) -> int:
    return rank * (out_features + in_features)


def _group_of(name: str) -> str | None:
    if ".lora_" in name or name.startswith("lora_"):
        return "lora"
    if "patch_embed." in name or name.startswith("patch_embed"):
        return "patch_embed"
    if name.startswith("fusion.") or "fredfuse" in name:
        return "fredfuse"
    if name.startswith("head.") or name.startswith("decoder"):
        return "decoder"
    return None


def trainable_ratio(model: nn.Module, selector: str | Iterable[str]) -> float:
    """Fraction of ``model``'s parameters that fall in the selected groups.

    ``selector`` is ``"all"``, ``"none"``, one group name or an iterable of
    names from ``lora``, ``patch_embed``, ``fredfuse``, ``decoder``.
    """
    if isinstance(selector, str):
        if selector == "all":
            return 1.0
        selected = set() if selector == "none" else {selector}
    else:
        selected = set(selector)
    unknown = selected - set(PARAM_GROUPS)
    if unknown:
        raise ValueError(f"unknown parameter group(s) {sorted(unknown)}; known: {PARAM_GROUPS}")
    total = chosen = 0
    for name, p in model.named_parameters():
        total += p.numel()
        if _group_of(name) in selected:
            chosen += p.numel()
    return chosen / total if total else 0.0
