"""Image/event depth model assembled from encoders, a fusion module and a head.

Parameters are partitioned into the named groups that checkpoints and
freeze rules refer to.
"""

from __future__ import annotations

import copy
import hashlib

import numpy as np
import torch
import torch.nn as nn

from .encoders import DepthHead, EncoderConfig, ViTEncoder
from .fredfuse import CrossAttentionFusion, FreDFuse

GROUPS = (
    "image_encoder",
    "event_encoder_base",
    "event_lora",
    "event_patch_embed",
    "fredfuse",
    "depth_head",
)

IMAGE_MEAN, IMAGE_STD = 0.45, 0.225
VOXEL_SCALE = 0.25


def param_group(name: str) -> str:
    if name.startswith("image_encoder."):
        return "image_encoder"
    if name.startswith("event_encoder."):
        if ".lora_" in name:
            return "event_lora"
        if name.startswith("event_encoder.patch_embed."):
            return "event_patch_embed"
        return "event_encoder_base"
    if name.startswith("fusion."):
        return "fredfuse"
    if name.startswith("head."):
        return "depth_head"
    raise KeyError(f"parameter {name!r} belongs to no group")


def prepare_images(images: np.ndarray, dtype=None) -> torch.Tensor:
    """``(n, H, W)`` uint8 -> normalized ``(n, 3, H, W)`` tensor."""
    x = torch.as_tensor(np.asarray(images), dtype=dtype or torch.get_default_dtype()) / 255.0
    x = (x - IMAGE_MEAN) / IMAGE_STD
    return x[:, None].expand(-1, 3, -1, -1).contiguous()


def prepare_voxels(voxels: np.ndarray, dtype=None) -> torch.Tensor:
    """``(n, H, W, bins)`` -> ``(n, bins, H, W)`` tensor scaled to roughly unit range."""
    x = torch.as_tensor(np.asarray(voxels), dtype=dtype or torch.get_default_dtype())
    return (x * VOXEL_SCALE).permute(0, 3, 1, 2).contiguous()


class FuseModel(nn.Module):
    """``fusion`` is ``"fredfuse"``, ``"attention"`` or ``None`` (image-only)."""

    def __init__(
        self,
        config: EncoderConfig = EncoderConfig(),
        fusion: str | None = "fredfuse",
        event_encoder: bool = True,
        levels: int = 3,
        groups: int = 4,
        fusion_heads: int = 4,
    ):
        super().__init__()
        self.config = config
        self.fusion_kind = fusion
        self.image_encoder = ViTEncoder(config)
        self.event_encoder = ViTEncoder(config) if event_encoder else None
        if fusion == "fredfuse":
            self.fusion = FreDFuse(config.embed_dim, config.grid, levels, groups, fusion_heads)
        elif fusion == "attention":
            self.fusion = CrossAttentionFusion(config.embed_dim, fusion_heads)
        elif fusion is None:
            self.fusion = None
        else:
            raise ValueError(f"unknown fusion {fusion!r}")
        self.head = DepthHead(config)

    def init_event_from_image(self) -> None:
        """Copy image-encoder weights into the event encoder (adapters are not copied)."""
        self.event_encoder = copy.deepcopy(self.image_encoder)

    def image_depth(self, images: torch.Tensor) -> tuple[torch.Tensor, torch.Tensor]:
        tokens = self.image_encoder(images)
        return self.head(tokens), tokens

    def event_depth(self, voxels: torch.Tensor) -> tuple[torch.Tensor, torch.Tensor]:
        tokens = self.event_encoder(voxels)
        return self.head(tokens), tokens

    def fused_tokens(self, images: torch.Tensor, voxels: torch.Tensor) -> torch.Tensor:
        return self.fusion(self.image_encoder(images), self.event_encoder(voxels))

    def forward(self, images: torch.Tensor, voxels: torch.Tensor | None = None):
        if self.fusion is None:
            return self.image_depth(images)
        tokens = self.fused_tokens(images, voxels)
        return self.head(tokens), tokens

    def grouped_parameters(self) -> dict[str, list[tuple[str, nn.Parameter]]]:
        out: dict[str, list] = {g: [] for g in GROUPS}
        for name, p in self.named_parameters():
            out[param_group(name)].append((name, p))
        return out

    def set_trainable(self, groups) -> list[nn.Parameter]:
        groups = set(groups)
        unknown = groups - set(GROUPS)
        if unknown:
            raise ValueError(f"unknown groups {sorted(unknown)}")
        trainable = []
        for g, items in self.grouped_parameters().items():
            for _, p in items:
                p.requires_grad_(g in groups)
                if g in groups:
                    trainable.append(p)
        return trainable

    def group_hashes(self) -> dict[str, str]:
        """SHA-256 of each group's raw parameter bytes (in name order)."""
        out = {}
        for g, items in self.grouped_parameters().items():
            h = hashlib.sha256()
            for name, p in items:
                h.update(name.encode())
                h.update(p.detach().cpu().contiguous().numpy().tobytes())
            out[g] = h.hexdigest()
        return out

    def count_parameters(self, groups=None) -> int:
        groups = set(GROUPS) if groups is None else set(groups)
        return sum(p.numel() for g, items in self.grouped_parameters().items() if g in groups for _, p in items)
