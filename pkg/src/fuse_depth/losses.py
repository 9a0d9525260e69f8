"""Training objectives: L1 + gated cosine alignment, and scale-invariant log loss."""

from __future__ import annotations

from dataclasses import dataclass

import torch

from .tensor import check_same_shape, cosine_similarity, safe_log


@dataclass(frozen=True)
class AlignmentConfig:
    alpha: float = 0.2
    beta: float = 0.85

    def __post_init__(self):
        if not 0.0 <= self.alpha < self.beta <= 1.0:
            raise ValueError(f"need 0 <= alpha < beta <= 1, got alpha={self.alpha}, beta={self.beta}")


@dataclass(frozen=True)
class SiLogConfig:
    lam: float = 0.5

    def __post_init__(self):
        if not 0.0 <= self.lam <= 1.0:
            raise ValueError(f"lambda must lie in [0, 1], got {self.lam}")


@dataclass
class SkippedTokens:
    """Running count of zero-norm tokens dropped by the cosine term."""

    skipped: int = 0
    seen: int = 0
    max_fraction: float = 0.01

    def update(self, skipped: int, seen: int) -> None:
        self.skipped += skipped
        self.seen += seen

    @property
    def fraction(self) -> float:
        return self.skipped / self.seen if self.seen else 0.0

    def check(self) -> None:
        if self.fraction > self.max_fraction:
            raise RuntimeError(
                f"{self.skipped}/{self.seen} tokens had zero norm ({self.fraction:.1%} > {self.max_fraction:.0%})"
            )


@dataclass
class AlignTerms:
    total: torch.Tensor
    l1: torch.Tensor
    cos: torch.Tensor


def _valid(mask: torch.Tensor | None, like: torch.Tensor) -> torch.Tensor:
    if mask is None:
        return torch.ones_like(like, dtype=torch.bool)
    check_same_shape("mask", mask, like)
    return mask.bool()


def l1_loss(d: torch.Tensor, d_star: torch.Tensor, mask: torch.Tensor | None = None) -> torch.Tensor:
    """Mean absolute difference over valid pixels."""
    check_same_shape("l1_loss", d, d_star)
    valid = _valid(mask, d)
    n = int(valid.sum())
    if n == 0:
        raise ValueError("l1_loss: no valid pixels")
    return (d - d_star).abs()[valid].sum() / n


def cosine_align_loss(
    f: torch.Tensor,
    f_star: torch.Tensor,
    cfg: AlignmentConfig = AlignmentConfig(),
    counter: SkippedTokens | None = None,
) -> torch.Tensor:
    """Per-token ``(1 - cos)`` kept only where ``alpha <= cos <= beta``, averaged over tokens.

    The gate is a constant mask for differentiation. Zero-norm tokens
    contribute nothing and are tallied in ``counter``.
    """
    check_same_shape("cosine_align_loss", f, f_star)
    nonzero = (f.detach().norm(dim=-1) > 0) & (f_star.detach().norm(dim=-1) > 0)
    if counter is not None:
        counter.update(int((~nonzero).sum()), nonzero.numel())
    cos = cosine_similarity(f, f_star)
    c = cos.detach()
    gate = ((c >= cfg.alpha) & (c <= cfg.beta) & nonzero).to(cos.dtype)
    return ((1.0 - cos) * gate).sum() / cos.numel()


def align_loss(
    d: torch.Tensor,
    d_star: torch.Tensor,
    f: torch.Tensor,
    f_star: torch.Tensor,
    cfg: AlignmentConfig = AlignmentConfig(),
    mask: torch.Tensor | None = None,
    counter: SkippedTokens | None = None,
) -> AlignTerms:
    l1 = l1_loss(d, d_star, mask)
    lc = cosine_align_loss(f, f_star, cfg, counter)
    return AlignTerms(l1 + lc, l1, lc)


def silog_loss(
    d_star: torch.Tensor,
    d: torch.Tensor,
    mask: torch.Tensor | None = None,
    cfg: SiLogConfig = SiLogConfig(),
) -> torch.Tensor:
    """``sqrt(mean(e^2) - lam * mean(e)^2)`` with ``e = ln d - ln d_star`` over valid pixels.

    ``d_star`` is the prediction and ``d`` the reference depth.
    """
    check_same_shape("silog_loss", d_star, d)
    valid = _valid(mask, d)
    n = int(valid.sum())
    if n == 0:
        raise ValueError("silog_loss: no valid pixels")
    e = safe_log(d[valid]) - safe_log(d_star[valid])
    var = (e * e).mean() - cfg.lam * e.mean() ** 2
    return torch.sqrt(var.clamp_min(0.0))
