"""Random image/event corruption used to train and stress the fusion module."""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass

import numpy as np
from scipy.ndimage import convolve1d

KINDS = ("blur", "overexposure", "occlusion")


@dataclass(frozen=True)
class DegradationConfig:
    brightness_range: tuple[float, float] = (0.5, 1.5)
    local_prob: float = 0.5
    region_frac: float = 0.2
    blur_kernel: int = 25
    blur_sigma: float = 2.0
    overexposure_gain: float = 2.5
    overexposure_offset: float = 200.0
    kinds: tuple[str, ...] = KINDS
    rng_seed: int = 0

    def __post_init__(self):
        lo, hi = self.brightness_range
        if not 0 <= lo <= hi:
            raise ValueError(f"bad brightness range {self.brightness_range}")
        if not 0.0 <= self.local_prob <= 1.0:
            raise ValueError(f"local_prob must be in [0, 1], got {self.local_prob}")
        if not 0.0 < self.region_frac <= 1.0:
            raise ValueError(f"region_frac must be in (0, 1], got {self.region_frac}")
        if self.blur_kernel % 2 == 0 or self.blur_kernel < 1:
            raise ValueError(f"blur kernel must be odd, got {self.blur_kernel}")
        unknown = set(self.kinds) - set(KINDS)
        if unknown or not self.kinds:
            raise ValueError(f"unknown degradation kinds {sorted(unknown)}")

    def region_size(self, height: int, width: int) -> tuple[int, int]:
        rh, rw = int(self.region_frac * height), int(self.region_frac * width)
        if rh < 1 or rw < 1 or rh > height or rw > width:
            raise ValueError(f"region {rh}x{rw} does not fit a {height}x{width} image")
        return rh, rw


IDENTITY = DegradationConfig(brightness_range=(1.0, 1.0), local_prob=0.0)


@dataclass
class DegradationRecord:
    seed: int
    brightness: float
    local: bool
    kind: str | None = None
    top: int | None = None
    left: int | None = None
    height: int | None = None
    width: int | None = None

    def to_json(self) -> str:
        return json.dumps(asdict(self), sort_keys=True)

    @property
    def region(self) -> tuple[slice, slice] | None:
        if not self.local:
            return None
        return slice(self.top, self.top + self.height), slice(self.left, self.left + self.width)


def sample_seed(base_seed: int, index: int) -> int:
    """Per-sample seed so results do not depend on how samples are batched or sharded."""
    return int(base_seed) ^ int(index)


def gaussian_kernel(size: int, sigma: float) -> np.ndarray:
    x = np.arange(size, dtype=np.float64) - (size - 1) / 2
    k = np.exp(-0.5 * (x / sigma) ** 2)
    return k / k.sum()


def gaussian_blur_2d(a: np.ndarray, size: int, sigma: float) -> np.ndarray:
    """Separable blur over the first two axes (any trailing channel axes kept)."""
    k = gaussian_kernel(size, sigma)
    out = convolve1d(np.asarray(a, np.float64), k, axis=0, mode="mirror")
    return convolve1d(out, k, axis=1, mode="mirror")


def to_uint8(a: np.ndarray) -> np.ndarray:
    return np.clip(np.rint(a), 0, 255).astype(np.uint8)


def overexpose(values: np.ndarray, gain: float, offset: float) -> np.ndarray:
    return to_uint8(gain * np.asarray(values, np.float64) + offset)


def degrade_pair(
    image: np.ndarray,
    voxel: np.ndarray,
    cfg: DegradationConfig = DegradationConfig(),
    seed: int | None = None,
) -> tuple[np.ndarray, np.ndarray, DegradationRecord]:
    """Apply brightness jitter to the image, then maybe one local degradation.

    ``image`` is ``(H, W)`` uint8 and ``voxel`` is ``(H, W, bins)``. Blur and
    occlusion hit both modalities inside the region; overexposure hits the
    image only. Inputs are never modified.
    """
    image = np.asarray(image)
    voxel = np.asarray(voxel)
    if image.dtype != np.uint8 or image.ndim != 2:
        raise ValueError("degrade_pair: image must be a 2D uint8 array")
    h, w = image.shape
    if voxel.shape[:2] != (h, w):
        raise ValueError(f"degrade_pair: voxel {voxel.shape} does not match image {image.shape}")
    rh, rw = cfg.region_size(h, w)
    seed = cfg.rng_seed if seed is None else seed
    rng = np.random.default_rng(seed)

    factor = float(rng.uniform(*cfg.brightness_range))
    out_img = to_uint8(image.astype(np.float64) * factor)
    out_vox = voxel.copy()
    record = DegradationRecord(seed=int(seed), brightness=factor, local=False)

    if rng.random() < cfg.local_prob:
        kind = cfg.kinds[int(rng.integers(len(cfg.kinds)))]
        top = int(rng.integers(0, h - rh + 1))
        left = int(rng.integers(0, w - rw + 1))
        region = (slice(top, top + rh), slice(left, left + rw))
        if kind == "blur":
            out_img[region] = to_uint8(gaussian_blur_2d(out_img, cfg.blur_kernel, cfg.blur_sigma)[region])
            out_vox[region] = gaussian_blur_2d(voxel, cfg.blur_kernel, cfg.blur_sigma)[region].astype(voxel.dtype)
        elif kind == "overexposure":
            out_img[region] = overexpose(out_img[region], cfg.overexposure_gain, cfg.overexposure_offset)
        else:
            out_img[region] = 0
            out_vox[region] = 0
        record = DegradationRecord(int(seed), factor, True, kind, top, left, rh, rw)
    return out_img, out_vox, record


def occlude_image(image: np.ndarray, frac: float, rng: np.random.Generator) -> tuple[np.ndarray, tuple[slice, slice]]:
    """Black out one random ``frac x frac`` region of the image only."""
    h, w = image.shape[:2]
    rh, rw = int(frac * h), int(frac * w)
    top = int(rng.integers(0, h - rh + 1))
    left = int(rng.integers(0, w - rw + 1))
    region = (slice(top, top + rh), slice(left, left + rw))
    out = np.array(image, copy=True)
    out[region] = 0
    return out, region
