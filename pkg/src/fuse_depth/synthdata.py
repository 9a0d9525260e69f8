"""Synthetic moving-shape scenes with aligned frames, depth and events.

Depth is observable from both modalities: nearer shapes are brighter
(atmospheric attenuation), larger, and move faster (parallax), so they
also fire more events.
"""

from __future__ import annotations

import json
import os
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .events import EventStream, parse_events, voxelize, write_events
from .io import read_pfm, read_pgm, write_pfm, write_pgm

FRAME_DT_US = 10_000


@dataclass(frozen=True)
class Shape:
    kind: str  # "rect" or "disk"
    center: tuple[float, float]  # (row, col) at frame 0
    size: tuple[float, float]  # half extents (rows, cols); disks use size[0] as radius
    depth: float
    albedo: float  # 8-bit intensity
    velocity: tuple[float, float] = (0.0, 0.0)  # px/frame (rows, cols)

    def mask(self, rows: np.ndarray, cols: np.ndarray, frame: int) -> np.ndarray:
        cy = self.center[0] + self.velocity[0] * frame
        cx = self.center[1] + self.velocity[1] * frame
        if self.kind == "disk":
            return (rows - cy) ** 2 + (cols - cx) ** 2 <= self.size[0] ** 2
        if self.kind == "rect":
            return (np.abs(rows - cy) <= self.size[0]) & (np.abs(cols - cx) <= self.size[1])
        raise ValueError(f"unknown shape kind {self.kind!r}")


@dataclass(frozen=True)
class SceneSpec:
    height: int = 32
    width: int = 32
    shapes: tuple[Shape, ...] = ()
    background_depth: float = 25.0
    background_albedo: float = 40.0
    frames: int = 8
    theta: float = 0.15
    seed: int = 0

    def __post_init__(self):
        if self.theta <= 0:
            raise ValueError("contrast threshold must be positive")
        if self.background_depth <= 0 or any(s.depth <= 0 for s in self.shapes):
            raise ValueError("depths must be positive")


def render_sequence(spec: SceneSpec) -> tuple[list[np.ndarray], list[np.ndarray]]:
    """Rasterize every frame; the nearest shape wins at each pixel."""
    if spec.frames < 1:
        raise ValueError("render_sequence: need at least one frame")
    rows, cols = np.mgrid[0 : spec.height, 0 : spec.width].astype(np.float64)
    # draw far to near so nearer shapes overwrite
    order = sorted(spec.shapes, key=lambda s: -s.depth)
    frames, depths = [], []
    for k in range(spec.frames):
        img = np.full((spec.height, spec.width), spec.background_albedo, np.float64)
        dep = np.full((spec.height, spec.width), spec.background_depth, np.float32)
        for s in order:
            m = s.mask(rows, cols, k)
            img[m] = s.albedo
            dep[m] = s.depth
        frames.append(np.clip(np.rint(img), 0, 255).astype(np.uint8))
        depths.append(dep)
    return frames, depths


def simulate_events(frames: list[np.ndarray], timestamps, theta: float = 0.15) -> EventStream:
    """Contrast-threshold event generation on ``log(I + 1)``.

    Each pixel keeps a reference level initialised from frame 0; log
    intensity is interpolated linearly between frames and every crossing of
    ``reference +/- theta`` emits an event with an interpolated timestamp.
    """
    if len(frames) < 2:
        raise ValueError("simulate_events: need at least two frames")
    ts = np.asarray(timestamps, dtype=np.int64)
    if len(ts) != len(frames) or np.any(np.diff(ts) <= 0):
        raise ValueError("simulate_events: timestamps must be strictly increasing, one per frame")
    h, w = frames[0].shape
    logs = [np.log(f.astype(np.float64) + 1.0) for f in frames]
    ref = logs[0].copy()
    out_t, out_x, out_y, out_p = [], [], [], []
    for k in range(len(frames) - 1):
        a, b = logs[k], logs[k + 1]
        t0, dt = ts[k], ts[k + 1] - ts[k]
        for pol in (1, -1):
            # repeat until no pixel crosses another level
            while True:
                level = ref + pol * theta
                crossed = (b - level) * pol >= 0
                if not crossed.any():
                    break
                ys, xs = np.nonzero(crossed)
                slope = b[ys, xs] - a[ys, xs]
                frac = np.where(slope != 0, (level[ys, xs] - a[ys, xs]) / np.where(slope != 0, slope, 1), 0.0)
                frac = np.clip(frac, 0.0, 1.0)
                out_t.append(t0 + np.rint(frac * dt).astype(np.int64))
                out_x.append(xs)
                out_y.append(ys)
                out_p.append(np.full(len(xs), pol, np.int64))
                ref[ys, xs] = level[ys, xs]
    if not out_t:
        return EventStream(w, h)
    t = np.concatenate(out_t)
    x = np.concatenate(out_x)
    y = np.concatenate(out_y)
    p = np.concatenate(out_p)
    order = np.lexsort((x, y, t))
    return EventStream(w, h, t[order], x[order], y[order], p[order])


def random_scene(rng: np.random.Generator, height: int = 32, width: int = 32, frames: int = 8,
                 theta: float = 0.15, seed: int = 0) -> SceneSpec:
    shapes = []
    for _ in range(int(rng.integers(1, 4))):
        depth = float(rng.uniform(2.0, 15.0))
        radius = float(np.clip(28.0 / depth + rng.normal(0.0, 0.5), 1.5, 12.0))
        speed = 8.0 / depth
        angle = rng.uniform(0.0, 2.0 * np.pi)
        albedo = 255.0 * rng.uniform(0.85, 1.0) * np.exp(-depth / 12.0)
        kind = "disk" if rng.random() < 0.5 else "rect"
        aspect = rng.uniform(0.6, 1.4) if kind == "rect" else 1.0
        center = (rng.uniform(0, height), rng.uniform(0, width))
        shapes.append(
            Shape(kind, center, (radius, radius * aspect), round(depth, 3), float(albedo),
                  (speed * np.sin(angle), speed * np.cos(angle)))
        )
    return SceneSpec(
        height=height,
        width=width,
        shapes=tuple(shapes),
        background_depth=float(rng.uniform(20.0, 30.0)),
        background_albedo=float(rng.uniform(15.0, 30.0)),
        frames=frames,
        theta=theta,
        seed=seed,
    )


@dataclass
class Triplet:
    image: np.ndarray  # (H, W) uint8, last frame
    events: EventStream
    depth: np.ndarray  # (H, W) float32, depth at the last frame
    spec: SceneSpec | None = None


def make_triplet(spec: SceneSpec) -> Triplet:
    frames, depths = render_sequence(spec)
    ts = np.arange(spec.frames, dtype=np.int64) * FRAME_DT_US
    events = simulate_events(frames, ts, spec.theta)
    return Triplet(frames[-1], events, depths[-1], spec)


@dataclass
class Dataset:
    """Stacked arrays: images ``(n,H,W)`` uint8, voxels ``(n,H,W,bins)``, depths ``(n,H,W)``."""

    images: np.ndarray
    voxels: np.ndarray
    depths: np.ndarray
    event_counts: np.ndarray = field(default_factory=lambda: np.zeros(0, np.int64))

    def __len__(self) -> int:
        return len(self.images)

    def subset(self, idx) -> "Dataset":
        idx = np.asarray(idx)
        if idx.dtype != bool:
            idx = idx.astype(np.int64)
        counts = self.event_counts[idx] if len(self.event_counts) else self.event_counts
        return Dataset(self.images[idx], self.voxels[idx], self.depths[idx], counts)


def generate_triplets(n: int, seed: int, height: int = 32, width: int = 32, frames: int = 8,
                      theta: float = 0.15) -> list[Triplet]:
    out = []
    for i in range(n):
        rng = np.random.default_rng([seed, i])
        out.append(make_triplet(random_scene(rng, height, width, frames, theta, seed)))
    return out


def triplets_to_dataset(triplets: list[Triplet], bins: int = 3) -> Dataset:
    return Dataset(
        images=np.stack([t.image for t in triplets]),
        voxels=np.stack([voxelize(t.events, bins, np.float32) for t in triplets]),
        depths=np.stack([t.depth for t in triplets]).astype(np.float32),
        event_counts=np.array([len(t.events) for t in triplets], np.int64),
    )


def make_dataset(n: int, seed: int, height: int = 32, width: int = 32, bins: int = 3, **kw) -> Dataset:
    return triplets_to_dataset(generate_triplets(n, seed, height, width, **kw), bins)


def write_dataset(triplets: list[Triplet], out_dir: str | os.PathLike, meta: dict | None = None) -> Path:
    """Frames as PGM, depth as PFM, events as CSV, plus ``manifest.json`` listing the triplets."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    entries = []
    for i, t in enumerate(triplets):
        stem = f"sample_{i:05d}"
        write_pgm(out / f"{stem}.pgm", t.image)
        write_pfm(out / f"{stem}.pfm", t.depth)
        write_events(t.events, out / f"{stem}.csv")
        entries.append({"image": f"{stem}.pgm", "depth": f"{stem}.pfm", "events": f"{stem}.csv",
                        "num_events": len(t.events)})
    h, w = triplets[0].image.shape if triplets else (0, 0)
    manifest = {"height": int(h), "width": int(w), "samples": entries, **(meta or {})}
    (out / "manifest.json").write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")
    return out


def load_dataset(data_dir: str | os.PathLike, bins: int = 3) -> Dataset:
    root = Path(data_dir)
    manifest = json.loads((root / "manifest.json").read_text())
    h, w = manifest["height"], manifest["width"]
    images, voxels, depths, counts = [], [], [], []
    for e in manifest["samples"]:
        stream = parse_events(root / e["events"], w, h)
        images.append(read_pgm(root / e["image"]))
        depths.append(read_pfm(root / e["depth"]))
        voxels.append(voxelize(stream, bins, np.float32))
        counts.append(len(stream))
    return Dataset(np.stack(images), np.stack(voxels), np.stack(depths), np.array(counts, np.int64))
