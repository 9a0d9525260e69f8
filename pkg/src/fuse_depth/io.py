"""PGM, PFM and stacked-voxel file formats."""

from __future__ import annotations

import os
import re
from pathlib import Path

import numpy as np


def write_pgm(path: str | os.PathLike, image: np.ndarray) -> None:
    image = np.asarray(image)
    if image.dtype != np.uint8 or image.ndim != 2:
        raise ValueError("write_pgm: need a 2D uint8 array")
    h, w = image.shape
    with open(path, "wb") as fh:
        fh.write(f"P5\n{w} {h}\n255\n".encode("ascii"))
        fh.write(np.ascontiguousarray(image).tobytes())


_HEADER_TOKEN = re.compile(rb"\s*(#[^\n]*\n\s*)*(\S+)")


def _tokens(data: bytes, count: int) -> tuple[list[bytes], int]:
    """First ``count`` header tokens (``#`` comments skipped) and the data offset."""
    out, pos = [], 0
    while len(out) < count:
        m = _HEADER_TOKEN.match(data, pos)
        if m is None:
            raise ValueError("truncated header")
        out.append(m.group(2))
        pos = m.end()
    return out, pos + 1  # single whitespace byte after the last token


def read_pgm(path: str | os.PathLike) -> np.ndarray:
    data = Path(path).read_bytes()
    (magic, w, h, maxval), off = _tokens(data, 4)
    if magic != b"P5":
        raise ValueError(f"{path}: not a binary PGM (magic {magic!r})")
    w, h, maxval = int(w), int(h), int(maxval)
    if maxval != 255:
        raise ValueError(f"{path}: only 8-bit PGM supported (maxval {maxval})")
    pixels = np.frombuffer(data, np.uint8, count=w * h, offset=off)
    return pixels.reshape(h, w).copy()


def write_pfm(path: str | os.PathLike, array: np.ndarray) -> None:
    """Grayscale little-endian PFM; rows are stored bottom-to-top as the format requires."""
    a = np.asarray(array, dtype="<f4")
    if a.ndim != 2:
        raise ValueError("write_pfm: need a 2D array")
    h, w = a.shape
    with open(path, "wb") as fh:
        fh.write(f"Pf\n{w} {h}\n-1.0\n".encode("ascii"))
        fh.write(np.ascontiguousarray(a[::-1]).tobytes())


def read_pfm(path: str | os.PathLike) -> np.ndarray:
    data = Path(path).read_bytes()
    (magic, w, h, scale), off = _tokens(data, 4)
    if magic != b"Pf":
        raise ValueError(f"{path}: only grayscale PFM ('Pf') supported, got {magic!r}")
    w, h, scale = int(w), int(h), float(scale)
    dtype = "<f4" if scale < 0 else ">f4"
    a = np.frombuffer(data, dtype, count=w * h, offset=off).reshape(h, w)
    return a[::-1].astype(np.float32)


def write_voxel(path: str | os.PathLike, voxel: np.ndarray) -> None:
    """Bins stacked vertically into one PFM plus a ``<path>.txt`` sidecar naming the bin count."""
    voxel = np.asarray(voxel)
    h, w, bins = voxel.shape
    write_pfm(path, voxel.transpose(2, 0, 1).reshape(bins * h, w))
    Path(str(path) + ".txt").write_text(f"bins = {bins}\nheight = {h}\nwidth = {w}\n", encoding="ascii")


def read_voxel(path: str | os.PathLike) -> np.ndarray:
    meta = {}
    for line in Path(str(path) + ".txt").read_text(encoding="ascii").splitlines():
        if line.strip():
            k, v = (s.strip() for s in line.split("=", 1))
            meta[k] = int(v)
    stacked = read_pfm(path)
    bins, h, w = meta["bins"], meta["height"], meta["width"]
    if stacked.shape != (bins * h, w):
        raise ValueError(f"{path}: stacked shape {stacked.shape} disagrees with sidecar {meta}")
    return stacked.reshape(bins, h, w).transpose(1, 2, 0).copy()
