"""Depth evaluation metrics."""

from __future__ import annotations

import csv
import io
import math
from dataclasses import astuple, dataclass, fields

import numpy as np

CUTOFFS = (10.0, 20.0, 30.0)
LOG_FLOOR = 1e-6


@dataclass
class MetricReport:
    abs_rel: float
    rmse: float
    rmse_log: float
    delta1: float
    delta2: float
    delta3: float
    avg_err_10m: float | None
    avg_err_20m: float | None
    avg_err_30m: float | None
    n_valid: int
    n_clamped: int = 0

    @classmethod
    def header(cls) -> list[str]:
        return [f.name for f in fields(cls)]

    def row(self) -> list[str]:
        return ["" if v is None else repr(v) if isinstance(v, float) else str(v) for v in astuple(self)]

    def to_csv(self) -> str:
        buf = io.StringIO()
        writer = csv.writer(buf, lineterminator="\n")
        writer.writerow(self.header())
        writer.writerow(self.row())
        return buf.getvalue()


def evaluate(
    pred: np.ndarray,
    gt: np.ndarray,
    pred_mask: np.ndarray | None = None,
    gt_mask: np.ndarray | None = None,
    depth_range: tuple[float, float] | None = None,
) -> MetricReport:
    """Standard depth metrics over pixels valid in both maps.

    Cut-off errors select pixels by ground-truth depth and are ``None`` when
    no pixel qualifies. Predictions below ``LOG_FLOOR`` are clamped for the
    log metric only.
    """
    pred = np.asarray(pred, dtype=np.float64)
    gt = np.asarray(gt, dtype=np.float64)
    if pred.shape != gt.shape:
        raise ValueError(f"evaluate: shape mismatch {pred.shape} vs {gt.shape}")
    valid = np.ones(gt.shape, bool)
    if pred_mask is not None:
        valid &= np.asarray(pred_mask, bool)
    if gt_mask is not None:
        valid &= np.asarray(gt_mask, bool)
    valid &= gt > 0
    if depth_range is not None:
        lo, hi = depth_range
        valid &= (gt >= lo) & (gt <= hi)
        pred = np.clip(pred, lo, hi)
    n = int(valid.sum())
    if n == 0:
        raise ValueError("evaluate: empty joint mask")
    p, g = pred[valid], gt[valid]
    err = np.abs(p - g)
    clamped = p < LOG_FLOOR
    pc = np.maximum(p, LOG_FLOOR)
    ratio = np.maximum(pc / g, g / pc)

    def cutoff(c):
        sel = g <= c
        return float(err[sel].mean()) if sel.any() else None

    return MetricReport(
        abs_rel=float(np.mean(err / g)),
        rmse=float(math.sqrt(np.mean(err**2))),
        rmse_log=float(math.sqrt(np.mean((np.log(pc) - np.log(g)) ** 2))),
        delta1=float(np.mean(ratio < 1.25)),
        delta2=float(np.mean(ratio < 1.25**2)),
        delta3=float(np.mean(ratio < 1.25**3)),
        avg_err_10m=cutoff(CUTOFFS[0]),
        avg_err_20m=cutoff(CUTOFFS[1]),
        avg_err_30m=cutoff(CUTOFFS[2]),
        n_valid=n,
        n_clamped=int(clamped.sum()),
    )

