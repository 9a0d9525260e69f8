"""Parameter counts, FLOP estimates and CPU latency of the toy models."""

from __future__ import annotations

import time
from dataclasses import dataclass

import torch
from torch.utils.flop_counter import FlopCounterMode

from .encoders import EncoderConfig
from .models import FuseModel

CONFIGS = (("image_only", None), ("attention_fusion", "attention"), ("fuse", "fredfuse"))


@dataclass
class BenchRow:
    name: str
    params_m: float
    gflops: float
    latency_ms: float


def count_flops(model: FuseModel, images: torch.Tensor, voxels: torch.Tensor) -> int:
    with torch.no_grad(), FlopCounterMode(display=False) as counter:
        model(images, voxels)
    return counter.get_total_flops()


def run_bench(batch: int = 1, repeats: int = 20, seed: int = 0, threads: int = 1,
              config: EncoderConfig = EncoderConfig()) -> list[BenchRow]:
    torch.manual_seed(seed)
    torch.set_num_threads(threads)
    h, w = config.image_size
    images = torch.randn(batch, config.in_chans, h, w)
    voxels = torch.randn(batch, config.in_chans, h, w)
    rows = []
    for name, fusion in CONFIGS:
        model = FuseModel(config, fusion=fusion, event_encoder=fusion is not None).eval()
        flops = count_flops(model, images, voxels)
        with torch.no_grad():
            model(images, voxels)  # warm-up
            times = []
            for _ in range(max(repeats, 1)):
                t0 = time.perf_counter()
                model(images, voxels)
                times.append(time.perf_counter() - t0)
        times.sort()
        rows.append(BenchRow(name, model.count_parameters() / 1e6, flops / 1e9, 1e3 * times[len(times) // 2]))
    return rows
