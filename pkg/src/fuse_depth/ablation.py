"""Toy-scale ablation: fusion type and transfer strategy compared on degraded test data.

Variants
--------
baseline1  dual encoders + plain cross-attention fusion, trained from scratch on labels
baseline2  dual encoders + FreDFuse, trained from scratch on labels
baseline3  teacher transfer in one stage (adapters + fusion together), then head fine-tune
fuse       teacher, stage I, stage II, then head fine-tune
image_only teacher image branch with its head fine-tuned (robustness reference)

The labelled set is deliberately small and the teacher's image-only set
large, mirroring scarce image-event-depth data next to plentiful image-depth
data.
"""

from __future__ import annotations

import csv
import io
import logging
import statistics
import time
from dataclasses import asdict, dataclass, field

import numpy as np

from .degradation import DegradationConfig
from .metrics import MetricReport, evaluate
from .pipelines import (
    TrainConfig,
    finetune,
    predict,
    pretrain_teacher,
    run_onestage,
    run_stage1,
    run_stage2,
    train_from_scratch,
)
from .synthdata import Dataset, make_dataset

log = logging.getLogger(__name__)

VARIANTS = ("baseline1", "baseline2", "baseline3", "fuse", "image_only")

# dataset seed offsets so splits never share scenes
SPLITS = {"foundation": 11, "pairs": 23, "labeled": 37, "test": 53}


@dataclass(frozen=True)
class AblationConfig:
    seeds: tuple[int, ...] = (0, 1, 2)
    foundation_samples: int = 512
    pair_samples: int = 256
    labeled_samples: int = 32
    test_samples: int = 128
    teacher_steps: int = 3000
    stage1_steps: int = 500
    stage2_steps: int = 1500
    finetune_steps: int = 500
    # labelled-only baselines get the same step budget as stage I + II + finetune
    scratch_steps: int = 2500
    learning_rate: float = 2e-4
    batch_size: int = 8
    occlusion_frac: float = 0.2
    test_degradation: DegradationConfig = field(default_factory=DegradationConfig)
    train_degradation: DegradationConfig = field(default_factory=DegradationConfig)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["seeds"] = list(self.seeds)
        return d


@dataclass
class SeedResult:
    seed: int
    reports: dict[str, MetricReport]
    occluded: dict[str, MetricReport]
    clean: dict[str, MetricReport]
    trainable: dict[str, int]
    seconds: float


def split(name: str, n: int, seed: int) -> Dataset:
    return make_dataset(n, 1000 * seed + SPLITS[name])


def occluded_images(images: np.ndarray, frac: float, seed: int) -> np.ndarray:
    rng = np.random.default_rng([seed, 99])
    out = images.copy()
    h, w = images.shape[1:]
    rh, rw = int(frac * h), int(frac * w)
    for k in range(len(out)):
        top = int(rng.integers(0, h - rh + 1))
        left = int(rng.integers(0, w - rw + 1))
        out[k, top : top + rh, left : left + rw] = 0
    return out


def _report(model, test, mode, cfg, seed) -> MetricReport:
    pred = predict(model, test, mode, cfg.test_degradation, seed=seed)
    return evaluate(pred.double().numpy(), test.depths)


def run_seed(cfg: AblationConfig, seed: int, variants=VARIANTS) -> SeedResult:
    t0 = time.perf_counter()
    foundation = split("foundation", cfg.foundation_samples, seed)
    pairs = split("pairs", cfg.pair_samples, seed)
    labeled = split("labeled", cfg.labeled_samples, seed)
    test = split("test", cfg.test_samples, seed)
    test_seed = 7919 * (seed + 1)

    def tc(steps):
        return TrainConfig(learning_rate=cfg.learning_rate, steps=steps, seed=seed, batch_size=cfg.batch_size)

    reports, occluded, clean, trainable = {}, {}, {}, {}
    models = {}
    deg = cfg.train_degradation

    for name, fusion in (("baseline1", "attention"), ("baseline2", "fredfuse")):
        if name in variants:
            r = train_from_scratch(labeled, tc(cfg.scratch_steps), fusion, degradation=deg)
            models[name] = (r.model, "fused")
            trainable[name] = r.model.count_parameters(r.checkpoint.trainable_groups)

    if {"baseline3", "fuse", "image_only"} & set(variants):
        teacher = pretrain_teacher(foundation, tc(cfg.teacher_steps)).checkpoint
        if "image_only" in variants:
            r = finetune(labeled, teacher, tc(cfg.finetune_steps), deg, mode="image")
            models["image_only"] = (r.model, "image")
            trainable["image_only"] = r.model.count_parameters(r.checkpoint.trainable_groups)
        if "baseline3" in variants:
            one = run_onestage(pairs, teacher, tc(cfg.stage1_steps + cfg.stage2_steps), deg)
            r = finetune(labeled, one.checkpoint, tc(cfg.finetune_steps), deg)
            models["baseline3"] = (r.model, "fused")
            trainable["baseline3"] = one.model.count_parameters(one.checkpoint.trainable_groups) + \
                r.model.count_parameters(r.checkpoint.trainable_groups)
        if "fuse" in variants:
            s1 = run_stage1(pairs, teacher, tc(cfg.stage1_steps))
            s2 = run_stage2(pairs, s1.checkpoint, tc(cfg.stage2_steps), deg)
            r = finetune(labeled, s2.checkpoint, tc(cfg.finetune_steps), deg)
            models["fuse"] = (r.model, "fused")
            trainable["fuse"] = sum(
                x.model.count_parameters(x.checkpoint.trainable_groups) for x in (s1, s2, r)
            )

    occ_images = occluded_images(test.images, cfg.occlusion_frac, test_seed)
    for name, (model, mode) in models.items():
        reports[name] = _report(model, test, mode, cfg, test_seed)
        clean[name] = evaluate(predict(model, test, mode).double().numpy(), test.depths)
        occluded[name] = evaluate(
            predict(model, test, mode, images=occ_images).double().numpy(), test.depths
        )
    seconds = time.perf_counter() - t0
    log.info("ablation seed %d done in %.1fs", seed, seconds)
    return SeedResult(seed, reports, occluded, clean, trainable, seconds)


@dataclass
class AblationSummary:
    results: list[SeedResult]

    def median(self, variant: str, which: str = "reports", metric: str = "abs_rel") -> float:
        return statistics.median(getattr(getattr(r, which)[variant], metric) for r in self.results)

    def occlusion_degradation(self, variant: str) -> float:
        """Median over seeds of the relative Abs.Rel increase under image occlusion."""
        vals = [
            r.occluded[variant].abs_rel / r.clean[variant].abs_rel - 1.0 for r in self.results
        ]
        return statistics.median(vals)

    def gap(self, better: str, worse: str) -> float:
        """Relative Abs.Rel improvement of ``better`` over ``worse`` (medians)."""
        return 1.0 - self.median(better) / self.median(worse)

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        fields = MetricReport.header()
        w.writerow(["variant", "seed", "split", *fields, "trainable_params"])
        for r in self.results:
            for which in ("reports", "clean", "occluded"):
                label = {"reports": "degraded", "clean": "clean", "occluded": "image_occluded"}[which]
                for name, rep in getattr(r, which).items():
                    w.writerow([name, r.seed, label, *rep.row(), r.trainable[name]])
        return buf.getvalue()


def run_ablation(cfg: AblationConfig = AblationConfig(), variants=VARIANTS) -> AblationSummary:
    return AblationSummary([run_seed(cfg, s, variants) for s in cfg.seeds])
