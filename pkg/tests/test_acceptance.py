"""Acceptance suite: one test per criterion, each printing a PASS/FAIL line.

Run ``pytest tests/test_acceptance.py -v`` to see the verdict lines. Criteria
8, 9, 10 and 11 train models and are marked ``slow``; the ablation (9, 10)
takes roughly 20 minutes on one CPU core.
"""

import json
import math
import time

import numpy as np
import pytest
import torch

from oracles import laplacian_energy, random_stream, voxel_literal
from test_fredfuse import fredfuse_grad_error
from test_losses import align_instance, pair_with_cos
from test_tensor import _ops, op_grad_error

from fuse_depth import cli
from fuse_depth.ablation import AblationConfig, run_ablation
from fuse_depth.checkpoint import ModelCheckpoint
from fuse_depth.degradation import DegradationConfig, degrade_pair, overexpose
from fuse_depth.encoders import EncoderConfig, ViTEncoder
from fuse_depth.events import EventStream, voxelize
from fuse_depth.losses import AlignmentConfig, SiLogConfig, align_loss, cosine_align_loss, silog_loss
from fuse_depth.metrics import evaluate
from fuse_depth.models import prepare_images
from fuse_depth.pipelines import (
    TRAINABLE,
    TrainConfig,
    finetune,
    pretrain_teacher,
    run_stage1,
    run_stage2,
    student_from_teacher,
)
from fuse_depth.pyramid import build_pyramid, reconstruct
from fuse_depth.synthdata import make_dataset
from fuse_depth.tensor import grad_check


@pytest.fixture
def verdict(capsys):
    def report(n, ok, detail):
        with capsys.disabled():
            print(f"\n[acceptance {n:>2}] {'PASS' if ok else 'FAIL'}: {detail}")
        assert ok, detail

    return report


def test_01_voxelizer_oracle(verdict):
    rng = np.random.default_rng(20240601)
    worst, elapsed = 0.0, 0.0
    for _ in range(1000):
        h, w, t, x, y, p = random_stream(rng, max_events=10_000, max_side=64)
        bins = int(rng.integers(2, 6))
        stream = EventStream(width=w, height=h, t=t, x=x, y=y, p=p)
        t0 = time.perf_counter()
        grid = voxelize(stream, bins)
        elapsed += time.perf_counter() - t0
        worst = max(worst, float(np.abs(grid - voxel_literal(t, x, y, p, h, w, bins)).max()))
    verdict(1, worst < 1e-12 and elapsed < 30, f"max |diff| {worst:.2e} over 1000 streams, voxelizer time {elapsed:.2f}s")


def test_02_pyramid_roundtrip(verdict, f64):
    g = torch.Generator().manual_seed(7)
    rng = np.random.default_rng(7)
    worst = 0.0
    for _ in range(256):
        h, w = (int(v) for v in rng.integers(4, 34, 2))
        levels = int(rng.integers(1, 4))
        x = torch.randn(1, h, w, int(rng.integers(1, 5)), generator=g)
        worst = max(worst, float((reconstruct(build_pyramid(x, levels)) - x).abs().max()))
    dc = 0.0
    for h, w in [(4, 4), (7, 5), (16, 16), (33, 33), (9, 32)]:
        for levels in (1, 2, 3):
            dc = max(dc, laplacian_energy(build_pyramid(torch.full((1, h, w, 3), 3.7), levels)))
    verdict(2, worst <= 1e-6 and dc < 1e-12, f"roundtrip max error {worst:.2e} on 256 maps, DC Laplacian energy {dc:.2e}")


def test_03_gradient_checks(verdict, f64):
    t0 = time.perf_counter()
    errors = {name: op_grad_error(name, 20) for name in sorted(_ops())}
    errors["fredfuse_forward"] = max(fredfuse_grad_error(seed) for seed in range(20))
    g = torch.Generator().manual_seed(0)
    worst = 0.0
    for _ in range(20):
        d, d_star, f, f_star = align_instance(g)
        worst = max(worst, grad_check(lambda a, b: align_loss(a, d_star, b, f_star).total, [d, f], step=1e-6))
    errors["align_loss"] = worst
    g = torch.Generator().manual_seed(1)
    worst = 0.0
    for _ in range(20):
        a = torch.rand(3, 4, generator=g) * 5 + 0.2
        b = torch.rand(3, 4, generator=g) * 5 + 0.2
        worst = max(worst, grad_check(lambda x, y: silog_loss(x, y), [a, b], step=1e-6))
    errors["silog_loss"] = worst
    elapsed = time.perf_counter() - t0
    name, top = max(errors.items(), key=lambda kv: kv[1])
    verdict(3, top < 1e-4 and elapsed < 300,
            f"{len(errors)} checks x 20 instances, worst {top:.2e} ({name}), {elapsed:.0f}s")


def test_04_lora_transparency_and_freeze(verdict):
    torch.manual_seed(0)
    enc = ViTEncoder(EncoderConfig())
    x = torch.randn(2, 3, 32, 32)
    plain = enc(x)
    enc.attach_lora(4, seed=1)
    transparent = torch.equal(plain, enc(x))

    data = make_dataset(16, seed=404)
    teacher = pretrain_teacher(data, TrainConfig(steps=20, learning_rate=2e-4)).checkpoint
    s1 = run_stage1(data, teacher, TrainConfig(steps=10)).checkpoint
    s2 = run_stage2(data, s1, TrainConfig(steps=10)).checkpoint
    ft = finetune(data, s2, TrainConfig(steps=10)).checkpoint

    student = student_from_teacher(teacher, 4, 0)
    images = prepare_images(data.images[:4])
    with torch.no_grad():
        teacher_tokens = teacher.build_model().image_encoder(images)
        student_transparent = torch.equal(teacher_tokens, student.event_encoder(images))

    broken = []
    for stage, before, after in [("stage1", ModelCheckpoint.from_model(student), s1),
                                 ("stage2", s1, s2), ("finetune", s2, ft)]:
        hb, ha = before.group_hashes(), after.group_hashes()
        frozen = [grp for grp in hb if grp not in TRAINABLE[stage]]
        broken += [f"{stage}:{grp}" for grp in frozen if hb[grp] != ha.get(grp)]
        trained = [grp for grp in TRAINABLE[stage] if grp in ha and hb.get(grp) != ha[grp]]
        if not trained:
            broken.append(f"{stage}: nothing trained")
    # the image branch and head must still be the teacher's after all three stages
    hb, ha = teacher.group_hashes(), ft.group_hashes()
    broken += [f"teacher:{grp}" for grp in ("image_encoder",) if hb[grp] != ha[grp]]
    ok = transparent and student_transparent and not broken
    verdict(4, ok, f"zero-LoRA identical: {transparent and student_transparent}; frozen groups changed: {broken or 'none'}")


def test_05_degradation(verdict):
    rng = np.random.default_rng(5)
    image = rng.integers(0, 256, (32, 32), dtype=np.uint8)
    voxel = rng.normal(size=(32, 32, 3)).astype(np.float32)
    cfg = DegradationConfig()

    deterministic = all(
        np.array_equal(a, b)
        for seed in range(50)
        for a, b in zip(degrade_pair(image, voxel, cfg, seed)[:2], degrade_pair(image, voxel, cfg, seed)[:2])
    )
    v = np.arange(256, dtype=np.uint8)
    # odd inputs land on .5; ties round half to even before the clamp
    expect = np.clip(np.rint(2.5 * v.astype(np.float64) + 200), 0, 255).astype(np.uint8)
    over = np.array_equal(overexpose(v, 2.5, 200.0), expect) and list(expect[[0, 1, 10, 20, 22]]) == [200, 202, 225, 250, 255]

    occl = DegradationConfig(brightness_range=(1.0, 1.0), local_prob=1.0, kinds=("occlusion",))
    occlusion = True
    for seed in range(20):
        img, vox, rec = degrade_pair(image, voxel, occl, seed)
        region = np.zeros((32, 32), bool)
        region[rec.region] = True
        occlusion &= region.sum() == 6 * 6
        occlusion &= bool((img[region] == 0).all() and (vox[region] == 0).all())
        occlusion &= bool(np.array_equal(img[~region], image[~region]) and np.array_equal(vox[~region], voxel[~region]))

    small = np.zeros((8, 8), np.uint8), np.zeros((8, 8, 2), np.float32)
    rate = np.mean([degrade_pair(*small, cfg, seed)[2].local for seed in range(10_000)])
    ok = deterministic and over and occlusion and 0.45 <= rate <= 0.55
    verdict(5, ok, f"deterministic {deterministic}, overexposure {over}, occlusion region exact {occlusion}, "
                   f"local rate {rate:.4f}")


def test_06_loss_algebra(verdict, f64):
    g = torch.Generator().manual_seed(6)
    worst = 0.0
    for _ in range(200):
        pred = torch.rand(4, 8, generator=g) * 20 + 0.1
        gt = torch.rand(4, 8, generator=g) * 20 + 0.1
        s = float(torch.rand((), generator=g) * 100 + 0.01)
        worst = max(worst, abs(float(silog_loss(s * pred, s * gt) - silog_loss(pred, gt))))
    gt = torch.rand(5, 7, generator=g) * 10 + 0.5
    fixed = abs(float(silog_loss(math.e * gt, gt, cfg=SiLogConfig(0.5))) - math.sqrt(0.5))

    cfg = AlignmentConfig(alpha=0.2, beta=0.85)
    gated = all(float(cosine_align_loss(*pair_with_cos(c), cfg)) == 0.0 for c in (0.86, 0.95, 1.0, 0.19, 0.0, -0.7))
    kept = all(float(cosine_align_loss(*pair_with_cos(c), cfg)) > 0.0 for c in (0.21, 0.5, 0.84))
    ok = worst <= 1e-9 and fixed <= 1e-9 and gated and kept
    verdict(6, ok, f"scale invariance {worst:.1e}, sqrt(0.5) error {fixed:.1e}, gates zero {gated}, inside kept {kept}")


def test_07_metrics(verdict):
    # hand-computed: pred (1, 3), gt (1, 2) -> abs_rel 0.25, rmse sqrt(0.5)
    r = evaluate(np.array([1.0, 3.0]), np.array([1.0, 2.0]))
    hand = (
        abs(r.abs_rel - 0.25) <= 1e-9
        and abs(r.rmse - math.sqrt(0.5)) <= 1e-9
        and abs(r.rmse_log - math.sqrt(0.5 * math.log(1.5) ** 2)) <= 1e-9
        and (r.delta1, r.delta2, r.delta3) == (0.5, 1.0, 1.0)
    )
    r = evaluate(np.array([2.0, 4.0]), np.array([1.0, 2.0]))
    hand &= abs(r.abs_rel - 1.0) <= 1e-9 and (r.delta1, r.delta2, r.delta3) == (0.0, 0.0, 0.0)
    r = evaluate(np.array([5.0]), np.array([5.0]))
    hand &= r.abs_rel == 0 and r.rmse == 0 and (r.delta1, r.delta2, r.delta3) == (1.0, 1.0, 1.0)

    rng = np.random.default_rng(7)
    monotone = True
    for _ in range(1000):
        gt = rng.uniform(0.5, 80, (6, 6))
        pred = gt * np.exp(rng.normal(0, 0.4, gt.shape))
        r = evaluate(pred, gt)
        closer = evaluate(np.sqrt(pred * gt), gt)  # every ratio moves toward 1
        monotone &= r.delta1 <= r.delta2 <= r.delta3
        monotone &= closer.delta1 >= r.delta1 and closer.delta2 >= r.delta2 and closer.delta3 >= r.delta3
    verdict(7, hand and monotone, f"hand examples {hand}, delta monotonicity on 1000 pairs {monotone}")


@pytest.mark.slow
def test_08_training_smoke(verdict):
    t0 = time.perf_counter()
    data = make_dataset(64, seed=8)
    cfg = TrainConfig(steps=500)  # toy config: 32x32, C=64, 4 blocks, lr 5e-5
    teacher = pretrain_teacher(data, cfg)
    s1 = run_stage1(data, teacher.checkpoint, cfg)
    s2 = run_stage2(data, s1.checkpoint, cfg)
    elapsed = time.perf_counter() - t0
    ok = teacher.reduction >= 0.5 and s1.reduction >= 0.5 and s2.reduction >= 0.3 and elapsed < 1200
    verdict(8, ok, f"teacher SiLog -{teacher.reduction:.1%}, stage I align -{s1.reduction:.1%}, "
                   f"stage II align -{s2.reduction:.1%}, {elapsed:.0f}s")


@pytest.fixture(scope="module")
def ablation():
    t0 = time.perf_counter()
    summary = run_ablation(AblationConfig())
    return summary, time.perf_counter() - t0


@pytest.mark.slow
def test_09_directional_ablation(verdict, ablation):
    summary, elapsed = ablation
    med = {v: summary.median(v) for v in ("fuse", "baseline2", "baseline1")}
    fuse_gap = summary.gap("fuse", "baseline2")
    b2_gap = summary.gap("baseline2", "baseline1")
    ok = fuse_gap >= 0.02 and b2_gap >= 0.02 and elapsed < 3600
    verdict(9, ok, f"median Abs.Rel FUSE {med['fuse']:.4f}, B2 {med['baseline2']:.4f}, B1 {med['baseline1']:.4f}; "
                   f"FUSE vs B2 {fuse_gap:+.1%}, B2 vs B1 {b2_gap:+.1%} (need >= 2% each), {elapsed:.0f}s")


@pytest.mark.slow
def test_10_occlusion_robustness(verdict, ablation):
    summary, _ = ablation
    fuse = summary.occlusion_degradation("fuse")
    image = summary.occlusion_degradation("image_only")
    verdict(10, fuse < image, f"occluded Abs.Rel increase: FUSE {fuse:+.2%}, image-only {image:+.2%}")


@pytest.mark.slow
def test_11_replay_from_manifest(verdict, tmp_path):
    def run(*argv):
        assert cli.main(list(argv)) == 0, argv

    ds, t, s1, s2, ft = (str(tmp_path / n) for n in ("ds", "t.ckpt", "s1.ckpt", "s2.ckpt", "ft.ckpt"))
    run("synth", "--out", ds, "--samples", "16", "--seed", "11")
    common = ["--data", ds, "--batch-size", "4", "--seed", "3"]
    run("pretrain-teacher", *common, "--out", t, "--steps", "20", "--lr", "2e-4", "--losses", t + ".csv")
    run("pst-stage1", *common, "--teacher", t, "--out", s1, "--steps", "10")
    run("pst-stage2", *common, "--stage1", s1, "--out", s2, "--steps", "10")
    run("finetune", *common, "--joint", s2, "--out", ft, "--steps", "10", "--degradation", "on")
    run("eval", "--checkpoint", ft, "--data", ds, "--degradation", "on", "--out", str(tmp_path / "m.csv"))
    run("eval", "--checkpoint", ft, "--data", ds, "--occlude", "0.2", "--out", str(tmp_path / "occ.csv"))

    mismatched = []
    outputs = ["t.ckpt", "s1.ckpt", "s2.ckpt", "ft.ckpt", "m.csv", "occ.csv"]
    for name in outputs:
        manifest = tmp_path / f"{name}.run.json"
        sub = json.loads(manifest.read_text())["subcommand"]
        again = tmp_path / "replay" / name
        again.parent.mkdir(exist_ok=True)
        extra = ["--losses", str(again) + ".csv"] if name == "t.ckpt" else []
        run(sub, "--from-manifest", str(manifest), "--out", str(again), *extra)
        if again.read_bytes() != (tmp_path / name).read_bytes():
            mismatched.append(name)
    if (tmp_path / "replay" / "t.ckpt.csv").read_bytes() != (tmp_path / "t.ckpt.csv").read_bytes():
        mismatched.append("teacher loss CSV")
    run("synth", "--from-manifest", ds + ".run.json", "--out", str(tmp_path / "replay" / "ds"))
    for f in sorted((tmp_path / "ds").iterdir()):
        if f.read_bytes() != (tmp_path / "replay" / "ds" / f.name).read_bytes():
            mismatched.append(f"ds/{f.name}")
    verdict(11, not mismatched, f"{len(outputs) + 2} replayed runs, byte mismatches: {mismatched or 'none'}")
