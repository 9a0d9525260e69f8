"""The full transfer recipe at toy scale, in under a minute of CPU.

1. Pretrain an image-only teacher on plenty of image/depth pairs. It stands
   in for a depth foundation model.
2. Stage I: copy its encoder for events, attach LoRA adapters and tune only
   those (plus the patch embedding) so event tokens and depths match the
   teacher's on unlabelled pairs.
3. Stage II: insert FreDFuse and train only the fusion module on degraded
   pairs, still supervised by the teacher's clean-image outputs.
4. Fine-tune the depth head on a handful of labelled samples.

The fused model is then compared with the teacher fine-tuned identically,
on clean test pairs, on degraded ones and with an occluded image region.
At this budget the image-only model is usually the more accurate one on
clean pairs; the fused model loses much less when part of the image is gone.

    python3 demos/05_transfer_pipeline.py
"""

import time

import numpy as np

from fuse_depth.ablation import occluded_images, split
from fuse_depth.degradation import DegradationConfig
from fuse_depth.pipelines import TrainConfig, evaluate_model, finetune, pretrain_teacher, run_stage1, run_stage2

t0 = time.perf_counter()
seed = 0
foundation, pairs = split("foundation", 256, seed), split("pairs", 128, seed)
labeled, test = split("labeled", 32, seed), split("test", 64, seed)
deg = DegradationConfig(rng_seed=seed)


def cfg(steps):
    return TrainConfig(learning_rate=2e-4, steps=steps, seed=seed)


teacher = pretrain_teacher(foundation, cfg(800))
print(f"teacher   SiLog {teacher.initial_loss:.3f} -> {teacher.final_loss:.3f}")
stage1 = run_stage1(pairs, teacher.checkpoint, cfg(200))
print(f"stage I   align {stage1.initial_loss:.3f} -> {stage1.final_loss:.3f}  (trains {sorted(stage1.checkpoint.trainable_groups)})")
stage2 = run_stage2(pairs, stage1.checkpoint, cfg(400), deg)
print(f"stage II  align {stage2.initial_loss:.3f} -> {stage2.final_loss:.3f}  (trains {sorted(stage2.checkpoint.trainable_groups)})")

fused = finetune(labeled, stage2.checkpoint, cfg(200), deg, mode="fused").model
image_only = finetune(labeled, teacher.checkpoint, cfg(200), deg, mode="image").model

occluded = occluded_images(test.images, 0.2, seed)
print("\nAbs.Rel        clean  degraded  occluded")
for name, model, mode in [("FUSE", fused, "fused"), ("image-only", image_only, "image")]:
    clean = evaluate_model(model, test, mode).abs_rel
    degraded = evaluate_model(model, test, mode, degradation=deg, seed=seed).abs_rel
    occ = evaluate_model(model, test, mode, images=occluded).abs_rel
    print(f"{name:<12} {clean:7.4f}  {degraded:8.4f}  {occ:8.4f}   (occlusion {occ / clean - 1:+.1%})")

counts = {g: int(np.sum([t.size for n, t in stage2.checkpoint.tensors.items() if stage2.checkpoint.groups[n] == g]))
          for g in ("event_lora", "event_patch_embed", "fredfuse", "depth_head")}
print(f"\ntrained by transfer + fine-tune: {counts}")
print(f"done in {time.perf_counter() - t0:.0f}s")
