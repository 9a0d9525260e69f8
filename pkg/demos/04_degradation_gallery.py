"""What the training-time corruption does to an image/event pair.

Every pair gets a random brightness factor. Half of them also get one local
degradation in a 20% x 20% region: Gaussian blur (both modalities),
overexposure (image only) or occlusion (both modalities). The draw depends
only on the seed, so a record of the seed replays the exact corruption.

    python3 demos/04_degradation_gallery.py [OUT_DIR]
"""

import sys
from pathlib import Path

import numpy as np

from fuse_depth.degradation import DegradationConfig, degrade_pair
from fuse_depth.io import write_pgm
from fuse_depth.synthdata import generate_triplets, triplets_to_dataset

out = Path(sys.argv[1] if len(sys.argv) > 1 else "degradation_gallery")
out.mkdir(parents=True, exist_ok=True)

data = triplets_to_dataset(generate_triplets(1, seed=4))
image, voxel = data.images[0], data.voxels[0]
write_pgm(out / "clean.pgm", image)

for kind in ("blur", "overexposure", "occlusion"):
    cfg = DegradationConfig(brightness_range=(1.0, 1.0), local_prob=1.0, kinds=(kind,))
    # first seed whose region covers some event activity, so the effect is visible
    seed = next(s for s in range(1000) if np.abs(voxel[degrade_pair(image, voxel, cfg, s)[2].region]).sum() > 0)
    img, vox, rec = degrade_pair(image, voxel, cfg, seed)
    write_pgm(out / f"{kind}.pgm", img)
    inside = np.zeros(image.shape, bool)
    inside[rec.region] = True
    print(f"{kind:>12} (seed {seed}): region rows {rec.top}-{rec.top + rec.height - 1}, cols {rec.left}-{rec.left + rec.width - 1}; "
          f"image changed inside {np.mean(img[inside] != image[inside]):.0%}, outside {np.mean(img[~inside] != image[~inside]):.0%}; "
          f"events changed {not np.array_equal(vox, voxel)}")

# the default mix: brightness jitter always, a local degradation half the time
cfg = DegradationConfig()
records = [degrade_pair(image, voxel, cfg, seed)[2] for seed in range(2000)]
kinds = [r.kind for r in records if r.local]
print(f"local rate {len(kinds) / len(records):.3f}; kinds "
      + ", ".join(f"{k} {kinds.count(k)}" for k in ("blur", "overexposure", "occlusion")))
print(f"replay identical: {all(np.array_equal(a, b) for a, b in zip(degrade_pair(image, voxel, cfg, 7), degrade_pair(image, voxel, cfg, 7)))}")
print(f"images written to {out}/")
