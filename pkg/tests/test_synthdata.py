import json

import numpy as np
import pytest

from fuse_depth.events import parse_events, write_events
from fuse_depth.io import read_pfm, read_pgm, read_voxel, write_pfm, write_pgm, write_voxel
from fuse_depth.synthdata import (
    SceneSpec,
    Shape,
    generate_triplets,
    load_dataset,
    make_dataset,
    random_scene,
    render_sequence,
    simulate_events,
    triplets_to_dataset,
    write_dataset,
)

TS = np.arange(2) * 10_000


def test_static_scene_frames_identical():
    spec = SceneSpec(shapes=(Shape("rect", (10, 10), (4, 6), 5.0, 200.0),), frames=4)
    frames, depths = render_sequence(spec)
    assert all(np.array_equal(f, frames[0]) for f in frames)
    assert all(np.array_equal(d, depths[0]) for d in depths)
    assert len(simulate_events(frames, np.arange(4) * 10, 0.15)) == 0


def test_disk_over_background_two_depths():
    spec = SceneSpec(shapes=(Shape("disk", (16, 16), (5, 5), 5.0, 220.0),), background_depth=20.0)
    _, depths = render_sequence(spec)
    assert sorted(np.unique(depths[0]).tolist()) == [5.0, 20.0]


def test_nearest_shape_wins():
    far = Shape("rect", (16, 16), (8, 8), 10.0, 100.0)
    near = Shape("disk", (16, 16), (3, 3), 3.0, 250.0)
    for shapes in ((far, near), (near, far)):
        frames, depths = render_sequence(SceneSpec(shapes=shapes, frames=1))
        assert depths[0][16, 16] == 3.0 and frames[0][16, 16] == 250
        assert depths[0][16, 23] == 10.0


def test_render_rejects_zero_frames_and_bad_spec():
    with pytest.raises(ValueError):
        render_sequence(SceneSpec(frames=0))
    with pytest.raises(ValueError):
        SceneSpec(theta=0.0)
    with pytest.raises(ValueError):
        SceneSpec(shapes=(Shape("disk", (1, 1), (1, 1), -1.0, 10.0),))


def test_single_threshold_crossing():
    a = np.full((3, 3), 50, np.uint8)
    b = a.copy()
    b[1, 2] = 100
    # log(101) - log(51) = 0.683: one crossing at theta 0.5, none at 0.7
    s = simulate_events([a, b], TS, theta=0.5)
    assert len(s) == 1 and (s.x[0], s.y[0], s.p[0]) == (2, 1, 1)
    assert 0 < s.t[0] <= 10_000
    assert len(simulate_events([a, b], TS, theta=0.7)) == 0
    # 0.683 / 0.15 -> four levels crossed
    assert len(simulate_events([a, b], TS, theta=0.15)) == 4


def test_crossing_timestamps_are_interpolated():
    a = np.zeros((1, 1), np.uint8)
    b = np.full((1, 1), 255, np.uint8)
    s = simulate_events([a, b], [0, 1_000_000], theta=1.0)
    expected = np.rint(np.arange(1, 6) / np.log(256) * 1_000_000)
    np.testing.assert_array_equal(s.t, expected)


@pytest.mark.parametrize("seed", range(5))
def test_reversal_antisymmetry(seed):
    rng = np.random.default_rng(seed)
    a = rng.integers(0, 256, (8, 8), dtype=np.uint8)
    b = rng.integers(0, 256, (8, 8), dtype=np.uint8)
    fwd = simulate_events([a, b], TS, 0.2)
    back = simulate_events([b, a], TS, 0.2)
    assert len(fwd) == len(back)
    count = lambda s, pol: np.bincount((s.y * 8 + s.x)[s.p == pol], minlength=64)
    np.testing.assert_array_equal(count(fwd, 1), count(back, -1))
    np.testing.assert_array_equal(count(fwd, -1), count(back, 1))


def test_constant_interiors_stay_silent():
    spec = SceneSpec(shapes=(Shape("rect", (16, 10), (6, 6), 4.0, 230.0, (0.0, 1.0)),), frames=3)
    frames, _ = render_sequence(spec)
    s = simulate_events(frames, np.arange(3) * 10_000, 0.15)
    changed = np.zeros((32, 32), bool)
    for f0, f1 in zip(frames, frames[1:]):
        changed |= f0 != f1
    assert len(s) > 0
    assert changed[s.y, s.x].all()


def test_events_sorted_and_csv_roundtrip(tmp_path):
    t = generate_triplets(1, seed=4)[0]
    ev = t.events
    assert np.all(np.diff(ev.t) >= 0)
    write_events(ev, tmp_path / "e.csv")
    back = parse_events(tmp_path / "e.csv", ev.width, ev.height)
    for a in "txyp":
        np.testing.assert_array_equal(getattr(back, a), getattr(ev, a))


def test_simulator_validation():
    f = np.zeros((2, 2), np.uint8)
    with pytest.raises(ValueError):
        simulate_events([f], [0])
    with pytest.raises(ValueError):
        simulate_events([f, f], [5, 5])


def test_generation_deterministic():
    a = make_dataset(4, seed=9)
    b = make_dataset(4, seed=9)
    for k in ("images", "voxels", "depths", "event_counts"):
        assert np.array_equal(getattr(a, k), getattr(b, k))
    c = make_dataset(4, seed=10)
    assert not np.array_equal(a.images, c.images)
    # sample i only depends on (seed, i)
    assert np.array_equal(make_dataset(2, seed=9).images, a.images[:2])


def test_dataset_shapes_and_event_budget():
    d = make_dataset(16, seed=0)
    assert d.images.shape == (16, 32, 32) and d.images.dtype == np.uint8
    assert d.voxels.shape == (16, 32, 32, 3)
    assert d.depths.shape == (16, 32, 32) and (d.depths > 0).all()
    assert (d.event_counts >= 100).all() and (d.event_counts <= 10_000).all()
    sub = d.subset([3, 1])
    assert np.array_equal(sub.images[0], d.images[3]) and len(sub) == 2


def test_random_scene_depth_cues():
    spec = random_scene(np.random.default_rng(0))
    assert all(s.depth < spec.background_depth for s in spec.shapes)
    near = min(spec.shapes, key=lambda s: s.depth)
    far = max(spec.shapes, key=lambda s: s.depth)
    assert np.hypot(*near.velocity) >= np.hypot(*far.velocity)


def test_dataset_directory_roundtrip(tmp_path):
    triplets = generate_triplets(3, seed=2)
    root = write_dataset(triplets, tmp_path / "ds", {"seed": 2})
    manifest = json.loads((root / "manifest.json").read_text())
    assert manifest["seed"] == 2 and len(manifest["samples"]) == 3
    loaded = load_dataset(root)
    direct = triplets_to_dataset(triplets)
    for k in ("images", "voxels", "depths", "event_counts"):
        assert np.array_equal(getattr(loaded, k), getattr(direct, k))


def test_pgm_pfm_voxel_roundtrip(tmp_path, rng):
    img = rng.integers(0, 256, (5, 7), dtype=np.uint8)
    write_pgm(tmp_path / "a.pgm", img)
    assert np.array_equal(read_pgm(tmp_path / "a.pgm"), img)
    dep = rng.uniform(0.5, 40, (5, 7)).astype(np.float32)
    write_pfm(tmp_path / "a.pfm", dep)
    assert np.array_equal(read_pfm(tmp_path / "a.pfm"), dep)
    raw = (tmp_path / "a.pfm").read_bytes()
    assert raw.startswith(b"Pf\n7 5\n-1.0\n")
    # bottom row first
    assert np.frombuffer(raw[-28:], "<f4").tolist() == dep[0].tolist()
    vox = rng.normal(size=(5, 7, 3)).astype(np.float32)
    write_voxel(tmp_path / "v.pfm", vox)
    assert np.array_equal(read_voxel(tmp_path / "v.pfm"), vox)


def test_pgm_with_comment_header(tmp_path):
    (tmp_path / "c.pgm").write_bytes(b"P5\n# made by hand\n2 1\n255\n\x05\x06")
    assert read_pgm(tmp_path / "c.pgm").tolist() == [[5, 6]]
    (tmp_path / "bad.pgm").write_bytes(b"P2\n1 1\n255\n0")
    with pytest.raises(ValueError):
        read_pgm(tmp_path / "bad.pgm")
