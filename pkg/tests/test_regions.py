import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from alr.regions import (Partition, Region, backproject, compute_stats, partition_frame, project,
                         region_centroid3d, region_entropy, region_feature, regions_of,
                         whole_frame_region)
from alr.scene import (CameraIntrinsics, Pose, SceneSpec, default_dataset, generate_scene,
                       pixel_rays, raycast_many)


def region_from(pixels, frame_id=0):
    return Region(frame_id, 0, np.asarray(pixels, dtype=np.int64))


@pytest.fixture(scope="module")
def ds():
    return default_dataset(SceneSpec(seed=0), width=40, height=30, n_poses=16)


# --------------------------------------------------------------- partitions

def test_uniform_frame_gives_grid_cells():
    H, W, R = 30, 40, 12
    part = partition_frame(np.full((H, W, 3), 0.4), R)
    assert part.n_regions == R
    ny, nx = 3, 4
    ch, cw = H / ny, W / nx
    for reg in regions_of(part):
        r0, c0 = reg.pixels.min(0)
        r1, c1 = reg.pixels.max(0)
        cy, cx = (r0 + r1) / 2, (c0 + c1) / 2
        seed_cell = (int(cy // ch), int(cx // cw))
        # bounding box stays within one cell pitch of the seed cell
        assert r0 >= (seed_cell[0] - 1) * ch and r1 <= (seed_cell[0] + 2) * ch
        assert c0 >= (seed_cell[1] - 1) * cw and c1 <= (seed_cell[1] + 2) * cw
        assert (r1 - r0 + 1) <= 2 * ch and (c1 - c0 + 1) <= 2 * cw


def test_single_region_covers_frame():
    part = partition_frame(np.random.default_rng(0).random((10, 12, 3)), 1)
    assert part.n_regions == 1 and np.all(part.labels == 0)


def test_two_colour_split_is_respected():
    img = np.zeros((20, 20, 3))
    img[:, 11:] = 1.0     # boundary off the seed grid lines
    part = partition_frame(img, 4)
    for reg in regions_of(part):
        cols = img[reg.pixels[:, 0], reg.pixels[:, 1], 0]
        assert np.all(cols == cols[0])


def test_partitions_are_exact_covers_and_sized(ds):
    for fr in ds.train_frames:
        part = partition_frame(fr.rgb, 48)
        regs = regions_of(part)
        assert sum(r.pixel_count for r in regs) == fr.rgb.shape[0] * fr.rgb.shape[1]
        assert 24 <= part.n_regions <= 72
        seen = np.zeros(fr.rgb.shape[:2], dtype=int)
        for r in regs:
            assert r.pixel_count > 0
            seen[r.pixels[:, 0], r.pixels[:, 1]] += 1
        assert np.all(seen == 1)


def test_regions_are_connected(ds):
    from scipy import ndimage
    part = partition_frame(ds.train_frames[1].rgb, 48)
    for r in range(part.n_regions):
        _, n = ndimage.label(part.labels == r)
        assert n == 1


def test_partition_is_deterministic(ds):
    a = partition_frame(ds.train_frames[2].rgb, 48)
    b = partition_frame(ds.train_frames[2].rgb, 48)
    assert np.array_equal(a.labels, b.labels)


def test_partition_rejects_bad_counts():
    with pytest.raises(ValueError):
        partition_frame(np.zeros((4, 4, 3)), 0)
    with pytest.raises(ValueError):
        partition_frame(np.zeros((4, 4, 3)), 17)


def test_partition_file_round_trip(tmp_path):
    part = partition_frame(np.random.default_rng(1).random((12, 16, 3)), 6, frame_id=3)
    part.save(tmp_path / "regions_00003.bin")
    back = Partition.load(tmp_path / "regions_00003.bin", 3, 12, 16)
    assert np.array_equal(back.labels, part.labels)


# ---------------------------------------------------------------- statistics

def test_uniform_probs_entropy_is_log_c():
    probs = np.full((4, 5, 5), 0.2)
    reg = whole_frame_region(0, 4, 5)
    assert region_entropy(probs, reg) == pytest.approx(math.log(5), abs=1e-9)


def test_one_hot_entropy_is_zero():
    probs = np.zeros((3, 3, 4))
    probs[..., 2] = 1.0
    assert region_entropy(probs, whole_frame_region(0, 3, 3)) == 0.0


def test_mixed_entropy_hand_value():
    probs = np.array([[[1.0, 0.0], [0.5, 0.5]]])
    assert region_entropy(probs, region_from([[0, 0], [0, 1]])) == pytest.approx(
        math.log(2) / 2, abs=1e-12)
    assert math.log(2) / 2 == pytest.approx(0.34657, abs=1e-5)


@given(st.integers(0, 10_000), st.integers(2, 12))
@settings(max_examples=40, deadline=None)
def test_entropy_bounds(seed, C):
    rng = np.random.default_rng(seed)
    p = rng.dirichlet(np.full(C, 0.3), size=(3, 4))
    e = region_entropy(p, whole_frame_region(0, 3, 4))
    assert -1e-12 <= e <= math.log(C) + 1e-12


def test_feature_means():
    lg = np.array([[[1.0, 3.0], [3.0, 1.0]]])
    assert np.allclose(region_feature(lg, region_from([[0, 0], [0, 1]])), [2.0, 2.0])
    assert np.allclose(region_feature(lg, region_from([[0, 1]])), [3.0, 1.0])
    const = np.broadcast_to(np.array([0.5, -1.0, 2.0]), (4, 4, 3))
    part = partition_frame(np.random.default_rng(0).random((4, 4, 3)), 3)
    for reg in regions_of(part):
        assert np.allclose(region_feature(const, reg), [0.5, -1.0, 2.0])


# ------------------------------------------------------------------ geometry

K = CameraIntrinsics(40, 30, 30.0, 32.0, 20.0, 15.0)


def test_principal_point_backprojects_onto_axis():
    assert np.allclose(backproject([K.cx, K.cy], 2.5, Pose.identity(), K), [0, 0, 2.5])


def test_translation_only_pose():
    pose = Pose(np.eye(3), [1.0, -2.0, 0.5])
    cam = backproject([5.0, 7.0], 3.0, Pose.identity(), K)
    assert np.allclose(backproject([5.0, 7.0], 3.0, pose, K), cam + pose.t)


def test_backproject_rejects_bad_depth():
    with pytest.raises(ValueError, match="invalid depth"):
        backproject([1.0, 1.0], 0.0, Pose.identity(), K)


def test_gt_pixels_backproject_onto_surfaces(ds):
    fr = ds.train_frames[0]
    rng = np.random.default_rng(0)
    H, W = fr.sem.shape
    rows, cols = rng.integers(0, H, 200), rng.integers(0, W, 200)
    pts = backproject(np.stack([cols, rows], 1).astype(float), fr.depth[rows, cols].astype(float),
                      fr.pose, fr.intrinsics)
    o, d, norm = pixel_rays(fr.pose, fr.intrinsics)
    idx = rows * W + cols
    t, _, _, _ = raycast_many(generate_scene(SceneSpec(seed=0)), o[idx], d[idx])
    hit = o[idx] + t[:, None] * d[idx]
    assert np.max(np.linalg.norm(pts - hit, axis=1)) < 1e-6


@given(st.floats(0, 39), st.floats(0, 29), st.floats(0.1, 20), st.integers(0, 1000))
@settings(max_examples=60, deadline=None)
def test_project_inverts_backproject(u, v, z, seed):
    rng = np.random.default_rng(seed)
    q, _ = np.linalg.qr(rng.normal(size=(3, 3)))
    q *= np.sign(np.linalg.det(q))
    pose = Pose(q, rng.normal(size=3))
    uv = project(backproject([u, v], z, pose, K), pose, K)
    assert np.allclose(uv, [u, v], atol=1e-6)


def test_fronto_parallel_centroid():
    depth = np.full((6, 8), 2.0)
    part = partition_frame(np.random.default_rng(0).random((6, 8, 3)), 2)
    Ks = CameraIntrinsics(8, 6, 5.0, 5.0, 4.0, 3.0)
    for reg in regions_of(part):
        c, frac = region_centroid3d(depth, Pose.identity(), Ks, reg)
        assert c[2] == pytest.approx(2.0) and frac == 1.0


def test_two_pixel_centroid_mean():
    Ks = CameraIntrinsics(4, 4, 1.0, 1.0, 1.0, 1.0)
    depth = np.zeros((4, 4))
    depth[1, 1] = 1.0
    depth[2, 3] = 3.0
    # pixel (u,v)=(1,1) at depth 1 -> (0,0,1); pixel (3,2) at depth 3 -> (6,3,3)
    reg = region_from([[1, 1], [2, 3]])
    c, frac = region_centroid3d(depth, Pose.identity(), Ks, reg)
    assert np.allclose(c, [(0 + 6) / 2, (0 + 3) / 2, 2.0]) and frac == 1.0


def test_depthless_region_falls_back_to_camera():
    pose = Pose(np.eye(3), [0.3, 0.2, 1.0])
    c, frac = region_centroid3d(np.zeros((3, 3)), pose, CameraIntrinsics(3, 3, 1, 1, 1, 1),
                                whole_frame_region(0, 3, 3))
    assert np.array_equal(c, pose.t) and frac == 0.0


def test_compute_stats_fills_every_region(ds):
    fr = ds.train_frames[0]
    H, W = fr.sem.shape
    rng = np.random.default_rng(0)
    logits = rng.normal(size=(H, W, 8))
    probs = np.exp(logits) / np.exp(logits).sum(-1, keepdims=True)
    regs = regions_of(partition_frame(fr.rgb, 20))
    compute_stats(regs, probs, logits, fr.depth, fr.pose, fr.intrinsics)
    for r in regs:
        assert r.mean_entropy == pytest.approx(region_entropy(probs, r))
        assert np.allclose(r.feature, region_feature(logits, r))
        assert r.valid_depth_fraction == 1.0
