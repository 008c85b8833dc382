import hashlib
import json
from pathlib import Path

import numpy as np
import pytest

from posefield.geometry import (Pose, generate_rays_batch, look_at,
                                rotation_from_axis_angle)
from posefield.metrics import pose_errors
from posefield.rng import substream
from posefield.synth import (Dataset, ShapeSpec, default_intrinsics,
                             generate_dataset, perturb_poses, raytrace_frame,
                             read_depth, sample_surface_points, write_depth)

SPHERE = ShapeSpec("sphere", (0.35,))
CUBE = ShapeSpec("cube", (0.6,), texture="angular_checker")
CYL = ShapeSpec("cylinder", (0.28, 0.7), texture="axial_bands")
PRISM = ShapeSpec("square_prism", (0.4, 0.7), texture="face_colors")


def tree_hash(root: Path) -> str:
    h = hashlib.sha256()
    for path in sorted(root.rglob("*")):
        if path.is_file():
            h.update(path.name.encode())
            h.update(path.read_bytes())
    return h.hexdigest()


def test_shape_validation():
    with pytest.raises(ValueError, match="kind"):
        ShapeSpec("torus", (0.3,))
    with pytest.raises(ValueError, match="positive"):
        ShapeSpec("sphere", (-1.0,))
    with pytest.raises(ValueError, match="size"):
        ShapeSpec("cylinder", (0.3,))


def test_diameters_closed_form():
    assert CUBE.diameter() == pytest.approx(0.6 * np.sqrt(3))
    assert SPHERE.diameter() == pytest.approx(0.7)
    assert CYL.diameter() == pytest.approx(np.hypot(0.56, 0.7))
    assert PRISM.diameter() == pytest.approx(np.sqrt(2 * 0.4 ** 2 + 0.49))
    # Diameter upper-bounds all pairwise surface distances.
    for shape in (CUBE, SPHERE, CYL, PRISM):
        pts, _ = sample_surface_points(shape, 512, substream(0, "d"))
        d = np.linalg.norm(pts[None] - pts[:, None], axis=2).max()
        assert d <= shape.diameter() + 1e-9


def test_sphere_silhouette_radius():
    from posefield.geometry import Intrinsics
    # Half-integer principal point puts pixel (24, 24) exactly on the axis.
    K = Intrinsics(fx=66.0, fy=66.0, cx=24.5, cy=24.5, width=48, height=48)
    z = 2.0
    pose = look_at(np.array([0, 0, z]), np.zeros(3), up=(0, 1, 0))
    _, mask, depth = raytrace_frame(SPHERE, pose, K)
    r = SPHERE.size[0]
    expected = K.fx * r / np.sqrt(z * z - r * r)
    measured = np.sqrt(mask.sum() / np.pi)
    assert abs(measured - expected) < 1.0
    assert depth[24, 24] == pytest.approx(z - r, abs=1e-6)


def test_empty_frustum_renders_nothing():
    K = default_intrinsics(32)
    pose = look_at(np.array([0, 0, 3.0]), np.array([0, 0, 6.0]), up=(0, 1, 0))
    image, mask, depth = raytrace_frame(SPHERE, pose, K)
    assert mask.sum() == 0
    assert np.all(image == 0) and np.all(depth == 0)


def test_depth_consistent_with_backprojection():
    # Back-projecting (pixel, depth) lands on the analytic surface.
    K = default_intrinsics(48)
    pose = look_at(np.array([1.4, -1.1, 1.2]), np.zeros(3))
    for shape in (SPHERE, CUBE, CYL):
        _, mask, depth = raytrace_frame(shape, pose, K)
        ys, xs = np.nonzero(mask)
        pick = substream(1, "bp").choice(len(xs), size=min(200, len(xs)),
                                         replace=False)
        px = np.stack([xs[pick], ys[pick]], axis=1)
        origins, dirs, _ = generate_rays_batch(pose, K, px)
        z = depth[ys[pick], xs[pick]].astype(np.float64)
        # Convert camera-z to along-ray distance via the direction z component.
        d_cam = pose.R @ dirs.T
        t = z / d_cam[2]
        pts = origins + t[:, None] * dirs
        assert shape.surface_distance(pts).max() < 1e-5


def test_cylinder_rotational_symmetry_renders_identically():
    K = default_intrinsics(40)
    center = np.array([1.5, 0.0, 1.1])
    pose = look_at(center, np.zeros(3))
    img1, mask1, _ = raytrace_frame(CYL, pose, K)
    for phi in (0.7, 2.0):
        Rz = rotation_from_axis_angle(np.array([0, 0, phi]))
        pose2 = look_at(Rz @ center, np.zeros(3))
        img2, mask2, _ = raytrace_frame(CYL, pose2, K)
        assert np.array_equal(mask1, mask2)
        assert np.abs(img1 - img2).max() < 1e-9


def test_square_prism_quarter_turn_symmetry():
    K = default_intrinsics(40)
    center = np.array([1.3, 0.4, 1.0])
    pose = look_at(center, np.zeros(3))
    img1, mask1, _ = raytrace_frame(PRISM, pose, K)
    Rz = rotation_from_axis_angle(np.array([0, 0, np.pi / 2]))
    img2, mask2, _ = raytrace_frame(PRISM, look_at(Rz @ center, np.zeros(3)), K)
    assert np.array_equal(mask1, mask2)
    assert np.abs(img1 - img2).max() < 1e-9


def test_angular_checker_breaks_symmetry():
    K = default_intrinsics(40)
    center = np.array([1.5, 0.0, 1.1])
    img1, _, _ = raytrace_frame(CUBE, look_at(center, np.zeros(3)), K)
    Rz = rotation_from_axis_angle(np.array([0, 0, np.pi / 2]))
    img2, _, _ = raytrace_frame(CUBE, look_at(Rz @ center, np.zeros(3)), K)
    assert np.abs(img1 - img2).max() > 0.05


def test_generate_dataset_deterministic(tmp_path):
    ds1 = generate_dataset(CUBE, 8, 2, seed=5, out_dir=tmp_path / "a",
                           image_size=24)
    ds2 = generate_dataset(CUBE, 8, 2, seed=5, out_dir=tmp_path / "b",
                           image_size=24)
    assert tree_hash(tmp_path / "a") == tree_hash(tmp_path / "b")
    ds3 = generate_dataset(CUBE, 8, 2, seed=6, out_dir=tmp_path / "c",
                           image_size=24)
    assert tree_hash(tmp_path / "a") != tree_hash(tmp_path / "c")


def test_generate_dataset_minimum_views(tmp_path):
    with pytest.raises(ValueError, match="8"):
        generate_dataset(CUBE, 7, 1, seed=0, out_dir=tmp_path / "x")
    ds = generate_dataset(CUBE, 12, 2, seed=0, out_dir=tmp_path / "twelve",
                          image_size=24)
    assert len(ds.train_ids) == 12


def test_generated_masks_nonempty_and_loadable(tmp_path):
    ds = generate_dataset(SPHERE, 8, 2, seed=1, out_dir=tmp_path / "s",
                          image_size=24)
    reloaded = Dataset.load(ds.root)
    assert reloaded.train_ids == ds.train_ids
    for fid in reloaded.train_ids + reloaded.test_ids:
        s = reloaded.load_frame(fid, with_depth=True)
        assert s.mask.sum() > 0
        assert s.image.shape == (24, 24, 3)
        assert np.all(s.depth[s.mask] > 0)
        assert np.all(s.depth[~s.mask] == 0)


def test_depth_round_trip_bit_exact(tmp_path):
    depth = np.random.default_rng(0).uniform(0, 3, size=(24, 24)) \
        .astype(np.float32)
    write_depth(tmp_path / "d.depth.f32", depth)
    back = read_depth(tmp_path / "d.depth.f32")
    assert np.array_equal(back, depth)


def test_perturb_poses_zero_noise_is_identity():
    rng = substream(0, "poses")
    poses = {f"{i:03d}": look_at(rng.normal(size=3) + [0, 0, 3], np.zeros(3))
             for i in range(5)}
    out = perturb_poses(poses, 0.0, 0.0, diameter=1.0, seed=3)
    for k in poses:
        assert np.allclose(out[k].R, poses[k].R)
        assert np.allclose(out[k].t, poses[k].t)


def test_perturb_poses_magnitudes_bounded():
    rng = substream(1, "poses")
    poses = {f"{i:03d}": look_at(rng.normal(size=3) + [0, 0, 3], np.zeros(3))
             for i in range(40)}
    diameter = 1.04
    out = perturb_poses(poses, 15.0, 0.10, diameter=diameter, seed=9)
    rots, trans = [], []
    for k in poses:
        r, t = pose_errors(out[k], poses[k])
        rots.append(np.degrees(r))
        trans.append(t)
    assert max(rots) <= 15.0 + 1e-9
    assert max(trans) <= 0.10 * diameter + 1e-9
    assert np.mean(rots) > 2.0  # actually perturbs


def test_perturb_rejects_negative():
    with pytest.raises(ValueError):
        perturb_poses([Pose.identity()], -1.0, 0.0, 1.0, 0)


def test_surface_samples_on_surface():
    rng = substream(2, "surf")
    pts, normals = sample_surface_points(SPHERE, 2000, rng)
    assert np.abs(np.linalg.norm(pts, axis=1) - 0.35).max() < 1e-12
    assert np.allclose(np.linalg.norm(normals, axis=1), 1.0)
    pts, _ = sample_surface_points(CUBE, 2000, rng)
    assert np.abs(np.abs(pts).max(axis=1) - 0.3).max() < 1e-12
    pts, _ = sample_surface_points(CYL, 2000, rng)
    assert CYL.surface_distance(pts).max() < 1e-9


def test_surface_sampling_area_proportional():
    rng = substream(3, "surf")
    n = 100_000
    pts, normals = sample_surface_points(PRISM, n, rng)
    a, h = PRISM.size
    side_area = 4 * a * h
    cap_area = 2 * a * a
    p_cap = cap_area / (side_area + cap_area)
    caps = np.abs(normals[:, 2]) > 0.5
    sigma = np.sqrt(n * p_cap * (1 - p_cap))
    assert abs(caps.sum() - n * p_cap) < 3 * sigma


def test_shape_spec_json_round_trip():
    for shape in (CUBE, SPHERE, CYL, PRISM):
        back = ShapeSpec.from_dict(json.loads(json.dumps(shape.to_dict())))
        assert back == shape
