import numpy as np
import pytest

from posefield.geometry import Pose, compose, rotation_from_axis_angle
from posefield.metrics import (add_metric, add_s_metric, evaluate_frame,
                               pose_errors, summarize)
from posefield.rng import substream
from posefield.synth import ShapeSpec, sample_surface_points

CUBE = ShapeSpec("cube", (0.6,))
DIAM = CUBE.diameter()


def random_pose(rng, max_angle=2.0):
    w = rng.normal(size=3)
    w = w / np.linalg.norm(w) * rng.uniform(0, max_angle)
    return Pose(rotation_from_axis_angle(w),
                rng.uniform(-0.5, 0.5, size=3) + [0, 0, 2.5])


@pytest.fixture(scope="module")
def cube_points():
    pts, _ = sample_surface_points(CUBE, 1024, substream(0, "pts"))
    return pts


def test_identical_poses_give_zero(cube_points):
    rng = np.random.default_rng(0)
    pose = random_pose(rng)
    value, passed = add_metric(pose, pose, cube_points, DIAM)
    assert value == 0.0 and passed
    value_s, passed_s = add_s_metric(pose, pose, cube_points, DIAM)
    assert value_s == 0.0 and passed_s
    assert pose_errors(pose, pose) == (0.0, 0.0)


def test_pure_translation_offset(cube_points):
    rng = np.random.default_rng(1)
    pose = random_pose(rng)
    offset = np.array([0.02, -0.03, 0.04])
    shifted = Pose(pose.R, pose.t + offset)
    value, passed = add_metric(shifted, pose, cube_points, DIAM)
    assert value == pytest.approx(np.linalg.norm(offset), rel=1e-12)
    assert passed == (value < 0.1 * DIAM)


def test_add_matches_bruteforce_recomputation(cube_points):
    rng = np.random.default_rng(2)
    gt = random_pose(rng)
    est = Pose(rotation_from_axis_angle(rng.normal(size=3) * 0.05) @ gt.R,
               gt.t + rng.normal(size=3) * 0.01)
    value, _ = add_metric(est, gt, cube_points, DIAM)
    brute = np.mean([np.linalg.norm((est.R @ p + est.t) - (gt.R @ p + gt.t))
                     for p in cube_points])
    assert value == pytest.approx(brute, rel=1e-12)


def test_adds_zero_for_rotated_sphere_cloud():
    sphere = ShapeSpec("sphere", (0.3,))
    pts, _ = sample_surface_points(sphere, 4000, substream(1, "pts"))
    rng = np.random.default_rng(3)
    gt = random_pose(rng)
    spin = Pose(gt.R @ rotation_from_axis_angle(rng.normal(size=3)), gt.t)
    value, _ = add_s_metric(spin, gt, pts, 0.6)
    assert value < 0.02  # bounded by sampling density only


def test_adds_never_exceeds_add(cube_points):
    rng = np.random.default_rng(4)
    for _ in range(1000):
        gt = random_pose(rng)
        est = Pose(rotation_from_axis_angle(rng.normal(size=3) * 0.3) @ gt.R,
                   gt.t + rng.normal(size=3) * 0.05)
        a, _ = add_metric(est, gt, cube_points[:128], DIAM)
        s, _ = add_s_metric(est, gt, cube_points[:128], DIAM)
        assert s <= a + 1e-12


def test_metrics_invariant_to_shared_rigid_transform(cube_points):
    rng = np.random.default_rng(5)
    gt = random_pose(rng)
    est = Pose(rotation_from_axis_angle(rng.normal(size=3) * 0.1) @ gt.R,
               gt.t + rng.normal(size=3) * 0.02)
    base_add, _ = add_metric(est, gt, cube_points, DIAM)
    base_adds, _ = add_s_metric(est, gt, cube_points, DIAM)
    for _ in range(5):
        extra = random_pose(rng)
        a, _ = add_metric(compose(extra, est), compose(extra, gt),
                          cube_points, DIAM)
        s, _ = add_s_metric(compose(extra, est), compose(extra, gt),
                            cube_points, DIAM)
        assert a == pytest.approx(base_add, rel=1e-9)
        assert s == pytest.approx(base_adds, rel=1e-6)


def test_pose_errors_analytic_cases():
    ident = Pose.identity()
    flip = Pose(rotation_from_axis_angle(np.array([0, 0, np.pi])), np.zeros(3))
    rot, trans = pose_errors(flip, ident)
    assert rot == pytest.approx(np.pi)
    assert trans == 0.0
    rng = np.random.default_rng(6)
    for _ in range(50):
        theta = rng.uniform(1e-6, np.pi - 1e-6)
        axis = rng.normal(size=3)
        axis /= np.linalg.norm(axis)
        rotated = Pose(rotation_from_axis_angle(axis * theta), np.zeros(3))
        rot, _ = pose_errors(rotated, ident)
        assert rot == pytest.approx(theta, abs=1e-9)


def test_metric_input_validation(cube_points):
    pose = Pose.identity()
    with pytest.raises(ValueError, match="point"):
        add_metric(pose, pose, np.zeros((0, 3)), DIAM)
    with pytest.raises(ValueError, match="diameter"):
        add_s_metric(pose, pose, cube_points, 0.0)


def test_summary_counts_failures(cube_points):
    rng = np.random.default_rng(7)
    gt = random_pose(rng)
    records = [
        evaluate_frame("a", gt, gt, cube_points, DIAM),
        evaluate_frame("b", None, gt, cube_points, DIAM),
    ]
    s = summarize(records)
    assert s["n_frames"] == 2
    assert s["n_failed"] == 1
    assert s["add_recall"] == 0.5
    assert records[0].add_s <= records[0].add
