"""Pose accuracy metrics: ADD, ADD-S, rotation/translation errors.

Model points for these metrics come from the analytic shape sampler, never
from the learned cloud, so the measurement stays independent of the model
under test. Pass threshold is the usual 0.1 x object diameter.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.spatial import cKDTree

from .geometry import Pose

PASS_FRACTION = 0.1


def add_metric(pose_est: Pose, pose_gt: Pose, model_points: np.ndarray,
               diameter: float) -> tuple[float, bool]:
    """Mean distance between correspondingly transformed model points."""
    pts = np.asarray(model_points, dtype=np.float64)
    if pts.size == 0:
        raise ValueError("add_metric needs at least one model point")
    if diameter <= 0:
        raise ValueError(f"diameter must be positive, got {diameter}")
    d = np.linalg.norm(pose_est.world_to_camera(pts)
                       - pose_gt.world_to_camera(pts), axis=1)
    value = float(d.mean())
    return value, value < PASS_FRACTION * diameter


def add_s_metric(pose_est: Pose, pose_gt: Pose, model_points: np.ndarray,
                 diameter: float) -> tuple[float, bool]:
    """Symmetric variant: nearest-neighbor pairing instead of identity."""
    pts = np.asarray(model_points, dtype=np.float64)
    if pts.size == 0:
        raise ValueError("add_s_metric needs at least one model point")
    if diameter <= 0:
        raise ValueError(f"diameter must be positive, got {diameter}")
    est = pose_est.world_to_camera(pts)
    gt = pose_gt.world_to_camera(pts)
    dists, _ = cKDTree(est).query(gt, k=1)
    value = float(dists.mean())
    return value, value < PASS_FRACTION * diameter


def pose_errors(pose_est: Pose, pose_gt: Pose) -> tuple[float, float]:
    """(geodesic rotation error in radians, translation error in meters)."""
    cos = (np.trace(pose_est.R.T @ pose_gt.R) - 1) / 2
    rot = float(np.arccos(np.clip(cos, -1.0, 1.0)))
    trans = float(np.linalg.norm(pose_est.t - pose_gt.t))
    return rot, trans


@dataclass
class EvalRecord:
    frame_id: str
    add: float
    add_s: float
    rot_err_rad: float
    trans_err_m: float
    add_pass: bool
    adds_pass: bool
    failed: bool = False  # estimation raised; counts against recall


def evaluate_frame(frame_id: str, pose_est: Pose | None, pose_gt: Pose,
                   model_points: np.ndarray, diameter: float) -> EvalRecord:
    if pose_est is None:
        return EvalRecord(frame_id, np.inf, np.inf, np.pi, np.inf,
                          False, False, failed=True)
    add, add_ok = add_metric(pose_est, pose_gt, model_points, diameter)
    adds, adds_ok = add_s_metric(pose_est, pose_gt, model_points, diameter)
    rot, trans = pose_errors(pose_est, pose_gt)
    return EvalRecord(frame_id, add, adds, rot, trans, add_ok, adds_ok)


def summarize(records: list[EvalRecord]) -> dict:
    n = len(records)
    if n == 0:
        raise ValueError("no evaluation records")
    ok = [r for r in records if not r.failed]
    return {
        "n_frames": n,
        "n_failed": n - len(ok),
        "add_recall": sum(r.add_pass for r in records) / n,
        "adds_recall": sum(r.adds_pass for r in records) / n,
        "mean_rot_err_rad": float(np.mean([r.rot_err_rad for r in ok]))
        if ok else float("nan"),
        "mean_trans_err_m": float(np.mean([r.trans_err_m for r in ok]))
        if ok else float("nan"),
    }
