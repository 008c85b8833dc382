"""Inference: featured cloud extraction, 2D-3D matching, pose recovery.

The trained field is turned into a surface point cloud carrying feature
embeddings; CNN feature images are matched against it pixel-by-pixel by
dot product, and PnP-RANSAC turns the matches into a pose. With a sensor
depth map available, the camera-z translation is corrected once by the
median depth difference.
"""

from __future__ import annotations

import time
from dataclasses import dataclass, field as dataclass_field

import numpy as np

from . import autodiff as A
from .field import FieldModel
from .geometry import Intrinsics, Pose, generate_rays_batch
from .pnp import MatchingFailure, PnPError, PoseEstimate, pnp_ransac
from .renderer import RenderConfig, deltas_from_t, render_image, sample_uniform
from .unet import UNet

MIN_CLOUD_POINTS = 100
OPACITY_GATE = 0.5


class PoseEstimationError(RuntimeError):
    """Pipeline failure tagged with the stage that raised it."""

    def __init__(self, stage: str, message: str):
        super().__init__(f"[{stage}] {message}")
        self.stage = stage


@dataclass
class FeaturedCloud:
    points: np.ndarray      # (N, 3) world/object frame
    features: np.ndarray    # (N, feature_dim)
    source_view: np.ndarray  # (N,) index of the camera that shot the ray

    def __len__(self) -> int:
        return len(self.points)

    def save(self, path) -> None:
        np.savez(path, points=self.points, features=self.features,
                 source_view=self.source_view)

    @staticmethod
    def load(path) -> "FeaturedCloud":
        data = np.load(path)
        return FeaturedCloud(points=data["points"], features=data["features"],
                             source_view=data["source_view"])


@dataclass
class Correspondence:
    pixel: tuple[float, float]
    point: np.ndarray
    score: float


def extract_cloud(model: FieldModel, views: list[tuple[Pose, np.ndarray]],
                  K: Intrinsics, near_far: list[tuple[float, float]],
                  rng: np.random.Generator, rays_per_view: int = 512,
                  points_per_ray: int = 192, mode: str = "max_weight",
                  density_threshold: float = 5.0,
                  voxel_size: float | None = None,
                  diameter: float | None = None) -> FeaturedCloud:
    """Shoot in-mask rays from the training cameras and keep surface points.

    ``views`` pairs each pose with its binary mask. The surface point along
    a ray is the sample of maximum blend weight (default) or the first
    sample whose density clears ``density_threshold`` (the alternative
    extraction rule). Rays with accumulated opacity below 0.5 are dropped;
    the cloud is deduplicated on a voxel grid (cell = diameter / 100 unless
    given explicitly).
    """
    if mode not in ("max_weight", "density_threshold"):
        raise ValueError(f"unknown extraction mode {mode!r}")
    if voxel_size is None:
        if diameter is None:
            raise ValueError("need voxel_size or diameter for deduplication")
        voxel_size = diameter / 100.0

    all_points: list[np.ndarray] = []
    all_views: list[np.ndarray] = []
    for view_idx, (pose, mask) in enumerate(views):
        ys, xs = np.nonzero(mask)
        if len(xs) == 0:
            continue
        take = min(rays_per_view, len(xs))
        sel = rng.choice(len(xs), size=take, replace=False)
        pixels = np.stack([xs[sel], ys[sel]], axis=1)
        origins, dirs, _ = generate_rays_batch(pose, K, pixels)
        near, far = near_far[view_idx]
        t = sample_uniform(near, far, points_per_ray, jitter=False,
                           n_rays=len(dirs))
        positions = origins[:, None, :] + t[..., None] * dirs[:, None, :]
        with A.no_grad():
            dens = model.density_at(positions.reshape(-1, 3)) \
                .reshape(len(dirs), points_per_ray).astype(np.float64)
        ddelta = dens * deltas_from_t(t)
        alpha = 1.0 - np.exp(-ddelta)
        trans = np.exp(-(np.cumsum(ddelta, axis=1) - ddelta))
        w = trans * alpha
        opacity = w.sum(axis=1)
        keep = opacity >= OPACITY_GATE
        if not keep.any():
            continue
        if mode == "max_weight":
            idx = w[keep].argmax(axis=1)
        else:
            above = dens[keep] > density_threshold
            has = above.any(axis=1)
            idx = above.argmax(axis=1)
            keep_rows = np.nonzero(keep)[0][has]
            keep = np.zeros_like(keep)
            keep[keep_rows] = True
            idx = idx[has]
            if not keep.any():
                continue
        rows = np.nonzero(keep)[0]
        pts = positions[rows, idx]
        all_points.append(pts)
        all_views.append(np.full(len(pts), view_idx, dtype=np.int64))

    if not all_points:
        raise PoseEstimationError("extract_cloud", "no rays hit the surface")
    points = np.concatenate(all_points)
    views_arr = np.concatenate(all_views)

    cells = np.floor(points / voxel_size).astype(np.int64)
    _, first = np.unique(cells, axis=0, return_index=True)
    first = np.sort(first)
    points = points[first]
    views_arr = views_arr[first]
    if len(points) < MIN_CLOUD_POINTS:
        raise PoseEstimationError(
            "extract_cloud",
            f"only {len(points)} surface points after dedup "
            f"(need {MIN_CLOUD_POINTS}); geometry too empty")
    with A.no_grad():
        feats = model.feature_at(points)
    return FeaturedCloud(points=points, features=np.asarray(feats, np.float64),
                         source_view=views_arr)


def match(feature_image: np.ndarray, mask: np.ndarray, cloud: FeaturedCloud,
          stride: int = 1) -> list[Correspondence]:
    """Argmax dot-product correspondence for every stride-th in-mask pixel.

    Ties resolve to the lowest point index. The normalization sometimes
    written into the argmax is a positive per-pixel constant, so plain dot
    products select the same points.
    """
    if mask.sum() == 0:
        raise PoseEstimationError("match", "empty mask")
    h, w, _ = feature_image.shape
    ys, xs = np.nonzero(mask)
    if stride > 1:
        keep = (ys % stride == 0) & (xs % stride == 0)
        ys, xs = ys[keep], xs[keep]
        if len(ys) == 0:
            raise PoseEstimationError("match", "stride removed every pixel")
    feats = feature_image[ys, xs].astype(np.float64)
    scores = feats @ cloud.features.T
    best = scores.argmax(axis=1)
    best_scores = scores[np.arange(len(best)), best]
    return [Correspondence(pixel=(float(x), float(y)),
                           point=cloud.points[j], score=float(s))
            for x, y, j, s in zip(xs, ys, best, best_scores)]


@dataclass
class DepthAdjustResult:
    pose: Pose
    delta: float
    applied: bool
    valid_fraction: float


def adjust_translation_depth(pose: Pose, model: FieldModel, K: Intrinsics,
                             mask: np.ndarray, sensor_depth: np.ndarray,
                             near: float, far: float,
                             points_per_ray: int = 384,
                             min_valid_fraction: float = 0.2
                             ) -> DepthAdjustResult:
    """One-shot z correction from the median sensor/rendered depth gap.

    The renderer produces distance along the ray; it is converted to
    camera-frame z to match the sensor convention before the median. Only
    rotation-preserving camera-z translation is touched. If fewer than
    ``min_valid_fraction`` of mask pixels carry valid depth on both sides,
    the original pose is returned with ``applied=False``.
    """
    ys, xs = np.nonzero(mask)
    if len(xs) == 0:
        return DepthAdjustResult(pose, 0.0, False, 0.0)
    pixels = np.stack([xs, ys], axis=1)
    cfg = RenderConfig(points_per_ray=points_per_ray)
    rendered = render_image(model, pose, K, near, far, mode="depth",
                            pixels=pixels, cfg=cfg)
    sil = render_image(model, pose, K, near, far, mode="silhouette",
                       pixels=pixels, cfg=cfg)
    # Along-ray distance -> camera z via the z component of the unit
    # camera-frame direction for each pixel.
    u = xs + 0.5
    v = ys + 0.5
    dz = 1.0 / np.sqrt(((u - K.cx) / K.fx) ** 2 + ((v - K.cy) / K.fy) ** 2 + 1.0)
    rendered_z = rendered[ys, xs] * dz

    sensor = sensor_depth[ys, xs]
    valid = (sensor > 0) & (sil[ys, xs] >= OPACITY_GATE) & (rendered_z > 0)
    frac = float(valid.mean())
    if frac < min_valid_fraction:
        return DepthAdjustResult(pose, 0.0, False, frac)
    delta = float(np.median(sensor[valid].astype(np.float64)
                            - rendered_z[valid].astype(np.float64)))
    new_t = pose.t.copy()
    new_t[2] += delta
    return DepthAdjustResult(Pose(pose.R, new_t, validate=False), delta,
                             True, frac)


@dataclass
class InferenceConfig:
    match_stride: int = 1
    ransac_iters: int = 500
    inlier_px: float | None = None  # defaults to 2 px scaled from 64 px frames
    use_depth: bool = False
    depth_points_per_ray: int = 384
    rays_per_view: int = 512
    cloud_points_per_ray: int = 192
    extraction_mode: str = "max_weight"
    density_threshold: float = 5.0


def default_inlier_px(K: Intrinsics) -> float:
    return 2.0 * max(K.width, K.height) / 64.0


def estimate_pose(image: np.ndarray, mask: np.ndarray, cnn: UNet,
                  cloud: FeaturedCloud, K: Intrinsics,
                  rng: np.random.Generator,
                  cfg: InferenceConfig | None = None,
                  model: FieldModel | None = None,
                  sensor_depth: np.ndarray | None = None,
                  near_far: tuple[float, float] | None = None
                  ) -> tuple[PoseEstimate, list[Correspondence]]:
    """CNN features -> matches -> PnP-RANSAC (-> optional depth adjustment)."""
    cfg = cfg or InferenceConfig()
    t0 = time.perf_counter()
    if mask.sum() == 0:
        raise PoseEstimationError("match", "empty mask")
    try:
        feature_image = cnn.feature_image(image)
    except Exception as exc:
        raise PoseEstimationError("cnn", str(exc)) from exc
    correspondences = match(feature_image, mask, cloud,
                            stride=cfg.match_stride)
    pts = np.array([c.point for c in correspondences])
    # Pixel centers: match() reports integer pixel coordinates.
    px = np.array([[c.pixel[0] + 0.5, c.pixel[1] + 0.5]
                   for c in correspondences])
    inlier_px = cfg.inlier_px if cfg.inlier_px is not None \
        else default_inlier_px(K)
    try:
        estimate = pnp_ransac(pts, px, K, rng, iters=cfg.ransac_iters,
                              inlier_px=inlier_px)
    except MatchingFailure as exc:
        raise PoseEstimationError("pnp", str(exc)) from exc
    except PnPError as exc:
        raise PoseEstimationError("pnp", str(exc)) from exc

    if cfg.use_depth:
        if model is None or sensor_depth is None or near_far is None:
            raise PoseEstimationError(
                "depth", "depth adjustment needs the field model, a sensor "
                         "depth map, and near/far bounds")
        adj = adjust_translation_depth(
            estimate.pose, model, K, mask, sensor_depth, near_far[0],
            near_far[1], points_per_ray=cfg.depth_points_per_ray)
        estimate = PoseEstimate(pose=adj.pose, inliers=estimate.inliers,
                                reproj_err_px=estimate.reproj_err_px,
                                n_correspondences=estimate.n_correspondences)
    estimate.runtime_ms = (time.perf_counter() - t0) * 1000.0
    return estimate, correspondences
