"""Pinhole cameras, rigid poses, rays, and projection.

Conventions, fixed project-wide:
  - Poses are stored world-to-camera: x_cam = R @ x_world + t.
  - Camera frame is x right, y down, z forward (points in front have z > 0).
  - Continuous image coordinates put pixel (u, v)'s center at (u+0.5, v+0.5);
    ``generate_rays`` adds the half-pixel offset itself, ``project`` returns
    continuous coordinates.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

ORTHONORMAL_TOL = 1e-6


@dataclass(frozen=True)
class Intrinsics:
    fx: float
    fy: float
    cx: float
    cy: float
    width: int
    height: int

    def __post_init__(self):
        if self.fx <= 0 or self.fy <= 0:
            raise ValueError(f"focal lengths must be positive, got {self.fx}, {self.fy}")
        if not (0 <= self.cx < self.width and 0 <= self.cy < self.height):
            raise ValueError("principal point must lie inside the image")

    def matrix(self) -> np.ndarray:
        return np.array([[self.fx, 0, self.cx],
                         [0, self.fy, self.cy],
                         [0, 0, 1]], dtype=np.float64)

    def to_dict(self) -> dict:
        return {"fx": self.fx, "fy": self.fy, "cx": self.cx, "cy": self.cy,
                "width": self.width, "height": self.height}

    @staticmethod
    def from_dict(d: dict) -> "Intrinsics":
        return Intrinsics(fx=float(d["fx"]), fy=float(d["fy"]), cx=float(d["cx"]),
                          cy=float(d["cy"]), width=int(d["width"]),
                          height=int(d["height"]))


class Pose:
    """SE(3) world-to-camera transform with validated rotation."""

    __slots__ = ("R", "t")

    def __init__(self, R: np.ndarray, t: np.ndarray, validate: bool = True):
        R = np.asarray(R, dtype=np.float64).reshape(3, 3)
        t = np.asarray(t, dtype=np.float64).reshape(3)
        if validate:
            err = np.abs(R.T @ R - np.eye(3)).max()
            if err > ORTHONORMAL_TOL:
                raise ValueError(f"rotation not orthonormal (max err {err:.2e})")
            if abs(np.linalg.det(R) - 1.0) > ORTHONORMAL_TOL:
                raise ValueError(f"rotation determinant {np.linalg.det(R):.6f} != +1")
        self.R = R
        self.t = t

    @staticmethod
    def identity() -> "Pose":
        return Pose(np.eye(3), np.zeros(3), validate=False)

    def camera_center(self) -> np.ndarray:
        """Camera origin expressed in world coordinates."""
        return -self.R.T @ self.t

    def world_to_camera(self, points: np.ndarray) -> np.ndarray:
        points = np.asarray(points, dtype=np.float64)
        return points @ self.R.T + self.t

    def camera_to_world(self, points: np.ndarray) -> np.ndarray:
        points = np.asarray(points, dtype=np.float64)
        return (points - self.t) @ self.R

    def matrix(self) -> np.ndarray:
        m = np.eye(4)
        m[:3, :3] = self.R
        m[:3, 3] = self.t
        return m

    def to_dict(self) -> dict:
        return {"R": [float(v) for v in self.R.reshape(-1)],
                "t": [float(v) for v in self.t],
                "convention": "world_to_camera"}

    @staticmethod
    def from_dict(d: dict) -> "Pose":
        if d.get("convention", "world_to_camera") != "world_to_camera":
            raise ValueError(f"unsupported pose convention {d.get('convention')!r}")
        return Pose(np.array(d["R"], dtype=np.float64).reshape(3, 3),
                    np.array(d["t"], dtype=np.float64))

    def __repr__(self):
        return f"Pose(t={np.round(self.t, 4)})"


@dataclass
class Ray:
    origin: np.ndarray
    direction: np.ndarray
    pixel: tuple[float, float]


def compose(a: Pose, b: Pose) -> Pose:
    """Transform applying b first, then a: x -> a(b(x))."""
    return Pose(a.R @ b.R, a.R @ b.t + a.t, validate=False)


def invert(a: Pose) -> Pose:
    return Pose(a.R.T, -a.R.T @ a.t, validate=False)


def reorthonormalize(R: np.ndarray) -> np.ndarray:
    """Project a near-rotation onto SO(3), keeping det = +1."""
    u, _, vt = np.linalg.svd(np.asarray(R, dtype=np.float64))
    out = u @ vt
    if np.linalg.det(out) < 0:
        u[:, -1] *= -1
        out = u @ vt
    return out


def rotation_from_axis_angle(axis_angle: np.ndarray) -> np.ndarray:
    """Rodrigues: 3-vector whose norm is the angle in radians."""
    w = np.asarray(axis_angle, dtype=np.float64).reshape(3)
    theta = np.linalg.norm(w)
    if theta < 1e-12:
        K = _skew(w)
        return np.eye(3) + K  # first-order; exact at w = 0
    k = w / theta
    K = _skew(k)
    return np.eye(3) + np.sin(theta) * K + (1 - np.cos(theta)) * (K @ K)


def axis_angle_from_rotation(R: np.ndarray) -> np.ndarray:
    R = np.asarray(R, dtype=np.float64)
    cos = np.clip((np.trace(R) - 1) / 2, -1.0, 1.0)
    theta = np.arccos(cos)
    if theta < 1e-8:
        return np.array([R[2, 1] - R[1, 2], R[0, 2] - R[2, 0],
                         R[1, 0] - R[0, 1]]) / 2
    if abs(np.pi - theta) < 1e-6:
        # Near pi the off-diagonal formula degenerates; recover the axis
        # from the symmetric part.
        A = (R + np.eye(3)) / 2
        axis = np.sqrt(np.clip(np.diag(A), 0, None))
        # Fix signs from off-diagonal entries relative to the largest entry.
        i = int(np.argmax(axis))
        sign = np.ones(3)
        for j in range(3):
            if j != i and axis[j] > 1e-8:
                sign[j] = np.sign(A[i, j] / axis[i])
        axis = axis * sign
        axis /= np.linalg.norm(axis)
        return axis * theta
    axis = np.array([R[2, 1] - R[1, 2], R[0, 2] - R[2, 0], R[1, 0] - R[0, 1]])
    axis /= (2 * np.sin(theta))
    return axis * theta


def _skew(v: np.ndarray) -> np.ndarray:
    return np.array([[0, -v[2], v[1]],
                     [v[2], 0, -v[0]],
                     [-v[1], v[0], 0]], dtype=np.float64)


def look_at(camera_center: np.ndarray, target: np.ndarray,
            up: np.ndarray = (0.0, 0.0, 1.0)) -> Pose:
    """World-to-camera pose for a camera at ``camera_center`` facing ``target``."""
    c = np.asarray(camera_center, dtype=np.float64)
    forward = np.asarray(target, dtype=np.float64) - c
    norm = np.linalg.norm(forward)
    if norm < 1e-12:
        raise ValueError("camera center coincides with target")
    z = forward / norm
    upv = np.asarray(up, dtype=np.float64)
    # Camera y points down; right = forward x up keeps world-up at the top
    # of the image.
    x = np.cross(z, upv)
    nx = np.linalg.norm(x)
    if nx < 1e-9:
        raise ValueError("view direction parallel to the up vector")
    x /= nx
    y = np.cross(z, x)
    R = np.stack([x, y, z], axis=0)
    return Pose(R, -R @ c)


def generate_rays(pose: Pose, K: Intrinsics, pixels: np.ndarray) -> list[Ray]:
    """Back-project pixel centers into unit world-space rays.

    ``pixels`` is (N, 2) of (u, v); integer coordinates address the pixel
    whose center is (u+0.5, v+0.5). Fractional coordinates are allowed
    (augmentation maps land between pixel centers).
    """
    origins, dirs, px = generate_rays_batch(pose, K, pixels)
    return [Ray(origins[i], dirs[i], (float(px[i, 0]), float(px[i, 1])))
            for i in range(len(dirs))]


def generate_rays_batch(pose: Pose, K: Intrinsics, pixels: np.ndarray
                        ) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Vectorized ray generation: (origins (N,3), directions (N,3), pixels)."""
    px = np.asarray(pixels, dtype=np.float64).reshape(-1, 2)
    if px.size and (px[:, 0].min() < 0 or px[:, 0].max() >= K.width
                    or px[:, 1].min() < 0 or px[:, 1].max() >= K.height):
        bad = px[(px[:, 0] < 0) | (px[:, 0] >= K.width)
                 | (px[:, 1] < 0) | (px[:, 1] >= K.height)][0]
        raise ValueError(f"pixel {tuple(bad)} outside {K.width}x{K.height} image")
    u = px[:, 0] + 0.5
    v = px[:, 1] + 0.5
    d_cam = np.stack([(u - K.cx) / K.fx, (v - K.cy) / K.fy, np.ones_like(u)],
                     axis=1)
    d_world = d_cam @ pose.R  # R^T applied row-wise
    d_world /= np.linalg.norm(d_world, axis=1, keepdims=True)
    center = pose.camera_center()
    origins = np.broadcast_to(center, d_world.shape).copy()
    return origins, d_world, px


def project(point: np.ndarray, pose: Pose, K: Intrinsics
            ) -> tuple[float, float, float]:
    """Pinhole projection to continuous (u, v) plus camera-frame depth."""
    p_cam = pose.world_to_camera(np.asarray(point, dtype=np.float64).reshape(3))
    z = p_cam[2]
    if z <= 1e-9:
        raise ValueError(f"point behind camera (z = {z:.3e})")
    u = K.fx * p_cam[0] / z + K.cx
    v = K.fy * p_cam[1] / z + K.cy
    return float(u), float(v), float(z)


def project_batch(points: np.ndarray, pose: Pose, K: Intrinsics
                  ) -> tuple[np.ndarray, np.ndarray]:
    """Project (N, 3) points; returns ((N, 2) uv, (N,) depth). No cheirality
    check: callers inspect depth themselves (RANSAC scores behind-camera
    points as outliers rather than erroring)."""
    p_cam = pose.world_to_camera(points)
    z = p_cam[:, 2]
    with np.errstate(divide="ignore", invalid="ignore"):
        u = K.fx * p_cam[:, 0] / z + K.cx
        v = K.fy * p_cam[:, 1] / z + K.cy
    return np.stack([u, v], axis=1), z
