"""Analytic reference scenes: shapes, textures, ray tracing, dataset files.

Stands in for captured pose datasets at desk scale. Objects sit at the
world origin; cameras are sampled on an upper-hemisphere shell looking at
the object. A fixed directional light travels with the camera (headlamp),
so shading is view dependent but shadow free.

Dataset layout on disk:
    root/intrinsics.json
    root/shape.json
    root/train.txt, root/test.txt
    root/frames/%06d.png           8-bit color
    root/frames/%06d.mask.png      binary mask
    root/frames/%06d.depth.f32     raw little-endian float32 camera-z depth
    root/frames/%06d.depth.json    sidecar {width, height, dtype}
    root/frames/%06d.pose.json     {"R": [9], "t": [3], "convention": ...}
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from PIL import Image

from .geometry import (Intrinsics, Pose, generate_rays_batch, look_at,
                       rotation_from_axis_angle)

_PALETTE = np.array([
    [0.92, 0.26, 0.21],
    [0.98, 0.74, 0.02],
    [0.20, 0.66, 0.33],
    [0.26, 0.52, 0.96],
    [0.62, 0.32, 0.71],
    [0.95, 0.49, 0.13],
    [0.22, 0.71, 0.77],
], dtype=np.float64)

_BAND_PALETTE = np.array([
    [0.91, 0.30, 0.24],
    [0.95, 0.77, 0.06],
    [0.18, 0.80, 0.44],
    [0.16, 0.50, 0.73],
    [0.90, 0.90, 0.90],
    [0.56, 0.27, 0.68],
], dtype=np.float64)

KINDS = ("cube", "sphere", "cylinder", "square_prism")
TEXTURES = ("angular_checker", "axial_bands", "face_colors")


@dataclass(frozen=True)
class ShapeSpec:
    """Analytic primitive plus a deterministic surface texture.

    Texture classes mirror the symmetry classes the matcher must cope with:
    angular_checker breaks all symmetry, axial_bands is invariant under any
    rotation about z, face_colors is invariant under 90-degree turns.
    """

    kind: str
    size: tuple[float, ...]  # cube: (side,); sphere: (r,); cylinder/prism: (r|a, h)
    texture: str = "angular_checker"
    base_color: tuple[float, float, float] = (0.85, 0.85, 0.85)
    ambient: float = 0.35

    def __post_init__(self):
        if self.kind not in KINDS:
            raise ValueError(f"unknown shape kind {self.kind!r}")
        if self.texture not in TEXTURES:
            raise ValueError(f"unknown texture {self.texture!r}")
        if any(s <= 0 for s in self.size):
            raise ValueError(f"shape dimensions must be positive, got {self.size}")
        n_expected = {"cube": 1, "sphere": 1, "cylinder": 2, "square_prism": 2}
        if len(self.size) != n_expected[self.kind]:
            raise ValueError(
                f"{self.kind} takes {n_expected[self.kind]} size params, "
                f"got {len(self.size)}")

    # -- derived geometry -----------------------------------------------------

    def bounding_radius(self) -> float:
        if self.kind == "cube":
            return self.size[0] * np.sqrt(3) / 2
        if self.kind == "sphere":
            return self.size[0]
        r_or_a, h = self.size
        if self.kind == "cylinder":
            return float(np.hypot(r_or_a, h / 2))
        return float(np.sqrt(2 * (r_or_a / 2) ** 2 + (h / 2) ** 2))

    def diameter(self) -> float:
        """Max pairwise surface distance; closed form for all four kinds."""
        if self.kind == "cube":
            return self.size[0] * np.sqrt(3)
        if self.kind == "sphere":
            return 2 * self.size[0]
        r_or_a, h = self.size
        if self.kind == "cylinder":
            return float(np.hypot(2 * r_or_a, h))
        return float(np.sqrt(2 * r_or_a ** 2 + h ** 2))

    def half_extents(self) -> np.ndarray:
        if self.kind == "cube":
            s = self.size[0] / 2
            return np.array([s, s, s])
        if self.kind == "sphere":
            r = self.size[0]
            return np.array([r, r, r])
        r_or_a, h = self.size
        if self.kind == "cylinder":
            return np.array([r_or_a, r_or_a, h / 2])
        a = r_or_a / 2
        return np.array([a, a, h / 2])

    # -- intersection ----------------------------------------------------------

    def intersect(self, origins: np.ndarray, dirs: np.ndarray
                  ) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
        """First-hit query. Returns (hit (N,), t (N,), normal (N,3))."""
        if self.kind == "sphere":
            return _intersect_sphere(origins, dirs, self.size[0])
        if self.kind == "cube":
            return _intersect_box(origins, dirs, self.half_extents())
        if self.kind == "square_prism":
            return _intersect_box(origins, dirs, self.half_extents())
        return _intersect_cylinder(origins, dirs, self.size[0], self.size[1])

    def contains(self, points: np.ndarray, tol: float = 0.0) -> np.ndarray:
        p = np.asarray(points, dtype=np.float64).reshape(-1, 3)
        if self.kind == "sphere":
            return np.linalg.norm(p, axis=1) <= self.size[0] + tol
        if self.kind == "cylinder":
            r, h = self.size
            return (np.hypot(p[:, 0], p[:, 1]) <= r + tol) \
                & (np.abs(p[:, 2]) <= h / 2 + tol)
        he = self.half_extents() + tol
        return np.all(np.abs(p) <= he, axis=1)

    def surface_distance(self, points: np.ndarray) -> np.ndarray:
        """Unsigned distance from each point to the surface (exact)."""
        p = np.asarray(points, dtype=np.float64).reshape(-1, 3)
        if self.kind == "sphere":
            return np.abs(np.linalg.norm(p, axis=1) - self.size[0])
        if self.kind == "cylinder":
            r, h = self.size
            dr = np.hypot(p[:, 0], p[:, 1]) - r
            dz = np.abs(p[:, 2]) - h / 2
            outside = np.hypot(np.maximum(dr, 0), np.maximum(dz, 0))
            inside = np.abs(np.minimum(np.maximum(dr, dz), 0))
            return outside + inside
        he = self.half_extents()
        q = np.abs(p) - he
        outside = np.linalg.norm(np.maximum(q, 0), axis=1)
        inside = np.abs(np.minimum(q.max(axis=1), 0))
        return outside + inside

    # -- texture & shading -----------------------------------------------------

    def albedo(self, points: np.ndarray, normals: np.ndarray) -> np.ndarray:
        p = np.asarray(points, dtype=np.float64).reshape(-1, 3)
        n = np.asarray(normals, dtype=np.float64).reshape(-1, 3)
        base = np.asarray(self.base_color, dtype=np.float64)
        if self.texture == "angular_checker":
            az = np.arctan2(p[:, 1], p[:, 0])
            norm = np.linalg.norm(p, axis=1)
            el = np.arcsin(np.clip(p[:, 2] / np.maximum(norm, 1e-12), -1, 1))
            i = np.floor((az + np.pi) / (2 * np.pi) * 5).astype(int) % 5
            j = np.clip(np.floor((el + np.pi / 2) / np.pi * 3).astype(int), 0, 2)
            colors = _PALETTE[(i + 2 * j) % len(_PALETTE)]
            ramp = 0.7 + 0.3 * (az + np.pi) / (2 * np.pi)
            return colors * ramp[:, None]
        if self.texture == "axial_bands":
            hz = self.half_extents()[2]
            nb = 5
            j = np.clip(np.floor((p[:, 2] + hz) / (2 * hz) * nb).astype(int),
                        0, nb - 1)
            return _BAND_PALETTE[j % len(_BAND_PALETTE)].copy()
        # face_colors: all lateral faces share one color so quarter turns
        # about z leave the rendering unchanged; caps differ.
        out = np.tile(base, (len(p), 1))
        axis = np.argmax(np.abs(n), axis=1)
        top = (axis == 2) & (n[:, 2] > 0)
        bottom = (axis == 2) & (n[:, 2] <= 0)
        out[axis != 2] = _PALETTE[3]
        out[top] = _PALETTE[0]
        out[bottom] = _PALETTE[1]
        return out

    def shade(self, points: np.ndarray, normals: np.ndarray,
              view_dirs: np.ndarray) -> np.ndarray:
        """Lambertian under a camera-attached headlamp plus ambient."""
        albedo = self.albedo(points, normals)
        lambert = np.maximum(0.0, -(normals * view_dirs).sum(axis=1))
        shade = self.ambient + (1 - self.ambient) * lambert
        return np.clip(albedo * shade[:, None], 0.0, 1.0)

    # -- serialization ----------------------------------------------------------

    def to_dict(self) -> dict:
        return {"kind": self.kind, "size": list(self.size),
                "texture": self.texture, "base_color": list(self.base_color),
                "ambient": self.ambient,
                "diameter": self.diameter(),
                "bounding_radius": self.bounding_radius()}

    @staticmethod
    def from_dict(d: dict) -> "ShapeSpec":
        return ShapeSpec(kind=d["kind"], size=tuple(d["size"]),
                         texture=d.get("texture", "angular_checker"),
                         base_color=tuple(d.get("base_color", (0.85, 0.85, 0.85))),
                         ambient=float(d.get("ambient", 0.35)))


def _intersect_sphere(o, d, r):
    o = np.asarray(o, dtype=np.float64)
    d = np.asarray(d, dtype=np.float64)
    b = (o * d).sum(axis=1)
    c = (o * o).sum(axis=1) - r * r
    disc = b * b - c
    ok = disc >= 0
    sq = np.sqrt(np.where(ok, disc, 0.0))
    t = -b - sq
    hit = ok & (t > 1e-9)
    t = np.where(hit, t, np.inf)
    pts = o + t[:, None] * d
    normals = np.where(hit[:, None], pts / r, 0.0)
    return hit, t, normals


def _intersect_box(o, d, half):
    o = np.asarray(o, dtype=np.float64)
    d = np.asarray(d, dtype=np.float64)
    with np.errstate(divide="ignore", invalid="ignore"):
        inv = 1.0 / d
        t1 = (-half - o) * inv
        t2 = (half - o) * inv
    tmin_axis = np.minimum(t1, t2)
    tmax_axis = np.maximum(t1, t2)
    # Rays parallel to a slab (d == 0): inside iff |o| <= half on that axis.
    parallel = d == 0
    inside = np.abs(o) <= half
    tmin_axis = np.where(parallel, np.where(inside, -np.inf, np.inf), tmin_axis)
    tmax_axis = np.where(parallel, np.where(inside, np.inf, -np.inf), tmax_axis)
    tmin = tmin_axis.max(axis=1)
    tmax = tmax_axis.min(axis=1)
    hit = (tmax >= tmin) & (tmin > 1e-9)
    t = np.where(hit, tmin, np.inf)
    enter_axis = tmin_axis.argmax(axis=1)
    normals = np.zeros_like(o)
    rows = np.arange(len(o))
    sign = -np.sign(d[rows, enter_axis])
    sign = np.where(sign == 0, 1.0, sign)
    normals[rows, enter_axis] = sign
    normals = np.where(hit[:, None], normals, 0.0)
    return hit, t, normals


def _intersect_cylinder(o, d, r, h):
    o = np.asarray(o, dtype=np.float64)
    d = np.asarray(d, dtype=np.float64)
    n = len(o)
    hz = h / 2
    best_t = np.full(n, np.inf)
    normals = np.zeros((n, 3))

    # Lateral surface.
    a = d[:, 0] ** 2 + d[:, 1] ** 2
    b = o[:, 0] * d[:, 0] + o[:, 1] * d[:, 1]
    c = o[:, 0] ** 2 + o[:, 1] ** 2 - r * r
    disc = b * b - a * c
    valid = (disc >= 0) & (a > 1e-15)
    sq = np.sqrt(np.where(valid, disc, 0.0))
    with np.errstate(divide="ignore", invalid="ignore"):
        for t_side in ((-b - sq) / a, (-b + sq) / a):
            z = o[:, 2] + t_side * d[:, 2]
            ok = valid & (t_side > 1e-9) & (np.abs(z) <= hz) & (t_side < best_t)
            best_t = np.where(ok, t_side, best_t)
            if ok.any():
                pts = o[ok] + t_side[ok, None] * d[ok]
                normals[ok] = np.column_stack(
                    [pts[:, 0] / r, pts[:, 1] / r, np.zeros(ok.sum())])

    # Caps.
    with np.errstate(divide="ignore", invalid="ignore"):
        for zcap, nz in ((hz, 1.0), (-hz, -1.0)):
            t_cap = (zcap - o[:, 2]) / d[:, 2]
            x = o[:, 0] + t_cap * d[:, 0]
            y = o[:, 1] + t_cap * d[:, 1]
            ok = (np.abs(d[:, 2]) > 1e-15) & (t_cap > 1e-9) \
                & (x * x + y * y <= r * r) & (t_cap < best_t)
            best_t = np.where(ok, t_cap, best_t)
            normals[ok] = np.array([0.0, 0.0, nz])

    hit = np.isfinite(best_t)
    return hit, best_t, normals


# -- frame rendering ----------------------------------------------------------


def raytrace_frame(shape: ShapeSpec, pose: Pose, K: Intrinsics
                   ) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Exact render: (image (H,W,3) float in [0,1], mask (H,W) bool,
    depth (H,W) float32 camera-frame z, zero where empty)."""
    uu, vv = np.meshgrid(np.arange(K.width), np.arange(K.height))
    pixels = np.stack([uu.reshape(-1), vv.reshape(-1)], axis=1)
    origins, dirs, _ = generate_rays_batch(pose, K, pixels)
    hit, t, normals = shape.intersect(origins, dirs)
    image = np.zeros((K.height * K.width, 3), dtype=np.float64)
    depth = np.zeros(K.height * K.width, dtype=np.float64)
    if hit.any():
        pts = origins[hit] + t[hit, None] * dirs[hit]
        image[hit] = shape.shade(pts, normals[hit], dirs[hit])
        depth[hit] = pose.world_to_camera(pts)[:, 2]
    image = image.reshape(K.height, K.width, 3).astype(np.float32)
    mask = hit.reshape(K.height, K.width)
    return image, mask, depth.reshape(K.height, K.width).astype(np.float32)


# -- dataset on disk ----------------------------------------------------------


@dataclass
class TrainSample:
    image: np.ndarray       # (H, W, 3) float32 in [0, 1]
    mask: np.ndarray        # (H, W) bool
    pose: Pose
    depth: np.ndarray | None = None  # (H, W) float32 camera-z, eval only


@dataclass
class Dataset:
    root: Path
    intrinsics: Intrinsics
    shape: ShapeSpec
    train_ids: list[str]
    test_ids: list[str]
    pose_overrides: dict[str, Pose] = field(default_factory=dict)

    @staticmethod
    def load(root) -> "Dataset":
        root = Path(root)
        intr = Intrinsics.from_dict(
            json.loads((root / "intrinsics.json").read_text()))
        shape = ShapeSpec.from_dict(json.loads((root / "shape.json").read_text()))
        train_ids = (root / "train.txt").read_text().split()
        test_ids = (root / "test.txt").read_text().split()
        return Dataset(root, intr, shape, train_ids, test_ids)

    def frame_pose(self, frame_id: str) -> Pose:
        if frame_id in self.pose_overrides:
            return self.pose_overrides[frame_id]
        d = json.loads((self.root / "frames" / f"{frame_id}.pose.json").read_text())
        return Pose.from_dict(d)

    def load_frame(self, frame_id: str, with_depth: bool = False) -> TrainSample:
        fdir = self.root / "frames"
        img = np.asarray(Image.open(fdir / f"{frame_id}.png"), dtype=np.float32)
        img /= 255.0
        mask = np.asarray(Image.open(fdir / f"{frame_id}.mask.png")) > 127
        depth = None
        if with_depth:
            depth = read_depth(fdir / f"{frame_id}.depth.f32")
        return TrainSample(img, mask, self.frame_pose(frame_id), depth)

    def with_pose_overrides(self, poses: dict[str, Pose]) -> "Dataset":
        """View of the dataset with some poses replaced (noisy-label runs)."""
        return Dataset(self.root, self.intrinsics, self.shape,
                       list(self.train_ids), list(self.test_ids), dict(poses))

    def near_far(self, pose: Pose, margin: float = 1.1) -> tuple[float, float]:
        """Ray bounds from the bounding sphere with a 10% margin."""
        dist = float(np.linalg.norm(pose.camera_center()))
        reach = margin * self.shape.bounding_radius()
        near = max(dist - reach, 0.05 * dist)
        return near, dist + reach


def write_depth(path, depth: np.ndarray) -> None:
    depth = np.asarray(depth, dtype="<f4")
    Path(path).write_bytes(depth.tobytes())
    sidecar = {"width": int(depth.shape[1]), "height": int(depth.shape[0]),
               "dtype": "float32"}
    Path(str(path).replace(".f32", ".json")).write_text(json.dumps(sidecar))


def read_depth(path) -> np.ndarray:
    sidecar = json.loads(Path(str(path).replace(".f32", ".json")).read_text())
    raw = np.frombuffer(Path(path).read_bytes(), dtype="<f4")
    return raw.reshape(sidecar["height"], sidecar["width"]).copy()


def default_intrinsics(image_size: int, fov_deg: float = 40.0) -> Intrinsics:
    f = image_size / (2 * np.tan(np.radians(fov_deg) / 2))
    c = image_size / 2
    return Intrinsics(fx=f, fy=f, cx=c, cy=c, width=image_size, height=image_size)


def sample_view_poses(n: int, base_distance: float, rng: np.random.Generator,
                      elevation_deg: tuple[float, float] = (20.0, 70.0),
                      radius_jitter: float = 0.15) -> list[Pose]:
    poses = []
    for _ in range(n):
        az = rng.uniform(0, 2 * np.pi)
        el = np.radians(rng.uniform(*elevation_deg))
        dist = base_distance * rng.uniform(1 - radius_jitter, 1 + radius_jitter)
        center = dist * np.array([np.cos(el) * np.cos(az),
                                  np.cos(el) * np.sin(az),
                                  np.sin(el)])
        poses.append(look_at(center, np.zeros(3)))
    return poses


def generate_dataset(shape: ShapeSpec, n_train: int, n_test: int, seed: int,
                     out_dir, image_size: int = 48,
                     elevation_deg: tuple[float, float] = (20.0, 70.0)) -> Dataset:
    """Render and write a complete dataset; byte-identical for a given seed."""
    if n_train < 8:
        raise ValueError(f"need at least 8 training views, got {n_train}")
    from .rng import substream
    rng = substream(seed, "dataset")
    out = Path(out_dir)
    (out / "frames").mkdir(parents=True, exist_ok=True)
    K = default_intrinsics(image_size)
    base_distance = 5.0 * shape.bounding_radius()
    poses = sample_view_poses(n_train + n_test, base_distance, rng,
                              elevation_deg=elevation_deg)

    ids = [f"{i:06d}" for i in range(n_train + n_test)]
    for frame_id, pose in zip(ids, poses):
        image, mask, depth = raytrace_frame(shape, pose, K)
        fdir = out / "frames"
        Image.fromarray((np.clip(image, 0, 1) * 255).round().astype(np.uint8)
                        ).save(fdir / f"{frame_id}.png")
        Image.fromarray((mask * 255).astype(np.uint8)).save(
            fdir / f"{frame_id}.mask.png")
        write_depth(fdir / f"{frame_id}.depth.f32", depth)
        (fdir / f"{frame_id}.pose.json").write_text(json.dumps(pose.to_dict()))

    (out / "intrinsics.json").write_text(json.dumps(K.to_dict()))
    (out / "shape.json").write_text(json.dumps(shape.to_dict()))
    (out / "train.txt").write_text("\n".join(ids[:n_train]) + "\n")
    (out / "test.txt").write_text("\n".join(ids[n_train:]) + "\n")
    return Dataset(out, K, shape, ids[:n_train], ids[n_train:])


def perturb_poses(poses: dict[str, Pose] | list[Pose], rot_deg: float,
                  trans_frac_of_diameter: float, diameter: float, seed: int
                  ) -> dict[str, Pose] | list[Pose]:
    """Corrupt poses with bounded rotation/translation noise.

    Rotation: random axis, angle uniform in [0, rot_deg]. Translation:
    uniform in a ball of radius trans_frac_of_diameter * diameter.
    """
    if rot_deg < 0 or trans_frac_of_diameter < 0:
        raise ValueError("perturbation magnitudes must be non-negative")
    from .rng import substream
    rng = substream(seed, "perturb")

    def one(pose: Pose) -> Pose:
        axis = rng.normal(size=3)
        axis /= np.linalg.norm(axis)
        angle = np.radians(rng.uniform(0, rot_deg))
        dR = rotation_from_axis_angle(axis * angle)
        direction = rng.normal(size=3)
        direction /= np.linalg.norm(direction)
        radius = trans_frac_of_diameter * diameter * rng.uniform() ** (1 / 3)
        return Pose(dR @ pose.R, pose.t + direction * radius)

    if isinstance(poses, dict):
        return {k: one(p) for k, p in sorted(poses.items())}
    return [one(p) for p in poses]


def sample_surface_points(shape: ShapeSpec, n: int, rng: np.random.Generator
                          ) -> tuple[np.ndarray, np.ndarray]:
    """Uniform-by-area surface samples with analytic normals."""
    if n < 1:
        raise ValueError(f"need n >= 1 surface samples, got {n}")
    if shape.kind == "sphere":
        r = shape.size[0]
        v = rng.normal(size=(n, 3))
        v /= np.linalg.norm(v, axis=1, keepdims=True)
        return v * r, v.copy()
    if shape.kind in ("cube", "square_prism"):
        he = shape.half_extents()
        # Face areas: two faces per axis, area = product of the other extents.
        areas = np.array([he[1] * he[2], he[0] * he[2], he[0] * he[1]]) * 4
        probs = np.repeat(areas / areas.sum() / 2, 2)
        face = rng.choice(6, size=n, p=probs)
        axis = face // 2
        sign = np.where(face % 2 == 0, 1.0, -1.0)
        pts = rng.uniform(-1, 1, size=(n, 3)) * he
        normals = np.zeros((n, 3))
        rows = np.arange(n)
        pts[rows, axis] = sign * he[axis]
        normals[rows, axis] = sign
        return pts, normals
    r, h = shape.size
    side_area = 2 * np.pi * r * h
    cap_area = np.pi * r * r
    total = side_area + 2 * cap_area
    which = rng.choice(3, size=n, p=[side_area / total, cap_area / total,
                                     cap_area / total])
    az = rng.uniform(0, 2 * np.pi, size=n)
    pts = np.zeros((n, 3))
    normals = np.zeros((n, 3))
    side = which == 0
    pts[side] = np.column_stack([r * np.cos(az[side]), r * np.sin(az[side]),
                                 rng.uniform(-h / 2, h / 2, size=side.sum())])
    normals[side] = np.column_stack([np.cos(az[side]), np.sin(az[side]),
                                     np.zeros(side.sum())])
    for idx, zsign in ((which == 1, 1.0), (which == 2, -1.0)):
        m = idx.sum()
        if m == 0:
            continue
        rad = r * np.sqrt(rng.uniform(size=m))
        pts[idx] = np.column_stack([rad * np.cos(az[idx]), rad * np.sin(az[idx]),
                                    np.full(m, zsign * h / 2)])
        normals[idx] = np.array([0.0, 0.0, zsign])
    return pts, normals
