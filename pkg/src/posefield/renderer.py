"""Ray sampling and volumetric integration.

The quadrature is the standard discrete transmittance form:
    alpha_i = 1 - exp(-d_i * delta_i)
    T_i     = exp(-sum_{j<i} d_j delta_j) = prod_{j<i} (1 - alpha_j)
    C       = sum_i T_i alpha_i c_i        (likewise G over features)
    S       = sum_i T_i alpha_i = 1 - prod_i (1 - alpha_i)
    depth   = sum_i T_i alpha_i t_i / max(S, eps)

S is the accumulated opacity in [0, 1]; rays through empty space render
exactly zero. Everything is differentiable end to end through densities,
colors, and features when a tape is active.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autodiff as A
from .autodiff import Tensor
from .field import FieldModel
from .geometry import Intrinsics, Pose, generate_rays_batch

def sample_uniform(near, far, m: int, jitter: bool,
                   rng: np.random.Generator | None = None,
                   n_rays: int = 1) -> np.ndarray:
    """(n_rays, m) sorted sample distances: bin midpoints, or one uniform
    draw per bin when jittered (stratified along the ray).

    ``near``/``far`` may be scalars or per-ray arrays of length n_rays.
    """
    near = np.asarray(near, dtype=np.float64)
    far = np.asarray(far, dtype=np.float64)
    if near.ndim > 0 and len(near) != n_rays:
        raise ValueError(f"per-ray near has length {len(near)}, expected {n_rays}")
    if np.any(near <= 0) or np.any(far <= near):
        raise ValueError(f"need 0 < near < far, got near={near}, far={far}")
    if m < 2:
        raise ValueError(f"need at least 2 samples per ray, got {m}")
    if jitter:
        if rng is None:
            raise ValueError("jittered sampling needs an rng")
        u = rng.uniform(size=(n_rays, m))
    else:
        u = np.full((n_rays, m), 0.5)
    near2 = np.broadcast_to(near, (n_rays,))[:, None]
    far2 = np.broadcast_to(far, (n_rays,))[:, None]
    width = (far2 - near2) / m
    starts = near2 + np.arange(m)[None, :] * width
    return starts + u * width


def deltas_from_t(t: np.ndarray) -> np.ndarray:
    """Forward differences; the final sample reuses the previous spacing.

    A huge far sentinel would saturate opacity through any strictly
    positive (softplus) density and underflow its gradient to zero, making
    silhouette supervision unlearnable; the scene is bounded inside
    [near, far] anyway, so the closing bin carries no special mass.
    """
    d = np.diff(t, axis=-1)
    return np.concatenate([d, d[..., -1:]], axis=-1)


@dataclass
class RaySampleBatch:
    """Per-ray samples plus the field outputs evaluated at them."""

    t: np.ndarray                 # (R, M) strictly increasing
    deltas: np.ndarray            # (R, M)
    positions: np.ndarray         # (R, M, 3)
    densities: Tensor             # (R, M) non-negative
    colors: Tensor | None = None  # (R, M, 3)
    features: Tensor | None = None  # (R, M, F)


@dataclass
class RenderOutputs:
    weights: np.ndarray | None    # (R, M) contributions T_i alpha_i (detached)
    S: Tensor                     # (R,) accumulated opacity
    C: Tensor | None = None       # (R, 3)
    G: Tensor | None = None       # (R, F)
    depth: Tensor | None = None   # (R,)


def integrate(batch: RaySampleBatch) -> RenderOutputs:
    dens = batch.densities
    if float(dens.data.min(initial=0.0)) < 0:
        raise ValueError(
            f"negative density in batch (min {float(dens.data.min()):.3e})")
    n_rays, m = dens.shape
    ddelta = A.mul(dens, Tensor(batch.deltas.astype(dens.data.dtype)))
    alpha = A.add(A.mul(A.exp(A.mul(ddelta, -1.0)), -1.0), 1.0)
    inclusive = A.cumsum(ddelta, axis=-1)
    exclusive = A.add(inclusive, A.mul(ddelta, -1.0))
    transmittance = A.exp(A.mul(exclusive, -1.0))
    w = A.mul(transmittance, alpha)
    S = w.sum(axis=1)
    out = RenderOutputs(weights=w.data, S=S)
    w3 = A.reshape(w, (n_rays, m, 1))
    if batch.colors is not None:
        out.C = A.mul(w3, batch.colors).sum(axis=1)
    if batch.features is not None:
        out.G = A.mul(w3, batch.features).sum(axis=1)
    t_const = Tensor(batch.t.astype(dens.data.dtype))
    out.depth = A.div(A.mul(w, t_const).sum(axis=1), A.clamp_min(S, 1e-10))
    return out


def stratified_resample(t: np.ndarray, contributions: np.ndarray, k: int,
                        rng: np.random.Generator) -> np.ndarray:
    """Inverse-CDF redraw of k samples per ray from the contribution histogram.

    Bins are centered on the coarse samples (edges at midpoints). Rays whose
    contributions are all zero fall back to uniform mass. Output is sorted.
    """
    if k <= 0:
        raise ValueError(f"need k > 0 resampled points, got {k}")
    t = np.atleast_2d(np.asarray(t, dtype=np.float64))
    mass = np.atleast_2d(np.asarray(contributions, dtype=np.float64)).copy()
    if mass.min() < 0:
        raise ValueError("contributions must be non-negative")
    n_rays, m = t.shape
    edges = np.empty((n_rays, m + 1))
    edges[:, 1:-1] = 0.5 * (t[:, 1:] + t[:, :-1])
    edges[:, 0] = t[:, 0] - 0.5 * (t[:, 1] - t[:, 0])
    edges[:, -1] = t[:, -1] + 0.5 * (t[:, -1] - t[:, -2])

    total = mass.sum(axis=1, keepdims=True)
    empty = total[:, 0] <= 0
    mass[empty] = 1.0
    total = mass.sum(axis=1, keepdims=True)
    cdf = np.concatenate([np.zeros((n_rays, 1)), np.cumsum(mass, axis=1) / total],
                         axis=1)
    cdf[:, -1] = 1.0

    u = (np.arange(k)[None, :] + rng.uniform(size=(n_rays, k))) / k
    # Row-offset trick keeps searchsorted one-dimensional: each row's cdf
    # lives in [2r, 2r + 1], strictly below the next row's block.
    offsets = 2.0 * np.arange(n_rays)[:, None]
    flat_cdf = (cdf + offsets).reshape(-1)
    flat_u = (u + offsets).reshape(-1)
    idx = np.searchsorted(flat_cdf, flat_u, side="right")
    idx = idx - np.repeat(np.arange(n_rays), k) * (m + 1)
    idx = np.clip(idx, 1, m).reshape(n_rays, k)

    rows = np.arange(n_rays)[:, None]
    c_lo = cdf[rows, idx - 1]
    c_hi = cdf[rows, idx]
    denom = np.where(c_hi - c_lo < 1e-12, 1.0, c_hi - c_lo)
    frac = (u - c_lo) / denom
    lo = edges[rows, idx - 1]
    hi = edges[rows, idx]
    return np.sort(lo + frac * (hi - lo), axis=1)


@dataclass(frozen=True)
class RenderConfig:
    points_per_ray: int = 128
    resample_k: int = 8
    jitter: bool = False
    chunk: int = 4096


def field_sample_batch(model: FieldModel, origins: np.ndarray, dirs: np.ndarray,
                       t: np.ndarray, want_color: bool = True,
                       want_features: bool = False) -> RaySampleBatch:
    """Evaluate the field at origin + t * dir for every ray and sample."""
    n_rays, m = t.shape
    positions = origins[:, None, :] + t[..., None] * dirs[:, None, :]
    flat = positions.reshape(-1, 3)
    dens_flat, intermediate = model.density_forward(flat)
    densities = A.reshape(dens_flat, (n_rays, m))
    colors = None
    if want_color:
        rep = np.repeat(np.arange(n_rays, dtype=np.intp), m)
        col_flat = model.color_forward(intermediate, dirs, repeat_index=rep)
        colors = A.reshape(col_flat, (n_rays, m, 3))
    features = None
    if want_features:
        feat_flat = model.feature_forward(flat)
        features = A.reshape(feat_flat, (n_rays, m, model.config.feature_dim))
    return RaySampleBatch(t=t, deltas=deltas_from_t(t), positions=positions,
                          densities=densities, colors=colors, features=features)


def render_rays(model: FieldModel, origins: np.ndarray, dirs: np.ndarray,
                near: float, far: float, cfg: RenderConfig,
                rng: np.random.Generator | None = None,
                want_color: bool = True) -> RenderOutputs:
    """One uniform-sampling render pass (the stage-1 training path)."""
    t = sample_uniform(near, far, cfg.points_per_ray, cfg.jitter, rng,
                       n_rays=len(dirs))
    batch = field_sample_batch(model, origins, dirs, t, want_color=want_color)
    return integrate(batch)


def coarse_blend_weights(model: FieldModel, origins: np.ndarray,
                         dirs: np.ndarray, near, far, m: int, jitter: bool,
                         rng: np.random.Generator | None = None
                         ) -> tuple[np.ndarray, np.ndarray]:
    """No-grad density pass returning (t (R, m), contributions (R, m))."""
    n_rays = len(dirs)
    with A.no_grad():
        t = sample_uniform(near, far, m, jitter, rng, n_rays=n_rays)
        pos = origins[:, None, :] + t[..., None] * dirs[:, None, :]
        dens = model.density_at(pos.reshape(-1, 3)).reshape(n_rays, m) \
            .astype(np.float64)
        ddelta = dens * deltas_from_t(t)
        alpha = 1.0 - np.exp(-ddelta)
        trans = np.exp(-(np.cumsum(ddelta, axis=1) - ddelta))
        return t, trans * alpha


def feature_from_coarse(model: FieldModel, origins: np.ndarray,
                        dirs: np.ndarray, t_coarse: np.ndarray,
                        w_coarse: np.ndarray, k: int,
                        rng: np.random.Generator
                        ) -> tuple[Tensor, np.ndarray]:
    """Resample k surface-hugging points and integrate features over them.

    Density is treated as frozen: blend weights are plain numbers, and
    gradients flow through the feature MLP only. Returns (G (R, F) tensor,
    fine opacity (R,)).
    """
    n_rays = len(dirs)
    t_fine = stratified_resample(t_coarse, w_coarse, k, rng)
    fine_pos = origins[:, None, :] + t_fine[..., None] * dirs[:, None, :]
    flat = fine_pos.reshape(-1, 3)
    with A.no_grad():
        d_fine = model.density_at(flat).reshape(n_rays, k).astype(np.float64)
        ddelta_f = d_fine * deltas_from_t(t_fine)
        alpha_f = 1.0 - np.exp(-ddelta_f)
        trans_f = np.exp(-(np.cumsum(ddelta_f, axis=1) - ddelta_f))
        w_fine = (trans_f * alpha_f).astype(model.config.dtype)
    feats = model.feature_forward(flat)
    feats = A.reshape(feats, (n_rays, k, model.config.feature_dim))
    G = A.mul(A.reshape(Tensor(w_fine), (n_rays, k, 1)), feats).sum(axis=1)
    return G, w_fine.sum(axis=1).astype(np.float64)


def render_feature_rays(model: FieldModel, origins: np.ndarray, dirs: np.ndarray,
                        near, far, cfg: RenderConfig,
                        rng: np.random.Generator | None = None
                        ) -> tuple[Tensor, np.ndarray]:
    """Surface-focused feature render (the stage-2 path): a no-grad coarse
    pass estimates blend weights, k points are redrawn by stratified
    inverse-CDF sampling, and only those k samples contribute."""
    t_coarse, w_coarse = coarse_blend_weights(
        model, origins, dirs, near, far, cfg.points_per_ray, cfg.jitter, rng)
    return feature_from_coarse(
        model, origins, dirs, t_coarse, w_coarse, cfg.resample_k,
        rng if rng is not None else np.random.default_rng(0))


MODES = ("color", "feature", "silhouette", "depth")


def render_image(model: FieldModel, pose: Pose, K: Intrinsics, near: float,
                 far: float, mode: str = "color", pixels: np.ndarray | None = None,
                 cfg: RenderConfig | None = None,
                 rng: np.random.Generator | None = None) -> np.ndarray:
    """Render the requested pixels (default: full frame) into a planar image.

    Rays are processed in chunks written to disjoint pixel slots, so chunks
    are safe to parallelize. Feature mode uses the stage-2 sampling scheme.
    """
    if mode not in MODES:
        raise ValueError(f"unknown render mode {mode!r}; expected one of {MODES}")
    cfg = cfg or RenderConfig()
    if pixels is None:
        uu, vv = np.meshgrid(np.arange(K.width), np.arange(K.height))
        pixels = np.stack([uu.reshape(-1), vv.reshape(-1)], axis=1)
    pixels = np.asarray(pixels)
    channels = {"color": 3, "silhouette": 1, "depth": 1,
                "feature": model.config.feature_dim}[mode]
    out = np.zeros((K.height, K.width, channels), dtype=np.float32)

    for start in range(0, len(pixels), cfg.chunk):
        chunk_px = pixels[start:start + cfg.chunk]
        origins, dirs, _ = generate_rays_batch(pose, K, chunk_px)
        with A.no_grad():
            if mode == "feature":
                G, _ = render_feature_rays(model, origins, dirs, near, far,
                                           cfg, rng)
                values = G.data
            else:
                res = render_rays(model, origins, dirs, near, far, cfg, rng,
                                  want_color=(mode == "color"))
                if mode == "color":
                    values = res.C.data
                elif mode == "silhouette":
                    values = res.S.data[:, None]
                else:
                    values = res.depth.data[:, None]
        cols = chunk_px[:, 0].astype(int)
        rows = chunk_px[:, 1].astype(int)
        out[rows, cols] = values.astype(np.float32)
    return out[:, :, 0] if channels == 1 else out
