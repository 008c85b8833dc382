"""Occlusion and appearance augmentation for stage-2 CNN training.

The object crop is synthetically occluded (border strips shifted out of
frame plus random rectangle erasure), re-fit into the canvas, warped by a
random similarity transform, composited over a random background, and
photometrically jittered. The returned transform maps augmented pixels back
to source pixels so contrastive pairs stay pixel aligned; positives must be
drawn where the augmented mask is on.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy import ndimage


@dataclass(frozen=True)
class AugmentConfig:
    enabled: bool = True
    fit_fraction: float = 190.0 / 224.0   # object long side after re-fit
    occlusion_prob: float = 0.5
    occlusion_shift: tuple[float, float] = (0.2, 0.55)  # fraction of bbox
    erase_prob: float = 0.5
    erase_frac: tuple[float, float] = (0.15, 0.4)       # fraction of bbox
    rotation_deg: float = 30.0
    scale_range: tuple[float, float] = (0.9, 1.15)
    translate_frac: float = 0.12          # of image size
    background: str = "mixed"             # solid | noise | mixed | none
    brightness: float = 0.12
    contrast: float = 0.12
    noise_std: float = 0.015

    @staticmethod
    def disabled() -> "AugmentConfig":
        return AugmentConfig(enabled=False)


@dataclass
class AugmentResult:
    image: np.ndarray   # (H, W, 3) float32
    mask: np.ndarray    # (H, W) bool
    # Row-major 2x3 affine taking augmented (row, col) indices to source
    # indices; identity when geometry was untouched.
    affine: np.ndarray
    occlusion_fraction: float

    def source_pixels(self, pixels: np.ndarray) -> np.ndarray:
        """Map augmented (u, v) pixel indices to source (u, v) coordinates."""
        px = np.asarray(pixels, dtype=np.float64).reshape(-1, 2)
        rc = px[:, ::-1]  # (row, col)
        src_rc = rc @ self.affine[:, :2].T + self.affine[:, 2]
        return src_rc[:, ::-1]


def _occlude(image: np.ndarray, mask: np.ndarray, rng: np.random.Generator,
             cfg: AugmentConfig) -> tuple[np.ndarray, np.ndarray]:
    """Shift-out/shift-back strips and rectangle erasure, in source space."""
    image = image.copy()
    mask = mask.copy()
    ys, xs = np.nonzero(mask)
    if len(xs) == 0:
        return image, mask
    x0, x1 = xs.min(), xs.max() + 1
    y0, y1 = ys.min(), ys.max() + 1
    bw, bh = x1 - x0, y1 - y0

    if rng.uniform() < cfg.occlusion_prob:
        frac = rng.uniform(*cfg.occlusion_shift)
        axis = rng.integers(2)
        side = rng.integers(2)
        if axis == 0:  # vertical strip from the left or right edge of bbox
            cut = max(1, int(round(frac * bw)))
            sl = (slice(None), slice(x0, x0 + cut)) if side == 0 \
                else (slice(None), slice(x1 - cut, x1))
        else:
            cut = max(1, int(round(frac * bh)))
            sl = (slice(y0, y0 + cut), slice(None)) if side == 0 \
                else (slice(y1 - cut, y1), slice(None))
        image[sl] = 0.0
        mask[sl] = False

    if rng.uniform() < cfg.erase_prob:
        rw = max(1, int(round(rng.uniform(*cfg.erase_frac) * bw)))
        rh = max(1, int(round(rng.uniform(*cfg.erase_frac) * bh)))
        cx = rng.integers(x0, max(x0 + 1, x1 - rw + 1))
        cy = rng.integers(y0, max(y0 + 1, y1 - rh + 1))
        image[cy:cy + rh, cx:cx + rw] = 0.0
        mask[cy:cy + rh, cx:cx + rw] = False
    return image, mask


def _similarity(image: np.ndarray, mask: np.ndarray, rng: np.random.Generator,
                cfg: AugmentConfig) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Fit the object into the canvas and apply a random similarity warp.

    Returns warped image/mask plus the 2x3 output-index -> source-index map.
    """
    h, w = mask.shape
    ys, xs = np.nonzero(mask)
    if len(xs) == 0:
        return image, mask, np.array([[1.0, 0, 0], [0, 1.0, 0]])
    long_side = max(xs.max() - xs.min() + 1, ys.max() - ys.min() + 1)
    fit = cfg.fit_fraction * min(h, w) / long_side
    scale = fit * rng.uniform(*cfg.scale_range)
    theta = np.radians(rng.uniform(-cfg.rotation_deg, cfg.rotation_deg))
    src_center = np.array([(ys.min() + ys.max()) / 2.0,
                           (xs.min() + xs.max()) / 2.0])
    shift = cfg.translate_frac * min(h, w)
    dst_center = np.array([h / 2.0, w / 2.0]) \
        + rng.uniform(-shift, shift, size=2)
    rot = np.array([[np.cos(theta), -np.sin(theta)],
                    [np.sin(theta), np.cos(theta)]])
    # Output index o maps to source index: src = Rinv/s (o - dst_c) + src_c
    lin = rot.T / scale
    offset = src_center - lin @ dst_center
    affine = np.hstack([lin, offset[:, None]])
    warped = np.stack([
        ndimage.affine_transform(image[:, :, c], lin, offset=offset,
                                 order=1, mode="constant", cval=0.0)
        for c in range(image.shape[2])], axis=2)
    warped_mask = ndimage.affine_transform(
        mask.astype(np.float32), lin, offset=offset, order=0,
        mode="constant", cval=0.0) > 0.5
    return warped.astype(np.float32), warped_mask, affine


def augment(image: np.ndarray, mask: np.ndarray, rng: np.random.Generator,
            cfg: AugmentConfig, _retry: bool = True) -> AugmentResult:
    """Full pipeline; identity when disabled. An all-occluded draw is
    resampled once, then passed through as-is."""
    identity = np.array([[1.0, 0, 0], [0, 1.0, 0]])
    if not cfg.enabled:
        return AugmentResult(image.astype(np.float32), mask.astype(bool),
                             identity, 0.0)

    occ_img, occ_mask = _occlude(image.astype(np.float32), mask.astype(bool),
                                 rng, cfg)
    base_area = max(int(mask.sum()), 1)
    warped, warped_mask, affine = _similarity(occ_img, occ_mask, rng, cfg)

    # Occlusion fraction: object pixels lost to strips/rectangles, measured
    # in source space where areas are unchanged by the warp.
    occlusion_fraction = 1.0 - float(occ_mask.sum()) / base_area

    if warped_mask.sum() == 0 and _retry:
        return augment(image, mask, rng, cfg, _retry=False)

    out = warped
    if cfg.background != "none":
        kind = cfg.background
        if kind == "mixed":
            kind = "solid" if rng.uniform() < 0.5 else "noise"
        if kind == "solid":
            bg = np.ones_like(out) * rng.uniform(0, 1, size=3).astype(np.float32)
        elif kind == "noise":
            bg = rng.uniform(0, 1, size=out.shape).astype(np.float32)
        else:
            raise ValueError(f"unknown background kind {cfg.background!r}")
        m3 = warped_mask[:, :, None]
        out = np.where(m3, out, bg)

    if cfg.contrast > 0:
        c = rng.uniform(1 - cfg.contrast, 1 + cfg.contrast)
        out = (out - 0.5) * c + 0.5
    if cfg.brightness > 0:
        out = out + rng.uniform(-cfg.brightness, cfg.brightness)
    if cfg.noise_std > 0:
        out = out + rng.normal(0, cfg.noise_std, size=out.shape)
    out = np.clip(out, 0.0, 1.0).astype(np.float32)
    return AugmentResult(out, warped_mask, affine, occlusion_fraction)
