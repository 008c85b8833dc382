"""Two-stage training.

Stage 1 fits geometry and appearance: random pixels are rendered through
the field and pulled toward the captured color and mask with L1 losses;
only the density and color MLPs update. Stage 2 freezes them and trains
the feature MLP together with the CNN using a bidirectional InfoNCE loss
over pixel-aligned feature pairs, with negatives rendered from random
training viewpoints each step.
"""

from __future__ import annotations

import csv
import json
from dataclasses import asdict, dataclass, field as dc_field
from pathlib import Path

import numpy as np

from . import autodiff as A
from .augment import AugmentConfig, augment
from .autodiff import Adam, Tensor, save_checkpoint, load_checkpoint
from .field import FieldConfig, FieldModel
from .geometry import Intrinsics, Pose, generate_rays_batch
from .renderer import (RenderConfig, coarse_blend_weights, feature_from_coarse,
                       render_rays)
from .rng import substream
from .synth import Dataset, TrainSample
from .unet import UNet, UNetConfig


@dataclass(frozen=True)
class Stage1Config:
    iters: int = 3000
    batch_images: int = 3
    rays_per_image: int = 512
    points_per_ray: int = 128
    lr: float = 1e-3
    jitter: bool = True
    in_mask_fraction: float = 0.5  # rest of the rays are uniform over the frame


@dataclass(frozen=True)
class Stage2Config:
    iters: int = 3000
    batch_images: int = 8
    positives_per_image: int = 256
    negatives_per_image: int = 256
    resample_k: int = 8
    coarse_points_per_ray: int = 128
    lr_field: float = 3e-5
    lr_cnn: float = 3e-4
    jitter: bool = True
    include_positive_in_denominator: bool = True
    temperature: float = 1.0
    normalize_features: bool = False
    train_cnn: bool = True  # False runs the frozen-CNN ablation


@dataclass(frozen=True)
class TrainConfig:
    stage1: Stage1Config = dc_field(default_factory=Stage1Config)
    stage2: Stage2Config = dc_field(default_factory=Stage2Config)
    augment: AugmentConfig = dc_field(default_factory=AugmentConfig)
    seed: int = 0
    deterministic: bool = True

    def to_json(self) -> str:
        return json.dumps(asdict(self), indent=2)

    @staticmethod
    def from_dict(d: dict) -> "TrainConfig":
        return TrainConfig(
            stage1=Stage1Config(**d.get("stage1", {})),
            stage2=Stage2Config(**d.get("stage2", {})),
            augment=AugmentConfig(**d.get("augment", {})),
            seed=int(d.get("seed", 0)),
            deterministic=bool(d.get("deterministic", True)),
        )


def desk_train_config(**overrides) -> TrainConfig:
    """Throughput-sized defaults for a 2-core CPU run."""
    d = dict(
        stage1=Stage1Config(iters=3000, batch_images=2, rays_per_image=192),
        stage2=Stage2Config(iters=1800, batch_images=6, positives_per_image=96,
                            negatives_per_image=96, lr_field=1e-3, lr_cnn=1e-3),
    )
    d.update(overrides)
    return TrainConfig(**d)


class ViewBank:
    """Training views preloaded into arrays for fast random access."""

    def __init__(self, samples: list[TrainSample], K: Intrinsics,
                 near_fars: list[tuple[float, float]]):
        if not samples:
            raise ValueError("no training views")
        self.samples = samples
        self.K = K
        self.images = [s.image for s in samples]
        self.masks = [s.mask.astype(bool) for s in samples]
        self.poses = [s.pose for s in samples]
        self.near = np.array([nf[0] for nf in near_fars])
        self.far = np.array([nf[1] for nf in near_fars])
        self.R_stack = np.stack([p.R for p in self.poses])
        self.centers = np.stack([p.camera_center() for p in self.poses])
        self.mask_pixels = []
        for m in self.masks:
            ys, xs = np.nonzero(m)
            self.mask_pixels.append(np.stack([xs, ys], axis=1))

    def __len__(self) -> int:
        return len(self.samples)

    @staticmethod
    def from_dataset(dataset: Dataset, split: str = "train") -> "ViewBank":
        ids = dataset.train_ids if split == "train" else dataset.test_ids
        samples = [dataset.load_frame(i) for i in ids]
        near_fars = [dataset.near_far(s.pose) for s in samples]
        return ViewBank(samples, dataset.intrinsics, near_fars)

    def rays_for_pixels(self, view: int, pixels: np.ndarray
                        ) -> tuple[np.ndarray, np.ndarray]:
        origins, dirs, _ = generate_rays_batch(self.poses[view], self.K, pixels)
        return origins, dirs

    def random_surface_rays(self, n: int, rng: np.random.Generator
                            ) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
        """Rays through random in-mask pixels of random views; returns
        (origins, dirs, view index) without any opacity filtering."""
        cams = rng.integers(0, len(self), size=n)
        u = np.empty(n)
        v = np.empty(n)
        counts = np.array([len(px) for px in self.mask_pixels])
        picks = (rng.uniform(size=n) * counts[cams]).astype(np.intp)
        for i, (c, p) in enumerate(zip(cams, picks)):
            u[i], v[i] = self.mask_pixels[c][p]
        d_cam = np.stack([(u + 0.5 - self.K.cx) / self.K.fx,
                          (v + 0.5 - self.K.cy) / self.K.fy,
                          np.ones(n)], axis=1)
        dirs = np.einsum("nji,nj->ni", self.R_stack[cams], d_cam)
        dirs /= np.linalg.norm(dirs, axis=1, keepdims=True)
        return self.centers[cams], dirs, cams


# -- stage 1 -------------------------------------------------------------------


def stage1_losses(outputs, target_colors: Tensor, target_masks: Tensor
                  ) -> tuple[Tensor, Tensor, Tensor]:
    """(L_c, L_s, L1): L1 sums of color and silhouette error over rays."""
    lc = A.l1(outputs.C, target_colors)
    ls = A.l1(outputs.S, target_masks)
    return lc, ls, A.add(lc, ls)


def stage1_step(model: FieldModel, bank: ViewBank, cfg: Stage1Config,
                opt: Adam, rng: np.random.Generator) -> dict:
    """One optimizer step on density+color; feature MLP is untouched."""
    n_views = len(bank)
    batch = rng.choice(n_views, size=min(cfg.batch_images, n_views),
                       replace=n_views < cfg.batch_images)
    if all(len(bank.mask_pixels[i]) == 0 for i in batch):
        raise ValueError("degenerate supervision: every batch image has an "
                         "empty mask")
    origins_l, dirs_l, near_l, far_l, col_l, mask_l = [], [], [], [], [], []
    h, w = bank.masks[0].shape
    for i in batch:
        n_mask = int(round(cfg.rays_per_image * cfg.in_mask_fraction))
        mask_px = bank.mask_pixels[i]
        if len(mask_px) == 0:
            n_mask = 0
        n_uni = cfg.rays_per_image - n_mask
        parts = []
        if n_mask:
            sel = rng.choice(len(mask_px), size=n_mask,
                             replace=len(mask_px) < n_mask)
            parts.append(mask_px[sel])
        flat = rng.integers(0, h * w, size=n_uni)
        parts.append(np.stack([flat % w, flat // w], axis=1))
        pixels = np.concatenate(parts)
        o, d = bank.rays_for_pixels(i, pixels)
        origins_l.append(o)
        dirs_l.append(d)
        near_l.append(np.full(len(pixels), bank.near[i]))
        far_l.append(np.full(len(pixels), bank.far[i]))
        col_l.append(bank.images[i][pixels[:, 1], pixels[:, 0]])
        mask_l.append(bank.masks[i][pixels[:, 1], pixels[:, 0]])

    origins = np.concatenate(origins_l)
    dirs = np.concatenate(dirs_l)
    near = np.concatenate(near_l)
    far = np.concatenate(far_l)
    dtype = model.config.dtype
    target_c = Tensor(np.concatenate(col_l).astype(dtype))
    target_s = Tensor(np.concatenate(mask_l).astype(dtype))

    rcfg = RenderConfig(points_per_ray=cfg.points_per_ray, jitter=cfg.jitter)
    with A.Tape() as tape:
        out = render_rays(model, origins, dirs, near, far, rcfg, rng)
        lc, ls, total = stage1_losses(out, target_c, target_s)
        opt.zero_grad()
        tape.backward(total)
    opt.step()
    n_rays = len(dirs)
    return {"L_c": lc.item() / n_rays, "L_s": ls.item() / n_rays,
            "L1": total.item() / n_rays}


# -- stage 2 -------------------------------------------------------------------


def freeze_geometry(model: FieldModel) -> FieldModel:
    """Stage-1 parameters leave the optimizer set; forwards are unchanged."""
    model.freeze_stage1()
    return model


def infonce_loss(F: Tensor, G: Tensor, Z: Tensor,
                 include_positive_in_denominator: bool = True,
                 temperature: float = 1.0,
                 normalize: bool = False) -> Tensor:
    """Contrastive loss over pixel-aligned pairs (F_i, G_i) against negatives Z.

    Default form puts the positive term in the denominator (bounded below
    by zero); the alternative drops it, matching the bare ratio some
    derivations use. Dot products are raw unless ``normalize`` is set.
    """
    n = F.shape[0]
    if n == 0:
        raise ValueError("infonce_loss needs at least one positive pair")
    if F.shape != G.shape:
        raise ValueError(f"F and G must align, got {F.shape} vs {G.shape}")
    if normalize:
        F, G, Z = _l2rows(F), _l2rows(G), _l2rows(Z)
    pos = A.tensor_sum(A.mul(F, G), axis=1, keepdims=True)     # (L, 1)
    neg = A.matmul(F, A.transpose2d(Z))                        # (L, J)
    if temperature != 1.0:
        pos = A.mul(pos, 1.0 / temperature)
        neg = A.mul(neg, 1.0 / temperature)
    if include_positive_in_denominator:
        logits = A.concat([pos, neg], axis=1)
        losses = A.softmax_cross_entropy(logits, np.zeros(n, dtype=np.intp))
        return A.tensor_mean(losses)
    shift = neg.data.max(axis=1, keepdims=True)
    lse = A.add(A.log(A.tensor_sum(A.exp(A.add(neg, Tensor(-shift))), axis=1)),
                Tensor(shift[:, 0]))
    return A.tensor_mean(A.add(lse, A.mul(A.reshape(pos, (n,)), -1.0)))


def _l2rows(x: Tensor) -> Tensor:
    ss = A.tensor_sum(A.mul(x, x), axis=1, keepdims=True)
    inv = A.exp(A.mul(A.log(A.clamp_min(ss, 1e-12)), -0.5))
    return A.mul(x, inv)


def sample_negative_rays(model: FieldModel, bank: ViewBank, n: int,
                         rng: np.random.Generator, coarse_m: int, jitter: bool,
                         opacity_gate: float = 0.5, retry_cap: int = 20
                         ) -> tuple[np.ndarray, np.ndarray, np.ndarray, np.ndarray]:
    """Rays through the object from random cameras, rejection-sampled until
    accumulated opacity clears the gate. Returns (origins, dirs, t, w) with
    the coarse pass already evaluated."""
    got_o, got_d, got_t, got_w = [], [], [], []
    have = 0
    for _ in range(retry_cap):
        want = max(2 * (n - have), 16)
        origins, dirs, cams = bank.random_surface_rays(want, rng)
        t, w = coarse_blend_weights(model, origins, dirs, bank.near[cams],
                                    bank.far[cams], coarse_m, jitter, rng)
        ok = w.sum(axis=1) >= opacity_gate
        if ok.any():
            got_o.append(origins[ok])
            got_d.append(dirs[ok])
            got_t.append(t[ok])
            got_w.append(w[ok])
            have += int(ok.sum())
        if have >= n:
            break
    if have < n:
        raise RuntimeError(
            f"negative sampling exhausted {retry_cap} rounds with {have}/{n} "
            f"accepted rays; is the geometry trained?")
    origins = np.concatenate(got_o)[:n]
    dirs = np.concatenate(got_d)[:n]
    t = np.concatenate(got_t)[:n]
    w = np.concatenate(got_w)[:n]
    return origins, dirs, t, w


def sample_negatives(model: FieldModel, bank: ViewBank, n: int,
                     rng: np.random.Generator, coarse_m: int = 128,
                     resample_k: int = 8, jitter: bool = True) -> Tensor:
    """Render n negative feature samples from random training viewpoints."""
    origins, dirs, t, w = sample_negative_rays(model, bank, n, rng, coarse_m,
                                               jitter)
    Z, _ = feature_from_coarse(model, origins, dirs, t, w, resample_k, rng)
    return Z


def stage2_step(model: FieldModel, cnn: UNet, bank: ViewBank,
                cfg: Stage2Config, aug_cfg: AugmentConfig, opt: Adam,
                rng: np.random.Generator) -> dict:
    """One contrastive step over a batch of augmented views."""
    if not model.stage1_frozen:
        raise RuntimeError("stage 2 requires freeze_geometry(model) first")
    n_views = len(bank)
    batch = rng.choice(n_views, size=min(cfg.batch_images, n_views),
                       replace=n_views < cfg.batch_images)
    h, w_img = bank.masks[0].shape

    augs = [augment(bank.images[i], bank.masks[i], rng, aug_cfg)
            for i in batch]

    per_image = []  # (aug_pixel_rows, origins, dirs, near, far)
    used_augs = []
    for i, aug in zip(batch, augs):
        ys, xs = np.nonzero(aug.mask)
        if len(xs) == 0:
            continue
        sel = rng.choice(len(xs), size=cfg.positives_per_image,
                         replace=len(xs) < cfg.positives_per_image)
        aug_px = np.stack([xs[sel], ys[sel]], axis=1)
        src = aug.source_pixels(aug_px)
        inb = (src[:, 0] >= 0) & (src[:, 0] <= w_img - 1) \
            & (src[:, 1] >= 0) & (src[:, 1] <= h - 1)
        if not inb.any():
            continue
        aug_px = aug_px[inb]
        src = src[inb]
        o, d = bank.rays_for_pixels(i, src)
        rows = aug_px[:, 1] * w_img + aug_px[:, 0]
        per_image.append((rows, o, d,
                          np.full(len(d), bank.near[i]),
                          np.full(len(d), bank.far[i])))
        used_augs.append(aug)
    if not per_image:
        raise ValueError("no usable positives in the whole batch "
                         "(augmentation erased every mask)")

    # Coarse pass for all positives at once; negatives arrive with theirs.
    pos_origins = np.concatenate([p[1] for p in per_image])
    pos_dirs = np.concatenate([p[2] for p in per_image])
    pos_near = np.concatenate([p[3] for p in per_image])
    pos_far = np.concatenate([p[4] for p in per_image])
    t_pos, w_pos = coarse_blend_weights(model, pos_origins, pos_dirs, pos_near,
                                        pos_far, cfg.coarse_points_per_ray,
                                        cfg.jitter, rng)
    n_img = len(per_image)
    neg_o, neg_d, neg_t, neg_w = sample_negative_rays(
        model, bank, cfg.negatives_per_image * n_img, rng,
        cfg.coarse_points_per_ray, cfg.jitter)

    all_o = np.concatenate([pos_origins, neg_o])
    all_d = np.concatenate([pos_dirs, neg_d])
    all_t = np.concatenate([t_pos, neg_t])
    all_w = np.concatenate([w_pos, neg_w])

    cnn_in = np.stack([a.image.transpose(2, 0, 1) for a in used_augs])

    with A.Tape() as tape:
        G_all, _ = feature_from_coarse(model, all_o, all_d, all_t, all_w,
                                       cfg.resample_k, rng)
        if cfg.train_cnn:
            F_img = cnn(Tensor(np.ascontiguousarray(cnn_in)))
        else:
            with A.no_grad():
                F_img = cnn(Tensor(np.ascontiguousarray(cnn_in)))
        fdim = cnn.config.out_channels
        total = None
        offset = 0
        n_pos_total = len(pos_dirs)
        for k, (rows, o, _, _, _) in enumerate(per_image):
            n_pos = len(rows)
            plane = A.reshape(A.tensor_slice(F_img, (k,)), (fdim, h * w_img))
            F_k = A.take(A.transpose2d(plane), rows)
            G_k = A.tensor_slice(G_all, slice(offset, offset + n_pos))
            z_start = n_pos_total + k * cfg.negatives_per_image
            Z_k = A.tensor_slice(
                G_all, slice(z_start, z_start + cfg.negatives_per_image))
            lk = infonce_loss(
                F_k, G_k, Z_k,
                include_positive_in_denominator=
                cfg.include_positive_in_denominator,
                temperature=cfg.temperature,
                normalize=cfg.normalize_features)
            total = lk if total is None else A.add(total, lk)
            offset += n_pos
        opt.zero_grad()
        tape.backward(total)
    opt.step()
    return {"L2": total.item(), "L2_per_image": total.item() / n_img}


# -- loop runners & checkpoints ------------------------------------------------


def write_loss_csv(path, rows: list[dict], fieldnames: list[str]) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=fieldnames)
        writer.writeheader()
        writer.writerows(rows)


class Stage1Trainer:
    def __init__(self, dataset: Dataset, model: FieldModel, cfg: Stage1Config,
                 seed: int, start_iteration: int = 0):
        self.model = model
        self.cfg = cfg
        self.bank = ViewBank.from_dataset(dataset, "train")
        self.opt = Adam(model.stage1_parameters(), lr=cfg.lr)
        self.rng = substream(seed, "stage1")
        self.iteration = start_iteration
        self.history: list[dict] = []

    def step(self) -> dict:
        losses = stage1_step(self.model, self.bank, self.cfg, self.opt,
                             self.rng)
        self.iteration += 1
        row = {"iter": self.iteration, **losses}
        self.history.append(row)
        return row

    def run(self, iters: int | None = None, log_every: int = 0) -> list[dict]:
        for _ in range(iters if iters is not None else self.cfg.iters):
            row = self.step()
            if log_every and row["iter"] % log_every == 0:
                print(f"stage1 iter {row['iter']}: L_c={row['L_c']:.4f} "
                      f"L_s={row['L_s']:.4f} L1={row['L1']:.4f}", flush=True)
        return self.history

    def save(self, path, extra_meta: dict | None = None) -> None:
        arrays = {f"field.{k}": v for k, v in
                  self.model.state_arrays().items()}
        arrays.update(self.opt.state_arrays())
        meta = {**self.model.checkpoint_meta(), "stage": 1,
                "iteration": self.iteration, **(extra_meta or {})}
        save_checkpoint(path, arrays, meta)

    def load_optimizer(self, arrays: dict) -> None:
        self.opt.load_state_arrays(arrays)


class Stage2Trainer:
    def __init__(self, dataset: Dataset, model: FieldModel, cnn: UNet,
                 cfg: Stage2Config, aug_cfg: AugmentConfig, seed: int,
                 start_iteration: int = 0):
        if not model.stage1_frozen:
            raise RuntimeError("freeze_geometry(model) before stage 2")
        self.model = model
        self.cnn = cnn
        self.cfg = cfg
        self.aug_cfg = aug_cfg
        self.bank = ViewBank.from_dataset(dataset, "train")
        groups = [(model.feature_parameters(), cfg.lr_field)]
        if cfg.train_cnn:
            groups.append((cnn.parameters(), cfg.lr_cnn))
        self.opt = Adam(groups)
        self.rng = substream(seed, "stage2")
        self.iteration = start_iteration
        self.history: list[dict] = []

    def step(self) -> dict:
        losses = stage2_step(self.model, self.cnn, self.bank, self.cfg,
                             self.aug_cfg, self.opt, self.rng)
        self.iteration += 1
        row = {"iter": self.iteration, **losses}
        self.history.append(row)
        return row

    def run(self, iters: int | None = None, log_every: int = 0) -> list[dict]:
        for _ in range(iters if iters is not None else self.cfg.iters):
            row = self.step()
            if log_every and row["iter"] % log_every == 0:
                print(f"stage2 iter {row['iter']}: L2={row['L2']:.4f}",
                      flush=True)
        return self.history

    def save(self, path, extra_meta: dict | None = None) -> None:
        arrays = {f"field.{k}": v for k, v in
                  self.model.state_arrays().items()}
        arrays.update({f"unet.{k}": v for k, v in
                       self.cnn.state_arrays().items()})
        arrays.update(self.opt.state_arrays())
        meta = {**self.model.checkpoint_meta(), **self.cnn.checkpoint_meta(),
                "stage": 2, "iteration": self.iteration, **(extra_meta or {})}
        save_checkpoint(path, arrays, meta)


def load_stage1(path) -> tuple[FieldModel, dict, dict]:
    """(model, raw arrays, meta) from a stage-1 checkpoint."""
    arrays, meta = load_checkpoint(path)
    if meta.get("stage") not in (1, 2):
        raise ValueError(f"{path}: not a training checkpoint")
    model = FieldModel.from_checkpoint_meta(meta, arrays)
    return model, arrays, meta


def load_stage2(path) -> tuple[FieldModel, UNet, dict]:
    arrays, meta = load_checkpoint(path)
    if meta.get("stage") != 2:
        raise ValueError(f"{path}: expected a stage-2 checkpoint, "
                         f"got stage {meta.get('stage')!r}")
    model = FieldModel.from_checkpoint_meta(meta, arrays)
    cnn = UNet.from_checkpoint_meta(meta, arrays)
    return model, cnn, meta
