"""Batch command-line interface: gen / train / extract-cloud / infer / eval.

Exit codes: 0 success, 1 usage error, 2 runtime failure, 3 a --require
threshold was not met. Every command writes a manifest recording the
resolved configuration and seed next to its outputs. Heavy imports happen
after argument parsing so --threads can cap BLAS pools via environment
variables before numpy loads.
"""

from __future__ import annotations

import argparse
import csv
import json
import os
import sys
from pathlib import Path

EXIT_OK = 0
EXIT_USAGE = 1
EXIT_RUNTIME = 2
EXIT_THRESHOLD = 3


def _build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(
        prog="posefield",
        description="Weakly-supervised 6D pose estimation from an implicit "
                    "object model, at desk scale.")
    p.add_argument("--threads", type=int, default=0,
                   help="cap BLAS threads (0 = leave unchanged)")
    sub = p.add_subparsers(dest="command", required=True)

    g = sub.add_parser("gen", help="generate a synthetic dataset")
    g.add_argument("--shape", required=True,
                   choices=["cube", "sphere", "cylinder", "square_prism"])
    g.add_argument("--texture", default="angular_checker",
                   choices=["angular_checker", "axial_bands", "face_colors"])
    g.add_argument("--size", type=float, nargs="+", default=[0.6],
                   help="shape dimensions in meters (1 or 2 values)")
    g.add_argument("--train", type=int, default=64)
    g.add_argument("--test", type=int, default=16)
    g.add_argument("--image-size", type=int, default=48)
    g.add_argument("--seed", type=int, default=0)
    g.add_argument("--out", required=True)

    t = sub.add_parser("train", help="run stage-1 or stage-2 training")
    t.add_argument("--stage", type=int, required=True, choices=[1, 2])
    t.add_argument("--data", required=True)
    t.add_argument("--out", required=True)
    t.add_argument("--config", help="RunConfig JSON")
    t.add_argument("--stage1-ckpt",
                   help="stage-1 checkpoint (required for --stage 2; "
                        "defaults to OUT/stage1.ckpt)")
    t.add_argument("--resume", help="resume training from this checkpoint")
    t.add_argument("--iters", type=int, help="override iteration count")
    t.add_argument("--seed", type=int)
    t.add_argument("--deterministic", action="store_true")
    t.add_argument("--log-every", type=int, default=200)
    t.add_argument("--checkpoint-every", type=int, default=0)
    t.add_argument("--perturb-rot", type=float, default=0.0,
                   help="corrupt training poses: max rotation noise (deg)")
    t.add_argument("--perturb-trans", type=float, default=0.0,
                   help="translation noise as a fraction of object diameter")
    t.add_argument("--perturb-seed", type=int, default=0)

    c = sub.add_parser("extract-cloud", help="extract the featured cloud")
    c.add_argument("--data", required=True)
    c.add_argument("--ckpt", required=True, help="stage-2 checkpoint")
    c.add_argument("--out", required=True)
    c.add_argument("--mode", default="max_weight",
                   choices=["max_weight", "density_threshold"])
    c.add_argument("--density-threshold", type=float, default=5.0)
    c.add_argument("--rays-per-view", type=int, default=512)
    c.add_argument("--seed", type=int, default=0)

    i = sub.add_parser("infer", help="estimate poses for a split")
    i.add_argument("--data", required=True)
    i.add_argument("--ckpt", required=True, help="stage-2 checkpoint")
    i.add_argument("--cloud", help="featured cloud .npz "
                                   "(extracted on the fly when missing)")
    i.add_argument("--out", required=True)
    i.add_argument("--split", default="test", choices=["train", "test"])
    i.add_argument("--depth", action="store_true",
                   help="median-depth z adjustment from the sensor depth map")
    i.add_argument("--stride", type=int, default=1)
    i.add_argument("--ransac-iters", type=int, default=500)
    i.add_argument("--dump-matches", action="store_true")
    i.add_argument("--viz", action="store_true",
                   help="write CNN/field feature images (first 3 channels)")
    i.add_argument("--seed", type=int, default=0)

    e = sub.add_parser("eval", help="score estimated poses against the dataset")
    e.add_argument("--data", required=True)
    e.add_argument("--poses", required=True, help="directory of *.pose.json")
    e.add_argument("--out", required=True, help="report path prefix")
    e.add_argument("--split", default="test", choices=["train", "test"])
    e.add_argument("--require", default="",
                   help="comma list like add=0.8,adds=0.85; exit 3 if unmet")
    return p


def main(argv: list[str] | None = None) -> int:
    parser = _build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return EXIT_USAGE if exc.code not in (0, None) else EXIT_OK
    if args.threads > 0:
        for var in ("OMP_NUM_THREADS", "OPENBLAS_NUM_THREADS",
                    "MKL_NUM_THREADS"):
            os.environ[var] = str(args.threads)
    try:
        handler = {
            "gen": _cmd_gen,
            "train": _cmd_train,
            "extract-cloud": _cmd_extract_cloud,
            "infer": _cmd_infer,
            "eval": _cmd_eval,
        }[args.command]
        return handler(args)
    except FileNotFoundError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_RUNTIME
    except ValueError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_RUNTIME
    except RuntimeError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_RUNTIME


def _write_manifest(out_dir: Path, command: str, payload: dict) -> None:
    out_dir.mkdir(parents=True, exist_ok=True)
    (out_dir / f"{command}_manifest.json").write_text(
        json.dumps(payload, indent=2, default=str))


def _cmd_gen(args) -> int:
    from .synth import ShapeSpec, generate_dataset
    shape = ShapeSpec(kind=args.shape, size=tuple(args.size),
                      texture=args.texture)
    ds = generate_dataset(shape, args.train, args.test, args.seed, args.out,
                          image_size=args.image_size)
    _write_manifest(Path(args.out), "gen", {
        "shape": shape.to_dict(), "n_train": args.train, "n_test": args.test,
        "image_size": args.image_size, "seed": args.seed,
    })
    print(f"dataset written to {ds.root} "
          f"({len(ds.train_ids)} train / {len(ds.test_ids)} test)")
    return EXIT_OK


def _load_run_config(args):
    from .config import RunConfig
    cfg = RunConfig.load(args.config) if args.config else RunConfig()
    if getattr(args, "seed", None) is not None:
        cfg.seed = args.seed
    if getattr(args, "deterministic", False):
        cfg.deterministic = True
    return cfg


def _cmd_train(args) -> int:
    import numpy as np

    from .autodiff import load_checkpoint
    from .field import FieldModel
    from .rng import substream
    from .synth import Dataset, perturb_poses
    from .training import (Stage1Trainer, Stage2Trainer, freeze_geometry,
                           load_stage1, write_loss_csv)
    from .unet import UNet

    cfg = _load_run_config(args)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    dataset = Dataset.load(args.data)

    if args.perturb_rot > 0 or args.perturb_trans > 0:
        poses = {fid: dataset.frame_pose(fid) for fid in dataset.train_ids}
        noisy = perturb_poses(poses, args.perturb_rot, args.perturb_trans,
                              dataset.shape.diameter(), args.perturb_seed)
        dataset = dataset.with_pose_overrides(noisy)
        print(f"training poses perturbed: rot<= {args.perturb_rot} deg, "
              f"trans<= {args.perturb_trans} x diameter")

    if args.stage == 1:
        start_iter = 0
        if args.resume:
            model, arrays, meta = load_stage1(args.resume)
            start_iter = int(meta.get("iteration", 0))
        else:
            model = FieldModel(cfg.field, substream(cfg.seed, "init"))
        trainer = Stage1Trainer(dataset, model, cfg.train.stage1, cfg.seed,
                                start_iteration=start_iter)
        if args.resume:
            trainer.load_optimizer(arrays)
        iters = args.iters if args.iters is not None else cfg.train.stage1.iters
        _run_with_checkpoints(trainer, iters, args, out, "stage1")
        trainer.save(out / "stage1.ckpt", {"seed": cfg.seed})
        write_loss_csv(out / "stage1_loss.csv", trainer.history,
                       ["iter", "L_c", "L_s", "L1"])
        last = trainer.history[-1]
        print(f"stage 1 done at iter {last['iter']}: L_c={last['L_c']:.4f} "
              f"L_s={last['L_s']:.4f} L1={last['L1']:.4f}")
    else:
        ckpt = args.stage1_ckpt or (out / "stage1.ckpt")
        if not Path(ckpt).exists():
            print(f"error: stage 2 requires a stage-1 checkpoint; "
                  f"{ckpt} not found (run --stage 1 first)", file=sys.stderr)
            return EXIT_RUNTIME
        model, _, _ = load_stage1(ckpt)
        freeze_geometry(model)
        cnn = UNet(cfg.unet, substream(cfg.seed, "init-unet"))
        trainer = Stage2Trainer(dataset, model, cnn, cfg.train.stage2,
                                cfg.train.augment, cfg.seed)
        iters = args.iters if args.iters is not None else cfg.train.stage2.iters
        _run_with_checkpoints(trainer, iters, args, out, "stage2")
        trainer.save(out / "stage2.ckpt", {"seed": cfg.seed})
        write_loss_csv(out / "stage2_loss.csv", trainer.history,
                       ["iter", "L2", "L2_per_image"])
        last = trainer.history[-1]
        print(f"stage 2 done at iter {last['iter']}: L2={last['L2']:.4f}")

    _write_manifest(out, f"train_stage{args.stage}", {
        "data": str(args.data), "config": cfg.to_dict(), "seed": cfg.seed,
        "iters": iters,
        "perturb": {"rot_deg": args.perturb_rot,
                    "trans_frac": args.perturb_trans,
                    "seed": args.perturb_seed},
    })
    return EXIT_OK


def _run_with_checkpoints(trainer, iters: int, args, out: Path,
                          tag: str) -> None:
    every = args.checkpoint_every
    done = 0
    while done < iters:
        chunk = min(every, iters - done) if every else iters - done
        trainer.run(chunk, log_every=args.log_every)
        done += chunk
        if every and done < iters:
            trainer.save(out / f"{tag}.ckpt")


def _load_models(ckpt_path):
    from .training import load_stage2
    model, cnn, meta = load_stage2(ckpt_path)
    model.freeze_stage1()
    return model, cnn, meta


def _extract_cloud(dataset, model, rng, mode="max_weight",
                   density_threshold=5.0, rays_per_view=512):
    from .pose_estimation import extract_cloud
    views = []
    near_fars = []
    for fid in dataset.train_ids:
        s = dataset.load_frame(fid)
        views.append((s.pose, s.mask))
        near_fars.append(dataset.near_far(s.pose))
    return extract_cloud(model, views, dataset.intrinsics, near_fars, rng,
                         rays_per_view=rays_per_view, mode=mode,
                         density_threshold=density_threshold,
                         diameter=dataset.shape.diameter())


def _cmd_extract_cloud(args) -> int:
    from .rng import substream
    from .synth import Dataset

    dataset = Dataset.load(args.data)
    model, _, _ = _load_models(args.ckpt)
    cloud = _extract_cloud(dataset, model, substream(args.seed, "cloud"),
                           mode=args.mode,
                           density_threshold=args.density_threshold,
                           rays_per_view=args.rays_per_view)
    cloud.save(args.out)
    print(f"featured cloud with {len(cloud)} points -> {args.out}")
    return EXIT_OK


def _cmd_infer(args) -> int:
    import numpy as np

    from .pose_estimation import (FeaturedCloud, InferenceConfig,
                                  PoseEstimationError, estimate_pose)
    from .renderer import RenderConfig, render_image
    from .rng import substream
    from .synth import Dataset

    dataset = Dataset.load(args.data)
    model, cnn, _ = _load_models(args.ckpt)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)

    if args.cloud and Path(args.cloud).exists():
        cloud = FeaturedCloud.load(args.cloud)
    else:
        cloud = _extract_cloud(dataset, model, substream(args.seed, "cloud"))
        if args.cloud:
            cloud.save(args.cloud)

    icfg = InferenceConfig(match_stride=args.stride,
                           ransac_iters=args.ransac_iters,
                           use_depth=args.depth)
    ids = dataset.test_ids if args.split == "test" else dataset.train_ids
    failures = 0
    for fid in ids:
        sample = dataset.load_frame(fid, with_depth=args.depth)
        near_far = dataset.near_far(sample.pose)
        rng = substream(args.seed, f"ransac-{fid}")
        try:
            est, matches = estimate_pose(
                sample.image, sample.mask, cnn, cloud, dataset.intrinsics,
                rng, cfg=icfg, model=model, sensor_depth=sample.depth,
                near_far=near_far)
        except PoseEstimationError as exc:
            failures += 1
            (out / f"{fid}.pose.json").write_text(json.dumps(
                {"failed": True, "stage": exc.stage, "error": str(exc)}))
            print(f"{fid}: FAILED {exc}")
            continue
        (out / f"{fid}.pose.json").write_text(json.dumps({
            "rotation": [float(v) for v in est.pose.R.reshape(-1)],
            "translation": [float(v) for v in est.pose.t],
            "inliers": est.inliers,
            "reproj_err_px": est.reproj_err_px,
            "runtime_ms": est.runtime_ms,
        }))
        print(f"{fid}: inliers {est.inliers}/{est.n_correspondences} "
              f"reproj {est.reproj_err_px:.2f}px {est.runtime_ms:.0f}ms")
        if args.dump_matches:
            with open(out / f"{fid}.matches.csv", "w", newline="") as fh:
                writer = csv.writer(fh)
                writer.writerow(["u", "v", "x", "y", "z", "score"])
                for c in matches:
                    writer.writerow([c.pixel[0], c.pixel[1], *c.point, c.score])
        if args.viz:
            _write_feature_viz(out, fid, sample, cnn, model, dataset, near_far)

    _write_manifest(out, "infer", {
        "data": str(args.data), "ckpt": str(args.ckpt), "split": args.split,
        "seed": args.seed, "depth": args.depth, "failures": failures,
        "n_frames": len(ids),
    })
    return EXIT_OK


def _write_feature_viz(out, fid, sample, cnn, model, dataset, near_far):
    import numpy as np
    from PIL import Image

    from .renderer import RenderConfig, render_image

    def to_png(feat, path):
        rgb = feat[:, :, :3]
        lo, hi = rgb.min(), rgb.max()
        rgb = (rgb - lo) / max(hi - lo, 1e-9)
        Image.fromarray((rgb * 255).astype(np.uint8)).save(path)

    f_cnn = cnn.feature_image(sample.image)
    to_png(f_cnn * sample.mask[:, :, None], out / f"{fid}.feat_cnn.png")
    f_field = render_image(model, sample.pose, dataset.intrinsics,
                           near_far[0], near_far[1], mode="feature",
                           cfg=RenderConfig(points_per_ray=128))
    to_png(f_field, out / f"{fid}.feat_field.png")


def _cmd_eval(args) -> int:
    import numpy as np

    from .geometry import Pose
    from .metrics import evaluate_frame, summarize
    from .rng import substream
    from .synth import Dataset, sample_surface_points

    dataset = Dataset.load(args.data)
    ids = dataset.test_ids if args.split == "test" else dataset.train_ids
    pose_dir = Path(args.poses)
    missing = [fid for fid in ids
               if not (pose_dir / f"{fid}.pose.json").exists()]
    if missing:
        print(f"error: missing pose files for frames: {', '.join(missing)}",
              file=sys.stderr)
        return EXIT_RUNTIME

    points, _ = sample_surface_points(dataset.shape, 2048,
                                      substream(0, "eval-points"))
    diameter = dataset.shape.diameter()
    records = []
    for fid in ids:
        blob = json.loads((pose_dir / f"{fid}.pose.json").read_text())
        gt = dataset.frame_pose(fid)
        if blob.get("failed"):
            est = None
        else:
            est = Pose(np.array(blob["rotation"]).reshape(3, 3),
                       np.array(blob["translation"]))
        records.append(evaluate_frame(fid, est, gt, points, diameter))

    out_prefix = Path(args.out)
    out_prefix.parent.mkdir(parents=True, exist_ok=True)
    with open(f"{out_prefix}.csv", "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["frame", "add", "add_s", "rot_err_rad",
                         "trans_err_m", "add_pass", "adds_pass", "failed"])
        for r in records:
            writer.writerow([r.frame_id, r.add, r.add_s, r.rot_err_rad,
                             r.trans_err_m, int(r.add_pass), int(r.adds_pass),
                             int(r.failed)])
    summary = summarize(records)
    Path(f"{out_prefix}.json").write_text(json.dumps(summary, indent=2))
    print(json.dumps(summary, indent=2))

    if args.require:
        key_map = {"add": "add_recall", "adds": "adds_recall"}
        for clause in args.require.split(","):
            key, _, value = clause.partition("=")
            key = key.strip()
            if key not in key_map:
                print(f"error: unknown --require metric {key!r}",
                      file=sys.stderr)
                return EXIT_USAGE
            if summary[key_map[key]] < float(value):
                print(f"requirement {clause} not met "
                      f"({summary[key_map[key]]:.3f})", file=sys.stderr)
                return EXIT_THRESHOLD
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
