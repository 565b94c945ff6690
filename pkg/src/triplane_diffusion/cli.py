"""Command-line entry point.

Subcommands: gen-dataset, train, generate, reconstruct, inpaint, eval.
Every run writes its resolved config, seed, and checkpoint hash into the
output directory, so runs are reproducible from their outputs alone.
Exit codes: 0 success, 1 usage/config error, 2 runtime failure.

The dataset root may come from the TRIPLANE_DIFFUSION_DATA environment
variable when --data is omitted.  --deterministic forces single-worker
mode; all commands are bit-reproducible for a fixed seed in that mode.
"""

import argparse
import hashlib
import json
import math
import os
import sys
import time
from pathlib import Path

import numpy as np

from . import pngio
from .autodiff import NonFiniteError, ShapeError
from .cameras import DEFAULT_RADIUS, look_at_pose
from .checkpoint import load_checkpoint, read_header
from .config import RunConfig, load_ini
from .dataset import Dataset, DatasetConfig, generate_dataset
from .denoiser import ModelConfig, build_denoiser
from .metrics import evaluate_reconstruction
from .samplers import InpaintTask, generate, inpaint, mask_for_eval, novel_view, reconstruct
from .schedule import build_cosine_schedule
from .train import TrainConfig, TrainingDiverged, train

DATA_ENV = "TRIPLANE_DIFFUSION_DATA"


class UsageError(Exception):
    pass


class Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(message)


def _sha256(path):
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for block in iter(lambda: fh.read(1 << 20), b""):
            h.update(block)
    return h.hexdigest()


def _out_dir(args, token):
    if args.out:
        out = Path(args.out)
        if out.exists() and any(out.iterdir()) and not getattr(args, "resume", None):
            raise UsageError(f"output directory {out} exists and is not empty")
    else:
        stamp = time.strftime("%Y%m%d-%H%M%S")
        short = hashlib.sha256(token.encode()).hexdigest()[:8]
        out = Path("runs") / f"run_{stamp}_{short}"
        if out.exists():
            raise UsageError(f"run directory {out} already exists")
    out.mkdir(parents=True, exist_ok=True)
    return out


def _data_root(args):
    root = args.data or os.environ.get(DATA_ENV)
    if not root:
        raise UsageError(f"--data not given and {DATA_ENV} is not set")
    if not Path(root).exists():
        raise FileNotFoundError(f"dataset directory not found: {root}")
    return root


def _load_model(args):
    path = Path(args.ckpt)
    if not path.exists():
        raise FileNotFoundError(f"checkpoint not found: {path}")
    params, header, _ = load_checkpoint(path)
    sched_cfg = header.get("schedule") or {}
    sched = build_cosine_schedule(int(sched_cfg.get("T", 100)),
                                  float(sched_cfg.get("s", 0.008)))
    return params, sched, header, path


def _write_run_metadata(out, args, extra=None, ckpt_path=None):
    meta = {
        "command": args.command,
        "seed": getattr(args, "seed", None),
        "deterministic": getattr(args, "deterministic", False),
        "format_versions": {"checkpoint": 1, "manifest": 1},
    }
    if ckpt_path is not None:
        meta["checkpoint"] = {"path": str(ckpt_path), "sha256": _sha256(ckpt_path)}
    if extra:
        meta.update(extra)
    with open(out / "run.json", "w") as fh:
        json.dump(meta, fh, indent=2, sort_keys=True)
        fh.write("\n")


def _save_run_outputs(out, run, name="image"):
    pngio.save_rgb(out / f"{name}.png", run.image)
    if run.triplane_features is not None:
        view = novel_view(run, run.camera)
        pngio.save_depth16(out / f"{name}_depth.png", view.depth,
                           run.params.render.near, run.params.render.far)
    run.write_metadata(out / f"{name}_meta.json")


def _dataset_view(data, args):
    views = data.scene_views(args.scene, split=args.split)
    matches = [v for v in views if v.view_id == args.view]
    if not matches:
        raise UsageError(
            f"scene {args.scene} has no {args.split} view with id {args.view}")
    return matches[0]


# --------------------------------------------------------------------------
# commands
# --------------------------------------------------------------------------

def cmd_gen_dataset(args):
    cfg = DatasetConfig(
        n_scenes=args.scenes, views_train=args.views_train,
        views_test=args.views_test, resolution=args.res, seed=args.seed)
    out = Path(args.out)
    manifest_path = out / "manifest.json"
    if manifest_path.exists():
        raise UsageError(f"dataset already exists at {manifest_path}")
    manifest = generate_dataset(cfg, out)
    n_imgs = cfg.n_scenes * (cfg.views_train + cfg.views_test)
    print(f"wrote {n_imgs} images across {len(manifest.scenes)} scenes to {out}")
    return 0


def cmd_train(args):
    run_cfg = load_ini(args.config) if args.config else RunConfig()
    data = Dataset(_data_root(args))

    model_kw = run_cfg.model.to_dict()
    if args.image_size:
        model_kw["image_size"] = args.image_size
        model_kw["triplane_size"] = max(model_kw["triplane_size"], args.image_size)
    if args.channels:
        model_kw["channels"] = [int(c) for c in args.channels.split(",")]
    model_cfg = ModelConfig.from_dict(model_kw)
    if model_cfg.image_size != data.resolution:
        raise UsageError(
            f"model image size {model_cfg.image_size} != dataset resolution "
            f"{data.resolution}; set --image-size or the [model] config")

    train_cfg = TrainConfig(
        batch_size=args.batch or run_cfg.train.batch_size,
        steps=args.steps or run_cfg.train.steps,
        lr=args.lr if args.lr is not None else run_cfg.train.lr,
        lambda_sd=(args.lambda_sd if args.lambda_sd is not None
                   else run_cfg.train.lambda_sd),
        rho_sd=args.rho_sd if args.rho_sd is not None else run_cfg.train.rho_sd,
        seed=args.seed if args.seed is not None else run_cfg.train.seed,
        checkpoint_every=(args.ckpt_every if args.ckpt_every is not None
                          else run_cfg.train.checkpoint_every),
        workers=1 if args.deterministic else (args.workers or run_cfg.train.workers),
        ema_decay=run_cfg.train.ema_decay,
    )
    timesteps = args.timesteps or run_cfg.timesteps
    sched = build_cosine_schedule(timesteps, run_cfg.cosine_offset)

    out = _out_dir(args, f"train-{train_cfg.seed}")
    resolved = RunConfig(model=model_cfg, render=run_cfg.render, train=train_cfg,
                         timesteps=timesteps, cosine_offset=run_cfg.cosine_offset)
    resolved.write(out / "config.ini")
    _write_run_metadata(out, args, extra={"dataset": str(data.root)})

    params = None
    if not args.resume:
        params = build_denoiser(model_cfg, np.random.default_rng(train_cfg.seed),
                                dtype=np.float32, render_cfg=run_cfg.render)
        print(f"training a {params.count():,}-parameter denoiser "
              f"({len(data.split('train'))} views, T={timesteps})")

    def progress(record):
        if record["step"] % max(1, (train_cfg.steps // 20)) == 0:
            print(f"step {record['step']:>6}  loss {record['denoise_loss']:.4f}  "
                  f"sd {record['sd_loss']:.4f}  {record['seconds']:.2f}s")

    final = train(params, data, sched, train_cfg, out, resume=args.resume,
                  log_fn=progress)
    print(f"final checkpoint: {final}")
    return 0


def _pose_from_args(args, resolution):
    return look_at_pose(
        math.radians(args.azimuth_deg), math.radians(args.elevation_deg),
        args.radius, resolution=resolution)


def cmd_generate(args):
    params, sched, header, ckpt_path = _load_model(args)
    cam = _pose_from_args(args, params.model.image_size)
    out = _out_dir(args, f"generate-{args.seed}")
    run = generate(params, sched, cam, args.seed)
    _save_run_outputs(out, run)
    for k in range(args.novel_views):
        az = 2.0 * math.pi * k / max(args.novel_views, 1)
        view_cam = look_at_pose(az, math.radians(args.elevation_deg),
                                args.radius, resolution=params.model.image_size)
        view = novel_view(run, view_cam)
        pngio.save_rgb(out / f"novel_{k:02d}.png", np.clip(view.rgb.data, 0, 1))
        pngio.save_depth16(out / f"novel_{k:02d}_depth.png", view.depth,
                           params.render.near, params.render.far)
    _write_run_metadata(out, args, ckpt_path=ckpt_path)
    print(f"generated sample (seed {args.seed}) in {out}")
    return 0


def cmd_reconstruct(args):
    params, sched, header, ckpt_path = _load_model(args)
    data = Dataset(_data_root(args))
    view = _dataset_view(data, args)
    out = _out_dir(args, f"reconstruct-{args.seed}-{args.tr}")
    run = reconstruct(params, sched, view.image, view.camera, args.tr, args.seed)
    _save_run_outputs(out, run)
    _write_run_metadata(out, args, ckpt_path=ckpt_path, extra={
        "scene": args.scene, "view": args.view, "split": args.split,
        "t_r": args.tr, "denoiser_calls": run.denoiser_calls,
    })
    print(f"reconstructed scene {args.scene} view {args.view} "
          f"with {run.denoiser_calls} denoiser call(s) in {out}")
    return 0


def cmd_inpaint(args):
    params, sched, header, ckpt_path = _load_model(args)
    data = Dataset(_data_root(args))
    view = _dataset_view(data, args)
    m = data.resolution
    if args.mask:
        mask_img = pngio.load_rgb(args.mask)
        mask = mask_img.mean(axis=-1) > 0.5   # white = unknown
    elif args.mask_eval:
        mask = mask_for_eval(np.random.default_rng([args.seed, 101]), m)
    else:
        raise UsageError("inpaint needs --mask PATH or --mask-eval")
    out = _out_dir(args, f"inpaint-{args.seed}")
    pngio.save_rgb(out / "mask.png", np.repeat(mask[..., None], 3, axis=-1) * 1.0)
    task = InpaintTask(image=view.image, mask=mask, camera=view.camera)
    for s in range(args.seeds):
        run = inpaint(params, sched, task, seed=args.seed + s)
        _save_run_outputs(out, run, name=f"seed_{args.seed + s:04d}")
    _write_run_metadata(out, args, ckpt_path=ckpt_path, extra={
        "scene": args.scene, "view": args.view, "split": args.split,
        "n_seeds": args.seeds})
    print(f"wrote {args.seeds} inpainting(s) in {out}")
    return 0


def cmd_eval(args):
    params, sched, header, ckpt_path = _load_model(args)
    data = Dataset(_data_root(args))
    out = _out_dir(args, f"eval-{args.tr}")
    report = evaluate_reconstruction(params, data, sched, t_r=args.tr,
                                     seed=args.seed)
    report.write(out / "report.txt", out / "report.kv")
    _write_run_metadata(out, args, ckpt_path=ckpt_path,
                        extra={"t_r": args.tr})
    print("\n".join(report.summary_lines()))
    print(f"report written to {out}")
    return 0


# --------------------------------------------------------------------------
# parser
# --------------------------------------------------------------------------

def build_parser():
    parser = Parser(prog="triplane-diffusion",
                    description="3D-aware denoising diffusion at desk scale")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen-dataset", help="render a procedural dataset")
    p.add_argument("--scenes", type=int, required=True)
    p.add_argument("--views-train", type=int, default=8)
    p.add_argument("--views-test", type=int, default=4)
    p.add_argument("--res", type=int, default=32)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_gen_dataset)

    p = sub.add_parser("train", help="train the denoiser")
    p.add_argument("--data", help=f"dataset dir (default ${DATA_ENV})")
    p.add_argument("--out")
    p.add_argument("--config", help="INI config file")
    p.add_argument("--steps", type=int)
    p.add_argument("--batch", type=int)
    p.add_argument("--lr", type=float)
    p.add_argument("--lambda-sd", type=float, dest="lambda_sd")
    p.add_argument("--rho-sd", type=float, dest="rho_sd")
    p.add_argument("--seed", type=int)
    p.add_argument("--ckpt-every", type=int, dest="ckpt_every")
    p.add_argument("--resume", help="checkpoint to continue from")
    p.add_argument("--workers", type=int)
    p.add_argument("--deterministic", action="store_true",
                   help="single-worker bit-exact mode")
    p.add_argument("--timesteps", type=int)
    p.add_argument("--image-size", type=int, dest="image_size")
    p.add_argument("--channels", help="comma-separated encoder widths")
    p.set_defaults(func=cmd_train)

    def sampling_parser(name, help_text):
        q = sub.add_parser(name, help=help_text)
        q.add_argument("--ckpt", required=True)
        q.add_argument("--seed", type=int, default=0)
        q.add_argument("--out")
        q.add_argument("--deterministic", action="store_true")
        return q

    p = sampling_parser("generate", "sample a scene from pure noise")
    p.add_argument("--azimuth-deg", type=float, default=0.0)
    p.add_argument("--elevation-deg", type=float, default=30.0)
    p.add_argument("--radius", type=float, default=DEFAULT_RADIUS)
    p.add_argument("--novel-views", type=int, default=0)
    p.set_defaults(func=cmd_generate)

    p = sampling_parser("reconstruct", "reconstruct a dataset view")
    p.add_argument("--data")
    p.add_argument("--scene", type=int, required=True)
    p.add_argument("--view", type=int, required=True)
    p.add_argument("--split", choices=("train", "test"), default="test")
    p.add_argument("--tr", type=int, default=0,
                   help="forward-noise steps before the reverse chain")
    p.set_defaults(func=cmd_reconstruct)

    p = sampling_parser("inpaint", "mask-conditioned completion")
    p.add_argument("--data")
    p.add_argument("--scene", type=int, required=True)
    p.add_argument("--view", type=int, required=True)
    p.add_argument("--split", choices=("train", "test"), default="test")
    p.add_argument("--mask", help="mask PNG, white = unknown")
    p.add_argument("--mask-eval", action="store_true",
                   help="sample a 40%%-side evaluation mask")
    p.add_argument("--seeds", type=int, default=1,
                   help="number of completions")
    p.set_defaults(func=cmd_inpaint)

    p = sampling_parser("eval", "PSNR/SSIM over held-out test views")
    p.add_argument("--data")
    p.add_argument("--tr", type=int, default=0)
    p.set_defaults(func=cmd_eval)

    return parser


def main(argv=None):
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        return args.func(args) or 0
    except UsageError as err:
        print(f"error: {err}", file=sys.stderr)
        return 1
    except (FileNotFoundError, ValueError, ShapeError) as err:
        print(f"error: {err}", file=sys.stderr)
        return 1
    except (TrainingDiverged, NonFiniteError) as err:
        print(f"runtime failure: {err}", file=sys.stderr)
        return 2
    except OSError as err:
        print(f"runtime failure: {err}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
