"""Command-line entry point: ``ngprt <subcommand> ...``.

Exit codes: 0 success, 1 failure (including failed validation), 2 usage error.
"""

from __future__ import annotations

import argparse
import sys
import time
from pathlib import Path

import numpy as np

from ngprt.config import PROFILES, Config, apply_overrides
from ngprt.errors import ConfigError


def _add_config_args(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", type=Path, help="JSON config file (overrides the profile)")
    p.add_argument("--profile", choices=sorted(PROFILES), default="desk", help="base profile (default: desk)")
    p.add_argument("--desk", action="store_const", const="desk", dest="profile", help="shorthand for --profile desk")
    p.add_argument("--set", action="append", default=[], metavar="KEY=VALUE", help="override one config value")
    p.add_argument("--seed", type=int, help="random seed")


def resolve_config(args) -> Config:
    cfg = Config.load(args.config) if args.config else PROFILES[args.profile]()
    cfg = apply_overrides(cfg, args.set)
    if args.seed is not None:
        cfg = cfg.replace(seed=args.seed)
    return cfg


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="ngprt", description="Hash-grid radiance fields with attention fusion, baking and distance-grid marching.")
    sub = ap.add_subparsers(dest="command", required=True)

    p = sub.add_parser("synth", help="render a synthetic box-scene dataset")
    p.add_argument("--scene", default="desk", help="desk or synth_slab")
    p.add_argument("--out", type=Path, required=True)
    p.add_argument("--views", type=int, default=50)
    p.add_argument("--test-views", type=int, default=10)
    p.add_argument("--size", type=int, default=128)
    p.add_argument("--seed", type=int, default=0)

    p = sub.add_parser("train", help="train a model on a posed dataset")
    p.add_argument("--data", type=Path, required=True)
    p.add_argument("--out", type=Path, required=True)
    p.add_argument("--iterations", type=int)
    _add_config_args(p)

    p = sub.add_parser("bake", help="bake a checkpoint into a scene file")
    p.add_argument("--checkpoint", type=Path, required=True)
    p.add_argument("--out", type=Path, required=True)
    p.add_argument("--no-cull", action="store_true", help="skip density culling of the occupancy grid")

    p = sub.add_parser("render", help="render frames of a dataset from a baked scene")
    p.add_argument("--scene", type=Path, required=True, help="baked scene file")
    p.add_argument("--data", type=Path, required=True, help="dataset with camera poses")
    p.add_argument("--out", type=Path, required=True)
    p.add_argument("--split", default="test", help="train, test or all")
    p.add_argument("--keep-level", type=int, help="colour from one fine level only (0: coarse only)")
    p.add_argument("--no-distance-grid", action="store_true", help="march with the occupancy pyramid only")
    p.add_argument("--max-step-rule", action="store_true", help="step max(v*G, voxel exit) instead of v*G")
    p.add_argument("--float-dump", action="store_true", help="also write float32 .npy images and pre-sigmoid colour")

    p = sub.add_parser("bench", help="paired marcher comparison on an analytic scene")
    p.add_argument("--scene", default="synth_slab")
    p.add_argument("--rays", type=int, default=1000)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--resolution", type=int, default=512)
    p.add_argument("--out", type=Path, help="CSV path (default: stdout)")

    sub.add_parser("validate", help="run the built-in invariant and oracle checks")
    return ap


def cmd_synth(args) -> int:
    from ngprt.scene import get_scene, save_dataset, synth_dataset

    ds = synth_dataset(get_scene(args.scene), args.views, args.test_views, args.size, seed=args.seed)
    path = save_dataset(ds, args.out)
    print(f"wrote {len(ds.frames)} frames to {path.parent}")
    return 0


def cmd_train(args) -> int:
    from ngprt.scene import load_dataset
    from ngprt.train import train_loop

    cfg = resolve_config(args)
    ds = load_dataset(args.data)
    args.out.mkdir(parents=True, exist_ok=True)
    cfg.save(args.out / "config.json")

    def progress(row, elapsed):
        print(f"iter {row['iter'] + 1:6d}  loss {row['loss']:.5f}  psnr {row['psnr']:6.2f}  gamma {row['gamma']:.4f}  {elapsed:7.1f}s", flush=True)

    train_loop(cfg, ds, args.out, args.iterations, progress)
    print(f"checkpoint: {args.out / 'checkpoint.npz'}")
    return 0


def cmd_bake(args) -> int:
    from ngprt.bake import bake, report_params, save_baked
    from ngprt.train import load_checkpoint

    model, _, _, _ = load_checkpoint(args.checkpoint)
    scene = bake(model, cull=not args.no_cull)
    save_baked(scene, args.out)
    nominal = report_params(model.cfg)
    measured = report_params(model.cfg, scene.corner_fraction)
    print(f"retained corners: {len(scene.corner_ids)} ({100 * scene.corner_fraction:.2f}%)")
    print(f"parameters: nominal {nominal['total'] / 1e6:.2f} M, measured {measured['total'] / 1e6:.2f} M")
    print(f"wrote {args.out}")
    return 0


def cmd_render(args) -> int:
    from ngprt.bake import load_baked, render_image
    from ngprt.scene import load_dataset, psnr, save_image

    scene = load_baked(args.scene)
    ds = load_dataset(args.data)
    frames = range(len(ds.frames)) if args.split == "all" else ds.split(args.split)
    args.out.mkdir(parents=True, exist_ok=True)
    suffix = "" if args.keep_level is None else f"_level{args.keep_level}"
    scores = []
    for k in frames:
        t0 = time.perf_counter()
        img, res = render_image(
            scene, ds, k, mode="render", keep_level=args.keep_level,
            use_distance_grid=not args.no_distance_grid, max_step_rule=args.max_step_rule or None,
        )
        ms = 1000 * (time.perf_counter() - t0)
        save_image(args.out / f"{k:03d}{suffix}.png", img)
        if args.float_dump:
            np.save(args.out / f"{k:03d}{suffix}.npy", img.astype(np.float32))
            np.save(args.out / f"{k:03d}{suffix}_cd.npy", res.C_d.reshape(ds.height, ds.width, 3).astype(np.float32))
        line = f"frame {k:3d}  {ms:7.1f} ms  marching {res.marching.mean():6.2f}  samples {res.n_samples.mean():6.2f}"
        gt = ds.frames[k].image
        if gt is not None and args.keep_level is None:
            scores.append(psnr(img, gt))
            line += f"  psnr {scores[-1]:.2f}"
        print(line)
    if scores:
        print(f"mean psnr {np.mean(scores):.3f} over {len(scores)} frames")
    return 0


def cmd_bench(args) -> int:
    from ngprt.bench import BENCH_FIELDS, run_bench

    rep = run_bench(args.scene, args.rays, args.seed, args.resolution)
    if args.out:
        rep.write_csv(args.out)
    else:
        print(",".join(BENCH_FIELDS))
        for r in rep.rows:
            print(",".join(f"{r[k]:.6g}" if isinstance(r[k], float) else str(r[k]) for k in BENCH_FIELDS))
    print(
        f"marching reduction {100 * rep.marching_reduction:.1f}%, occupied change {100 * rep.occupied_change:.2f}%, "
        f"paired render psnr {rep.render_psnr:.1f} dB",
        file=sys.stderr,
    )
    return 0


def cmd_validate(args) -> int:
    from ngprt.validate import run_all

    return 0 if run_all() else 1


COMMANDS = dict(synth=cmd_synth, train=cmd_train, bake=cmd_bake, render=cmd_render, bench=cmd_bench, validate=cmd_validate)


def main(argv: list[str] | None = None) -> int:
    ap = build_parser()
    try:
        args = ap.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code) if exc.code is not None else 0
    try:
        return COMMANDS[args.command](args)
    except ConfigError as exc:
        print(f"ngprt: configuration error: {exc}", file=sys.stderr)
        return 2
    except (ValueError, OSError, RuntimeError) as exc:
        print(f"ngprt: {type(exc).__name__}: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
