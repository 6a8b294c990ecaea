"""Command line entry point: ``m3 run | gen-scene | eval | render``."""
from __future__ import annotations

import argparse
import json
import sys
from pathlib import Path

from .errors import M3Error
from .geom import PinholeIntrinsics, read_tum, tum_to_pose, write_tum
from .gsmap import read_ply, render, save_png
from .pipeline import ate_rmse, load_config, run, trajectory_length
from .prior import OracleProvider, make_scene, write_scene_dumps
from .prior.scene import default_intrinsics


def cmd_run(args, extra):
    overrides = list(extra)
    if args.seed is not None:
        overrides.append(f"seed={args.seed}")
    if args.out is not None:
        overrides.append(f"output_dir={args.out}")
    cfg = load_config(args.config, overrides)
    report = run(cfg)
    print(report.to_json(), end="")
    print(f"outputs written to {cfg.output_dir}", file=sys.stderr)
    return 0


def cmd_gen_scene(args, extra):
    if extra:
        raise M3Error(f"unexpected arguments: {' '.join(extra)}")
    scene = make_scene(args.preset, n_frames=args.frames, seed=args.seed, noise=args.noise,
                       orthogonal_dynamic=args.orthogonal_dynamic)
    provider = OracleProvider(scene)
    out = write_scene_dumps(provider, args.out, {"preset": args.preset, "noise_level": args.noise})
    gt = provider.gt_poses()
    write_tum(out / "gt.tum", range(len(gt)), gt)
    print(f"wrote {provider.n_frames} frames and gt.tum to {out}")
    return 0


def cmd_eval(args, extra):
    if extra:
        raise M3Error(f"unexpected arguments: {' '.join(extra)}")
    ts, est = read_tum(args.traj)
    tr, ref = read_tum(args.ref)
    # associate by frame id (the TUM stamp)
    ref_by = {round(t, 6): p for t, p in zip(tr, ref)}
    pairs = [(e, ref_by[round(t, 6)]) for t, e in zip(ts, est) if round(t, 6) in ref_by]
    if len(pairs) != len(est):
        print(f"warning: {len(est) - len(pairs)} estimated poses have no reference", file=sys.stderr)
    e, r = [p[0] for p in pairs], [p[1] for p in pairs]
    ate = ate_rmse(e, r, args.align)
    length = trajectory_length(r)
    print(json.dumps({"ate_rmse": ate, "alignment": args.align, "n_poses": len(pairs),
                      "trajectory_length": length}, sort_keys=True))
    return 0


def cmd_render(args, extra):
    if extra:
        raise M3Error(f"unexpected arguments: {' '.join(extra)}")
    d = default_intrinsics()
    W = args.width or d.width
    H = args.height or d.height
    f = args.focal or d.fx
    intr = PinholeIntrinsics.centered(f, W, H)
    try:
        _, pose = tum_to_pose(args.pose, args.scale)
    except ValueError as e:
        raise M3Error(f"bad --pose: {e}") from e
    img = render(read_ply(args.ply), pose, intr).color
    save_png(img, args.out)
    print(f"wrote {args.out}")
    return 0


def build_parser():
    p = argparse.ArgumentParser(prog="m3", description="Streaming monocular SLAM over geometric priors")
    sub = p.add_subparsers(dest="command", required=True)

    r = sub.add_parser("run", help="run the streaming pipeline; extra --section.key=value flags override the config")
    r.add_argument("--config", type=Path, default=None)
    r.add_argument("--seed", type=int, default=None)
    r.add_argument("--out", default=None)
    r.set_defaults(func=cmd_run)

    g = sub.add_parser("gen-scene", help="write a synthetic scene as per-frame dumps plus gt.tum")
    g.add_argument("--preset", choices=["loop", "corridor", "dynamic"], default="loop")
    g.add_argument("--frames", type=int, default=200)
    g.add_argument("--seed", type=int, default=0)
    g.add_argument("--noise", choices=["clean", "default"], default="default")
    g.add_argument("--orthogonal-dynamic", action="store_true")
    g.add_argument("--out", required=True)
    g.set_defaults(func=cmd_gen_scene)

    e = sub.add_parser("eval", help="ATE RMSE between two TUM trajectories")
    e.add_argument("--traj", required=True)
    e.add_argument("--ref", required=True)
    e.add_argument("--align", choices=["sim3", "se3"], default="sim3")
    e.set_defaults(func=cmd_eval)

    v = sub.add_parser("render", help="render a PLY map from a TUM pose line")
    v.add_argument("--ply", required=True)
    v.add_argument("--pose", required=True, help='"stamp tx ty tz qx qy qz qw"')
    v.add_argument("--out", required=True)
    v.add_argument("--width", type=int, default=None)
    v.add_argument("--height", type=int, default=None)
    v.add_argument("--focal", type=float, default=None)
    v.add_argument("--scale", type=float, default=1.0, help="Sim(3) scale of the pose (TUM lines omit it)")
    v.set_defaults(func=cmd_render)
    return p


def main(argv=None):
    parser = build_parser()
    args, extra = parser.parse_known_args(argv)
    try:
        return args.func(args, extra)
    except (M3Error, OSError) as e:
        print(f"error: {e}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
