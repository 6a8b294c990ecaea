"""Dynamic-pixel suppression on vs off on the dynamic preset.

Reports ATE, motion-map F1 against ground-truth masks and the number of
Gaussians spawned on dynamic pixels.

    python scripts/dynamic_ablation.py --seeds 0 1 --frames 100
"""
import argparse

from m3slam.pipeline import load_config, run


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--seeds", type=int, nargs="+", default=[0, 1, 2])
    ap.add_argument("--frames", type=int, default=100)
    ap.add_argument("--no-map", action="store_true", help="disable the Gaussian map (faster, no spawn counts)")
    args = ap.parse_args()

    base = ["provider.preset=dynamic", "provider.orthogonal_dynamic=true", f"provider.frames={args.frames}",
            "gsmap.final_iters=0"]
    if args.no_map:
        base.append("gsmap.enabled=false")
    print(f"{'seed':>4} {'suppress':>8} {'ate':>8} {'f1':>6} {'spawned_dyn':>11}")
    for seed in args.seeds:
        for flag in ("true", "false"):
            cfg = load_config(None, [*base, f"seed={seed}", f"tracking.suppress_dynamic={flag}"])
            m = run(cfg, export=False).metrics
            print(f"{seed:>4} {flag:>8} {m['ate_rmse']:8.4f} {m['motion_f1']:6.3f} {m['spawned_on_dynamic']:11d}")


if __name__ == "__main__":
    main()
