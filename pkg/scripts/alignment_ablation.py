"""Per-batch intrinsic alignment on vs off under focal jitter.

    python scripts/alignment_ablation.py --seeds 0 1 --frames 200
"""
import argparse

from m3slam.pipeline import load_config, run


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--seeds", type=int, nargs="+", default=[0, 1, 2])
    ap.add_argument("--frames", type=int, default=200)
    args = ap.parse_args()

    print(f"{'seed':>4} {'align':>5} {'ate':>8} {'ate/len':>8} {'focal_ref':>9}")
    for seed in args.seeds:
        for flag in ("true", "false"):
            cfg = load_config(None, [f"seed={seed}", f"provider.frames={args.frames}", "gsmap.enabled=false",
                                     f"provider.align_intrinsics={flag}"])
            m = run(cfg, export=False).metrics
            print(f"{seed:>4} {flag:>5} {m['ate_rmse']:8.4f} {m['ate_ratio']:8.5f} {m['focal_ref']:9.2f}")


if __name__ == "__main__":
    main()
