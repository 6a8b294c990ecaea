"""Loop closure on vs off on the loop preset, over several seeds.

Mapping is disabled because it does not influence the trajectory.

    python scripts/loop_closure_ablation.py --seeds 0 1 2 --frames 200
"""
import argparse
import time

import numpy as np

from m3slam.pipeline import load_config, run


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--seeds", type=int, nargs="+", default=[0, 1, 2, 3, 4])
    ap.add_argument("--frames", type=int, default=200)
    args = ap.parse_args()

    ratios = {"on": [], "off": []}
    print(f"{'seed':>4} {'loop':>4} {'ate':>8} {'ate/len':>8} {'kf':>4} {'closures':>8} {'time':>6}")
    for seed in args.seeds:
        for name, flag in (("on", "true"), ("off", "false")):
            cfg = load_config(None, [f"seed={seed}", f"provider.frames={args.frames}", "gsmap.enabled=false",
                                     f"backend.loop_closure={flag}"])
            t = time.perf_counter()
            m = run(cfg, export=False).metrics
            dt = time.perf_counter() - t
            ratios[name].append(m["ate_ratio"])
            print(f"{seed:>4} {name:>4} {m['ate_rmse']:8.4f} {m['ate_ratio']:8.5f} {m['keyframe_count']:4d} "
                  f"{m['loop_closures']:8d} {dt:6.1f}")
    for name, r in ratios.items():
        print(f"median ate/len, loop {name}: {np.median(r):.5f}")


if __name__ == "__main__":
    main()
