"""Write an M3PD dump with a plain struct-based writer, independent of the package encoder.

Used as a cross-check of the binary layout: the package loader must read this
file back to the same batch up to float32 rounding.

    python scripts/write_reference_dump.py --preset sparse --frames 0 1 --out ref.m3pd
"""
import argparse
import struct

from m3slam.prior.scene import make_scene, oracle_render


def write_reference(batch, path):
    obs = batch.observations
    H, W = obs[0].valid.shape
    d = obs[0].desc.shape[-1]
    out = bytearray()
    out += b"M3PD"
    out += struct.pack("<IIIII", 1, len(obs), H, W, d)
    for o in obs:
        out += struct.pack("<Q", o.frame_id)
        T = o.pose.matrix()
        for r in range(4):
            for c in range(4):
                out += struct.pack("<d", float(T[r, c]))
        out += struct.pack("<d", float(batch.metric_scale))
        for v in range(H):
            for u in range(W):
                out += struct.pack("<3f", *map(float, o.points[v, u]))
        for v in range(H):
            for u in range(W):
                out += struct.pack("<f", float(o.conf[v, u]))
        for v in range(H):
            for u in range(W):
                out += struct.pack(f"<{d}f", *map(float, o.desc[v, u]))
        for v in range(H):
            for u in range(W):
                out += struct.pack("<f", float(o.match_conf[v, u]))
        for v in range(H):
            for u in range(W):
                out += struct.pack("<B", 1 if o.valid[v, u] else 0)
    with open(path, "wb") as fh:
        fh.write(bytes(out))


def main():
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("--preset", default="sparse")
    ap.add_argument("--frames", type=int, nargs="+", default=[0, 1])
    ap.add_argument("--seed", type=int, default=0)
    ap.add_argument("--out", required=True)
    args = ap.parse_args()
    scene = make_scene(args.preset, n_frames=max(args.frames) + 1, seed=args.seed)
    write_reference(oracle_render(scene, args.frames), args.out)


if __name__ == "__main__":
    main()
