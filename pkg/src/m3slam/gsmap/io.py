"""PLY export/import of the Gaussian set and PNG export of renders."""
from __future__ import annotations

import numpy as np
from PIL import Image

from .primitives import GaussianMap, rgb_to_sh

PLY_FIELDS = [
    ("x", "f4"), ("y", "f4"), ("z", "f4"),
    ("nx", "f4"), ("ny", "f4"), ("nz", "f4"),
    ("red", "u1"), ("green", "u1"), ("blue", "u1"),
    ("opacity", "f4"),
    ("scale_x", "f4"), ("scale_y", "f4"), ("scale_z", "f4"),
    ("level", "u1"),
]
_PLY_TYPES = {"f4": "float", "u1": "uchar"}


def to_u8(rgb):
    return np.clip(np.round(np.asarray(rgb, float) * 255.0), 0, 255).astype(np.uint8)


def write_ply(gmap: GaussianMap, path):
    """Binary little-endian PLY with position, zero normals, u8 colour, opacity, scales and level."""
    dtype = np.dtype([(n, "<" + t) for n, t in PLY_FIELDS])
    rec = np.zeros(len(gmap), dtype=dtype)
    for k, name in enumerate("xyz"):
        rec[name] = gmap.mu[:, k]
    rgb = to_u8(gmap.colors)
    for k, name in enumerate(("red", "green", "blue")):
        rec[name] = rgb[:, k]
    rec["opacity"] = gmap.opacity
    for k, name in enumerate(("scale_x", "scale_y", "scale_z")):
        rec[name] = gmap.scale[:, k]
    rec["level"] = np.minimum(gmap.level, 255)
    header = ["ply", "format binary_little_endian 1.0", f"element vertex {len(gmap)}"]
    header += [f"property {_PLY_TYPES[t]} {n}" for n, t in PLY_FIELDS]
    header.append("end_header")
    with open(path, "wb") as fh:
        fh.write(("\n".join(header) + "\n").encode("ascii"))
        fh.write(rec.tobytes())


def read_ply(path) -> GaussianMap:
    """Inverse of write_ply (quaternions are not stored; identity is used)."""
    with open(path, "rb") as fh:
        data = fh.read()
    end = data.index(b"end_header\n") + len(b"end_header\n")
    lines = data[:end].decode("ascii").splitlines()
    if lines[0] != "ply" or "binary_little_endian" not in lines[1]:
        raise ValueError("not a binary little-endian PLY file")
    n = int(next(l.split()[2] for l in lines if l.startswith("element vertex")))
    dtype = np.dtype([(n_, "<" + t) for n_, t in PLY_FIELDS])
    rec = np.frombuffer(data[end:], dtype=dtype, count=n)
    mu = np.stack([rec["x"], rec["y"], rec["z"]], 1).astype(float)
    rgb = np.stack([rec["red"], rec["green"], rec["blue"]], 1) / 255.0
    scale = np.stack([rec["scale_x"], rec["scale_y"], rec["scale_z"]], 1).astype(float)
    quat = np.tile([0.0, 0.0, 0.0, 1.0], (n, 1))
    return GaussianMap().extend(
        mu, scale, quat, rec["opacity"].astype(float), rgb_to_sh(rgb), rec["level"].astype(np.int64), np.full(n, np.inf)
    )


def save_png(img, path):
    Image.fromarray(to_u8(img)).save(path)
