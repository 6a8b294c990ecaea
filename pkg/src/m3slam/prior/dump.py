"""Binary M3PD dumps of prior-model outputs.

Layout (little-endian)::

    b"M3PD" u32 version u32 N u32 H u32 W u32 d
    N x [ u64 frame_id, 16 f64 pose (row-major 4x4), f64 metric_scale,
          X f32[H*W*3], C f32[H*W], D f32[H*W*d], Q f32[H*W], valid u8[H*W] ]
    optional b"GT00": N x [ 16 f64 pose, u8[H*W] dynamic mask, f32[H*W*3] points ]
    optional b"IMG0": N x [ f32[H*W*3] colour image ]

The ground-truth and image blocks are optional; real-model dumps simply omit
them.
"""
from __future__ import annotations

import json
import logging
import struct
from pathlib import Path

import numpy as np

from ..errors import BadMagic, DimensionMismatch, TruncatedFile, VersionMismatch
from ..geom import Sim3Pose
from .observation import FrameObservation, InferenceBatch
from .scene import NoiseModel, apply_batch_effects

log = logging.getLogger(__name__)

MAGIC = b"M3PD"
VERSION = 1
GT_TAG = b"GT00"
IMG_TAG = b"IMG0"
_HEADER = struct.Struct("<4s5I")
_FRAME_HEAD = struct.Struct("<Q16dd")


def _pose_from_matrix(T):
    T = np.asarray(T, dtype=float)
    if abs(np.cbrt(np.linalg.det(T[:3, :3])) - 1.0) < 1e-12:
        # rigid poses keep their stored rotation bit for bit
        return Sim3Pose(1.0, T[:3, :3].copy(), T[:3, 3].copy())
    return Sim3Pose.from_matrix(T)


def encode_batch(batch: InferenceBatch, with_gt=True, with_images=True) -> bytes:
    obs = batch.observations
    H, W = obs[0].shape
    d = obs[0].desc_dim
    parts = [_HEADER.pack(MAGIC, VERSION, len(obs), H, W, d)]
    for o in obs:
        if o.shape != (H, W) or o.desc_dim != d:
            raise DimensionMismatch("frames in one dump must share H, W and d")
        parts.append(_FRAME_HEAD.pack(o.frame_id, *o.pose.matrix().ravel(), batch.metric_scale))
        for arr in (o.points, o.conf, o.desc, o.match_conf):
            parts.append(np.ascontiguousarray(arr, dtype="<f4").tobytes())
        parts.append(np.ascontiguousarray(o.valid, dtype=np.uint8).tobytes())
    if with_gt and all(o.has_gt for o in obs):
        parts.append(GT_TAG)
        for o in obs:
            dyn = o.gt_dynamic if o.gt_dynamic is not None else np.zeros((H, W), bool)
            parts.append(np.asarray(o.gt_pose.matrix(), dtype="<f8").tobytes())
            parts.append(np.ascontiguousarray(dyn, dtype=np.uint8).tobytes())
            parts.append(np.ascontiguousarray(o.gt_points, dtype="<f4").tobytes())
    if with_images and all(o.image is not None for o in obs):
        parts.append(IMG_TAG)
        for o in obs:
            parts.append(np.ascontiguousarray(o.image, dtype="<f4").tobytes())
    return b"".join(parts)


def save_dump(batch: InferenceBatch, path, with_gt=True, with_images=True):
    Path(path).write_bytes(encode_batch(batch, with_gt, with_images))


class _Reader:
    def __init__(self, buf):
        self.buf = buf
        self.pos = 0

    def take(self, n):
        if self.pos + n > len(self.buf):
            raise TruncatedFile(f"need {n} bytes at offset {self.pos}, file has {len(self.buf)}")
        out = self.buf[self.pos : self.pos + n]
        self.pos += n
        return out

    def array(self, dtype, shape):
        dt = np.dtype(dtype)
        n = int(np.prod(shape)) * dt.itemsize
        return np.frombuffer(self.take(n), dtype=dt).reshape(shape)

    @property
    def remaining(self):
        return len(self.buf) - self.pos


def decode_batch(buf: bytes, renorm_tol=1e-3) -> InferenceBatch:
    if len(buf) < 4:
        raise TruncatedFile("file shorter than the magic number")
    if buf[:4] != MAGIC:
        raise BadMagic(f"expected {MAGIC!r}, found {buf[:4]!r}")
    r = _Reader(buf)
    _, version, n, H, W, d = _HEADER.unpack(r.take(_HEADER.size))
    if version != VERSION:
        raise VersionMismatch(f"dump version {version}, reader supports {VERSION}")
    if n == 0 or H == 0 or W == 0 or d == 0:
        raise DimensionMismatch(f"degenerate dimensions N={n} H={H} W={W} d={d}")
    frames, scales = [], []
    renormalized = 0
    for _ in range(n):
        head = _FRAME_HEAD.unpack(r.take(_FRAME_HEAD.size))
        fid, mat, scale = head[0], np.array(head[1:17]).reshape(4, 4), head[17]
        X = r.array("<f4", (H, W, 3)).astype(np.float64)
        C = r.array("<f4", (H, W)).astype(np.float64)
        D = r.array("<f4", (H, W, d)).astype(np.float64)
        Q = r.array("<f4", (H, W)).astype(np.float64)
        valid = r.array(np.uint8, (H, W)).astype(bool)
        norms = np.linalg.norm(D, axis=-1)
        off = valid & (np.abs(norms - 1.0) > renorm_tol) & (norms > 0)
        if off.any():
            renormalized += int(off.sum())
            D[off] /= norms[off][:, None]
        frames.append(FrameObservation(int(fid), X, _pose_from_matrix(mat), C, D, Q, valid))
        scales.append(scale)
    while r.remaining >= 4:
        tag = r.take(4)
        if tag == GT_TAG:
            for i, o in enumerate(frames):
                mat = r.array("<f8", (4, 4))
                dyn = r.array(np.uint8, (H, W)).astype(bool)
                pts = r.array("<f4", (H, W, 3)).astype(np.float64)
                frames[i] = o.replace(gt_pose=_pose_from_matrix(mat), gt_dynamic=dyn, gt_points=pts)
        elif tag == IMG_TAG:
            for i, o in enumerate(frames):
                frames[i] = o.replace(image=r.array("<f4", (H, W, 3)).astype(np.float64))
        else:
            raise DimensionMismatch(f"unknown trailer block {tag!r}")
    if r.remaining:
        raise TruncatedFile(f"{r.remaining} stray bytes after the last block")
    if renormalized:
        log.warning("renormalized %d descriptors with norm off by more than %g", renormalized, renorm_tol)
    return InferenceBatch(frames, metric_scale=float(scales[0]), meta={"renormalized": renormalized})


def load_dump(path, renorm_tol=1e-3) -> InferenceBatch:
    with open(path, "rb") as fh:
        buf = fh.read()
    return decode_batch(buf, renorm_tol)


# ---------------------------------------------------------------------------
# dump directories


def frame_path(root, frame_id):
    return Path(root) / f"frame_{frame_id:06d}.m3pd"


def write_scene_dumps(provider, out_dir, meta_extra=None):
    """Write one single-frame dump per frame plus ``meta.json`` describing the batch noise."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    for fid in range(provider.n_frames):
        o = provider.frame(fid)
        save_dump(InferenceBatch([o]), frame_path(out, fid))
    nz = provider.noise
    meta = {
        "n_frames": provider.n_frames,
        "seed": int(provider.seed),
        "noise": {k: float(getattr(nz, k)) for k in NoiseModel.__dataclass_fields__},
    }
    meta.update(meta_extra or {})
    (out / "meta.json").write_text(json.dumps(meta, indent=2, sort_keys=True))
    return out


class DumpProvider:
    """Serves batches assembled from a directory of per-frame dumps.

    Batch-level effects (gauge, scale and focal jitter) are re-applied with the
    recorded seed, so a dump directory written from the oracle reproduces the
    oracle's batches up to float32 storage.
    """

    kind = "dump"

    def __init__(self, root):
        self.root = Path(root)
        meta_path = self.root / "meta.json"
        self.meta = json.loads(meta_path.read_text()) if meta_path.exists() else {}
        files = sorted(self.root.glob("frame_*.m3pd"))
        self._n = int(self.meta.get("n_frames", len(files)))
        self.seed = int(self.meta.get("seed", 0))
        self.noise = NoiseModel(**self.meta.get("noise", {}))
        self._cache: dict[int, FrameObservation] = {}

    @property
    def n_frames(self):
        return self._n

    def frame(self, frame_id) -> FrameObservation:
        if frame_id not in self._cache:
            b = load_dump(frame_path(self.root, frame_id))
            self._cache[frame_id] = b.observations[0]
        return self._cache[frame_id]

    def batch(self, frame_ids) -> InferenceBatch:
        return apply_batch_effects([self.frame(i) for i in frame_ids], self.noise, self.seed)

    def gt_poses(self):
        poses = [self.frame(i).gt_pose for i in range(self.n_frames)]
        return None if any(p is None for p in poses) else poses
