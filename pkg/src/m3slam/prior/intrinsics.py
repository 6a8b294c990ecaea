"""Focal estimation from point maps and cross-batch intrinsic alignment."""
from __future__ import annotations

import numpy as np

from ..errors import DegenerateGeometry
from ..geom import PinholeIntrinsics
from .observation import InferenceBatch

AXIS_TOL = 1e-6


def _gather(batch: InferenceBatch):
    uv, pts = [], []
    for o in batch:
        v = o.valid & (o.points[..., 2] > 0)
        vv, uu = np.nonzero(v)
        uv.append(np.stack([uu, vv], axis=1).astype(float))
        pts.append(o.points[v])
    return np.concatenate(uv), np.concatenate(pts)


def estimate_intrinsics_ransac(
    batch: InferenceBatch,
    n_hypotheses=256,
    inlier_px=1.0,
    min_offset_px=2.0,
    max_samples=40_000,
    refine_iters=50,
    seed=0,
) -> PinholeIntrinsics:
    """Shared focal length from per-pixel ratios ``f = z (u - cx) / x`` (and the y analogue).

    The principal point stays at the image centre. Each hypothesis is a single
    pixel's ratio, scored by the number of pixels reprojecting within
    ``inlier_px``; the winner is refined by the median ratio over its inliers
    (taken on inverse ratios, re-selecting inliers a few times).
    Pixels within ``min_offset_px`` of the centre lines carry no focal
    information and are left out of the ratio pool.
    """
    H, W = batch[0].shape
    cx, cy = (W - 1) / 2.0, (H - 1) / 2.0
    uv, X = _gather(batch)
    if len(X) < 100:
        raise DegenerateGeometry(f"only {len(X)} valid pixels, need at least 100")
    rng = np.random.default_rng(seed)
    if len(X) > max_samples:
        pick = np.sort(rng.choice(len(X), max_samples, replace=False))
        uv, X = uv[pick], X[pick]
    z = X[:, 2]
    off_x = np.abs(X[:, 0]) > AXIS_TOL * z
    off_y = np.abs(X[:, 1]) > AXIS_TOL * z
    if np.mean(off_x | off_y) < 0.5:
        raise DegenerateGeometry("most sampled pixels lie on the optical axis")
    du, dv = uv[:, 0] - cx, uv[:, 1] - cy
    use_x = off_x & (np.abs(du) >= min_offset_px)
    use_y = off_y & (np.abs(dv) >= min_offset_px)
    fx = np.where(use_x, z * du / np.where(use_x, X[:, 0], 1.0), np.nan)
    fy = np.where(use_y, z * dv / np.where(use_y, X[:, 1], 1.0), np.nan)
    pool = np.concatenate([fx[use_x], fy[use_y]])
    pool = pool[pool > 0]
    if len(pool) == 0:
        raise DegenerateGeometry("no positive focal hypotheses")
    xz, yz = X[:, 0] / z, X[:, 1] / z

    def inliers(f):
        err = np.hypot(f * xz + cx - uv[:, 0], f * yz + cy - uv[:, 1])
        return err <= inlier_px

    hyps = pool[rng.integers(0, len(pool), min(n_hypotheses, len(pool)))]
    best_f, best_n = None, -1
    for f in hyps:
        n = int(inliers(f).sum())
        if n > best_n or (n == best_n and f < best_f):
            best_f, best_n = float(f), n
    f = best_f
    # median over inverse ratios: pixel coordinates are exact and point noise
    # enters (x/z)/du linearly, so each term is symmetric about 1/f
    gx = np.where(use_x, xz / np.where(use_x, du, 1.0), np.nan)
    gy = np.where(use_y, yz / np.where(use_y, dv, 1.0), np.nan)
    # the refinement window widens to three robust sigmas of the residuals when
    # point noise exceeds inlier_px; a 1 px window would otherwise hold mostly noise
    for _ in range(refine_iters):
        rx = f * xz + cx - uv[:, 0]
        ry = f * yz + cy - uv[:, 1]
        r = np.concatenate([rx[use_x], ry[use_y]])
        thresh = max(inlier_px, 3.0 * 1.4826 * float(np.median(np.abs(r))))
        mx = np.abs(rx) <= thresh
        my = np.abs(ry) <= thresh
        g = np.concatenate([gx[mx & use_x], gy[my & use_y]])
        if len(g) == 0:
            break
        med = float(np.median(g))
        if not med > 0:
            break
        f_new = 1.0 / med
        if f_new == f:
            break
        f = f_new
    return PinholeIntrinsics(f, f, cx, cy, W, H)


def align_intrinsics(batch: InferenceBatch, K_ref: PinholeIntrinsics, K_batch: PinholeIntrinsics | None = None):
    """Re-express every point map under the reference intrinsics.

    Each valid point is projected with the batch's own intrinsics and
    backprojected with ``K_ref`` at its original depth, so depths are kept
    bit for bit and ``project(K_ref, X')`` lands where the batch model placed
    the point. For a shared principal point this is the focal-ratio rescaling
    of the lateral coordinates.
    """
    Kb = K_batch if K_batch is not None else estimate_intrinsics_ransac(batch)
    out = []
    for o in batch:
        X = o.points.copy()
        v = o.valid & (X[..., 2] > 0)
        z = X[v][:, 2]
        u = Kb.fx * X[v][:, 0] / z + Kb.cx
        w = Kb.fy * X[v][:, 1] / z + Kb.cy
        X[v] = np.stack([(u - K_ref.cx) / K_ref.fx * z, (w - K_ref.cy) / K_ref.fy * z, z], axis=1)
        out.append(o.replace(points=X))
    meta = dict(batch.meta)
    meta["aligned_focal_ratio"] = Kb.fx / K_ref.fx
    return InferenceBatch(out, metric_scale=batch.metric_scale, meta=meta)
