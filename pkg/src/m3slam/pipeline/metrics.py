"""Trajectory and image metrics."""
from __future__ import annotations

import numpy as np

from ..errors import DegenerateTrajectory, LengthMismatch

PSNR_CAP = 99.0


def _centres(traj):
    """(n, 3) camera centres from a list of poses or an (n, 3) array."""
    if len(traj) and hasattr(traj[0], "translation"):
        return np.array([p.translation for p in traj], float)
    return np.asarray(traj, float).reshape(-1, 3)


def umeyama(src, dst, with_scale=True):
    """Least-squares (s, R, t) with dst ~ s R src + t.

    Rotation from the SVD of the centred cross-covariance, scale from the
    variance ratio, translation from the centroids.
    """
    src, dst = np.asarray(src, float), np.asarray(dst, float)
    n = len(src)
    mu_s, mu_d = src.mean(0), dst.mean(0)
    xs, xd = src - mu_s, dst - mu_d
    if n < 3 or np.linalg.matrix_rank(xs, tol=1e-9 * max(np.abs(xs).max(), 1e-300)) < 2:
        raise DegenerateTrajectory("need at least 3 non-collinear positions for the alignment")
    C = xd.T @ xs / n
    U, S, Vt = np.linalg.svd(C)
    D = np.eye(3)
    if np.linalg.det(U) * np.linalg.det(Vt) < 0:
        D[2, 2] = -1.0
    R = U @ D @ Vt
    var_s = (xs**2).sum() / n
    s = float(np.trace(np.diag(S) @ D) / var_s) if with_scale else 1.0
    t = mu_d - s * R @ mu_s
    return s, R, t


def ate_rmse(estimated, reference, alignment="sim3"):
    """RMSE of camera-centre residuals after aligning ``estimated`` onto ``reference``."""
    if alignment not in ("se3", "sim3"):
        raise ValueError(f"alignment must be se3 or sim3, got {alignment!r}")
    est, ref = _centres(estimated), _centres(reference)
    if len(est) != len(ref):
        raise LengthMismatch(f"{len(est)} estimated vs {len(ref)} reference poses")
    s, R, t = umeyama(est, ref, with_scale=alignment == "sim3")
    res = ref - (s * est @ R.T + t)
    return float(np.sqrt(np.mean(np.sum(res**2, axis=1))))


def trajectory_length(traj):
    c = _centres(traj)
    return float(np.linalg.norm(np.diff(c, axis=0), axis=1).sum()) if len(c) > 1 else 0.0


def psnr(rendered, gt):
    """10 log10(1 / MSE) over all channels; identical images give the 99 dB cap."""
    a, b = np.asarray(rendered, float), np.asarray(gt, float)
    if a.shape != b.shape:
        raise ValueError(f"shape mismatch {a.shape} vs {b.shape}")
    mse = float(np.mean((a - b) ** 2))
    if mse == 0.0:
        return PSNR_CAP
    return min(10.0 * np.log10(1.0 / mse), PSNR_CAP)


def f1_from_counts(tp, fp, fn):
    if tp == 0:
        return 1.0 if fp == 0 and fn == 0 else 0.0
    return 2 * tp / (2 * tp + fp + fn)


def f1_score(pred, truth):
    pred, truth = np.asarray(pred, bool), np.asarray(truth, bool)
    return f1_from_counts(int(np.sum(pred & truth)), int(np.sum(pred & ~truth)), int(np.sum(~pred & truth)))
