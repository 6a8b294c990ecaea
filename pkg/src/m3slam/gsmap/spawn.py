"""Where to add Gaussians: LoG insertion probability and per-pixel spawning."""
from __future__ import annotations

import math

import numpy as np
from scipy.ndimage import convolve
from scipy.spatial.transform import Rotation

from ..errors import ShapeMismatch
from ..geom import PinholeIntrinsics, Sim3Pose
from ..prior.observation import FrameObservation
from .primitives import GaussianMap, rgb_to_sh

LUMA = np.array([0.299, 0.587, 0.114])


def luminance(img):
    img = np.asarray(img, float)
    return img @ LUMA if img.ndim == 3 else img


def log_kernel(sigma=1.0):
    """Analytic Laplacian-of-Gaussian kernel of radius ceil(3 sigma), shifted to zero sum
    so that constant images have zero response."""
    r = int(math.ceil(3 * sigma))
    x = np.arange(-r, r + 1, dtype=float)
    X, Y = np.meshgrid(x, x)
    r2 = X**2 + Y**2
    k = (r2 - 2 * sigma**2) / sigma**4 * np.exp(-r2 / (2 * sigma**2)) / (2 * math.pi * sigma**2)
    return k - k.mean()


def log_response(img, sigma=1.0):
    """|LoG * I| on the luminance, mirrored borders."""
    return np.abs(convolve(luminance(img), log_kernel(sigma), mode="reflect"))


def spawn_probability(gt_image, rendered, sigma=1.0):
    """P_a = max(min(|LoG I|, 1) - min(|LoG I~|, 1), 0) per pixel."""
    gt_image, rendered = np.asarray(gt_image, float), np.asarray(rendered, float)
    if gt_image.shape != rendered.shape:
        raise ShapeMismatch(f"image shapes differ: {gt_image.shape} vs {rendered.shape}")
    a = np.minimum(log_response(gt_image, sigma), 1.0)
    b = np.minimum(log_response(rendered, sigma), 1.0)
    return np.maximum(a - b, 0.0)


def depth_tercile_levels(depth, valid, n_levels=3):
    """Level per pixel from the depth quantiles of the valid pixels (nearest = 0)."""
    levels = np.zeros(depth.shape, np.int64)
    if n_levels <= 1 or not valid.any():
        return levels
    qs = np.quantile(depth[valid], np.arange(1, n_levels) / n_levels)
    levels[:] = np.searchsorted(qs, depth, side="right")
    return levels


def spawn_gaussians(
    frame: FrameObservation,
    gt_image,
    rendered,
    motion,
    intr: PinholeIntrinsics,
    pose: Sim3Pose,
    level_assignment=None,
    tau_a=0.2,
    m_min=0.5,
    s_prime_max=10.0,
    sigma=1.0,
    n_levels=3,
    rendered_alpha=None,
    coverage_alpha=None,
    allowed=None,
    return_pixels=False,
):
    """New Gaussians at the pixels with P_a > tau_a and motion > m_min.

    With ``coverage_alpha`` set, pixels whose rendered accumulated alpha is
    below it are also candidates (nothing explains them yet). Level-l pixels
    only spawn on the 2^l stride grid and get a 2^l times wider footprint.
    ``allowed`` is an optional extra pixel mask. Returns the new Gaussians as
    a map fragment (ids start at 0; merge with ``GaussianMap.append``), plus
    the (v, u) spawn pixels when ``return_pixels`` is set.
    """
    H, W = frame.shape
    P_a = spawn_probability(gt_image, rendered, sigma)
    log_abs = np.minimum(log_response(gt_image, sigma), 1.0)
    cand = P_a > tau_a
    if coverage_alpha is not None and rendered_alpha is not None:
        cand |= np.asarray(rendered_alpha) < coverage_alpha
    cand &= np.asarray(motion, float) > m_min
    cand &= frame.valid & (frame.points[..., 2] > 0)
    if allowed is not None:
        cand &= allowed
    if level_assignment is None:
        levels = depth_tercile_levels(frame.points[..., 2], frame.valid, n_levels)
    else:
        levels = np.asarray(level_assignment, np.int64)
    vv, uu = np.mgrid[0:H, 0:W]
    stride = 2**levels
    cand &= (uu % stride == 0) & (vv % stride == 0)
    v, u = np.nonzero(cand)
    out = GaussianMap()
    if len(v) == 0:
        return (out, (v, u)) if return_pixels else out
    mu = pose.act(frame.points[v, u])
    d = np.linalg.norm(mu - pose.translation, axis=1)
    with np.errstate(divide="ignore"):
        s_prime = np.minimum(1.0 / (2.0 * np.sqrt(log_abs[v, u])), s_prime_max)
    lv = levels[v, u]
    f = 0.5 * (intr.fx + intr.fy)
    s = d * s_prime * 2.0**lv / f
    quat = np.tile(Rotation.from_matrix(pose.rotation).as_quat(), (len(v), 1))
    alpha = np.clip(0.2 * frame.conf[v, u], 0.0, 1.0)
    rgb = np.asarray(gt_image, float)[v, u]
    out.extend(mu, np.repeat(s[:, None], 3, axis=1), quat, alpha, rgb_to_sh(rgb), lv, d * 4.0**lv, frame.frame_id)
    return (out, (v, u)) if return_pixels else out
