"""Forward splatting of Gaussians (EWA footprints, front-to-back compositing)
and analytic gradients of the rendered colour w.r.t. colour and opacity."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from ..geom import PinholeIntrinsics, Sim3Pose
from .primitives import SH_C0, GaussianMap, quat_to_matrix

NEAR = 1e-3
CUTOFF_SIGMA = 3.0


def lod_opacity(alpha, d_max, d_r):
    """Distance fade: full opacity up to d_max, linear to zero at 2 d_max."""
    alpha, d_max, d_r = np.broadcast_arrays(*(np.asarray(x, float) for x in (alpha, d_max, d_r)))
    t = d_r / d_max
    return np.where(t <= 1.0, alpha, np.where(t >= 2.0, 0.0, alpha * (2.0 - t)))


def lod_factor(d_max, d_r):
    return lod_opacity(1.0, d_max, d_r)


@dataclass
class Projected:
    """Per-Gaussian screen-space quantities for one view."""

    index: np.ndarray  # indices into the map of the visible Gaussians
    uv: np.ndarray
    z: np.ndarray
    conic: np.ndarray  # (n, 3) entries (a, b, c) of the inverse 2D covariance
    radius: np.ndarray
    fade: np.ndarray  # LoD factor in [0, 1]


def covariance_2d(gmap: GaussianMap, idx, Y, pose: Sim3Pose, intr: PinholeIntrinsics):
    S2 = gmap.scale[idx] ** 2
    iso = np.all(S2 == S2[:, :1], axis=1)
    cov3 = S2[:, :1, None] * np.eye(3)  # isotropic: rotation drops out
    if not iso.all():
        R = quat_to_matrix(gmap.quat[idx[~iso]])
        cov3[~iso] = np.einsum("nij,nj,nkj->nik", R, S2[~iso], R)
    Wc = pose.rotation.T / pose.scale  # camera-from-world linear part
    x, y, z = Y[:, 0], Y[:, 1], Y[:, 2]
    J = np.zeros((len(Y), 2, 3))
    J[:, 0, 0] = intr.fx / z
    J[:, 0, 2] = -intr.fx * x / z**2
    J[:, 1, 1] = intr.fy / z
    J[:, 1, 2] = -intr.fy * y / z**2
    M = J @ Wc
    return np.einsum("nij,njk,nlk->nil", M, cov3, M)


def project_gaussians(gmap: GaussianMap, pose: Sim3Pose, intr: PinholeIntrinsics) -> Projected:
    if len(gmap) == 0:
        e = np.zeros(0)
        return Projected(np.zeros(0, np.int64), np.zeros((0, 2)), e, np.zeros((0, 3)), np.zeros(0, np.int64), e)
    Y = pose.inverse().act(gmap.mu)
    d_r = np.linalg.norm(gmap.mu - pose.translation, axis=1)
    fade = lod_factor(gmap.d_max, d_r)
    # cameras inside a Gaussian's 3-sigma extent break the affine footprint model
    inside = Y[:, 2] <= CUTOFF_SIGMA * gmap.scale.max(axis=1) * pose.scale ** -1
    ok = (Y[:, 2] > NEAR) & ~inside & (fade > 0) & (gmap.opacity > 0)
    idx = np.nonzero(ok)[0]
    Y = Y[idx]
    cov = covariance_2d(gmap, idx, Y, pose, intr)
    a, b, c = cov[:, 0, 0], cov[:, 0, 1], cov[:, 1, 1]
    det = a * c - b * b
    good = det > 1e-300
    idx, Y, a, b, c, det = idx[good], Y[good], a[good], b[good], c[good], det[good]
    conic = np.stack([c / det, -b / det, a / det], axis=1)
    lam_max = 0.5 * (a + c) + np.sqrt(0.25 * (a - c) ** 2 + b * b)
    radius = np.ceil(CUTOFF_SIGMA * np.sqrt(lam_max)).astype(np.int64)
    uv = np.stack([intr.fx * Y[:, 0] / Y[:, 2] + intr.cx, intr.fy * Y[:, 1] / Y[:, 2] + intr.cy], 1)
    H, W = intr.height, intr.width
    onscreen = (uv[:, 0] + radius >= 0) & (uv[:, 0] - radius <= W - 1) & (uv[:, 1] + radius >= 0) & (uv[:, 1] - radius <= H - 1)
    radius = np.minimum(radius, max(H, W))
    s = onscreen
    return Projected(idx[s], uv[s], Y[s, 2], conic[s], radius[s], fade[idx[s]])


@dataclass
class RenderResult:
    color: np.ndarray  # (H, W, 3)
    depth: np.ndarray  # (H, W)
    alpha: np.ndarray  # (H, W) accumulated alpha
    ctx: dict | None = None


def _pairs(proj: Projected, H, W):
    """(Gaussian slot, pixel, footprint) for every pixel inside a 3-sigma footprint."""
    gs, pix, foot = [], [], []
    # radii rounded up to a few buckets; the 3-sigma test below decides membership
    buckets = np.array([1, 2, 3, 4, 6, 8, 12, 16, 24, 32, 48, 64, 96, 128, 192, 256, 384, 512])
    rb = buckets[np.minimum(np.searchsorted(buckets, proj.radius), len(buckets) - 1)]
    rb = np.maximum(rb, proj.radius)
    # footprints whose square exceeds the image are tested against every pixel instead
    full = (2 * rb + 1) ** 2 >= H * W
    rb = np.where(full, -1, rb)
    for r in np.unique(rb):
        sel = np.nonzero(rb == r)[0]
        if r < 0:
            v, u = np.mgrid[0:H, 0:W]
            u = np.broadcast_to(u.ravel()[None], (len(sel), H * W))
            v = np.broadcast_to(v.ravel()[None], (len(sel), H * W))
        else:
            o = np.arange(-r, r + 1)
            du, dv = np.meshgrid(o, o)
            du, dv = du.ravel(), dv.ravel()
            cu = np.floor(proj.uv[sel, 0] + 0.5).astype(np.int64)
            cv = np.floor(proj.uv[sel, 1] + 0.5).astype(np.int64)
            u = cu[:, None] + du[None]
            v = cv[:, None] + dv[None]
        dx = u - proj.uv[sel, 0:1]
        dy = v - proj.uv[sel, 1:2]
        A, B, C = (proj.conic[sel, k : k + 1] for k in range(3))
        m2 = A * dx * dx + 2 * B * dx * dy + C * dy * dy
        keep = (m2 <= CUTOFF_SIGMA**2) & (u >= 0) & (u < W) & (v >= 0) & (v < H)
        rows, cols = np.nonzero(keep)
        gs.append(sel[rows])
        pix.append(v[rows, cols] * W + u[rows, cols])
        foot.append(np.exp(-0.5 * m2[rows, cols]))
    if not gs:
        return np.zeros(0, np.int64), np.zeros(0, np.int64), np.zeros(0)
    return np.concatenate(gs), np.concatenate(pix), np.concatenate(foot)


def render(gmap: GaussianMap, pose: Sim3Pose, intr: PinholeIntrinsics, keep_ctx=False) -> RenderResult:
    """Front-to-back alpha compositing over a black background.

    Per pixel, Gaussians are drawn in order of camera depth, ties by id.
    """
    H, W = intr.height, intr.width
    P = H * W
    proj = project_gaussians(gmap, pose, intr)
    slot, pix, foot = _pairs(proj, H, W)
    gi = proj.index[slot]
    order = np.lexsort((gmap.ids[gi], proj.z[slot], pix))
    slot, pix, foot, gi = slot[order], pix[order], foot[order], gi[order]
    counts = np.bincount(pix, minlength=P)
    K = max(int(counts.max(initial=0)), 1)
    start = np.concatenate([[0], np.cumsum(counts)[:-1]])
    rank = np.arange(len(pix)) - start[pix]
    weight = foot * proj.fade[slot]  # d alpha / d opacity
    a = np.zeros((P, K))
    a[pix, rank] = gmap.opacity[gi] * weight
    col = np.zeros((P, K, 3))
    col[pix, rank] = gmap.colors[gi]
    z = np.zeros((P, K))
    z[pix, rank] = proj.z[slot]
    trans = np.cumprod(1.0 - a, axis=1)
    T = np.concatenate([np.ones((P, 1)), trans[:, :-1]], axis=1)
    w = T * a
    color = np.einsum("pk,pkc->pc", w, col).reshape(H, W, 3)
    depth = np.einsum("pk,pk->p", w, z).reshape(H, W)
    alpha = w.sum(axis=1).reshape(H, W)
    ctx = None
    if keep_ctx:
        ctx = dict(pix=pix, rank=rank, gi=gi, weight=weight, a=a, col=col, T=T, n=len(gmap), shape=(H, W))
    return RenderResult(color, depth, alpha, ctx)


def render_backward(ctx, grad_color):
    """Gradients of a scalar loss w.r.t. SH colour (n, 3) and opacity (n,),
    given d loss / d rendered colour (H, W, 3)."""
    g = np.asarray(grad_color, float).reshape(-1, 3)
    a, col, T = ctx["a"], ctx["col"], ctx["T"]
    P, K = a.shape
    # colour of everything behind slot k, composited from slot k+1 on
    # (rank-major copies keep the per-rank slices contiguous)
    aT = np.ascontiguousarray(a.T)
    cT = np.ascontiguousarray(col.transpose(1, 0, 2))
    behindT = np.zeros((K, P, 3))
    for k in range(K - 2, -1, -1):
        behindT[k] = aT[k + 1, :, None] * cT[k + 1] + (1.0 - aT[k + 1, :, None]) * behindT[k + 1]
    TT = T.T
    # per (rank, pixel) slot: d colour / d alpha contracted with the pixel gradient
    d_alpha = TT * np.einsum("kpc,pc->kp", cT - behindT, g)
    pix, rank, gi = ctx["pix"], ctx["rank"], ctx["gi"]
    lin = rank * P + pix
    n = ctx["n"]
    w = (TT * aT).ravel()[lin]
    g_pix = g[pix]
    grad_sh = np.zeros((n, 3))
    for c in range(3):
        grad_sh[:, c] = np.bincount(gi, weights=w * g_pix[:, c] * SH_C0, minlength=n)
    grad_op = np.bincount(gi, weights=d_alpha.ravel()[lin] * ctx["weight"], minlength=n)
    return grad_sh, grad_op
