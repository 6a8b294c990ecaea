"""Dense correspondences: ground-truth mining, InfoNCE evaluation, pose-guided
local matching and descriptor-warp motion maps."""
from __future__ import annotations

import csv
from dataclasses import dataclass, field

import numpy as np
from scipy.ndimage import maximum_filter
from scipy.spatial import cKDTree
from scipy.special import logsumexp

from .errors import EmptyCorrespondences, MissingGroundTruth, NonPositiveTemperature
from .geom import PinholeIntrinsics, Sim3Pose
from .prior.observation import FrameObservation


@dataclass(eq=False)
class CorrespondenceSet:
    """Pixel pairs ``q`` (source) -> ``p`` (target), stored as integer (u, v) rows."""

    source_id: int
    target_id: int
    q: np.ndarray  # (n, 2) int
    p: np.ndarray  # (n, 2) int
    sim: np.ndarray  # (n,)
    weight: np.ndarray  # (n,)
    stats: dict = field(default_factory=dict)

    def __len__(self):
        return len(self.q)

    @classmethod
    def empty(cls, source_id, target_id, stats=None):
        z = np.zeros((0, 2), dtype=np.int64)
        return cls(source_id, target_id, z, z.copy(), np.zeros(0), np.zeros(0), stats or {})

    def as_pairs(self):
        return {(tuple(a), tuple(b)) for a, b in zip(self.q.tolist(), self.p.tolist())}

    def subset(self, mask) -> "CorrespondenceSet":
        return CorrespondenceSet(
            self.source_id, self.target_id, self.q[mask], self.p[mask], self.sim[mask], self.weight[mask], dict(self.stats)
        )


def pair_similarity(src: FrameObservation, tgt: FrameObservation, q, p):
    return np.einsum("nd,nd->n", src.desc[q[:, 1], q[:, 0]], tgt.desc[p[:, 1], p[:, 0]])


def pair_weight(src: FrameObservation, tgt: FrameObservation, q, p):
    return np.sqrt(src.match_conf[q[:, 1], q[:, 0]] * tgt.match_conf[p[:, 1], p[:, 0]])


def write_correspondences_csv(cs: CorrespondenceSet, path):
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["qu", "qv", "pu", "pv", "sim", "weight"])
        for (qu, qv), (pu, pv), s, wt in zip(cs.q.tolist(), cs.p.tolist(), cs.sim.tolist(), cs.weight.tolist()):
            w.writerow([qu, qv, pu, pv, repr(s), repr(wt)])


def read_correspondences_csv(path, source_id=-1, target_id=-1) -> CorrespondenceSet:
    rows = np.loadtxt(path, delimiter=",", skiprows=1, ndmin=2)
    if rows.size == 0:
        return CorrespondenceSet.empty(source_id, target_id)
    return CorrespondenceSet(
        source_id, target_id, rows[:, 0:2].astype(np.int64), rows[:, 2:4].astype(np.int64), rows[:, 4], rows[:, 5]
    )


# ---------------------------------------------------------------------------
# ground-truth correspondences


def mine_gt_correspondences(ref: FrameObservation, other: FrameObservation, eps=1e-6) -> CorrespondenceSet:
    """Pixel pairs whose ground-truth 3D points coincide within ``eps``.

    Each reference pixel keeps its closest partner; equal distances go to the
    partner earliest in raster order.
    """
    if not (ref.has_gt and other.has_gt):
        raise MissingGroundTruth("both frames need ground-truth poses and point maps")
    # distances are measured in the reference camera frame
    to_ref = ref.gt_pose.inverse()
    vr, ur = np.nonzero(ref.valid)
    vo, uo = np.nonzero(other.valid)
    if len(ur) == 0 or len(uo) == 0:
        return CorrespondenceSet.empty(ref.frame_id, other.frame_id)
    a = to_ref.act(ref.gt_world()[vr, ur])
    b = to_ref.act(other.gt_world()[vo, uo])
    tree = cKDTree(b)
    hits = tree.query_ball_point(a, eps)
    qs, ps = [], []
    for i, cand in enumerate(hits):
        if not cand:
            continue
        cand = np.asarray(cand)
        d = np.linalg.norm(b[cand] - a[i], axis=1)
        # candidates come in raster order of the target, so lexsort keeps it as the last key
        order = np.lexsort((cand, d))
        j = cand[order[0]]
        if d[order[0]] < eps:
            qs.append((ur[i], vr[i]))
            ps.append((uo[j], vo[j]))
    if not qs:
        return CorrespondenceSet.empty(ref.frame_id, other.frame_id)
    q = np.asarray(qs, dtype=np.int64)
    p = np.asarray(ps, dtype=np.int64)
    return CorrespondenceSet(ref.frame_id, other.frame_id, q, p, pair_similarity(ref, other, q, p), pair_weight(ref, other, q, p))


# ---------------------------------------------------------------------------
# InfoNCE matching loss


def match_loss_pair(D1, Dk, q, p, tau, sign=-1.0, pixel_weights=None):
    """Symmetric InfoNCE over one pair's correspondences.

    ``s(u, v) = exp(sign * tau * <D1_u, Dk_v>)``; the normalisation sets are the
    distinct pixels that take part in the correspondences.
    """
    u_keys = q[:, 1] * D1.shape[1] + q[:, 0]
    v_keys = p[:, 1] * Dk.shape[1] + p[:, 0]
    P1, u_idx = np.unique(u_keys, return_inverse=True)
    Pk, v_idx = np.unique(v_keys, return_inverse=True)
    d1 = D1.reshape(-1, D1.shape[-1])[P1]
    dk = Dk.reshape(-1, Dk.shape[-1])[Pk]
    logits = sign * tau * (d1 @ dk.T)  # (|P1|, |Pk|)
    pos = logits[u_idx, v_idx]
    col = logsumexp(logits, axis=0)[v_idx]  # sum over w in P1 of s(w, v)
    row = logsumexp(logits, axis=1)[u_idx]  # sum over w in Pk of s(u, w)
    terms = (pos - col) + (pos - row)
    if pixel_weights is not None:
        terms = terms * pixel_weights
    return float(-terms.sum())


def infonce_loss(ref_desc, other_descs, gts, Q, tau=1.0, alpha=10.0, sign=-1.0, q_mode="mean"):
    """Confidence-weighted matching objective over a reference and N-1 other frames.

    ``Q`` lists the match-confidence maps ``[Q_1, Q_2, ..., Q_N]``. With
    ``q_mode="mean"`` each pair's loss is weighted by the mean of
    ``sqrt(Q_1(u) Q_k(v))`` over its correspondences; ``"pixel"`` applies that
    weight inside the sum instead (the log term still uses the mean).
    Returns ``(total, per_pair_losses)``.
    """
    if not tau > 0:
        raise NonPositiveTemperature(f"tau must be positive, got {tau}")
    if len(other_descs) == 0 or len(other_descs) != len(gts):
        raise ValueError("need one correspondence set per non-reference frame")
    Q1 = Q[0]
    total = 0.0
    per_pair = []
    for k, (Dk, gt) in enumerate(zip(other_descs, gts)):
        if len(gt) == 0:
            raise EmptyCorrespondences(f"pair {k + 2} has no correspondences")
        Qk = Q[k + 1]
        qw = np.sqrt(Q1[gt.q[:, 1], gt.q[:, 0]] * Qk[gt.p[:, 1], gt.p[:, 0]])
        q_bar = float(qw.mean())
        if q_mode == "mean":
            L = match_loss_pair(ref_desc, Dk, gt.q, gt.p, tau, sign)
            total += q_bar * L - alpha * np.log(q_bar)
        elif q_mode == "pixel":
            L = match_loss_pair(ref_desc, Dk, gt.q, gt.p, tau, sign, pixel_weights=qw)
            total += L - alpha * np.log(q_bar)
        else:
            raise ValueError(f"unknown q_mode {q_mode!r}")
        per_pair.append(L)
    return -total / len(other_descs), per_pair


# ---------------------------------------------------------------------------
# pose-guided local matching


def window_offsets(r):
    """Square-window offsets (du, dv) in raster order (row-major)."""
    dv, du = np.meshgrid(np.arange(-r, r + 1), np.arange(-r, r + 1), indexing="ij")
    return np.stack([du.ravel(), dv.ravel()], axis=1)


def project_into(src_points, T_src: Sim3Pose, T_tgt: Sim3Pose, intr: PinholeIntrinsics):
    local = (T_tgt.inverse() @ T_src).act(src_points)
    z = local[:, 2]
    ok = z > 1e-9
    zs = np.where(ok, z, 1.0)
    uv = np.stack([intr.fx * local[:, 0] / zs + intr.cx, intr.fy * local[:, 1] / zs + intr.cy], axis=1)
    return uv, ok, local


def coarse_to_fine_match(
    src: FrameObservation,
    tgt: FrameObservation,
    T_src: Sim3Pose,
    T_tgt: Sim3Pose,
    intr: PinholeIntrinsics,
    r=4,
    s_min=0.5,
    max_outside=None,
    chunk=8192,
    dense=None,
) -> CorrespondenceSet:
    """Best-descriptor pixel within an l-inf window around each pose-projected source point.

    Window centres are the rounded projections. Equal similarities go to the
    candidate closest to the unrounded projection, then to the earliest in
    raster order. Sources projecting behind the camera or more than
    ``max_outside`` pixels (default ``r``) outside the image are dropped, as are
    matches below ``s_min``. ``max_outside=0`` keeps only projections inside the
    image, which avoids the border pile-up of points that left the view.
    ``dense`` scores each query against the whole target instead of gathering
    its window (same result; default: automatic for windows that cover a large
    part of the image).
    """
    if r < 0:
        raise ValueError("radius must be non-negative")
    H, W = tgt.shape
    vs, us = np.nonzero(src.valid)
    q_all = np.stack([us, vs], axis=1).astype(np.int64)
    uv, ok, _ = project_into(src.points[vs, us], T_src, T_tgt, intr)
    stats = {"queries": len(q_all), "dropped_behind": int((~ok).sum())}
    centre = np.floor(uv + 0.5)
    centre = np.where(ok[:, None], centre, 0).astype(np.int64)
    m = r if max_outside is None else min(max_outside, r)
    inside = ok & (centre[:, 0] >= -m) & (centre[:, 0] <= W - 1 + m) & (centre[:, 1] >= -m) & (centre[:, 1] <= H - 1 + m)
    stats["dropped_outside"] = int((ok & ~inside).sum())
    q_all, uv, centre = q_all[inside], uv[inside], centre[inside]

    offs = window_offsets(r)
    n_off = len(offs)
    stats["candidates"] = len(q_all) * n_off
    # padded target so every window position can be addressed
    Dp = np.zeros((H + 2 * r, W + 2 * r, tgt.desc.shape[-1]))
    Dp[r : r + H, r : r + W] = tgt.desc
    Vp = np.zeros((H + 2 * r, W + 2 * r), bool)
    Vp[r : r + H, r : r + W] = tgt.valid
    best_p = np.zeros((len(q_all), 2), dtype=np.int64)
    best_s = np.full(len(q_all), -np.inf)
    # wide windows on small images: score every target pixel once, then gather
    if dense is None:
        dense = H * W <= 8 * n_off
    if dense:
        Dt = tgt.desc.reshape(H * W, -1)
        chunk = max(1, min(chunk, (1 << 22) // (H * W)))
    for s0 in range(0, len(q_all), chunk):
        sl = slice(s0, s0 + chunk)
        cand = centre[sl, None, :] + offs[None]  # (n, K, 2) in target pixels
        pu = np.clip(cand[..., 0] + r, 0, W + 2 * r - 1)
        pv = np.clip(cand[..., 1] + r, 0, H + 2 * r - 1)
        usable = Vp[pv, pu]
        dq = src.desc[q_all[sl, 1], q_all[sl, 0]]
        if dense:
            flat = np.clip(pv - r, 0, H - 1) * W + np.clip(pu - r, 0, W - 1)
            sims = np.take_along_axis(np.einsum("nd,md->nm", dq, Dt), flat, axis=1)
        else:
            sims = np.einsum("nkd,nd->nk", Dp[pv, pu], dq)
        sims = np.where(usable, sims, -np.inf)
        top = sims.max(axis=1, keepdims=True)
        tie = (sims == top) & usable
        multi = np.nonzero(tie.sum(axis=1) > 1)[0]
        if len(multi):
            # equal best scores: closest to the unrounded projection wins
            t = tie[multi]
            dist = np.where(t, ((cand[multi] - uv[sl][multi, None, :]) ** 2).sum(-1), np.inf)
            tie[multi] = t & (dist == dist.min(axis=1, keepdims=True))
        pick = np.argmax(tie, axis=1)  # first True in raster order
        rows = np.arange(len(pick))
        best_p[sl] = cand[rows, pick]
        best_s[sl] = np.where(tie[rows, pick], sims[rows, pick], -np.inf)
    has = np.isfinite(best_s)
    stats["dropped_no_candidate"] = int((~has).sum())
    keep = has & (best_s >= s_min)
    stats["dropped_low_sim"] = int((has & ~keep).sum())
    q, p = q_all[keep], best_p[keep]
    sim = pair_similarity(src, tgt, q, p)
    return CorrespondenceSet(src.frame_id, tgt.frame_id, q, p, sim, pair_weight(src, tgt, q, p), stats)


# ---------------------------------------------------------------------------
# motion maps


def splat_nearest(intr: PinholeIntrinsics, local, values, fill_holes=True):
    """Z-buffered nearest-pixel splat of per-point values into an image.

    With ``fill_holes`` a second pass lets each point also claim the eight
    neighbouring pixels, but only pixels no point landed on directly; this
    closes the pinholes left by rounding without overriding real splats.
    Returns (image, covered mask).
    """
    H, W = intr.height, intr.width
    z = local[:, 2]
    ok = z > 1e-9
    zs = np.where(ok, z, 1.0)
    u = np.floor(intr.fx * local[:, 0] / zs + intr.cx + 0.5).astype(np.int64)
    v = np.floor(intr.fy * local[:, 1] / zs + intr.cy + 0.5).astype(np.int64)

    def claim(du, dv, mask):
        uu, vv = u + du, v + dv
        m = mask & (uu >= 0) & (uu < W) & (vv >= 0) & (vv < H)
        idx = np.nonzero(m)[0]
        pix = vv[idx] * W + uu[idx]
        order = np.lexsort((idx, z[idx], pix))
        pix_s = pix[order]
        first = np.ones(len(order), bool)
        first[1:] = pix_s[1:] != pix_s[:-1]
        return pix_s[first], idx[order[first]]

    owner = np.full(H * W, -1, dtype=np.int64)
    pix, idx = claim(0, 0, ok)
    owner[pix] = idx
    if fill_holes:
        ring = []
        for dv in (-1, 0, 1):
            for du in (-1, 0, 1):
                if du or dv:
                    uu, vv = u + du, v + dv
                    m = ok & (uu >= 0) & (uu < W) & (vv >= 0) & (vv < H)
                    i = np.nonzero(m)[0]
                    ring.append((vv[i] * W + uu[i], i))
        rpix = np.concatenate([a for a, _ in ring])
        ridx = np.concatenate([b for _, b in ring])
        free = owner[rpix] < 0
        rpix, ridx = rpix[free], ridx[free]
        order = np.lexsort((ridx, z[ridx], rpix))
        rp = rpix[order]
        first = np.ones(len(order), bool)
        first[1:] = rp[1:] != rp[:-1]
        owner[rp[first]] = ridx[order[first]]
    covered = owner >= 0
    out = np.zeros((H * W,) + values.shape[1:])
    out[covered] = values[owner[covered]]
    return out.reshape((H, W) + values.shape[1:]), covered.reshape(H, W)


def estimate_motion_map(cur, kf, kf_motion, T_rel, intr, uncovered=1.0, fill_holes=True, prior_dilation=0):
    """Static-consistency map of ``cur`` from the keyframe's descriptors warped by ``T_rel``.

    ``T_rel`` maps keyframe camera coordinates to current camera coordinates.
    Covered pixels get ``clamp(<D_kf->cur, D_cur>, 0, 1) * M_kf->cur``; the rest
    get ``uncovered``.

    ``prior_dilation > 0`` max-filters the warped keyframe map over a
    (2k+1)^2 window before modulation. Without it, one-pixel silhouette errors
    of the z-buffered warp are inherited by every later frame and the flagged
    band behind a moving object keeps growing.
    """
    return motion_map_with_coverage(cur, kf, kf_motion, T_rel, intr, uncovered, fill_holes, prior_dilation)[0]


def motion_map_with_coverage(
    cur: FrameObservation,
    kf: FrameObservation,
    kf_motion,
    T_rel: Sim3Pose,
    intr: PinholeIntrinsics,
    uncovered=1.0,
    fill_holes=True,
    prior_dilation=0,
):
    """Motion map plus the mask of pixels that received a warped keyframe value."""
    kv = kf.valid
    local = T_rel.act(kf.points[kv])
    vals = np.concatenate([kf.desc[kv], np.asarray(kf_motion)[kv][:, None]], axis=1)
    warped, covered = splat_nearest(intr, local, vals, fill_holes)
    covered &= cur.valid
    sim = np.clip(np.einsum("hwd,hwd->hw", warped[..., :-1], cur.desc), 0.0, 1.0)
    prior = np.where(covered, warped[..., -1], 0.0)
    if prior_dilation > 0:
        prior = maximum_filter(prior, size=2 * prior_dilation + 1, mode="constant", cval=0.0)
    M = np.full(cur.shape, float(uncovered))
    M[covered] = (sim * prior)[covered]
    return M, covered
