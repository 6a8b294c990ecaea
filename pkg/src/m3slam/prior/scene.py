"""Synthetic-scene oracle standing in for the multi-view prior network.

A scene is a cloud of coloured, descriptor-carrying 3D points (static ones
plus an optional rigidly moving object) and a ground-truth camera path.
Rendering z-buffers the points into the pixel grid; each valid pixel carries
the exact local coordinates of the point it sees, perturbed by the noise
model.

Noise is split in two levels so that any batch composition can be
reproduced from per-frame data (this is what makes on-disk dumps and the
in-process oracle interchangeable):

* frame level, keyed by ``(seed, frame_id)``: point, descriptor and pose noise;
* batch level, keyed by ``(seed, frame_ids)``: the batch gauge (first frame at
  the origin), a global scale jitter and a focal jitter of the lateral
  point-map coordinates.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field, replace

import numpy as np
from scipy.spatial import cKDTree

from ..errors import BatchTooLarge, EmptyBatch
from ..geom import PinholeIntrinsics, Sim3Pose, project_points, sim3_exp, so3_exp
from .observation import MAX_BATCH, FrameObservation, InferenceBatch

DESC_DIM = 24


@dataclass(frozen=True)
class NoiseModel:
    point_sigma: float = 0.0  # scene units, per coordinate
    desc_sigma: float = 0.0
    pose_sigma: float = 0.0  # per tangent component
    scale_jitter: float = 0.0  # std of the per-batch log-scale
    focal_jitter: float = 0.0  # std of the per-batch log lateral stretch


@dataclass(eq=False)
class SyntheticScene:
    static_points: np.ndarray
    static_desc: np.ndarray
    static_colors: np.ndarray
    trajectory: list[Sim3Pose]
    intrinsics: PinholeIntrinsics
    noise: NoiseModel = field(default_factory=NoiseModel)
    dynamic_points: np.ndarray | None = None  # object-local coordinates
    dynamic_desc: np.ndarray | None = None
    dynamic_colors: np.ndarray | None = None
    dynamic_motion: list[Sim3Pose] | None = None  # object-to-world per frame
    seed: int = 0
    name: str = "custom"
    near: float = 0.05

    def __post_init__(self):
        lo, hi = self.static_points.min(0), self.static_points.max(0)
        self.diameter = float(np.linalg.norm(hi - lo))

    @property
    def n_frames(self):
        return len(self.trajectory)

    @property
    def has_dynamic(self):
        return self.dynamic_points is not None and len(self.dynamic_points) > 0

    def points_at(self, frame_id):
        """World positions, descriptors, colours and dynamic flags of all points at a frame."""
        if not self.has_dynamic:
            n = len(self.static_points)
            return self.static_points, self.static_desc, self.static_colors, np.zeros(n, bool)
        obj = self.dynamic_motion[frame_id]
        pts = np.concatenate([self.static_points, obj.act(self.dynamic_points)])
        desc = np.concatenate([self.static_desc, self.dynamic_desc])
        col = np.concatenate([self.static_colors, self.dynamic_colors])
        dyn = np.zeros(len(pts), bool)
        dyn[len(self.static_points):] = True
        return pts, desc, col, dyn

    def with_noise(self, noise: NoiseModel) -> "SyntheticScene":
        return replace(self, noise=noise)

    def with_seed(self, seed: int) -> "SyntheticScene":
        return replace(self, seed=seed)


# ---------------------------------------------------------------------------
# descriptor and colour fields


def repel_unit_vectors(V, max_cos=0.5, margin=0.05, iters=200):
    """Push apart unit vectors until every pairwise cosine is below ``max_cos``."""
    V = V / np.linalg.norm(V, axis=1, keepdims=True)
    target = max_cos - margin
    for _ in range(iters):
        G = V @ V.T
        np.fill_diagonal(G, -1.0)
        if G.max() < max_cos:
            break
        excess = np.clip(G - target, 0.0, None)
        V = V - 0.5 * excess @ V
        V /= np.linalg.norm(V, axis=1, keepdims=True)
    return V


def unit_seeds(rng, n, dim, dims: slice, separated=False):
    out = np.zeros((n, dim))
    k = len(range(*dims.indices(dim)))
    seeds = rng.normal(size=(n, k))
    seeds /= np.linalg.norm(seeds, axis=1, keepdims=True)
    if separated:
        seeds = repel_unit_vectors(seeds)
    out[:, dims] = seeds
    return out


def lattice_field(points, rng, dim, length, dims: slice):
    """Unit vectors from a spatially low-pass filtered lattice of random seeds.

    Seeds sit on a grid of spacing length/2 and are blended with a Gaussian
    of std spacing/2 over the 27 nearest nodes, so similarity decays to about
    0.5 at a separation of ``length``.
    """
    h = length / 2.0
    k = len(range(*dims.indices(dim)))
    rel = (points - points.min(0)) / h + 1.0
    base = np.rint(rel).astype(np.int64)
    offsets = np.array([(a, b, c) for a in (-1, 0, 1) for b in (-1, 0, 1) for c in (-1, 0, 1)])
    span = base.max(0) + 2
    keys = ((base[:, None, :] + offsets[None]) * [span[1] * span[2], span[2], 1]).sum(-1)
    nodes, inverse = np.unique(keys, return_inverse=True)
    inverse = inverse.reshape(keys.shape)
    seeds = rng.normal(size=(len(nodes), k))
    seeds /= np.linalg.norm(seeds, axis=-1, keepdims=True)
    acc = np.zeros((len(points), k))
    for j, off in enumerate(offsets):
        d2 = ((rel - (base + off)) ** 2).sum(1)
        w = np.exp(-d2 / (2 * 0.5**2))
        acc += w[:, None] * seeds[inverse[:, j]]
    acc /= np.linalg.norm(acc, axis=1, keepdims=True)
    out = np.zeros((len(points), dim))
    out[:, dims] = acc
    return out


def descriptor_field(points, rng, length, dim=DESC_DIM, dims=slice(None)):
    """Unit descriptors for a point set; ``length <= 0`` gives independent, separated seeds."""
    if length <= 0:
        return unit_seeds(rng, len(points), dim, dims, separated=len(points) <= 4000)
    return lattice_field(points, rng, dim, length, dims)


def descriptor_separation(points, desc, length, quantile=1.0, max_pairs=200_000, rng=None):
    """Cosine between descriptors of points farther apart than ``length``.

    Returns the maximum (``quantile=1``) or the given quantile, exactly over all
    pairs for small sets and over a random pair sample otherwise.
    """
    n = len(points)
    if n <= 4000:
        G = desc @ desc.T
        D2 = ((points[:, None, :] - points[None, :, :]) ** 2).sum(-1)
        vals = G[D2 > length * length]
    else:
        rng = rng or np.random.default_rng(0)
        i = rng.integers(0, n, max_pairs)
        j = rng.integers(0, n, max_pairs)
        far = np.linalg.norm(points[i] - points[j], axis=1) > length
        vals = (desc[i[far]] * desc[j[far]]).sum(1)
    if len(vals) == 0:
        return -1.0
    return float(np.quantile(vals, quantile))


def color_field(points, rng, base=None, wavelengths=(2.5, 0.9)):
    base = np.full(3, 0.5) if base is None else np.asarray(base, float)
    col = np.tile(base, (len(points), 1))
    amp = [0.22, 0.12]
    for lam, a in zip(wavelengths, amp):
        for c in range(3):
            direction = rng.normal(size=3)
            direction /= np.linalg.norm(direction)
            col[:, c] += a * np.sin(points @ direction * (2 * math.pi / lam) + rng.uniform(0, 2 * math.pi))
    return np.clip(col, 0.0, 1.0)


# ---------------------------------------------------------------------------
# rendering


def _frame_rng(scene, frame_id):
    return np.random.default_rng([scene.seed, 0, int(frame_id)])


def _batch_rng(seed, frame_ids):
    return np.random.default_rng([int(seed), 1, *[int(i) for i in frame_ids]])


def zbuffer(intr: PinholeIntrinsics, local, near=0.05):
    """Index of the nearest point per pixel (-1 where empty) and its flat pixel index."""
    H, W = intr.height, intr.width
    uv, ok = project_points(intr, local, min_depth=near)
    ui = np.rint(uv[:, 0]).astype(np.int64)
    vi = np.rint(uv[:, 1]).astype(np.int64)
    ok &= (ui >= 0) & (ui < W) & (vi >= 0) & (vi < H)
    idx = np.nonzero(ok)[0]
    pix = vi[idx] * W + ui[idx]
    order = np.lexsort((local[idx, 2], pix))
    pix_sorted = pix[order]
    first = np.ones(len(order), bool)
    first[1:] = pix_sorted[1:] != pix_sorted[:-1]
    owner = np.full(H * W, -1, dtype=np.int64)
    owner[pix_sorted[first]] = idx[order[first]]
    return owner.reshape(H, W)


def render_clean(scene: SyntheticScene, frame_id):
    """Noise-free per-pixel local points, descriptors, colours and dynamic flags."""
    intr = scene.intrinsics
    H, W = intr.height, intr.width
    T = scene.trajectory[frame_id]
    pts, desc, col, dyn = scene.points_at(frame_id)
    local = T.inverse().act(pts)
    owner = zbuffer(intr, local, scene.near)
    valid = owner >= 0
    o = owner[valid]
    X = np.zeros((H, W, 3))
    X[valid] = local[o]
    D = np.zeros((H, W, desc.shape[1]))
    D[valid] = desc[o]
    img = np.zeros((H, W, 3))
    img[valid] = col[o]
    dmask = np.zeros((H, W), bool)
    dmask[valid] = dyn[o]
    return X, D, img, dmask, valid


def render_frame(scene: SyntheticScene, frame_id) -> FrameObservation:
    """Frame-level oracle output in world gauge (before batch effects)."""
    if not 0 <= frame_id < scene.n_frames:
        raise IndexError(f"frame {frame_id} outside trajectory of length {scene.n_frames}")
    nz = scene.noise
    rng = _frame_rng(scene, frame_id)
    X_true, D, img, dmask, valid = render_clean(scene, frame_id)
    H, W = valid.shape
    X = X_true + rng.normal(0.0, nz.point_sigma, size=X_true.shape) if nz.point_sigma > 0 else X_true.copy()
    valid = valid & (X[..., 2] > 1e-6)
    if nz.desc_sigma > 0:
        D = D + rng.normal(0.0, nz.desc_sigma, size=D.shape)
        n = np.linalg.norm(D, axis=-1, keepdims=True)
        D = np.where(n > 0, D / np.where(n > 0, n, 1.0), 0.0)
    X[~valid] = 0.0
    D[~valid] = 0.0
    tau = np.zeros(7)
    if nz.pose_sigma > 0:
        tau[:6] = rng.normal(0.0, nz.pose_sigma, size=6)
    T = scene.trajectory[frame_id]
    pose = T @ sim3_exp(tau)
    conf = np.where(valid, 1.0 / (1.0 + nz.point_sigma), 0.0)
    q = valid.astype(float)
    gt_pts = np.where(valid[..., None], X_true, 0.0)
    return FrameObservation(
        frame_id=int(frame_id),
        points=X,
        pose=pose,
        conf=conf,
        desc=D,
        match_conf=q,
        valid=valid,
        image=img,
        gt_pose=T,
        gt_points=gt_pts,
        gt_dynamic=dmask & valid,
    )


def apply_batch_effects(frames: list[FrameObservation], noise: NoiseModel, seed) -> InferenceBatch:
    """Move frame-level observations into one inference's gauge and units."""
    if len(frames) == 0:
        raise EmptyBatch("no frames requested")
    if len(frames) > MAX_BATCH:
        raise BatchTooLarge(f"{len(frames)} frames exceed the {MAX_BATCH}-frame limit")
    rng = _batch_rng(seed, [f.frame_id for f in frames])
    c = math.exp(rng.normal(0.0, noise.scale_jitter)) if noise.scale_jitter > 0 else 1.0
    k = math.exp(rng.normal(0.0, noise.focal_jitter)) if noise.focal_jitter > 0 else 1.0
    C = Sim3Pose(c, np.eye(3), np.zeros(3))
    gauge = C @ frames[0].pose.inverse()
    Cinv = C.inverse()
    out = []
    for f in frames:
        X = f.points * c
        X[..., :2] *= k
        out.append(f.replace(points=X, pose=gauge @ f.pose @ Cinv))
    return InferenceBatch(out, metric_scale=1.0 / c, meta={"scale": c, "focal_stretch": k})


def oracle_render(scene: SyntheticScene, frame_ids) -> InferenceBatch:
    frame_ids = list(frame_ids)
    if not frame_ids:
        raise EmptyBatch("no frames requested")
    if len(frame_ids) > MAX_BATCH:
        raise BatchTooLarge(f"{len(frame_ids)} frames exceed the {MAX_BATCH}-frame limit")
    frames = [render_frame(scene, i) for i in frame_ids]
    return apply_batch_effects(frames, scene.noise, scene.seed)


def round_float32(o: FrameObservation) -> FrameObservation:
    """Round a frame's array outputs to float32 precision, as a network would emit them.

    Poses stay float64 (the dump format stores them that way).
    """

    def r(a):
        return None if a is None else a.astype(np.float32).astype(np.float64)

    return o.replace(points=r(o.points), conf=r(o.conf), desc=r(o.desc), match_conf=r(o.match_conf),
                     image=r(o.image), gt_points=r(o.gt_points))


class OracleProvider:
    """Caches frame-level renders; batches are assembled on demand.

    With ``float32`` every frame is rounded to float32 before batch effects, so
    batches equal those served from dumps of the same scene.
    """

    kind = "oracle"

    def __init__(self, scene: SyntheticScene, float32=False):
        self.scene = scene
        self.float32 = float32
        self._cache: dict[int, FrameObservation] = {}

    @property
    def n_frames(self):
        return self.scene.n_frames

    @property
    def seed(self):
        return self.scene.seed

    @property
    def noise(self):
        return self.scene.noise

    def frame(self, frame_id) -> FrameObservation:
        if frame_id not in self._cache:
            o = render_frame(self.scene, frame_id)
            self._cache[frame_id] = round_float32(o) if self.float32 else o
        return self._cache[frame_id]

    def batch(self, frame_ids) -> InferenceBatch:
        frame_ids = list(frame_ids)
        if len(frame_ids) > MAX_BATCH:
            raise BatchTooLarge(f"{len(frame_ids)} frames exceed the {MAX_BATCH}-frame limit")
        return apply_batch_effects([self.frame(i) for i in frame_ids], self.noise, self.seed)

    def gt_poses(self):
        return list(self.scene.trajectory)


# ---------------------------------------------------------------------------
# scene construction


def jittered_plane(rng, origin, axis_a, axis_b, len_a, len_b, spacing):
    na = max(int(len_a / spacing), 1)
    nb = max(int(len_b / spacing), 1)
    ia, ib = np.meshgrid(np.arange(na), np.arange(nb), indexing="ij")
    ja = (ia.ravel() + 0.5 + rng.uniform(-0.4, 0.4, ia.size)) * (len_a / na)
    jb = (ib.ravel() + 0.5 + rng.uniform(-0.4, 0.4, ib.size)) * (len_b / nb)
    return np.asarray(origin) + ja[:, None] * np.asarray(axis_a) + jb[:, None] * np.asarray(axis_b)


def room_points(rng, half=5.0, y_top=-1.5, y_bottom=1.5, wall_spacing=0.03, floor_spacing=0.04):
    """Axis-aligned box room (y points down): four walls, floor and ceiling."""
    hgt = y_bottom - y_top
    ex, ez, ey = np.eye(3)[0], np.eye(3)[2], np.eye(3)[1]
    parts = [
        jittered_plane(rng, [-half, y_top, half], ex, ey, 2 * half, hgt, wall_spacing),
        jittered_plane(rng, [-half, y_top, -half], ex, ey, 2 * half, hgt, wall_spacing),
        jittered_plane(rng, [half, y_top, -half], ez, ey, 2 * half, hgt, wall_spacing),
        jittered_plane(rng, [-half, y_top, -half], ez, ey, 2 * half, hgt, wall_spacing),
        jittered_plane(rng, [-half, y_bottom, -half], ex, ez, 2 * half, 2 * half, floor_spacing),
        jittered_plane(rng, [-half, y_top, -half], ex, ez, 2 * half, 2 * half, floor_spacing),
    ]
    return np.concatenate(parts)


def look_rotation(forward, down=(0.0, 1.0, 0.0)):
    """Camera-to-world rotation with optical axis ``forward`` and image y close to ``down``."""
    z = np.asarray(forward, float)
    z /= np.linalg.norm(z)
    x = np.cross(np.asarray(down, float), z)
    x /= np.linalg.norm(x)
    y = np.cross(z, x)
    return np.stack([x, y, z], axis=1)


def loop_trajectory(n_frames, step_deg=3.0, radius=2.5):
    poses = []
    for i in range(n_frames):
        phi = math.radians(step_deg * i)
        r = radius + 0.3 * math.sin(0.05 * i)
        c = np.array([r * math.cos(phi), 0.2 * math.sin(0.07 * i), r * math.sin(phi)])
        yaw = phi + math.radians(6.0) * math.sin(0.04 * i)
        pitch = math.radians(4.0) * math.sin(0.09 * i)
        fwd = np.array([math.cos(yaw) * math.cos(pitch), math.sin(pitch), math.sin(yaw) * math.cos(pitch)])
        poses.append(Sim3Pose(1.0, look_rotation(fwd), c))
    return poses


def corridor_trajectory(n_frames, step=0.08):
    poses = []
    for i in range(n_frames):
        c = np.array([0.25 * math.sin(0.05 * i), 0.1 * math.sin(0.08 * i), -4.0 + step * i])
        yaw = math.radians(8.0) * math.sin(0.03 * i)
        fwd = np.array([math.sin(yaw), 0.0, math.cos(yaw)])
        poses.append(Sim3Pose(1.0, look_rotation(fwd), c))
    return poses


def sweep_trajectory(n_frames, target=(0.0, 0.2, 1.0)):
    poses = []
    for i in range(n_frames):
        s = i / max(n_frames - 1, 1)
        c = np.array([-1.2 + 2.4 * s, 0.1 * math.sin(0.2 * i), -2.0 + 0.3 * math.sin(0.1 * i)])
        fwd = np.asarray(target) + np.array([0.3 * math.sin(0.15 * i), 0.0, 3.0]) - c
        poses.append(Sim3Pose(1.0, look_rotation(fwd), c))
    return poses


def cylinder_points(rng, radius, y0, y1, spacing):
    circ = 2 * math.pi * radius
    pts = jittered_plane(rng, [0, y0, 0], [1, 0, 0], [0, 1, 0], circ, y1 - y0, spacing)
    ang = pts[:, 0] / radius
    return np.stack([radius * np.cos(ang), pts[:, 1], radius * np.sin(ang)], axis=1)


def default_intrinsics(width=48, height=36, f=40.0):
    return PinholeIntrinsics.centered(f, width, height)


def noise_for(diameter, level):
    if level == "clean":
        return NoiseModel()
    if level == "default":
        return NoiseModel(
            point_sigma=0.005 * diameter, desc_sigma=0.0, pose_sigma=0.01, scale_jitter=0.05, focal_jitter=0.02
        )
    raise ValueError(f"unknown noise level {level!r}")


def make_scene(
    preset="loop",
    n_frames=200,
    seed=0,
    noise="default",
    corr_length_px=16.0,
    width=48,
    height=36,
    f=40.0,
    spin_step=None,
    object_radius=0.45,
    orthogonal_dynamic=False,
) -> SyntheticScene:
    """Build one of the named synthetic scenes (``loop``, ``corridor``, ``dynamic``, ``sparse``).

    ``corr_length_px`` sets the descriptor correlation length in pixels at the
    preset's typical depth. ``orthogonal_dynamic`` puts the moving object's
    descriptors in a subspace orthogonal to the background's.
    """
    rng = np.random.default_rng([seed, 7])
    intr = default_intrinsics(width, height, f)
    if preset == "sparse":
        return sparse_scene(seed=seed, n_frames=n_frames, noise=noise)
    dyn = None
    if preset == "loop":
        traj = loop_trajectory(n_frames)
        pts = room_points(rng)
        depth = 3.5
    elif preset == "corridor":
        traj = corridor_trajectory(n_frames)
        hw = 1.2
        ex, ey, ez = np.eye(3)
        length = 4.0 + 0.08 * n_frames + 8.0
        pts = np.concatenate(
            [
                jittered_plane(rng, [-hw, -1.3, -6.0], ez, ey, length, 2.6, 0.025),
                jittered_plane(rng, [hw, -1.3, -6.0], ez, ey, length, 2.6, 0.025),
                jittered_plane(rng, [-hw, 1.3, -6.0], ex, ez, 2 * hw, length, 0.03),
                jittered_plane(rng, [-hw, -1.3, -6.0], ex, ez, 2 * hw, length, 0.03),
                jittered_plane(rng, [-hw, -1.3, -6.0 + length], ex, ey, 2 * hw, 2.6, 0.03),
            ]
        )
        depth = 3.0
    elif preset == "dynamic":
        traj = sweep_trajectory(n_frames)
        pts = room_points(rng, half=4.0, wall_spacing=0.035, floor_spacing=0.045)
        depth = 7.0
        radius = object_radius
        center = np.array([0.0, 0.2, 1.0])
        dyn_local = cylinder_points(rng, radius, -0.9, 1.1, 0.02)
        # surface arc travelled per frame, in units of the object's descriptor length
        dyn_len = 0.12
        step = spin_step if spin_step is not None else 1.6 * dyn_len / radius
        motion = [Sim3Pose(1.0, so3_exp([0.0, step * i, 0.0]), center) for i in range(n_frames)]
        dyn = (dyn_local, dyn_len, motion)
    else:
        raise ValueError(f"unknown preset {preset!r}")

    length = corr_length_px * depth / f
    split = dyn is not None and orthogonal_dynamic
    desc = descriptor_field(pts, rng, length, dims=slice(0, 12) if split else slice(None))
    colors = color_field(pts, rng)
    lo, hi = pts.min(0), pts.max(0)
    scene = SyntheticScene(
        static_points=pts,
        static_desc=desc,
        static_colors=colors,
        trajectory=traj,
        intrinsics=intr,
        seed=seed,
        name=preset,
    )
    if dyn is not None:
        dyn_local, dyn_len, motion = dyn
        scene.dynamic_points = dyn_local
        scene.dynamic_desc = descriptor_field(dyn_local, rng, dyn_len, dims=slice(12, 24) if split else slice(None))
        scene.dynamic_colors = color_field(dyn_local, rng, base=[0.75, 0.3, 0.25], wavelengths=(0.5, 0.2))
        scene.dynamic_motion = motion
    scene.diameter = float(np.linalg.norm(hi - lo))
    scene.noise = noise_for(scene.diameter, noise) if isinstance(noise, str) else noise
    scene.corr_length = length
    return scene


def sparse_scene(seed=0, n_points=1000, n_frames=2, size=64, f=60.0, noise="clean", baseline=0.15, min_sep=0.2):
    """Sparse, well-separated random points in front of a short camera path.

    Descriptors are independent per point and pairwise separated (cosine < 0.5),
    so every point is its own unique descriptor.
    """
    rng = np.random.default_rng([seed, 11])
    pts = []
    tree_pts = np.empty((0, 3))
    while len(tree_pts) < n_points:
        cand = rng.uniform([-2.2, -2.2, 4.0], [2.2, 2.2, 7.0], size=(4 * n_points, 3))
        for p in cand:
            if len(pts) and np.min(np.sum((np.asarray(pts[-200:]) - p) ** 2, 1)) < min_sep**2:
                continue
            pts.append(p)
            if len(pts) >= n_points:
                break
        tree_pts = np.asarray(pts)
        # enforce the separation globally (the greedy pass only checks recent points)
        tree = cKDTree(tree_pts)
        bad = set()
        for i, j in tree.query_pairs(min_sep):
            bad.add(max(i, j))
        keep = [i for i in range(len(tree_pts)) if i not in bad]
        tree_pts = tree_pts[keep]
        pts = list(tree_pts)
    pts = tree_pts[:n_points]
    desc = descriptor_field(pts, rng, 0.0)
    colors = color_field(pts, rng)
    intr = PinholeIntrinsics.centered(f, size, size)
    traj = []
    for i in range(n_frames):
        theta = np.array([0.01, -0.04, 0.005]) * i
        t = np.array([baseline, 0.02, 0.03]) * i
        traj.append(Sim3Pose(1.0, so3_exp(theta), t))
    scene = SyntheticScene(pts, desc, colors, traj, intr, seed=seed, name="sparse")
    scene.noise = noise_for(scene.diameter, noise) if isinstance(noise, str) else noise
    scene.corr_length = min_sep
    return scene
