"""Keyframe factor graph: point-map fusion, retrieval, loop edges and global
Sim(3) optimization of all keyframe poses over dense match factors."""
from __future__ import annotations

import csv
from collections import deque
from dataclasses import dataclass, field

import numpy as np
import scipy.sparse
import scipy.sparse.linalg

from .errors import DisconnectedGraph, DivergedNaN, ShapeMismatch
from .geom import PinholeIntrinsics, Sim3Pose, oplus, pose_to_tum
from .matching import CorrespondenceSet, coarse_to_fine_match
from .prior.observation import FrameObservation
from .tracking import (
    MIN_DEPTH,
    Q_FLOOR,
    batch_matmul,
    huber_cost_and_weights,
    match_weight,
    projection_jacobian,
    skew_batch,
    weighted_gram,
)

EDGE_KINDS = ("sequential", "retrieval", "loop")
MIN_EDGE_MATCHES = 7
DENSE_LIMIT = 30


@dataclass(eq=False)
class KeyframeNode:
    """A keyframe: pose (world-from-camera), fused local point map with
    per-pixel accumulated weight, the source observation and a pooled descriptor."""

    id: int
    frame_id: int
    pose: Sim3Pose
    points: np.ndarray  # (H, W, 3) fused points in the keyframe camera
    weights: np.ndarray  # (H, W) accumulated fusion weight
    obs: FrameObservation
    global_desc: np.ndarray
    motion: np.ndarray  # (H, W) motion map M of this keyframe

    @property
    def valid(self):
        return self.weights > 0

    def as_observation(self) -> FrameObservation:
        """The observation with the fused points substituted (for matching)."""
        return self.obs.replace(points=self.points, valid=self.valid & self.obs.valid, pose=self.pose)


@dataclass(eq=False)
class GraphEdge:
    """Undirected factor between keyframes ``i`` (pixel side) and ``j`` (point side).

    ``matches`` go from j's pixels (source) to i's pixels (target); ``reverse``
    optionally holds the i -> j matches so both directions enter the energy.
    """

    i: int
    j: int
    matches: CorrespondenceSet
    kind: str = "sequential"
    reverse: CorrespondenceSet | None = None

    def __post_init__(self):
        if self.i == self.j:
            raise ValueError("self-loop edges are not allowed")
        if self.kind not in EDGE_KINDS:
            raise ValueError(f"unknown edge kind {self.kind!r}")

    @property
    def key(self):
        return (min(self.i, self.j), max(self.i, self.j))

    @property
    def match_count(self):
        return len(self.matches)

    def directions(self):
        """(source id, target id, matches) for every stored direction."""
        out = [(self.j, self.i, self.matches)]
        if self.reverse is not None:
            out.append((self.i, self.j, self.reverse))
        return out


def global_descriptor(obs: FrameObservation):
    """Renormalized mean of the valid per-pixel descriptors."""
    d = obs.desc[obs.valid]
    if len(d) == 0:
        return np.zeros(obs.desc_dim)
    g = d.mean(axis=0)
    n = np.linalg.norm(g)
    return g / n if n > 0 else g


def fuse_pointmap(node: KeyframeNode, new_points, new_weights) -> KeyframeNode:
    """Per-pixel weighted average of the node's point map with new points.

    Pixels whose total weight stays zero keep their old values and remain invalid.
    """
    new_points = np.asarray(new_points, float)
    new_weights = np.asarray(new_weights, float)
    if new_points.shape != node.points.shape or new_weights.shape != node.weights.shape:
        raise ShapeMismatch(f"fusion grids {new_points.shape}/{new_weights.shape} vs node {node.points.shape}")
    if np.any(new_weights < 0):
        raise ValueError("fusion weights must be non-negative")
    total = node.weights + new_weights
    upd = new_weights > 0
    pts = node.points.copy()
    num = node.weights[upd, None] * node.points[upd] + new_weights[upd, None] * new_points[upd]
    pts[upd] = num / total[upd, None]
    node.points = pts
    node.weights = total
    return node


@dataclass
class OptimizeResult:
    poses: dict
    trace: list
    iterations: int
    converged: bool
    initial_cost: float
    final_cost: float


@dataclass(eq=False)
class KeyframeGraph:
    """Keyframe nodes and a simple undirected edge set (one edge per pair)."""

    intr: PinholeIntrinsics
    r: int = 4
    s_min: float = 0.5
    max_outside: int | None = 0
    huber_delta: float = 2.0
    depth_weight: float = 10.0
    pixel_mode: str = "pointmap"
    q_floor: float = Q_FLOOR
    nodes: list = field(default_factory=list)
    edges: dict = field(default_factory=dict)
    needs_optimization: bool = False

    def __len__(self):
        return len(self.nodes)

    @property
    def last(self) -> KeyframeNode | None:
        return self.nodes[-1] if self.nodes else None

    def poses(self):
        return {n.id: n.pose for n in self.nodes}

    def edge(self, a, b) -> GraphEdge | None:
        return self.edges.get((min(a, b), max(a, b)))

    def add_edge(self, edge: GraphEdge):
        if edge.key in self.edges:
            raise ValueError(f"edge {edge.key} already exists")
        if not (0 <= edge.i < len(self.nodes) and 0 <= edge.j < len(self.nodes)):
            raise KeyError(f"edge {edge.key} references a missing keyframe")
        self.edges[edge.key] = edge
        self.check_simple()
        return edge

    def check_simple(self):
        for (a, b), e in self.edges.items():
            assert a < b and e.key == (a, b)

    def match(self, src: KeyframeNode, tgt: KeyframeNode, T_src=None, T_tgt=None, r=None):
        return coarse_to_fine_match(
            src.as_observation(),
            tgt.as_observation(),
            src.pose if T_src is None else T_src,
            tgt.pose if T_tgt is None else T_tgt,
            self.intr,
            r=self.r if r is None else r,
            s_min=self.s_min,
            max_outside=self.max_outside,
        )

    def connect(self, a: int, b: int, kind, r=None, T_a=None, T_b=None, known=None):
        """Match both directions between keyframes a < b and add the edge.

        ``known`` maps (source id, target id) to matches already computed with
        the same poses and radius, which are reused.
        """
        na, nb = self.nodes[a], self.nodes[b]
        known = known or {}
        fwd = known[(b, a)] if (b, a) in known else self.match(nb, na, T_b, T_a, r)
        rev = known[(a, b)] if (a, b) in known else self.match(na, nb, T_a, T_b, r)
        return self.add_edge(GraphEdge(a, b, fwd, kind, rev))


def add_keyframe(graph: KeyframeGraph, obs: FrameObservation, pose: Sim3Pose, motion=None, weights=None) -> int:
    """Register a keyframe; links it to the previous keyframe with a sequential edge."""
    kid = len(graph.nodes)
    w = np.where(obs.valid, obs.conf, 0.0) if weights is None else np.asarray(weights, float)
    M = np.ones(obs.shape) if motion is None else np.asarray(motion, float)
    node = KeyframeNode(kid, obs.frame_id, pose, obs.points.copy(), w.astype(float), obs, global_descriptor(obs), M)
    graph.nodes.append(node)
    if kid > 0:
        graph.connect(kid - 1, kid, "sequential")
    return kid


def retrieve_candidates(graph: KeyframeGraph, query_desc, N_c=None, exclude_recent=0):
    """Keyframes older than the ``exclude_recent`` newest, ranked by cosine
    similarity of the pooled descriptor (ties by id)."""
    n_avail = len(graph.nodes) - max(int(exclude_recent), 0)
    if N_c is None:
        N_c = min(23, len(graph.nodes))
    if N_c < 1:
        raise ValueError("N_c must be at least 1")
    if n_avail <= 0:
        return []
    q = np.asarray(query_desc, float)
    qn = np.linalg.norm(q)
    G = np.stack([n.global_desc for n in graph.nodes[:n_avail]])
    gn = np.linalg.norm(G, axis=1)
    sims = G @ q / np.maximum(gn * qn, 1e-300)
    order = np.lexsort((np.arange(n_avail), -sims))
    return [int(k) for k in order[: min(N_c, n_avail)]]


def matching_ratio(matches: CorrespondenceSet, src: KeyframeNode):
    n_src = int(np.sum(src.valid & src.obs.valid))
    return len(matches) / n_src if n_src else 0.0


def close_loop(graph: KeyframeGraph, current_kf: int, candidates, r_loop=16, ratio_min=0.3, K=4, rel_init=None):
    """Wide-radius matching of the current keyframe against each candidate;
    the best K-1 candidates above ``ratio_min`` get loop edges.

    ``rel_init`` optionally maps candidate id -> pose of the current keyframe
    in the candidate's camera, used instead of the graph poses (for example a
    joint prediction of both views by the prior model). Candidates equal to
    the current keyframe or already linked to it are skipped.
    """
    cur = graph.nodes[current_kf]
    scored = []
    for c in candidates:
        c = int(c)
        if c == current_kf or graph.edge(c, current_kf) is not None:
            continue
        cand = graph.nodes[c]
        T_c, T_cur = cand.pose, cur.pose
        if rel_init is not None and c in rel_init:
            T_c, T_cur = Sim3Pose.identity(), rel_init[c]
        m = graph.match(cur, cand, T_cur, T_c, r=r_loop)
        ratio = matching_ratio(m, cur)
        if ratio > ratio_min:
            scored.append((-ratio, c, T_c, T_cur, m))
    scored.sort(key=lambda t: (t[0], t[1]))
    added = []
    for _, c, T_c, T_cur, m in scored[: max(K - 1, 0)]:
        a, b = min(c, current_kf), max(c, current_kf)
        T = {c: T_c, current_kf: T_cur}
        added.append(graph.connect(a, b, "loop", r=r_loop, T_a=T[a], T_b=T[b], known={(current_kf, c): m}))
    if added:
        graph.needs_optimization = True
    return added


# ---------------------------------------------------------------------------
# global energy


@dataclass(eq=False)
class _Factor:
    """One directed match set prepared for evaluation: source points X_s at the
    matched source pixels, target pixel/depth observations and weights."""

    s: int
    t: int
    X: np.ndarray
    pix: np.ndarray
    depth: np.ndarray
    inv_w: np.ndarray
    motion: np.ndarray


def _factors(graph: KeyframeGraph, edges=None):
    out = []
    intr = graph.intr
    for e in graph.edges.values() if edges is None else edges:
        for s, t, m in e.directions():
            if len(m) == 0:
                continue
            ns, nt = graph.nodes[s], graph.nodes[t]
            q, p = m.q, m.p
            ok = ns.valid[q[:, 1], q[:, 0]] & nt.valid[p[:, 1], p[:, 0]]
            q, p = q[ok], p[ok]
            Xt = nt.points[p[:, 1], p[:, 0]]
            if graph.pixel_mode == "pointmap":
                pix = np.stack([intr.fx * Xt[:, 0] / Xt[:, 2] + intr.cx, intr.fy * Xt[:, 1] / Xt[:, 2] + intr.cy], 1)
            else:
                pix = p.astype(float)
            M = nt.motion[p[:, 1], p[:, 0]]
            if int(np.sum(M > 0)) < MIN_EDGE_MATCHES:
                continue
            out.append(
                _Factor(
                    s, t, ns.points[q[:, 1], q[:, 0]], pix, Xt[:, 2],
                    1.0 / match_weight(m.weight[ok], graph.q_floor), M,
                )
            )
    return out


def _factor_eval(f: _Factor, poses, graph: KeyframeGraph, jacobians=True):
    """Residuals (n, 3), motion factors and d r / d tau_source (n, 3, 7).

    d r / d tau_target is the negative of the source Jacobian.
    """
    Ts, Tt = poses[f.s], poses[f.t]
    Z = Ts.act(f.X)
    Tt_inv = Tt.inverse()
    Y = Tt_inv.act(Z)
    ok = Y[:, 2] > MIN_DEPTH
    Y, Z = Y[ok], Z[ok]
    inv_w = f.inv_w[ok]
    z = Y[:, 2]
    intr = graph.intr
    uv = np.stack([intr.fx * Y[:, 0] / z + intr.cx, intr.fy * Y[:, 1] / z + intr.cy], 1)
    lam = graph.depth_weight
    r = np.empty((len(Y), 3))
    r[:, :2] = (f.pix[ok] - uv) * inv_w[:, None]
    r[:, 2] = lam * (np.log(f.depth[ok]) - np.log(z)) * inv_w
    if not jacobians:
        return r, f.motion[ok], None
    Jz = np.zeros((len(Z), 3, 7))
    Jz[:, :, 0:3] = np.eye(3)
    Jz[:, :, 3:6] = -skew_batch(Z)
    Jz[:, :, 6] = Z
    # dY/dtau_s = s R^T Jz, done as one (7n, 3) x (3, 3) product
    Rs = Tt_inv.rotation * Tt_inv.scale
    A = (Jz.transpose(0, 2, 1).reshape(-1, 3) @ Rs.T).reshape(len(Z), 7, 3).transpose(0, 2, 1)
    B = np.empty((len(Y), 3, 7))
    B[:, :2] = batch_matmul(-projection_jacobian(intr, Y) * inv_w[:, None, None], A)
    B[:, 2] = (-lam * inv_w / z)[:, None] * A[:, 2]
    return r, f.motion[ok], B


def _robust(r, motion, delta):
    return huber_cost_and_weights(r, motion, delta)


def global_energy(graph: KeyframeGraph, poses=None, factors=None):
    """Robust collective reprojection (+ log-depth) energy over all edges."""
    poses = graph.poses() if poses is None else poses
    factors = _factors(graph) if factors is None else factors
    total = 0.0
    for f in factors:
        r, M, _ = _factor_eval(f, poses, graph, jacobians=False)
        total += _robust(r, M, graph.huber_delta)[0]
    return total


def _check_connected(n_nodes, factors, fixed):
    adj = {k: set() for k in range(n_nodes)}
    for f in factors:
        adj[f.s].add(f.t)
        adj[f.t].add(f.s)
    seen = {fixed}
    todo = deque([fixed])
    while todo:
        a = todo.popleft()
        for b in sorted(adj[a]):
            if b not in seen:
                seen.add(b)
                todo.append(b)
    missing = sorted(set(range(n_nodes)) - seen)
    if missing:
        raise DisconnectedGraph(f"keyframes {missing} are not connected to anchor {fixed}")


def _normal_equations(factors, poses, graph, slot, n_free):
    """Gauss-Newton system over the free keyframes (7x7 blocks)."""
    cost = 0.0
    diag = {}
    off = {}
    g = np.zeros(7 * n_free)
    for f in factors:
        r, M, B = _factor_eval(f, poses, graph)
        c, (wp, wd) = _robust(r, M, graph.huber_delta)
        cost += c
        Hp, gp = weighted_gram(B[:, :2], r[:, :2], wp)
        Hd, gd = weighted_gram(B[:, 2:3], r[:, 2:3], wd)
        Hb, gb = Hp + Hd, gp + gd
        a, b = slot.get(f.s), slot.get(f.t)
        for k, sign in ((a, 1.0), (b, -1.0)):
            if k is None:
                continue
            diag[k] = diag.get(k, 0.0) + Hb
            g[7 * k : 7 * k + 7] += sign * gb
        if a is not None and b is not None:
            key = (min(a, b), max(a, b))
            off[key] = off.get(key, 0.0) - Hb
    return cost, diag, off, g


def _solve(diag, off, g, lam, n_free):
    N = 7 * n_free
    if n_free < DENSE_LIMIT:
        H = np.zeros((N, N))
        for k, blk in diag.items():
            H[7 * k : 7 * k + 7, 7 * k : 7 * k + 7] += blk
        for (a, b), blk in off.items():
            H[7 * a : 7 * a + 7, 7 * b : 7 * b + 7] += blk
            H[7 * b : 7 * b + 7, 7 * a : 7 * a + 7] += blk.T
        H[np.diag_indices(N)] += lam
        try:
            return np.linalg.solve(H, -g)
        except np.linalg.LinAlgError:
            return np.linalg.lstsq(H, -g, rcond=None)[0]
    rows, cols, vals = [], [], []
    ii, jj = np.meshgrid(np.arange(7), np.arange(7), indexing="ij")
    for k, blk in diag.items():
        rows.append(7 * k + ii.ravel())
        cols.append(7 * k + jj.ravel())
        vals.append((blk + lam * np.eye(7)).ravel())
    for (a, b), blk in off.items():
        rows += [7 * a + ii.ravel(), 7 * b + ii.ravel()]
        cols += [7 * b + jj.ravel(), 7 * a + jj.ravel()]
        vals += [blk.ravel(), blk.T.ravel()]
    H = scipy.sparse.csc_matrix(
        (np.concatenate(vals), (np.concatenate(rows), np.concatenate(cols))), shape=(N, N)
    )
    return scipy.sparse.linalg.spsolve(H, -g)


def optimize_global(graph: KeyframeGraph, fixed=0, max_iters=20, tol=1e-10, lambda0=1e-4, lambda_max=1e12,
                    update=True) -> OptimizeResult:
    """Levenberg-Marquardt over all keyframe poses except ``fixed`` (gauge anchor).

    Poses are updated on the left, T_i <- exp(delta_i) T_i. The trace records
    the energy after every accepted step, so it is non-increasing.
    """
    n = len(graph.nodes)
    poses = graph.poses()
    if n <= 1:
        c = global_energy(graph, poses)
        return OptimizeResult(poses, [c], 0, True, c, c)
    factors = _factors(graph)
    _check_connected(n, factors, fixed)
    free = [k for k in range(n) if k != fixed]
    slot = {k: s for s, k in enumerate(free)}
    cost, diag, off, g = _normal_equations(factors, poses, graph, slot, len(free))
    initial = cost
    trace = [cost]
    lam = lambda0
    step = np.inf
    it = 0
    for it in range(1, max_iters + 1):
        if not np.all(np.isfinite(g)):
            raise DivergedNaN("non-finite gradient in global optimization")
        while True:
            delta = _solve(diag, off, g, lam, len(free))
            if not np.all(np.isfinite(delta)):
                raise DivergedNaN("non-finite update in global optimization")
            step = float(np.linalg.norm(delta))
            trial = dict(poses)
            for k in free:
                trial[k] = oplus(delta[7 * slot[k] : 7 * slot[k] + 7], poses[k])
            new_cost = global_energy(graph, trial, factors)
            if np.isfinite(new_cost) and new_cost <= cost:
                poses = trial
                lam = max(lam / 3.0, 1e-12)
                cost, diag, off, g = _normal_equations(factors, poses, graph, slot, len(free))
                trace.append(cost)
                break
            lam *= 10.0
            if lam > lambda_max or step < tol:
                break
        if step < tol or lam > lambda_max:
            break
    if update:
        for k, T in poses.items():
            graph.nodes[k].pose = T
        graph.needs_optimization = False
    return OptimizeResult(poses, trace, it, bool(step < tol), initial, cost)


# ---------------------------------------------------------------------------
# export


def write_keyframes(graph: KeyframeGraph, path):
    """Node list: ``id,frame_id,scale,tum`` with the pose as a TUM line."""
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["id", "frame_id", "scale", "tum"])
        for node in graph.nodes:
            w.writerow([node.id, node.frame_id, repr(float(node.pose.scale)), pose_to_tum(node.frame_id, node.pose)])


def write_edges(graph: KeyframeGraph, path):
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["i", "j", "kind", "match_count"])
        for key in sorted(graph.edges):
            e = graph.edges[key]
            w.writerow([e.i, e.j, e.kind, e.match_count])
