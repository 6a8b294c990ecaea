"""Robust Sim(3) tracking of a frame against a keyframe from dense matches."""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import DivergedNaN, InsufficientMatches, PointBehindCamera
from .geom import PinholeIntrinsics, Sim3Pose, oplus
from .matching import CorrespondenceSet
from .prior.observation import FrameObservation

Q_FLOOR = 0.05
MIN_DEPTH = 1e-6


def match_weight(q, q_floor=Q_FLOOR):
    """Per-match weighting w(q) = 1 / max(q, q_floor); residuals are divided by it."""
    return 1.0 / np.maximum(q, q_floor)


@dataclass(eq=False)
class TrackingProblem:
    """Matches from frame f (source) to keyframe k (target).

    ``target_points`` holds X_f at the matched source pixels, ``target_pixels``
    the keyframe pixel coordinates p_k. ``target_depths`` (optional) adds a
    log-depth residual against the keyframe's own point map, which is what
    makes the Sim(3) scale observable: a left scale perturbation leaves every
    projection unchanged.
    """

    matches: CorrespondenceSet | None
    target_points: np.ndarray  # (n, 3)
    target_pixels: np.ndarray  # (n, 2)
    q: np.ndarray  # (n,) match confidences q_{m,n}
    motion: np.ndarray  # (n,) M_k at the target pixels
    intr: PinholeIntrinsics
    init: Sim3Pose = field(default_factory=Sim3Pose.identity)
    target_depths: np.ndarray | None = None
    depth_weight: float = 10.0
    huber_delta: float = 2.0
    max_iters: int = 50
    tol: float = 1e-10
    freeze_scale: bool = False
    q_floor: float = Q_FLOOR

    def __post_init__(self):
        if self.huber_delta <= 0:
            raise ValueError("huber_delta must be positive")
        self.target_points = np.asarray(self.target_points, float).reshape(-1, 3)
        self.target_pixels = np.asarray(self.target_pixels, float).reshape(-1, 2)
        n = len(self.target_points)
        self.q = np.broadcast_to(np.asarray(self.q, float), (n,)).copy()
        self.motion = np.broadcast_to(np.asarray(self.motion, float), (n,)).copy()

    def __len__(self):
        return len(self.target_points)


@dataclass
class TrackingResult:
    pose: Sim3Pose
    final_cost: float
    initial_cost: float
    iterations: int
    inlier_fraction: float
    converged: bool
    trace: list = field(default_factory=list)


def build_problem(
    matches: CorrespondenceSet,
    src: FrameObservation,
    tgt: FrameObservation,
    intr: PinholeIntrinsics,
    init: Sim3Pose,
    motion=None,
    pixel_mode="pixel",
    use_depth=True,
    **kw,
) -> TrackingProblem:
    """Tracking problem from c2f matches between ``src`` (frame f) and ``tgt`` (keyframe k).

    ``pixel_mode="pixel"`` uses the matched pixel centres as targets,
    ``"pointmap"`` the projection of the keyframe's point at that pixel.
    """
    q, p = matches.q, matches.p
    X = src.points[q[:, 1], q[:, 0]]
    Xk = tgt.points[p[:, 1], p[:, 0]]
    if pixel_mode == "pixel":
        pix = p.astype(float)
    elif pixel_mode == "pointmap":
        pix = np.stack([intr.fx * Xk[:, 0] / Xk[:, 2] + intr.cx, intr.fy * Xk[:, 1] / Xk[:, 2] + intr.cy], 1)
    else:
        raise ValueError(f"unknown pixel_mode {pixel_mode!r}")
    M = np.ones(len(q)) if motion is None else np.asarray(motion)[p[:, 1], p[:, 0]]
    return TrackingProblem(
        matches, X, pix, matches.weight, M, intr, init, target_depths=Xk[:, 2] if use_depth else None, **kw
    )


# ---------------------------------------------------------------------------
# residuals and Jacobians


def _project(intr, Y):
    z = Y[:, 2]
    return np.stack([intr.fx * Y[:, 0] / z + intr.cx, intr.fy * Y[:, 1] / z + intr.cy], axis=1)


def residual(T_kf: Sim3Pose, point, pixel, q, intr: PinholeIntrinsics, q_floor=Q_FLOOR):
    """Weighted reprojection residual (p - phi(T X)) / w(q) of a single match."""
    Y = T_kf.act(np.asarray(point, float).reshape(1, 3))
    if Y[0, 2] <= 0:
        raise PointBehindCamera(f"transformed depth {Y[0, 2]:.3g} is not positive")
    return ((np.asarray(pixel, float) - _project(intr, Y)[0]) / match_weight(q, q_floor)).reshape(2)


def point_jacobian(Y):
    """d(exp(tau) Y)/d tau at tau = 0, shape (n, 3, 7), tangent order (rho, theta, sigma)."""
    n = len(Y)
    J = np.zeros((n, 3, 7))
    J[:, :, 0:3] = np.eye(3)
    J[:, :, 3:6] = -skew_batch(Y)
    J[:, :, 6] = Y
    return J


def skew_batch(v):
    out = np.zeros(v.shape[:-1] + (3, 3))
    out[..., 0, 1], out[..., 0, 2] = -v[..., 2], v[..., 1]
    out[..., 1, 0], out[..., 1, 2] = v[..., 2], -v[..., 0]
    out[..., 2, 0], out[..., 2, 1] = -v[..., 1], v[..., 0]
    return out


def projection_jacobian(intr, Y):
    x, y, z = Y[:, 0], Y[:, 1], Y[:, 2]
    Jp = np.zeros((len(Y), 2, 3))
    Jp[:, 0, 0] = intr.fx / z
    Jp[:, 0, 2] = -intr.fx * x / z**2
    Jp[:, 1, 1] = intr.fy / z
    Jp[:, 1, 2] = -intr.fy * y / z**2
    return Jp


def residuals_and_jacobians(T: Sim3Pose, prob: TrackingProblem, active=None):
    """Stacked residual blocks and left-tangent Jacobians for all usable matches.

    Returns (r, J, idx): r is (n, k), J is (n, k, 7) with k = 2 or 3 (pixel plus
    optional log-depth row), idx the indices of matches in front of the camera.
    """
    Y = T.act(prob.target_points)
    ok = Y[:, 2] > MIN_DEPTH
    if active is not None:
        ok &= active
    idx = np.nonzero(ok)[0]
    Y = Y[idx]
    inv_w = 1.0 / match_weight(prob.q[idx], prob.q_floor)
    r_pix = (prob.target_pixels[idx] - _project(prob.intr, Y)) * inv_w[:, None]
    Jy = point_jacobian(Y)
    J_pix = -batch_matmul(projection_jacobian(prob.intr, Y), Jy) * inv_w[:, None, None]
    if prob.target_depths is None:
        return r_pix, J_pix, idx
    lam = prob.depth_weight
    r_d = lam * (np.log(prob.target_depths[idx]) - np.log(Y[:, 2])) * inv_w
    J_d = -lam * Jy[:, 2, :] / Y[:, 2:3] * inv_w[:, None]
    r = np.concatenate([r_pix, r_d[:, None]], axis=1)
    J = np.concatenate([J_pix, J_d[:, None, :]], axis=1)
    return r, J, idx


def huber_cost_and_weights(r, motion, delta):
    """Robust cost sum(M * rho(|r|)) and IRLS weights M * rho'(e)/e per match.

    The pixel and depth parts of each block are robustified separately.
    """
    e_pix = np.linalg.norm(r[:, :2], axis=1)
    parts = [e_pix]
    if r.shape[1] == 3:
        parts.append(np.abs(r[:, 2]))
    cost = 0.0
    weights = []
    for e in parts:
        quad = e <= delta
        rho = np.where(quad, 0.5 * e**2, delta * (e - 0.5 * delta))
        cost += float(np.sum(motion * rho))
        weights.append(motion * np.where(quad, 1.0, delta / np.maximum(e, 1e-300)))
    return cost, weights


def problem_cost(T: Sim3Pose, prob: TrackingProblem):
    r, _, idx = residuals_and_jacobians(T, prob)
    return huber_cost_and_weights(r, prob.motion[idx], prob.huber_delta)[0]


def batch_matmul(P, A):
    """Per-row products P[n] @ A[n] for small (n, a, b) x (n, b, c) stacks."""
    out = P[:, :, 0, None] * A[:, None, 0, :]
    for j in range(1, P.shape[2]):
        out = out + P[:, :, j, None] * A[:, None, j, :]
    return out


def weighted_gram(J, r, w):
    """sum_n w_n J_n^T J_n and sum_n w_n J_n^T r_n for (n, k, d) blocks sharing one weight per row."""
    k, d = J.shape[1], J.shape[2]
    A = J.reshape(-1, d)
    Aw = A * np.repeat(w, k)[:, None]
    return Aw.T @ A, Aw.T @ r.reshape(-1)


def normal_equations(r, J, weights):
    H, g = weighted_gram(J[:, :2], r[:, :2], weights[0])
    if r.shape[1] == 3:
        Hd, gd = weighted_gram(J[:, 2:3], r[:, 2:3], weights[1])
        H, g = H + Hd, g + gd
    return H, g


def track(prob: TrackingProblem, lambda0=1e-4, lambda_max=1e12, trace=False) -> TrackingResult:
    """Levenberg-damped IRLS Gauss-Newton on Sim(3) with left updates."""
    n_alive = int(np.sum(prob.motion > 0))
    if n_alive < 7:
        raise InsufficientMatches(f"{n_alive} matches survive the motion mask, need at least 7")
    dof = 6 if prob.freeze_scale else 7
    T = prob.init
    r, J, idx = residuals_and_jacobians(T, prob)
    cost, weights = huber_cost_and_weights(r, prob.motion[idx], prob.huber_delta)
    initial = cost
    lam = lambda0
    records = []
    step_norm = np.inf
    it = 0
    for it in range(1, prob.max_iters + 1):
        H, g = normal_equations(r, J, weights)
        H, g = H[:dof, :dof], g[:dof]
        if not (np.all(np.isfinite(H)) and np.all(np.isfinite(g))):
            raise DivergedNaN("non-finite entries in the normal equations")
        while True:
            try:
                delta = np.linalg.solve(H + lam * np.eye(dof), -g)
            except np.linalg.LinAlgError:
                delta = np.linalg.lstsq(H + lam * np.eye(dof), -g, rcond=None)[0]
            if not np.all(np.isfinite(delta)):
                raise DivergedNaN("non-finite update")
            tau = np.zeros(7)
            tau[:dof] = delta
            step_norm = float(np.linalg.norm(tau))
            T_new = oplus(tau, T)
            r_new, J_new, idx_new = residuals_and_jacobians(T_new, prob)
            cost_new, w_new = huber_cost_and_weights(r_new, prob.motion[idx_new], prob.huber_delta)
            accepted = np.isfinite(cost_new) and cost_new <= cost
            if trace:
                records.append({"iter": it, "cost": cost_new if accepted else cost, "lambda": lam, "step_norm": step_norm})
            if accepted:
                T, r, J, idx, cost, weights = T_new, r_new, J_new, idx_new, cost_new, w_new
                lam = max(lam / 3.0, 1e-12)
                break
            lam *= 10.0
            if lam > lambda_max or step_norm < prob.tol:
                break
        if step_norm < prob.tol or lam > lambda_max:
            break
    e = np.linalg.norm(r[:, :2], axis=1)
    inl = float(np.mean(e <= prob.huber_delta)) if len(e) else 0.0
    return TrackingResult(T, cost, initial, it, inl, bool(step_norm < prob.tol), records)


def write_trace(records, path):
    with open(path, "w") as fh:
        fh.write("iter,cost,lambda,step_norm\n")
        for rec in records:
            fh.write(f"{rec['iter']},{rec['cost']!r},{rec['lambda']!r},{rec['step_norm']!r}\n")
