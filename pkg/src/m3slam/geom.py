"""Sim(3)/SO(3) Lie-group kernel and the pinhole camera model.

Tangent vectors of sim(3) are 7-arrays ordered ``(rho[3], theta[3], sigma)``:
translational part, rotation vector (radians) and log-scale. Poses act on
points as ``p -> s * R @ p + t``.
"""
from __future__ import annotations

import math
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from scipy.spatial.transform import Rotation

from .errors import AngleAtBranchCut, BehindCamera, NonPositiveDepth

# below this rotation angle the Sim(3) left Jacobian switches to its Taylor series
_SMALL_ANGLE = 1e-2
# reprojection onto SO(3) only when drift exceeds this
_ORTHO_DRIFT = 1e-7


def skew(v):
    v = np.asarray(v, dtype=float)
    return np.array([[0.0, -v[2], v[1]], [v[2], 0.0, -v[0]], [-v[1], v[0], 0.0]])


def so3_exp(theta):
    """Rodrigues formula."""
    theta = np.asarray(theta, dtype=float)
    a = float(np.linalg.norm(theta))
    K = skew(theta)
    if a < 1e-5:
        A = 1.0 - a * a / 6.0 + a**4 / 120.0
        B = 0.5 - a * a / 24.0 + a**4 / 720.0
    else:
        A = math.sin(a) / a
        B = (1.0 - math.cos(a)) / (a * a)
    return np.eye(3) + A * K + B * (K @ K)


def so3_log(R, *, branch_tol=1e-6):
    R = np.asarray(R, dtype=float)
    w = np.array([R[2, 1] - R[1, 2], R[0, 2] - R[2, 0], R[1, 0] - R[0, 1]])
    s = 0.5 * np.linalg.norm(w)
    c = 0.5 * (np.trace(R) - 1.0)
    angle = math.atan2(s, c)
    if angle >= math.pi - branch_tol:
        raise AngleAtBranchCut(f"rotation angle {angle:.9f} is at the log branch cut")
    if angle < 1e-5:
        factor = 0.5 * (1.0 + angle * angle / 6.0)
    else:
        factor = angle / (2.0 * math.sin(angle))
    return factor * w


def orthonormalize(R):
    """Closest rotation matrix (polar decomposition)."""
    U, _, Vt = np.linalg.svd(R)
    Q = U @ Vt
    if np.linalg.det(Q) < 0:
        U[:, -1] *= -1
        Q = U @ Vt
    return Q


def _exp_moments(sigma, kmax):
    """I_k = integral_0^1 s^k e^(sigma s) ds for k = 0..kmax."""
    out = np.empty(kmax + 1)
    if abs(sigma) < 2.0:
        for k in range(kmax + 1):
            term, total, j = 1.0, 0.0, 0
            while True:
                contrib = term / (k + j + 1)
                total += contrib
                if abs(contrib) < 1e-18 * max(abs(total), 1e-300) or j > 80:
                    break
                j += 1
                term *= sigma / j
            out[k] = total
    else:
        es = math.exp(sigma)
        out[0] = math.expm1(sigma) / sigma
        for k in range(1, kmax + 1):
            out[k] = (es - k * out[k - 1]) / sigma
    return out


def sim3_left_jacobian(theta, sigma):
    """Matrix W with exp((rho, theta, sigma)).t = W @ rho.

    W = integral_0^1 e^(sigma s) R(s theta) ds, in closed form, with a series
    in the rotation angle when it is small.
    """
    theta = np.asarray(theta, dtype=float)
    a = float(np.linalg.norm(theta))
    K = skew(theta)
    if a < _SMALL_ANGLE:
        I = _exp_moments(sigma, 8)
        C = I[0]
        a2 = a * a
        A = I[1] - a2 / 6.0 * I[3] + a2 * a2 / 120.0 * I[5] - a2**3 / 5040.0 * I[7]
        B = I[2] / 2.0 - a2 / 24.0 * I[4] + a2 * a2 / 720.0 * I[6] - a2**3 / 40320.0 * I[8]
    else:
        C = _exp_moments(sigma, 0)[0]
        es = math.exp(sigma)
        den = sigma * sigma + a * a
        sa, ca = math.sin(a), math.cos(a)
        int_sin = (es * (sigma * sa - a * ca) + a) / den
        int_cos = (es * (sigma * ca + a * sa) - sigma) / den
        A = int_sin / a
        B = (C - int_cos) / (a * a)
    return C * np.eye(3) + A * K + B * (K @ K)


@dataclass(frozen=True, eq=False)
class Sim3Pose:
    scale: float
    rotation: np.ndarray
    translation: np.ndarray

    def __post_init__(self):
        if not self.scale > 0:
            raise ValueError(f"Sim3 scale must be positive, got {self.scale}")
        object.__setattr__(self, "scale", float(self.scale))
        object.__setattr__(self, "rotation", np.asarray(self.rotation, dtype=float).reshape(3, 3))
        object.__setattr__(self, "translation", np.asarray(self.translation, dtype=float).reshape(3))

    @classmethod
    def identity(cls):
        return cls(1.0, np.eye(3), np.zeros(3))

    @classmethod
    def from_matrix(cls, T):
        T = np.asarray(T, dtype=float)
        sR = T[:3, :3]
        s = float(np.cbrt(np.linalg.det(sR)))
        return cls(s, sR / s, T[:3, 3].copy())

    def matrix(self):
        T = np.eye(4)
        T[:3, :3] = self.scale * self.rotation
        T[:3, 3] = self.translation
        return T

    def compose(self, other: "Sim3Pose") -> "Sim3Pose":
        return Sim3Pose(
            self.scale * other.scale,
            self.rotation @ other.rotation,
            self.scale * (self.rotation @ other.translation) + self.translation,
        )

    __matmul__ = compose

    def inverse(self) -> "Sim3Pose":
        Rt = self.rotation.T
        return Sim3Pose(1.0 / self.scale, Rt, -(Rt @ self.translation) / self.scale)

    def act(self, points):
        points = np.asarray(points, dtype=float)
        return self.scale * points @ self.rotation.T + self.translation

    def log(self):
        return sim3_log(self)

    def center(self):
        return self.translation.copy()

    def allclose(self, other: "Sim3Pose", atol=1e-9) -> bool:
        return (
            abs(self.scale - other.scale) <= atol
            and np.allclose(self.rotation, other.rotation, atol=atol, rtol=0)
            and np.allclose(self.translation, other.translation, atol=atol, rtol=0)
        )

    def __repr__(self):
        q = Rotation.from_matrix(self.rotation).as_quat()
        return f"Sim3Pose(s={self.scale:.6g}, q={np.round(q, 6)}, t={np.round(self.translation, 6)})"


def sim3_exp(tau) -> Sim3Pose:
    tau = np.asarray(tau, dtype=float).reshape(7)
    rho, theta, sigma = tau[:3], tau[3:6], float(tau[6])
    W = sim3_left_jacobian(theta, sigma)
    return Sim3Pose(math.exp(sigma), so3_exp(theta), W @ rho)


def sim3_log(pose: Sim3Pose):
    theta = so3_log(pose.rotation)
    sigma = math.log(pose.scale)
    W = sim3_left_jacobian(theta, sigma)
    rho = np.linalg.solve(W, pose.translation)
    return np.concatenate([rho, theta, [sigma]])


def oplus(tau, pose: Sim3Pose) -> Sim3Pose:
    """Left-plus update: exp(tau) o pose."""
    out = sim3_exp(tau) @ pose
    R = out.rotation
    if np.abs(R.T @ R - np.eye(3)).max() > _ORTHO_DRIFT:
        out = Sim3Pose(out.scale, orthonormalize(R), out.translation)
    return out


def transform_points(pose: Sim3Pose, points):
    return pose.act(points)


def relative(pose_a: Sim3Pose, pose_b: Sim3Pose) -> Sim3Pose:
    """pose_a^-1 o pose_b: maps b-local coordinates into a-local ones."""
    return pose_a.inverse() @ pose_b


# ---------------------------------------------------------------------------
# pinhole camera


@dataclass(frozen=True)
class PinholeIntrinsics:
    fx: float
    fy: float
    cx: float
    cy: float
    width: int
    height: int

    def __post_init__(self):
        if not (self.fx > 0 and self.fy > 0):
            raise ValueError("focal lengths must be positive")
        if not (0 < self.cx < self.width and 0 < self.cy < self.height):
            raise ValueError("principal point outside the image")

    @classmethod
    def centered(cls, f, width, height):
        """Square pixels, principal point at the image center (pixel centers are integers)."""
        return cls(float(f), float(f), (width - 1) / 2.0, (height - 1) / 2.0, int(width), int(height))

    @property
    def K(self):
        return np.array([[self.fx, 0.0, self.cx], [0.0, self.fy, self.cy], [0.0, 0.0, 1.0]])

    @property
    def shape(self):
        return (self.height, self.width)

    def with_focal(self, f):
        return PinholeIntrinsics(float(f), float(f), self.cx, self.cy, self.width, self.height)


def project(intr: PinholeIntrinsics, point):
    x, y, z = (float(c) for c in np.asarray(point, dtype=float).reshape(3))
    if z <= 1e-9:
        raise BehindCamera(f"point depth {z} is not in front of the camera")
    return np.array([intr.fx * x / z + intr.cx, intr.fy * y / z + intr.cy])


def project_points(intr: PinholeIntrinsics, points, min_depth=1e-9):
    """Vectorised projection. Returns (uv, ok) where ok marks points in front of the camera."""
    points = np.asarray(points, dtype=float)
    z = points[..., 2]
    ok = z > min_depth
    zs = np.where(ok, z, 1.0)
    u = intr.fx * points[..., 0] / zs + intr.cx
    v = intr.fy * points[..., 1] / zs + intr.cy
    return np.stack([u, v], axis=-1), ok


def backproject(intr: PinholeIntrinsics, pixel, depth):
    if not depth > 0:
        raise NonPositiveDepth(f"depth must be positive, got {depth}")
    u, v = (float(c) for c in np.asarray(pixel, dtype=float).reshape(2))
    return np.array([depth * (u - intr.cx) / intr.fx, depth * (v - intr.cy) / intr.fy, depth])


def backproject_pixels(intr: PinholeIntrinsics, uv, depth):
    uv = np.asarray(uv, dtype=float)
    depth = np.asarray(depth, dtype=float)
    x = depth * (uv[..., 0] - intr.cx) / intr.fx
    y = depth * (uv[..., 1] - intr.cy) / intr.fy
    return np.stack([x, y, depth], axis=-1)


def pixel_grid(height, width):
    """(H, W, 2) array of (u, v) pixel-center coordinates."""
    v, u = np.mgrid[0:height, 0:width]
    return np.stack([u, v], axis=-1).astype(float)


# ---------------------------------------------------------------------------
# TUM trajectories


def pose_to_tum(stamp, pose: Sim3Pose) -> str:
    qx, qy, qz, qw = Rotation.from_matrix(pose.rotation).as_quat()
    t = pose.translation
    return f"{stamp:.6f} {t[0]:.17g} {t[1]:.17g} {t[2]:.17g} {qx:.17g} {qy:.17g} {qz:.17g} {qw:.17g}"


def tum_to_pose(line: str, scale=1.0) -> tuple[float, Sim3Pose]:
    vals = [float(x) for x in line.split()]
    if len(vals) != 8:
        raise ValueError(f"TUM line needs 8 fields, got {len(vals)}")
    R = Rotation.from_quat(vals[4:8]).as_matrix()
    return vals[0], Sim3Pose(scale, R, np.array(vals[1:4]))


def write_tum(path, stamps, poses):
    lines = []
    for stamp, pose in zip(stamps, poses):
        if pose.scale != 1.0:
            lines.append(f"# scale={pose.scale:.17g}")
        lines.append(pose_to_tum(stamp, pose))
    Path(path).write_text("\n".join(lines) + "\n")


def read_tum(path):
    stamps, poses = [], []
    scale = 1.0
    for raw in Path(path).read_text().splitlines():
        line = raw.strip()
        if not line:
            continue
        if line.startswith("#"):
            if line.startswith("# scale="):
                scale = float(line.split("=", 1)[1])
            continue
        stamp, pose = tum_to_pose(line, scale)
        stamps.append(stamp)
        poses.append(pose)
        scale = 1.0
    return np.array(stamps), poses
