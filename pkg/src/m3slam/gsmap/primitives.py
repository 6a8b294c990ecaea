"""Gaussian primitives stored as a struct of arrays."""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy.spatial.transform import Rotation

SH_C0 = 0.28209479177387814  # degree-0 spherical-harmonic basis constant


def rgb_to_sh(rgb):
    return (np.asarray(rgb, float) - 0.5) / SH_C0


def sh_to_rgb(sh):
    return 0.5 + SH_C0 * np.asarray(sh, float)


@dataclass
class GaussianPrimitive:
    """One Gaussian: centre, per-axis scale, unit quaternion (x, y, z, w),
    opacity, degree-0 SH colour, level of detail and visibility distance."""

    mu: np.ndarray
    scale: np.ndarray
    quat: np.ndarray
    opacity: float
    sh: np.ndarray
    level: int = 0
    d_max: float = np.inf

    def __post_init__(self):
        self.mu = np.asarray(self.mu, float).reshape(3)
        self.scale = np.asarray(self.scale, float).reshape(3)
        self.quat = np.asarray(self.quat, float).reshape(4)
        self.sh = np.asarray(self.sh, float).reshape(3)
        if not 0.0 <= self.opacity <= 1.0:
            raise ValueError("opacity must lie in [0, 1]")
        if np.any(self.scale <= 0):
            raise ValueError("scales must be positive")
        if abs(np.linalg.norm(self.quat) - 1.0) > 1e-9:
            raise ValueError("quaternion must be unit length")
        if self.level < 0 or not self.d_max > 0:
            raise ValueError("level must be >= 0 and d_max positive")

    @property
    def color(self):
        return sh_to_rgb(self.sh)


@dataclass
class GaussianMap:
    """All Gaussians of the map; ``ids`` grow monotonically and fix draw order ties."""

    mu: np.ndarray = field(default_factory=lambda: np.zeros((0, 3)))
    scale: np.ndarray = field(default_factory=lambda: np.zeros((0, 3)))
    quat: np.ndarray = field(default_factory=lambda: np.zeros((0, 4)))
    opacity: np.ndarray = field(default_factory=lambda: np.zeros(0))
    sh: np.ndarray = field(default_factory=lambda: np.zeros((0, 3)))
    level: np.ndarray = field(default_factory=lambda: np.zeros(0, dtype=np.int64))
    d_max: np.ndarray = field(default_factory=lambda: np.zeros(0))
    ids: np.ndarray = field(default_factory=lambda: np.zeros(0, dtype=np.int64))
    source_frame: np.ndarray = field(default_factory=lambda: np.zeros(0, dtype=np.int64))
    next_id: int = 0

    def __len__(self):
        return len(self.mu)

    @property
    def colors(self):
        return sh_to_rgb(self.sh)

    @classmethod
    def from_primitives(cls, prims, source_frame=-1):
        g = cls()
        g.extend_primitives(prims, source_frame)
        return g

    def extend_primitives(self, prims, source_frame=-1):
        prims = list(prims)
        if not prims:
            return self
        self.extend(
            np.stack([p.mu for p in prims]),
            np.stack([p.scale for p in prims]),
            np.stack([p.quat for p in prims]),
            np.array([p.opacity for p in prims], float),
            np.stack([p.sh for p in prims]),
            np.array([p.level for p in prims], np.int64),
            np.array([p.d_max for p in prims], float),
            source_frame,
        )
        return self

    def extend(self, mu, scale, quat, opacity, sh, level, d_max, source_frame=-1):
        n = len(mu)
        self.mu = np.concatenate([self.mu, mu])
        self.scale = np.concatenate([self.scale, scale])
        self.quat = np.concatenate([self.quat, quat])
        self.opacity = np.concatenate([self.opacity, opacity])
        self.sh = np.concatenate([self.sh, sh])
        self.level = np.concatenate([self.level, np.asarray(level, np.int64)])
        self.d_max = np.concatenate([self.d_max, d_max])
        self.ids = np.concatenate([self.ids, np.arange(self.next_id, self.next_id + n, dtype=np.int64)])
        self.source_frame = np.concatenate([self.source_frame, np.full(n, source_frame, np.int64)])
        self.next_id += n
        return self

    def append(self, other: "GaussianMap"):
        """Add another map's Gaussians with fresh ids, keeping their source frames."""
        n0 = len(self)
        self.extend(other.mu, other.scale, other.quat, other.opacity, other.sh, other.level, other.d_max)
        self.source_frame[n0:] = other.source_frame
        return self

    def primitive(self, k) -> GaussianPrimitive:
        return GaussianPrimitive(
            self.mu[k], self.scale[k], self.quat[k], float(self.opacity[k]), self.sh[k], int(self.level[k]),
            float(self.d_max[k]),
        )

    def copy(self) -> "GaussianMap":
        g = GaussianMap()
        for name in ("mu", "scale", "quat", "opacity", "sh", "level", "d_max", "ids", "source_frame"):
            setattr(g, name, getattr(self, name).copy())
        g.next_id = self.next_id
        return g


def quat_to_matrix(q):
    """Rotation matrices from (n, 4) unit quaternions in (x, y, z, w) order."""
    q = np.asarray(q, float).reshape(-1, 4)
    if len(q) == 0:
        return np.zeros((0, 3, 3))
    return Rotation.from_quat(q).as_matrix()
