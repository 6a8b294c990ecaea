from __future__ import annotations

import dataclasses
from dataclasses import dataclass, field

import numpy as np

from ..errors import BatchTooLarge, EmptyBatch
from ..geom import Sim3Pose

MAX_BATCH = 16


@dataclass(eq=False)
class FrameObservation:
    """One frame's prior bundle as emitted by the geometric-prior model.

    ``points`` are in the frame's own camera coordinates, ``pose`` is
    camera-to-world in the gauge of the inference batch the frame came from.
    The ``gt_*`` fields are only populated by the synthetic oracle (or a dump
    carrying a ground-truth block).
    """

    frame_id: int
    points: np.ndarray  # (H, W, 3)
    pose: Sim3Pose
    conf: np.ndarray  # (H, W)
    desc: np.ndarray  # (H, W, d)
    match_conf: np.ndarray  # (H, W)
    valid: np.ndarray  # (H, W) bool
    image: np.ndarray | None = None  # (H, W, 3) in [0, 1]
    gt_pose: Sim3Pose | None = None
    gt_points: np.ndarray | None = None  # noise-free local coordinates
    gt_dynamic: np.ndarray | None = None

    @property
    def shape(self):
        return self.valid.shape

    @property
    def desc_dim(self):
        return self.desc.shape[-1]

    @property
    def has_gt(self):
        return self.gt_pose is not None and self.gt_points is not None

    def gt_world(self):
        return self.gt_pose.act(self.gt_points)

    def world_points(self):
        return self.pose.act(self.points)

    def replace(self, **changes) -> "FrameObservation":
        return dataclasses.replace(self, **changes)

    def check(self, tol=1e-6):
        v = self.valid
        norms = np.linalg.norm(self.desc[v], axis=-1)
        assert np.all(np.abs(norms - 1.0) <= tol), "descriptor norms deviate from 1"
        assert np.all(self.points[v][:, 2] > 0), "non-positive depth on a valid pixel"
        assert np.all((self.match_conf >= 0) & (self.match_conf <= 1))
        assert np.all(self.conf >= 0)


@dataclass(eq=False)
class InferenceBatch:
    observations: list[FrameObservation]
    metric_scale: float = 1.0
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        if len(self.observations) == 0:
            raise EmptyBatch("inference batch has no frames")
        if len(self.observations) > MAX_BATCH:
            raise BatchTooLarge(f"{len(self.observations)} frames exceed the {MAX_BATCH}-frame limit")

    def __len__(self):
        return len(self.observations)

    def __iter__(self):
        return iter(self.observations)

    def __getitem__(self, i):
        return self.observations[i]

    @property
    def frame_ids(self):
        return [o.frame_id for o in self.observations]

    def by_id(self, frame_id) -> FrameObservation:
        for o in self.observations:
            if o.frame_id == frame_id:
                return o
        raise KeyError(frame_id)
