"""Sliding-window batching, frame classification and loop triggers."""
from __future__ import annotations

import csv
import enum
from dataclasses import dataclass, field

import numpy as np

from .backend import KeyframeGraph, add_keyframe, retrieve_candidates
from .errors import EmptyInput
from .geom import Sim3Pose
from .matching import CorrespondenceSet
from .prior.observation import FrameObservation


class FrameClass(str, enum.Enum):
    KEYFRAME = "keyframe"
    MAPPER = "mapper"
    COMMON = "common"


@dataclass(frozen=True)
class WindowConfig:
    """Window sizes and classification thresholds.

    ``tau_k``/``tau_m`` of None resolve against the image width:
    tau_k = max(0.333 W, 30) and tau_m = 0.05 W. ``keyframe_mode="literal"``
    compares the per-row match count against tau_k; ``"fraction"`` makes a
    keyframe when the match fraction drops below ``keyframe_fraction``.
    """

    L: int = 8
    K_max: int = 4
    tau_k: float | None = None
    tau_m: float | None = None
    displacement_percentile: float = 70.0
    keyframe_mode: str = "literal"
    keyframe_fraction: float = 0.333
    loop_gap: int = 50

    def __post_init__(self):
        if not 1 <= self.K_max < self.L:
            raise ValueError(f"need 1 <= K_max < L, got K_max={self.K_max}, L={self.L}")
        if self.tau_k is not None and self.tau_k <= 0:
            raise ValueError("tau_k must be positive")
        if self.tau_m is not None and self.tau_m <= 0:
            raise ValueError("tau_m must be positive")
        if self.keyframe_mode not in ("literal", "fraction"):
            raise ValueError(f"unknown keyframe_mode {self.keyframe_mode!r}")
        if not 0 < self.keyframe_fraction <= 1:
            raise ValueError("keyframe_fraction must lie in (0, 1]")

    def resolved_tau_k(self, width):
        return max(0.333 * width, 30.0) if self.tau_k is None else float(self.tau_k)

    def resolved_tau_m(self, width):
        return 0.05 * width if self.tau_m is None else float(self.tau_m)


@dataclass
class FrameStats:
    match_count: int
    match_fraction: float
    p70_displacement: float
    n_valid: int


def frame_stats(frame: FrameObservation, matches: CorrespondenceSet, percentile=70.0) -> FrameStats:
    n_valid = int(frame.valid.sum())
    n = len(matches)
    disp = np.linalg.norm((matches.p - matches.q).astype(float), axis=1)
    p70 = float(np.percentile(disp, percentile)) if n else 0.0
    return FrameStats(n, n / n_valid if n_valid else 0.0, p70, n_valid)


def classify_frame(frame: FrameObservation, last_kf, matches: CorrespondenceSet, cfg: WindowConfig) -> FrameClass:
    """Keyframe / mapper / common decision for a frame matched against the last keyframe."""
    W = frame.shape[1]
    st = frame_stats(frame, matches, cfg.displacement_percentile)
    if cfg.keyframe_mode == "literal":
        is_kf = st.match_count < cfg.resolved_tau_k(W) * (st.n_valid / W)
    else:
        is_kf = st.match_fraction < cfg.keyframe_fraction
    if is_kf:
        return FrameClass.KEYFRAME
    if st.p70_displacement > cfg.resolved_tau_m(W):
        return FrameClass.MAPPER
    return FrameClass.COMMON


@dataclass
class BatchPlan:
    """Frame ids of one inference batch: historical keyframe slots first."""

    keyframe_ids: list  # graph ids of the historical slots
    keyframe_frames: list  # their frame ids
    new_frames: list
    loop_trigger: bool = False
    loop_candidates: list = field(default_factory=list)

    @property
    def frame_ids(self):
        return list(self.keyframe_frames) + list(self.new_frames)

    def __len__(self):
        return len(self.keyframe_frames) + len(self.new_frames)


@dataclass
class FrameRecord:
    """Outcome of processing one frame."""

    frame_id: int
    cls: FrameClass
    pose: Sim3Pose  # world-from-camera at processing time
    ref_kf: int  # keyframe the frame was tracked against (-1 for none)
    rel_pose: Sim3Pose  # camera in the reference keyframe's frame
    stats: FrameStats | None = None
    obs: FrameObservation | None = None
    motion: np.ndarray | None = None
    tracking_ok: bool = True
    held_out: bool = False


@dataclass
class SlidingWindow:
    cfg: WindowConfig = field(default_factory=WindowConfig)
    records: dict = field(default_factory=dict)  # frame_id -> FrameRecord (non-keyframes and keyframes)
    keyframe_of_frame: dict = field(default_factory=dict)  # frame_id -> graph id

    @property
    def max_new(self):
        return self.cfg.L - self.cfg.K_max


def assemble_batch(window: SlidingWindow, graph: KeyframeGraph, new_frames) -> BatchPlan:
    """[last keyframe] + up to K-1 retrieved keyframes + new frames, at most L long."""
    new_frames = [int(f) for f in new_frames]
    if not new_frames:
        raise EmptyInput("no new frames")
    cfg = window.cfg
    if len(new_frames) > cfg.L - 1:
        raise ValueError(f"{len(new_frames)} new frames exceed L - 1 = {cfg.L - 1}")
    if len(graph) == 0:
        return BatchPlan([], [], new_frames)
    last = graph.last
    K = min(len(graph), cfg.K_max, cfg.L - len(new_frames))
    retrieved = retrieve_candidates(graph, last.global_desc, N_c=max(K - 1, 1), exclude_recent=1)[: K - 1]
    ids = [last.id] + retrieved
    far = [k for k in retrieved if last.frame_id - graph.nodes[k].frame_id > cfg.loop_gap]
    return BatchPlan(ids, [graph.nodes[k].frame_id for k in ids], new_frames, bool(far), far)


def advance(window: SlidingWindow, graph: KeyframeGraph, records) -> list:
    """Register a processed batch: keyframes go into the graph (in order),
    every frame is recorded exactly once. Returns the new keyframe ids."""
    new_ids = []
    for rec in records:
        if rec.frame_id in window.records:
            raise ValueError(f"frame {rec.frame_id} processed twice")
        window.records[rec.frame_id] = rec
        if rec.cls is FrameClass.KEYFRAME:
            kid = add_keyframe(graph, rec.obs, rec.pose, motion=rec.motion)
            window.keyframe_of_frame[rec.frame_id] = kid
            new_ids.append(kid)
    return new_ids


def write_classification_log(records, path):
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["frame_id", "class", "match_count", "match_fraction", "p70_displacement"])
        for rec in sorted(records, key=lambda r: r.frame_id):
            st = rec.stats
            if st is None:
                w.writerow([rec.frame_id, rec.cls.value, "", "", ""])
            else:
                w.writerow([rec.frame_id, rec.cls.value, st.match_count, repr(st.match_fraction), repr(st.p70_displacement)])
