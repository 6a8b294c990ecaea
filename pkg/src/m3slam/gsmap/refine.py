"""Streaming colour/opacity refinement with analytic gradients (geometry frozen)."""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from ..errors import NoTrainingViews
from ..geom import PinholeIntrinsics, Sim3Pose
from .primitives import GaussianMap
from .render import render, render_backward
from .spawn import LUMA


@dataclass
class TrainingView:
    frame_id: int
    pose: Sim3Pose
    image: np.ndarray  # (H, W, 3) target
    mask: np.ndarray | None = None  # (H, W) pixel weights, e.g. static pixels only


@dataclass
class RefineConfig:
    lr_color: float = 0.1
    lr_opacity: float = 0.1
    lr_decay: float = 0.98  # per update of a Gaussian
    lr_floor: float = 0.01  # decay stops at this fraction of the base rate
    lum_weight: float = 0.5
    p_current: float = 0.2
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8


@dataclass
class AdamState:
    """First/second moments per Gaussian; grows as the map grows."""

    m_sh: np.ndarray = field(default_factory=lambda: np.zeros((0, 3)))
    v_sh: np.ndarray = field(default_factory=lambda: np.zeros((0, 3)))
    m_op: np.ndarray = field(default_factory=lambda: np.zeros(0))
    v_op: np.ndarray = field(default_factory=lambda: np.zeros(0))
    t: np.ndarray = field(default_factory=lambda: np.zeros(0))

    def resize(self, n):
        k = n - len(self.m_op)
        if k > 0:
            self.m_sh = np.concatenate([self.m_sh, np.zeros((k, 3))])
            self.v_sh = np.concatenate([self.v_sh, np.zeros((k, 3))])
            self.m_op = np.concatenate([self.m_op, np.zeros(k)])
            self.v_op = np.concatenate([self.v_op, np.zeros(k)])
            self.t = np.concatenate([self.t, np.zeros(k)])


def photometric_loss(rendered, target, mask=None, lum_weight=0.5):
    """Mean L1 over channels plus weighted mean absolute luminance error.

    Returns (loss, d loss / d rendered).
    """
    H, W, _ = target.shape
    w = np.ones((H, W)) if mask is None else np.asarray(mask, float)
    n = max(float(w.sum()), 1e-12)
    diff = rendered - target
    dl = diff @ LUMA
    loss = float((w[..., None] * np.abs(diff)).sum() / (3 * n) + lum_weight * (w * np.abs(dl)).sum() / n)
    grad = w[..., None] * np.sign(diff) / (3 * n) + lum_weight * (w * np.sign(dl) / n)[..., None] * LUMA
    return loss, grad


def refine_step(gmap: GaussianMap, view: TrainingView, intr: PinholeIntrinsics, state: AdamState, cfg: RefineConfig):
    state.resize(len(gmap))
    res = render(gmap, view.pose, intr, keep_ctx=True)
    loss, g = photometric_loss(res.color, view.image, view.mask, cfg.lum_weight)
    g_sh, g_op = render_backward(res.ctx, g)
    touched = (np.abs(g_op) > 0) | np.any(g_sh != 0, axis=1)
    if not touched.any():
        return loss
    b1, b2 = cfg.beta1, cfg.beta2
    state.t[touched] += 1
    t = state.t[touched]
    state.m_sh[touched] = b1 * state.m_sh[touched] + (1 - b1) * g_sh[touched]
    state.v_sh[touched] = b2 * state.v_sh[touched] + (1 - b2) * g_sh[touched] ** 2
    state.m_op[touched] = b1 * state.m_op[touched] + (1 - b1) * g_op[touched]
    state.v_op[touched] = b2 * state.v_op[touched] + (1 - b2) * g_op[touched] ** 2
    c1, c2 = 1 - b1**t, 1 - b2**t
    anneal = np.maximum(cfg.lr_decay ** (t - 1), cfg.lr_floor)
    step_sh = anneal[:, None] * cfg.lr_color * (state.m_sh[touched] / c1[:, None]) / (np.sqrt(state.v_sh[touched] / c2[:, None]) + cfg.eps)
    step_op = anneal * cfg.lr_opacity * (state.m_op[touched] / c1) / (np.sqrt(state.v_op[touched] / c2) + cfg.eps)
    gmap.sh[touched] -= step_sh
    gmap.opacity[touched] = np.clip(gmap.opacity[touched] - step_op, 0.0, 1.0)
    return loss


def refine(gmap: GaussianMap, views, intr: PinholeIntrinsics, iterations=20, rng=None, state=None,
           cfg: RefineConfig | None = None, log=None):
    """Run ``iterations`` steps; the last view is the current frame (chosen with
    probability p_current), the others are drawn uniformly. Returns the loss trace."""
    views = list(views)
    if not views:
        raise NoTrainingViews("refine needs at least one view")
    cfg = cfg or RefineConfig()
    rng = np.random.default_rng(0) if rng is None else rng
    state = AdamState() if state is None else state
    current, history = views[-1], views[:-1]
    trace = []
    for _ in range(int(iterations)):
        if not history or rng.random() < cfg.p_current:
            view = current
        else:
            view = history[int(rng.integers(len(history)))]
        if log is not None:
            log.append(view.frame_id)
        trace.append(refine_step(gmap, view, intr, state, cfg))
    return trace
