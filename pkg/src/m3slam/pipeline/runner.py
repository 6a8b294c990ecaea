"""Streaming driver: batches, tracking, keyframe graph, Gaussian mapper, exports."""
from __future__ import annotations

import json
import time
from collections import defaultdict
from contextlib import contextmanager
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy.ndimage import minimum_filter
from scipy.spatial.transform import Rotation

from ..backend import (
    KeyframeGraph,
    close_loop,
    fuse_pointmap,
    matching_ratio,
    optimize_global,
    write_edges,
    write_keyframes,
)
from ..errors import DivergedNaN, DumpError, InsufficientMatches, ProviderError
from ..geom import Sim3Pose, write_tum
from ..gsmap import (
    AdamState,
    GaussianMap,
    RefineConfig,
    TrainingView,
    refine,
    render,
    save_png,
    spawn_gaussians,
    write_ply,
)
from ..matching import coarse_to_fine_match, motion_map_with_coverage
from ..prior import DumpProvider, OracleProvider, align_intrinsics, estimate_intrinsics_ransac, make_scene
from ..tracking import build_problem, track
from ..window import (
    FrameClass,
    FrameRecord,
    SlidingWindow,
    advance,
    assemble_batch,
    classify_frame,
    frame_stats,
    write_classification_log,
)
from .config import PipelineConfig, write_ini
from .metrics import ate_rmse, f1_from_counts, psnr, trajectory_length


@dataclass(frozen=True)
class RunReport:
    """Run summary. ``metrics`` is deterministic for a fixed seed; ``timings`` is not."""

    ate_rmse: float | None
    keyframe_count: int
    loop_closures: int
    psnr_mean: float | None
    metrics: dict = field(default_factory=dict)
    timings: dict = field(default_factory=dict)

    def to_json(self):
        return json.dumps(self.metrics, indent=2, sort_keys=True) + "\n"


def erode_motion(M, margin):
    """Local minimum of the motion map, so pixels next to a detected dynamic region count as dynamic."""
    if margin <= 0:
        return M
    return minimum_filter(M, size=2 * margin + 1, mode="nearest")


def scale_pose(s):
    return Sim3Pose(float(s), np.eye(3), np.zeros(3))


def make_provider(cfg: PipelineConfig):
    p = cfg.provider
    try:
        if p.kind == "oracle":
            scene = make_scene(p.preset, n_frames=p.frames, seed=cfg.seed, noise=p.noise,
                               orthogonal_dynamic=p.orthogonal_dynamic)
            return OracleProvider(scene, float32=p.float32_outputs)
        provider = DumpProvider(p.dump_dir)
        if provider.n_frames < 1:
            raise ProviderError(f"no frames in {p.dump_dir}")
        provider.frame(0)
        return provider
    except (OSError, ValueError, DumpError) as e:
        raise ProviderError(str(e)) from e


class StreamingRun:
    """All mutable state of one run; ``run()`` drives it batch by batch."""

    def __init__(self, cfg: PipelineConfig, provider=None):
        self.cfg = cfg
        self.provider = provider if provider is not None else make_provider(cfg)
        n = self.provider.n_frames
        self.n_frames = min(n, cfg.provider.frames) if cfg.provider.kind == "oracle" else n
        self.window = SlidingWindow(cfg.window)
        b = cfg.backend
        self.graph = KeyframeGraph(None, r=cfg.matching.r, s_min=cfg.matching.s_min, max_outside=0,
                                   huber_delta=cfg.tracking.huber_delta, depth_weight=cfg.tracking.depth_weight)
        self.K_ref = None
        self.gmap = GaussianMap()
        self.adam = AdamState()
        self.rng = np.random.default_rng([int(cfg.seed), 3])
        self.refine_cfg = RefineConfig()
        self.mapped: list = []  # frame ids used as training views
        self.masks: dict = {}  # frame id -> refine mask
        self.images: dict = {}
        self.tried_pairs: set = set()
        self.loop_closures = 0
        self.retrieval_edges = 0
        self.tracking_failures = 0
        self.spawned_on_dynamic = 0
        self.spawn_log: list = []  # (frame id, count)
        self.refine_log: list = []  # frame id per refine step
        self.focal_log: list = []
        self.motion_counts = np.zeros(3, np.int64)  # tp, fp, fn of the dynamic mask
        self.timings = defaultdict(float)
        self.loop_ok = b.loop_closure

    @contextmanager
    def timed(self, stage):
        t0 = time.perf_counter()
        try:
            yield
        finally:
            self.timings[stage] += time.perf_counter() - t0

    # -- poses -------------------------------------------------------------

    def frame_pose(self, fid):
        rec = self.window.records[fid]
        return self.graph.nodes[rec.ref_kf].pose @ rec.rel_pose

    def all_poses(self):
        return {fid: self.frame_pose(fid) for fid in sorted(self.window.records)}

    def node_scale_ratio(self, node, bo):
        """Stored-map units per batch unit for a keyframe re-observed in this batch."""
        v = node.valid & bo.valid & (bo.points[..., 2] > 0) & (node.points[..., 2] > 0)
        if not v.any():
            return 1.0
        return float(np.exp(np.median(np.log(node.points[..., 2][v] / bo.points[..., 2][v]))))

    def batch_relative(self, a, b, obs):
        """Pose of keyframe b's stored camera in keyframe a's, from one joint batch prediction."""
        na, nb = self.graph.nodes[a], self.graph.nodes[b]
        oa, ob = obs[na.frame_id], obs[nb.frame_id]
        ra, rb = self.node_scale_ratio(na, oa), self.node_scale_ratio(nb, ob)
        return scale_pose(ra) @ oa.pose.inverse() @ ob.pose @ scale_pose(1.0 / rb)

    # -- batches -----------------------------------------------------------

    def fetch(self, plan):
        try:
            return self.provider.batch(plan.frame_ids)
        except (OSError, DumpError) as e:
            raise ProviderError(f"batch {plan.frame_ids}: {e}") from e

    def calibrate(self, batch):
        """First batch fixes K_ref; later batches are re-expressed under it."""
        if self.K_ref is None:
            self.K_ref = estimate_intrinsics_ransac(batch)
            self.graph.intr = self.K_ref
            self.focal_log.append(self.K_ref.fx)
            return batch
        if not self.cfg.provider.align_intrinsics:
            return batch
        Kb = estimate_intrinsics_ransac(batch)
        self.focal_log.append(Kb.fx)
        return align_intrinsics(batch, self.K_ref, Kb)

    def link_historical(self, plan, obs):
        """Retrieval edges to nearby slots and loop edges to distant ones, for the slot-0 keyframe."""
        if len(plan.keyframe_ids) < 2:
            return
        cur = plan.keyframe_ids[0]
        far = set(plan.loop_candidates)
        near = [c for c in plan.keyframe_ids[1:] if c not in far]
        if self.cfg.backend.retrieval_edges:
            for c in near:
                if (cur, c) in self.tried_pairs or self.graph.edge(cur, c) is not None:
                    continue
                self.tried_pairs.add((cur, c))
                rel = self.batch_relative(c, cur, obs)
                node, cand = self.graph.nodes[cur], self.graph.nodes[c]
                m = self.graph.match(node, cand, rel, Sim3Pose.identity())
                if matching_ratio(m, node) > self.cfg.backend.ratio_min:
                    T = {c: Sim3Pose.identity(), cur: rel}
                    a, b = min(c, cur), max(c, cur)
                    self.graph.connect(a, b, "retrieval", T_a=T[a], T_b=T[b])
                    self.retrieval_edges += 1
        if self.loop_ok and plan.loop_trigger:
            cands = [c for c in plan.loop_candidates if (cur, c) not in self.tried_pairs]
            self.tried_pairs.update((cur, c) for c in cands)
            if cands:
                rel = {c: self.batch_relative(c, cur, obs) for c in cands}
                added = close_loop(self.graph, cur, cands, r_loop=self.cfg.matching.r_loop,
                                   ratio_min=self.cfg.backend.ratio_min, K=self.cfg.window.K_max, rel_init=rel)
                self.loop_closures += len(added)

    def optimize(self, max_iters):
        if len(self.graph) < 2:
            self.graph.needs_optimization = False
            return None
        old = {n.id: n.pose for n in self.graph.nodes}
        res = optimize_global(self.graph, fixed=0, max_iters=max_iters)
        self.deform_map(old)
        return res

    def deform_map(self, old):
        """Move each Gaussian with the pose correction of its source frame's keyframe."""
        if len(self.gmap) == 0:
            return
        ref = np.array([self.window.records[int(f)].ref_kf for f in self.gmap.source_frame])
        for k in np.unique(ref):
            C = self.graph.nodes[k].pose @ old[k].inverse()
            sel = ref == k
            g = self.gmap
            g.mu[sel] = C.act(g.mu[sel])
            g.scale[sel] *= C.scale
            g.d_max[sel] *= C.scale
            g.quat[sel] = (Rotation.from_matrix(C.rotation) * Rotation.from_quat(g.quat[sel])).as_quat()

    # -- frames ------------------------------------------------------------

    def bootstrap(self, fid, obs, batch):
        """First frame of the stream: the world frame, with a motion map from the batch's last frame."""
        bo = obs[fid]
        M = np.ones(bo.shape)
        other = batch.frame_ids[-1]
        if self.cfg.tracking.suppress_dynamic and other != fid:
            ob = obs[other]
            M, _ = motion_map_with_coverage(bo, ob, np.ones(ob.shape), bo.pose.inverse() @ ob.pose, self.K_ref,
                                            prior_dilation=1)
        rec = FrameRecord(fid, FrameClass.KEYFRAME, Sim3Pose.identity(), -1, Sim3Pose.identity(), obs=bo, motion=M,
                          held_out=self.held_out(fid))
        return rec

    def held_out(self, fid):
        return fid % self.cfg.gsmap.holdout_every == 0

    def track_frame(self, fid, obs):
        """Match and track against the running keyframe; returns the record and the matches."""
        cfg = self.cfg
        node = self.graph.last
        bo, bk = obs[fid], obs[node.frame_id]
        init = scale_pose(self.node_scale_ratio(node, bk)) @ bk.pose.inverse() @ bo.pose
        kf_obs = node.as_observation()
        with self.timed("match"):
            m = coarse_to_fine_match(bo, kf_obs, init, Sim3Pose.identity(), self.K_ref, r=cfg.matching.r,
                                     s_min=cfg.matching.s_min, max_outside=0)
        ok = True
        with self.timed("track"):
            try:
                prob = build_problem(m, bo, kf_obs, self.K_ref, init,
                                     motion=erode_motion(node.motion, cfg.tracking.motion_margin)
                                     if cfg.tracking.suppress_dynamic else None,
                                     pixel_mode="pointmap", huber_delta=cfg.tracking.huber_delta,
                                     max_iters=cfg.tracking.max_iters, tol=cfg.tracking.tol,
                                     depth_weight=cfg.tracking.depth_weight)
                T = track(prob).pose
            except (InsufficientMatches, DivergedNaN):
                T, ok = init, False
                self.tracking_failures += 1
        with self.timed("motion"):
            if cfg.tracking.suppress_dynamic:
                M, _ = motion_map_with_coverage(bo, kf_obs, node.motion, T.inverse(), self.K_ref, prior_dilation=1)
            else:
                M = np.ones(bo.shape)
        cls = classify_frame(bo, node, m, cfg.window) if ok else FrameClass.COMMON
        rec = FrameRecord(fid, cls, node.pose @ T, node.id, T, obs=bo, motion=M, tracking_ok=ok,
                          held_out=self.held_out(fid))
        rec.stats = frame_stats(bo, m, cfg.window.displacement_percentile)
        return rec, m

    def fuse(self, rec, m):
        """Average a tracked frame's static, consistent points into its keyframe's map."""
        node = self.graph.nodes[rec.ref_kf]
        if len(m) == 0:
            return
        q, p = m.q, m.p
        Y = rec.rel_pose.act(rec.obs.points[q[:, 1], q[:, 0]])
        Xk = node.points[p[:, 1], p[:, 0]]
        K = self.K_ref
        ok = node.valid[p[:, 1], p[:, 0]] & (Y[:, 2] > 0) & (Xk[:, 2] > 0)
        zy, zk = np.where(ok, Y[:, 2], 1.0), np.where(ok, Xk[:, 2], 1.0)
        uv = np.stack([K.fx * Y[:, 0] / zy + K.cx, K.fy * Y[:, 1] / zy + K.cy], 1)
        uk = np.stack([K.fx * Xk[:, 0] / zk + K.cx, K.fy * Xk[:, 1] / zk + K.cy], 1)
        ok &= np.linalg.norm(uv - uk, axis=1) <= self.cfg.tracking.huber_delta
        ok &= np.abs(np.log(zy / zk)) < 0.05
        if self.cfg.tracking.suppress_dynamic:
            ok &= rec.motion[q[:, 1], q[:, 0]] > self.cfg.gsmap.m_min
            ok &= node.motion[p[:, 1], p[:, 0]] > self.cfg.gsmap.m_min
        if not ok.any():
            return
        w = rec.obs.conf[q[ok, 1], q[ok, 0]]
        pix = p[ok, 1] * node.points.shape[1] + p[ok, 0]
        H, W = node.weights.shape
        wsum = np.bincount(pix, weights=w, minlength=H * W)
        num = np.stack([np.bincount(pix, weights=w * Y[ok, c], minlength=H * W) for c in range(3)], 1)
        has = wsum > 0
        grid = np.zeros((H * W, 3))
        grid[has] = num[has] / wsum[has, None]
        fuse_pointmap(node, grid.reshape(H, W, 3), wsum.reshape(H, W))

    def update_motion_stats(self, rec):
        gt = rec.obs.gt_dynamic
        if gt is None:
            return
        v = rec.obs.valid
        pred = (rec.motion <= self.cfg.gsmap.m_min) & v
        truth = gt & v
        self.motion_counts += [int(np.sum(pred & truth)), int(np.sum(pred & ~truth)), int(np.sum(~pred & truth))]

    # -- mapping -----------------------------------------------------------

    def view(self, fid):
        return TrainingView(fid, self.frame_pose(fid), self.images[fid], self.masks.get(fid))

    def refine_steps(self, current, steps):
        if steps <= 0 or len(self.gmap) == 0:
            return
        hist = [f for f in self.mapped if f != current]
        views = [self.view(f) for f in hist] + [self.view(current)]
        refine(self.gmap, views, self.K_ref, iterations=steps, rng=self.rng, state=self.adam, cfg=self.refine_cfg,
               log=self.refine_log)

    def map_frame(self, rec):
        """Spawn on keyframes and mapper frames, then refine; common frames only refine."""
        g = self.cfg.gsmap
        fid = rec.frame_id
        if not g.enabled or rec.held_out:
            return
        bo = rec.obs
        self.images[fid] = bo.image
        motion = rec.motion
        if self.cfg.tracking.suppress_dynamic:
            motion = erode_motion(rec.motion, g.exclusion_margin)
            self.masks[fid] = motion > g.m_min
        pose = self.frame_pose(fid)
        if rec.cls in (FrameClass.KEYFRAME, FrameClass.MAPPER):
            with self.timed("spawn"):
                res = render(self.gmap, pose, self.K_ref)
                frag, (v, u) = spawn_gaussians(bo, bo.image, res.color, motion, self.K_ref, pose,
                                               tau_a=g.tau_a, m_min=g.m_min, s_prime_max=g.s_prime_max,
                                               sigma=g.sigma, n_levels=g.n_levels, rendered_alpha=res.alpha,
                                               coverage_alpha=g.coverage_alpha, return_pixels=True)
                self.gmap.append(frag)
                self.spawn_log.append((fid, len(frag)))
                if bo.gt_dynamic is not None:
                    self.spawned_on_dynamic += int(np.sum(bo.gt_dynamic[v, u]))
            self.mapped.append(fid)
            steps = g.K
        else:
            steps = g.K // 2
        with self.timed("refine"):
            self.refine_steps(fid, steps)

    # -- driver ------------------------------------------------------------

    def register(self, rec):
        new = advance(self.window, self.graph, [rec])
        if new:
            rec.ref_kf, rec.rel_pose = new[0], Sim3Pose.identity()

    def process_batch(self, new_frames):
        with self.timed("assemble"):
            plan = assemble_batch(self.window, self.graph, new_frames)
        with self.timed("provider"):
            batch = self.fetch(plan)
        with self.timed("intrinsics"):
            batch = self.calibrate(batch)
        obs = {o.frame_id: o for o in batch}
        with self.timed("graph"):
            self.link_historical(plan, obs)
            if self.graph.needs_optimization:
                self.optimize(self.cfg.backend.loop_iters)
        for fid in plan.new_frames:
            if len(self.graph) == 0:
                rec, m = self.bootstrap(fid, obs, batch), None
            else:
                rec, m = self.track_frame(fid, obs)
            with self.timed("graph"):
                self.register(rec)
            if m is not None and rec.cls is not FrameClass.KEYFRAME and rec.tracking_ok and self.cfg.tracking.fuse:
                with self.timed("fuse"):
                    self.fuse(rec, m)
            self.update_motion_stats(rec)
            self.map_frame(rec)

    def finish(self):
        with self.timed("graph"):
            if len(self.graph) > 1:
                self.optimize(self.cfg.backend.max_iters)
        g = self.cfg.gsmap
        if g.enabled and self.mapped and g.final_iters > 0:
            with self.timed("refine"):
                views = [self.view(f) for f in self.mapped]
                cfg = RefineConfig(**{**self.refine_cfg.__dict__, "p_current": 1.0 / len(views)})
                refine(self.gmap, views, self.K_ref, iterations=g.final_iters, rng=self.rng, state=self.adam,
                       cfg=cfg, log=self.refine_log)

    def run(self):
        step = self.window.max_new
        ids = list(range(self.n_frames))
        for s in range(0, len(ids), step):
            self.process_batch(ids[s : s + step])
        self.finish()
        return self.evaluate()

    # -- evaluation and export ---------------------------------------------

    def evaluate(self):
        poses = self.all_poses()
        fids = sorted(poses)
        gt = self.provider.gt_poses()
        ate = ate_se3 = length = None
        if gt is not None:
            ref = [gt[f] for f in fids]
            est = [poses[f] for f in fids]
            ate = ate_rmse(est, ref, "sim3")
            ate_se3 = ate_rmse(est, ref, "se3")
            length = trajectory_length(ref)
        self.eval_images = {}
        scores = []
        if self.cfg.gsmap.enabled:
            with self.timed("eval"):
                for f in fids:
                    if not self.window.records[f].held_out:
                        continue
                    img = render(self.gmap, poses[f], self.K_ref).color
                    self.eval_images[f] = img
                    scores.append(psnr(np.clip(img, 0.0, 1.0), self.provider.frame(f).image))
        recs = self.window.records.values()
        tp, fp, fn = (int(x) for x in self.motion_counts)
        metrics = {
            "ate_rmse": ate,
            "ate_rmse_se3": ate_se3,
            "trajectory_length": length,
            "ate_ratio": ate / length if ate is not None and length else None,
            "n_frames": len(fids),
            "keyframe_count": len(self.graph),
            "mapper_count": sum(r.cls is FrameClass.MAPPER for r in recs),
            "common_count": sum(r.cls is FrameClass.COMMON for r in recs),
            "edge_count": len(self.graph.edges),
            "loop_closures": self.loop_closures,
            "retrieval_edges": self.retrieval_edges,
            "tracking_failures": self.tracking_failures,
            "psnr_mean": float(np.mean(scores)) if scores else None,
            "psnr_min": float(np.min(scores)) if scores else None,
            "eval_views": len(scores),
            "n_gaussians": len(self.gmap),
            "spawned_on_dynamic": self.spawned_on_dynamic,
            "motion_f1": f1_from_counts(tp, fp, fn) if (tp + fp + fn) else None,
            "focal_ref": float(self.K_ref.fx) if self.K_ref is not None else None,
            "seed": int(self.cfg.seed),
        }
        self.poses = poses
        return RunReport(ate, len(self.graph), self.loop_closures, metrics["psnr_mean"], metrics,
                         dict(self.timings))

    def export(self, report: RunReport, out_dir):
        out = Path(out_dir)
        (out / "eval").mkdir(parents=True, exist_ok=True)
        fids = sorted(self.poses)
        write_tum(out / "trajectory.tum", fids, [self.poses[f] for f in fids])
        write_keyframes(self.graph, out / "keyframes.csv")
        write_edges(self.graph, out / "edges.csv")
        write_classification_log(self.window.records.values(), out / "classification.csv")
        write_ply(self.gmap, out / "map.ply")
        for f, img in self.eval_images.items():
            save_png(img, out / "eval" / f"frame_{f:06d}.png")
        (out / "report.json").write_text(report.to_json())
        (out / "timings.json").write_text(json.dumps(report.timings, indent=2, sort_keys=True) + "\n")
        write_ini(self.cfg, out / "config.ini")


def run(cfg: PipelineConfig, provider=None, export=True) -> RunReport:
    """Process the whole stream and (optionally) write every output into ``cfg.output_dir``."""
    cfg.validate()
    t0 = time.perf_counter()
    state = StreamingRun(cfg, provider)
    report = state.run()
    report.timings["total"] = time.perf_counter() - t0
    if export:
        state.export(report, cfg.output_dir)
    return report
