import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from oracles import gt_graph

import m3slam.backend as backend
from m3slam.backend import (
    GraphEdge,
    KeyframeGraph,
    KeyframeNode,
    add_keyframe,
    close_loop,
    fuse_pointmap,
    global_descriptor,
    global_energy,
    optimize_global,
    retrieve_candidates,
    write_edges,
    write_keyframes,
)
from m3slam.errors import DisconnectedGraph, ShapeMismatch
from m3slam.geom import Sim3Pose, sim3_exp, so3_exp
from m3slam.matching import CorrespondenceSet, coarse_to_fine_match
from m3slam.prior.scene import make_scene, render_frame


def toy_node(H=4, W=5, seed=0):
    rng = np.random.default_rng(seed)
    pts = rng.normal(size=(H, W, 3))
    return KeyframeNode(0, 0, Sim3Pose.identity(), pts, np.ones((H, W)), None, np.zeros(3), np.ones((H, W)))


# ---------------------------------------------------------------------------
# fusion


def test_fuse_zero_weight_is_noop():
    n = toy_node()
    before = n.points.copy()
    fuse_pointmap(n, np.zeros_like(n.points) + 7, np.zeros(n.weights.shape))
    assert np.array_equal(n.points, before) and np.all(n.weights == 1)


def test_fuse_identical_points_doubles_weight():
    n = toy_node()
    before = n.points.copy()
    fuse_pointmap(n, before.copy(), np.ones(n.weights.shape))
    assert np.allclose(n.points, before, atol=1e-15) and np.all(n.weights == 2)


def test_fuse_three_weighted_points():
    rng = np.random.default_rng(1)
    a, b, c = rng.normal(size=(3, 4, 5, 3))
    n = toy_node()
    n.points, n.weights = a.copy(), np.ones((4, 5))
    fuse_pointmap(n, b, np.full((4, 5), 2.0))
    fuse_pointmap(n, c, np.full((4, 5), 3.0))
    assert np.abs(n.points - (a + 2 * b + 3 * c) / 6).max() < 1e-12


def test_fuse_invalid_pixels_stay_invalid():
    n = toy_node()
    n.weights[:] = 0
    w = np.zeros((4, 5))
    w[0, 0] = 0.5
    fuse_pointmap(n, np.ones_like(n.points), w)
    assert n.valid.sum() == 1 and np.allclose(n.points[0, 0], 1.0)


def test_fuse_shape_mismatch():
    n = toy_node()
    with pytest.raises(ShapeMismatch):
        fuse_pointmap(n, np.zeros((3, 5, 3)), np.zeros((3, 5)))


@given(st.integers(0, 2**31), st.permutations(range(4)))
@settings(max_examples=30, deadline=None)
def test_fuse_order_insensitive(seed, perm):
    rng = np.random.default_rng(seed)
    pts = rng.normal(size=(4, 4, 5, 3))
    ws = rng.uniform(0, 2, size=(4, 4, 5)) * (rng.random((4, 4, 5)) > 0.2)
    a, b = toy_node(), toy_node()
    for n in (a, b):
        n.weights[:] = 0
    for k in range(4):
        fuse_pointmap(a, pts[k], ws[k])
    for k in perm:
        fuse_pointmap(b, pts[k], ws[k])
    assert np.array_equal(a.weights > 0, b.weights > 0)
    assert np.abs(a.points[a.valid] - b.points[b.valid]).max(initial=0) < 1e-12
    # weighted-mean oracle
    tot = ws.sum(0)
    ref = np.einsum("kij,kijc->ijc", ws, pts)[tot > 0] / tot[tot > 0, None]
    assert np.abs(a.points[tot > 0] - ref).max(initial=0) < 1e-12


# ---------------------------------------------------------------------------
# graph construction


def frames(scene, ids):
    return [render_frame(scene, i) for i in ids]


def test_add_keyframe_edges(loop_clean):
    f0, f1, f2 = frames(loop_clean, [0, 3, 6])
    g = KeyframeGraph(loop_clean.intrinsics)
    assert add_keyframe(g, f0, f0.pose) == 0
    assert len(g) == 1 and len(g.edges) == 0
    add_keyframe(g, f1, f1.pose)
    assert len(g.edges) == 1
    e = g.edge(0, 1)
    assert e.kind == "sequential"
    ref = coarse_to_fine_match(f1, f0, f1.pose, f0.pose, loop_clean.intrinsics, max_outside=0)
    assert e.match_count == len(ref) > 0
    assert np.array_equal(e.matches.q, ref.q) and np.array_equal(e.matches.p, ref.p)
    add_keyframe(g, f2, f2.pose)
    assert sorted(g.edges) == [(0, 1), (1, 2)]
    d = global_descriptor(f0)
    assert np.isclose(np.linalg.norm(d), 1.0)
    assert np.allclose(g.nodes[0].weights, np.where(f0.valid, f0.conf, 0))


def test_edge_set_is_simple(loop_clean):
    f0, f1 = frames(loop_clean, [0, 3])
    g = KeyframeGraph(loop_clean.intrinsics)
    add_keyframe(g, f0, f0.pose)
    add_keyframe(g, f1, f1.pose)
    with pytest.raises(ValueError):
        g.add_edge(GraphEdge(1, 0, CorrespondenceSet.empty(0, 1), "retrieval"))
    with pytest.raises(ValueError):
        GraphEdge(1, 1, CorrespondenceSet.empty(1, 1))


# ---------------------------------------------------------------------------
# retrieval and loops


def desc_graph(descs):
    g = KeyframeGraph(None)
    for k, d in enumerate(descs):
        g.nodes.append(KeyframeNode(k, k, Sim3Pose.identity(), None, None, None, np.asarray(d, float), None))
    return g


def test_retrieve_self_first():
    rng = np.random.default_rng(0)
    descs = rng.normal(size=(10, 8))
    descs /= np.linalg.norm(descs, axis=1, keepdims=True)
    g = desc_graph(descs)
    for k in range(10):
        assert retrieve_candidates(g, descs[k], N_c=3)[0] == k
    assert len(retrieve_candidates(g, descs[0])) == 10  # min(23, N_k)
    assert retrieve_candidates(g, descs[9], N_c=3, exclude_recent=1)[0] != 9
    assert retrieve_candidates(g, descs[0], exclude_recent=10) == []


def test_retrieve_ties_by_id():
    descs = np.zeros((5, 4))
    descs[:, 0] = 1.0
    g = desc_graph(descs)
    assert retrieve_candidates(g, [0, 1, 0, 0], N_c=5) == [0, 1, 2, 3, 4]


@pytest.fixture(scope="module")
def loop140():
    return make_scene("loop", n_frames=140, seed=0, noise="default")


def test_retrieve_revisit(loop140):
    rng = np.random.default_rng(0)
    kfs = list(range(0, 115, 6))
    hits = 0
    for trial in range(20):
        s = loop140.with_seed(trial)
        g = desc_graph([global_descriptor(render_frame(s, f)) for f in kfs])
        qf = int(rng.integers(120, 138))
        cands = retrieve_candidates(g, global_descriptor(render_frame(s, qf)), N_c=3, exclude_recent=5)
        # one lap is 120 frames
        best = int(np.argmin([min(abs(qf - 120 - f), abs(qf - f)) for f in kfs]))
        hits += best in cands
    assert hits >= 18


def test_close_loop_duplicate_and_disjoint(loop_clean):
    f0, f20 = frames(loop_clean, [0, 20])
    g = KeyframeGraph(loop_clean.intrinsics)
    add_keyframe(g, f0, f0.pose)
    add_keyframe(g, f20, f20.pose)
    dup = f0.replace(frame_id=99)
    add_keyframe(g, dup, f0.pose)
    # keyframe 1 is already linked to 2 by the sequential edge
    assert close_loop(g, 2, [2]) == []  # self candidate skipped
    added = close_loop(g, 2, [0, 1])
    assert [e.key for e in added] == [(0, 2)]
    assert added[0].kind == "loop"
    assert added[0].match_count / f0.valid.sum() > 0.99
    assert g.needs_optimization


def test_close_loop_rejects_non_overlapping(loop_clean):
    f0, f1 = frames(loop_clean, [0, 1])
    far = render_frame(loop_clean, 39)  # 117 degrees around the loop
    g = KeyframeGraph(loop_clean.intrinsics)
    for f in (f0, f1, far):
        add_keyframe(g, f, f.pose)
    assert close_loop(g, 2, [0]) == []


# ---------------------------------------------------------------------------
# global optimization


def pose_err(A, B):
    return np.abs(A.matrix() - B.matrix()).max()


def test_optimize_at_truth_is_stationary(loop_clean):
    g = gt_graph(loop_clean, [0, 2, 4])
    before = g.poses()
    res = optimize_global(g)
    assert res.initial_cost < 1e-18
    for k in before:
        assert pose_err(before[k], res.poses[k]) < 1e-12


@pytest.mark.parametrize("which", [1, 2, 4])
def test_optimize_recovers_perturbed_pose(loop_clean, which):
    g = gt_graph(loop_clean, [0, 2, 4, 6, 8])
    truth = g.poses()
    T = truth[which]
    dR = so3_exp(np.array([0.03, -0.04, 0.0]))  # 0.05 rad
    t = T.translation * 1.02
    g.nodes[which].pose = Sim3Pose(T.scale, dR @ T.rotation, t)
    res = optimize_global(g, max_iters=50)
    assert all(b <= a for a, b in zip(res.trace, res.trace[1:]))
    for k in truth:
        assert pose_err(res.poses[k], truth[k]) < 1e-4
    assert global_energy(g) <= res.initial_cost


def test_optimize_gauge_invariance(loop_clean):
    rng = np.random.default_rng(3)
    G = sim3_exp([0.3, -1.0, 2.0, 0.2, 0.5, -0.1, 0.4])
    kicks = [sim3_exp(np.concatenate([rng.normal(0, 0.02, 6), [0.01]])) for _ in range(4)]
    rel = []
    for gauge in (Sim3Pose.identity(), G):
        g = gt_graph(loop_clean, [0, 2, 4, 6, 8])
        for k in range(1, 5):
            g.nodes[k].pose = kicks[k - 1] @ g.nodes[k].pose
        for n in g.nodes:
            n.pose = gauge @ n.pose
        res = optimize_global(g, max_iters=50)
        rel.append([res.poses[k].inverse() @ res.poses[k + 1] for k in range(4)])
    for a, b in zip(*rel):
        assert pose_err(a, b) < 1e-8


def test_optimize_noisy_monotone_and_sparse_matches_dense(monkeypatch):
    scene = make_scene("loop", n_frames=16, seed=1, noise="default")
    obs = [render_frame(scene, i) for i in range(0, 16, 3)]
    g = KeyframeGraph(scene.intrinsics)
    for o in obs:
        add_keyframe(g, o, o.pose)
    start = g.poses()
    dense = optimize_global(g, max_iters=10, update=False)
    assert all(b <= a for a, b in zip(dense.trace, dense.trace[1:]))
    assert dense.final_cost < dense.initial_cost
    monkeypatch.setattr(backend, "DENSE_LIMIT", 0)
    sparse = optimize_global(g, max_iters=10, update=False)
    assert g.poses() == start
    for k in start:
        assert pose_err(dense.poses[k], sparse.poses[k]) < 1e-8


def test_disconnected_graph(loop_clean):
    g = gt_graph(loop_clean, [0, 2])
    o = g.nodes[0].obs
    g.nodes.append(KeyframeNode(2, 50, o.pose, o.points, np.ones(o.shape), o, g.nodes[0].global_desc, np.ones(o.shape)))
    with pytest.raises(DisconnectedGraph):
        optimize_global(g)


def test_export(loop_clean, tmp_path):
    g = gt_graph(loop_clean, [0, 2, 4])
    write_keyframes(g, tmp_path / "keyframes.csv")
    write_edges(g, tmp_path / "edges.csv")
    lines = (tmp_path / "edges.csv").read_text().splitlines()
    assert lines[0] == "i,j,kind,match_count"
    assert lines[1].startswith("0,1,sequential,")
    assert len((tmp_path / "keyframes.csv").read_text().splitlines()) == 4
