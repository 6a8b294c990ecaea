import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from oracles import expm_series, random_tangent

from m3slam.errors import AngleAtBranchCut, BehindCamera, NonPositiveDepth
from m3slam.geom import (
    PinholeIntrinsics,
    Sim3Pose,
    backproject,
    oplus,
    project,
    read_tum,
    sim3_exp,
    sim3_log,
    transform_points,
    write_tum,
)


def tangent_strategy():
    f = st.floats(-2.0, 2.0, allow_nan=False)
    return st.tuples(*[f] * 7).map(np.array).filter(lambda t: np.linalg.norm(t[3:6]) < math.pi - 1e-3)


def test_exp_identity():
    assert sim3_exp(np.zeros(7)).allclose(Sim3Pose.identity(), atol=0)


def test_exp_pure_scale():
    P = sim3_exp([0, 0, 0, 0, 0, 0, math.log(2)])
    assert P.scale == pytest.approx(2.0, abs=1e-15)
    assert np.allclose(P.rotation, np.eye(3), atol=0)
    assert np.allclose(P.translation, 0, atol=0)


@pytest.mark.parametrize("seed", range(5))
def test_exp_matches_series(seed):
    rng = np.random.default_rng(seed)
    tau = random_tangent(rng)
    tau[3:6] *= 0.7 / np.linalg.norm(tau[3:6])
    assert np.abs(sim3_exp(tau).matrix() - expm_series(tau)).max() < 1e-8


@pytest.mark.parametrize(
    "tau",
    [
        [0.3, -0.2, 0.1, 1e-7, -2e-7, 1e-7, 0.4],
        [0.3, -0.2, 0.1, 0.001, 0.002, -0.003, 1e-8],
        [1.0, 2.0, -1.0, 0.0, 0.0, 0.0, 0.0],
        [1.0, 2.0, -1.0, 0.5, -0.2, 0.1, -3.0],
        [0.5, 0.1, 0.2, 0.009, 0.0, 0.0, 2.5],
        [0.5, 0.1, 0.2, 0.011, 0.0, 0.0, -2.5],
    ],
)
def test_exp_near_singular_branches(tau):
    tau = np.array(tau)
    assert np.abs(sim3_exp(tau).matrix() - expm_series(tau, 40)).max() < 1e-10


def test_log_identity_and_scale():
    assert np.allclose(sim3_log(Sim3Pose.identity()), 0, atol=0)
    tau = sim3_log(Sim3Pose(2.0, np.eye(3), np.zeros(3)))
    assert tau[6] == pytest.approx(math.log(2))
    assert np.allclose(tau[:6], 0, atol=1e-15)


def test_log_branch_cut():
    R = np.diag([1.0, -1.0, -1.0])
    with pytest.raises(AngleAtBranchCut):
        sim3_log(Sim3Pose(1.0, R, np.zeros(3)))


def test_roundtrip_1000_random():
    rng = np.random.default_rng(1)
    worst = 0.0
    for _ in range(1000):
        tau = random_tangent(rng)
        P = sim3_exp(tau)
        Q = sim3_exp(sim3_log(P))
        worst = max(worst, np.abs(P.matrix() - Q.matrix()).max())
    assert worst < 1e-9


@given(tangent_strategy())
def test_log_exp_property(tau):
    assert np.abs(sim3_log(sim3_exp(tau)) - tau).max() < 1e-9


@given(tangent_strategy(), tangent_strategy(), tangent_strategy())
@settings(max_examples=50)
def test_group_laws(a, b, c):
    A, B, C = sim3_exp(a), sim3_exp(b), sim3_exp(c)
    assert np.abs(((A @ B) @ C).matrix() - (A @ (B @ C)).matrix()).max() < 1e-9
    assert (A @ A.inverse()).allclose(Sim3Pose.identity(), atol=1e-9)
    assert (A.inverse() @ A).allclose(Sim3Pose.identity(), atol=1e-9)
    assert (A @ Sim3Pose.identity()).allclose(A, atol=0)
    assert abs(np.linalg.det(A.rotation) - 1) < 1e-9
    assert np.abs(A.rotation.T @ A.rotation - np.eye(3)).max() < 1e-9


def test_oplus():
    rng = np.random.default_rng(3)
    T = sim3_exp(random_tangent(rng))
    assert oplus(np.zeros(7), T).allclose(T, atol=1e-14)
    t1 = random_tangent(rng, max_angle=1.0)
    assert oplus(t1, Sim3Pose.identity()).allclose(sim3_exp(t1), atol=1e-14)
    t2 = random_tangent(rng, max_angle=1.0)
    lhs = oplus(t2, oplus(t1, T))
    rhs = (sim3_exp(t2) @ sim3_exp(t1)) @ T
    assert np.abs(lhs.matrix() - rhs.matrix()).max() < 1e-9


def test_transform_points():
    pts = np.random.default_rng(0).normal(size=(10, 3))
    assert np.array_equal(transform_points(Sim3Pose.identity(), pts), pts)
    P = Sim3Pose(1.0, np.eye(3), [1, 0, 0])
    assert np.allclose(transform_points(P, np.zeros((1, 3))), [[1, 0, 0]])


@given(tangent_strategy(), st.integers(0, 2**32 - 1))
@settings(max_examples=50)
def test_transform_scaled_isometry_and_inverse(tau, seed):
    P = sim3_exp(tau)
    pts = np.random.default_rng(seed).normal(size=(20, 3))
    back = transform_points(P.inverse(), transform_points(P, pts))
    assert np.abs(back - pts).max() < 1e-10
    q = transform_points(P, pts)
    d0 = np.linalg.norm(pts[1:] - pts[:-1], axis=1)
    d1 = np.linalg.norm(q[1:] - q[:-1], axis=1)
    assert np.abs(d1 - P.scale * d0).max() < 1e-9


def test_project_examples():
    intr = PinholeIntrinsics(100, 100, 50, 50, 101, 101)
    assert np.allclose(project(intr, [0, 0, 3]), [50, 50])
    assert np.allclose(project(intr, [1, 0, 2]), [100, 50])
    with pytest.raises(BehindCamera):
        project(intr, [0, 0, 0])


def test_backproject_examples():
    intr = PinholeIntrinsics(80, 90, 31.5, 23.5, 64, 48)
    assert np.allclose(backproject(intr, [intr.cx, intr.cy], 2.5), [0, 0, 2.5])
    with pytest.raises(NonPositiveDepth):
        backproject(intr, [3, 4], 0.0)


@given(
    st.floats(-5, 5), st.floats(-5, 5), st.floats(0.1, 50),
)
def test_project_backproject_roundtrip(x, y, z):
    intr = PinholeIntrinsics(80, 90, 31.5, 23.5, 64, 48)
    p = np.array([x, y, z])
    assert np.abs(backproject(intr, project(intr, p), z) - p).max() < 1e-10


def test_pixel_roundtrip_on_grid():
    intr = PinholeIntrinsics.centered(40, 48, 36)
    for u in range(0, 48, 5):
        for v in range(0, 36, 5):
            assert np.abs(project(intr, backproject(intr, [u, v], 3.3)) - [u, v]).max() < 1e-10


def test_tum_roundtrip(tmp_path):
    rng = np.random.default_rng(5)
    poses = [sim3_exp(random_tangent(rng, max_angle=2.0)) for _ in range(4)]
    poses.append(Sim3Pose(1.0, poses[0].rotation, poses[0].translation))
    write_tum(tmp_path / "t.tum", range(5), poses)
    stamps, back = read_tum(tmp_path / "t.tum")
    assert list(stamps) == [0, 1, 2, 3, 4]
    for a, b in zip(poses, back):
        assert a.allclose(b, atol=1e-12)
    text = (tmp_path / "t.tum").read_text()
    assert text.count("# scale=") == 4
