import numpy as np
import pytest

from _support import FACTOR_KINDS, jacobian_check, random_pose
from entity_slam.geometry import Pose
from entity_slam.graph import (
    FactorGraph,
    FactorKind,
    GraphError,
    NodeKind,
    PlaneParam,
    graph_from_text,
    residual_floor_entity,
    residual_intra_entity,
    residual_keyframe_entity,
    residual_keyframe_plane,
    residual_odometry,
)

Tx = Pose.from_translation


def test_keyframe_entity_residual_examples():
    meas = Pose.from_rotvec([0.1, 0.2, 0.3], [1, 2, 3])
    np.testing.assert_allclose(residual_keyframe_entity(Pose.identity(), meas, meas), 0, atol=1e-12)
    np.testing.assert_allclose(residual_keyframe_entity(Tx(1), Tx(3), Tx(2)), 0, atol=1e-12)
    np.testing.assert_allclose(residual_keyframe_entity(Pose.identity(), Tx(2.5), Tx(2)), [0.5, 0, 0, 0, 0, 0], atol=1e-12)


def test_intra_and_odometry_residual_examples():
    p = random_pose(np.random.default_rng(0))
    np.testing.assert_allclose(residual_intra_entity(p, p, Pose.identity()), 0, atol=1e-12)
    np.testing.assert_allclose(residual_intra_entity(Pose.identity(), Tx(1), Tx(1)), 0, atol=1e-12)
    np.testing.assert_allclose(residual_intra_entity(Pose.identity(), Tx(1.2), Tx(1)), [0.2, 0, 0, 0, 0, 0], atol=1e-12)
    np.testing.assert_allclose(residual_odometry(p, p, Pose.identity()), 0, atol=1e-12)
    np.testing.assert_allclose(residual_odometry(Pose.identity(), Tx(1), Tx(0.9)), [0.1, 0, 0, 0, 0, 0], atol=1e-12)


def test_floor_entity_residual_examples():
    assert residual_floor_entity(0.0, Pose.from_translation(0, 0, 0.4), 0.4) == pytest.approx(0.0)
    assert residual_floor_entity(0.1, Pose.from_translation(0, 0, 0.5), 0.4) == pytest.approx(0.0)
    assert residual_floor_entity(0.0, Pose.from_translation(0, 0, 0.55), 0.4) == pytest.approx(0.15)


def test_keyframe_plane_residual_examples():
    up = PlaneParam([0, 0, 1], 0.0)
    np.testing.assert_allclose(residual_keyframe_plane(Pose.identity(), up, up), 0, atol=1e-12)
    x = Pose.from_translation(0, 0, 1)
    seen = up.in_frame(x)
    assert seen.distance == pytest.approx(-1.0)
    np.testing.assert_allclose(residual_keyframe_plane(x, up, PlaneParam([0, 0, 1], -1.0)), 0, atol=1e-12)
    np.testing.assert_allclose(residual_keyframe_plane(Pose.identity(), up, PlaneParam([0, 0, 1], 0.1)), [0, 0, 0, 0.1], atol=1e-12)


def test_plane_in_frame_matches_point_transform():
    rng = np.random.default_rng(4)
    pl = PlaneParam(rng.normal(size=3), 1.3)
    x = random_pose(rng)
    pts_world = pl.distance * pl.normal + np.cross(pl.normal, rng.normal(size=(5, 3)))
    local = x.inverse().transform_points(pts_world)
    seen = pl.in_frame(x)
    np.testing.assert_allclose(local @ seen.normal, seen.distance, atol=1e-12)


def test_plane_canonical_sign():
    a = PlaneParam([0, 0, -2.0], -4.0)
    np.testing.assert_allclose(a.normal, [0, 0, 1])
    assert a.distance == pytest.approx(2.0)
    b = PlaneParam([-1.0, 0, 0], 3.0)
    np.testing.assert_allclose(b.normal, [1, 0, 0])
    assert b.distance == pytest.approx(-3.0)
    with pytest.raises(ValueError):
        PlaneParam([0, 0, 0], 1.0)


@pytest.mark.parametrize("kind", FACTOR_KINDS)
def test_analytic_jacobians(kind):
    rng = np.random.default_rng(FACTOR_KINDS.index(kind))
    assert max(jacobian_check(kind, rng) for _ in range(25)) < 1e-5


def test_add_node_rules():
    g = FactorGraph()
    kf = g.add_node(NodeKind.KEYFRAME, Pose.identity(), time=0.0)
    assert kf.kind is NodeKind.KEYFRAME
    g.add_node(NodeKind.ENTITY, Pose.identity(), entity_id=3, time=5.0)
    with pytest.raises(GraphError):
        g.add_node(NodeKind.ENTITY, Pose.identity(), entity_id=3, time=5.0)
    with pytest.raises(GraphError):
        g.add_node(NodeKind.ENTITY, Pose.identity(), entity_id=3, time=4.0)
    f = g.add_node(NodeKind.FLOOR, 0.0)
    assert g.value(f) == 0.0
    with pytest.raises(ValueError):
        g.add_node(NodeKind.KEYFRAME, 1.0)


def test_add_factor_validation():
    g = FactorGraph()
    a = g.add_node(NodeKind.KEYFRAME, Pose.identity(), time=0.0)
    b = g.add_node(NodeKind.KEYFRAME, Pose.identity(), time=1.0)
    e = g.add_node(NodeKind.ENTITY, Pose.identity(), entity_id=1, time=0.0)
    f = g.add_node(NodeKind.FLOOR, 0.0)
    with pytest.raises(GraphError):
        g.add_factor(FactorKind.ODOMETRY, [a, e], Pose.identity(), np.eye(6))
    with pytest.raises(GraphError):
        g.add_factor(FactorKind.ODOMETRY, [a, b], Pose.identity(), np.eye(3))
    with pytest.raises(ValueError):
        g.add_factor(FactorKind.ODOMETRY, [a, b], Pose.identity(), -np.eye(6))
    with pytest.raises(GraphError):
        g.add_factor(FactorKind.FLOOR_ENTITY, [f, e], Pose.identity(), [[1.0]])
    e2 = g.add_node(NodeKind.ENTITY, Pose.identity(), entity_id=1, time=1.0)
    with pytest.raises(GraphError):
        g.add_factor(FactorKind.INTRA_ENTITY, [e2, e], Pose.identity(), np.eye(6))
    g.add_factor(FactorKind.INTRA_ENTITY, [e, e2], Pose.identity(), np.eye(6))
    g.add_factor(FactorKind.FLOOR_ENTITY, [f, e], 0.2, [[100.0]])
    assert len(g.factors) == 2


def test_entity_node_lookup():
    g = FactorGraph()
    n1 = g.add_node(NodeKind.ENTITY, Pose.identity(), entity_id=4, time=1.0)
    n2 = g.add_node(NodeKind.ENTITY, Pose.identity(), entity_id=4, time=3.0)
    assert g.entity_node_at(4, 0.5) is None
    assert g.entity_node_at(4, 1.0) == n1
    assert g.entity_node_at(4, 2.9) == n1
    assert g.entity_node_at(4, 10.0) == n2
    assert g.entity_node_at(9, 10.0) is None


def test_gauge_invariance():
    rng = np.random.default_rng(11)
    G = random_pose(rng)
    poses = [random_pose(rng) for _ in range(4)]
    meas = [random_pose(rng, 0.5, 0.5) for _ in range(3)]
    r1 = [residual_odometry(poses[i], poses[i + 1], meas[i]) for i in range(3)]
    moved = [G @ p for p in poses]
    r2 = [residual_odometry(moved[i], moved[i + 1], meas[i]) for i in range(3)]
    np.testing.assert_allclose(r1, r2, atol=1e-9)


def _mixed_graph():
    rng = np.random.default_rng(5)
    g = FactorGraph()
    a = g.add_node(NodeKind.KEYFRAME, random_pose(rng), time=0.0)
    b = g.add_node(NodeKind.KEYFRAME, random_pose(rng), time=0.5)
    e = g.add_node(NodeKind.ENTITY, random_pose(rng), entity_id=2, time=0.5)
    f = g.add_node(NodeKind.FLOOR, 0.01)
    p = g.add_node(NodeKind.PLANE, PlaneParam([0.1, 0.0, 1.0], 0.3))
    g.add_node(NodeKind.DRIFT, Pose.identity())
    g.add_factor(FactorKind.PRIOR, [a], random_pose(rng), 1e6 * np.eye(6))
    g.add_factor(FactorKind.ODOMETRY, [a, b], random_pose(rng), np.diag([1.0, 2, 3, 4, 5, 6]))
    g.add_factor(FactorKind.KEYFRAME_ENTITY, [b, e], random_pose(rng), np.eye(6))
    g.add_factor(FactorKind.FLOOR_ENTITY, [f, e], 0.2, [[100.0]])
    g.add_factor(FactorKind.PRIOR, [f], 0.0, [[100.0]])
    g.add_factor(FactorKind.KEYFRAME_PLANE, [b, p], PlaneParam([0, 0, 1], 1.0), np.eye(4))
    g.add_factor(FactorKind.LOOP_CLOSURE, [a, b], random_pose(rng), np.eye(6), robust_delta=1.0)
    return g


def test_text_round_trip_is_exact():
    g = _mixed_graph()
    text = g.to_text()
    h = graph_from_text(text)
    assert h.to_text() == text
    assert len(h.factors) == len(g.factors)
    for fa, fb in zip(g.factors, h.factors):
        np.testing.assert_array_equal(g.residual(fa), h.residual(fb))
        assert fa.robust_delta == fb.robust_delta


def test_text_format_rejects_garbage():
    with pytest.raises(ValueError):
        graph_from_text("NODE bogus 0 - - 1 2 3\n")


def test_copy_is_independent():
    g = _mixed_graph()
    h = g.copy()
    kf = g.keyframes()[0]
    h.set_value(kf, Pose.from_translation(9, 9, 9))
    assert not g.value(kf).isclose(h.value(kf))
