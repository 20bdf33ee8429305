import time

import numpy as np
import pytest
from scipy.optimize import least_squares

from _support import random_pose
from entity_slam.geometry import Pose, between
from entity_slam.graph import FactorGraph, FactorKind, NodeKind, PlaneParam
from entity_slam.optimizer import OptConfig, Problem, optimize, total_cost

Tx = Pose.from_translation


def chain(n, rng, noise=0.0, init_noise=0.3):
    """Odometry chain with a prior on the first node; returns graph and truth."""
    g = FactorGraph()
    truth = [Pose.identity()]
    for _ in range(n - 1):
        truth.append(truth[-1] @ Pose.exp(np.r_[rng.normal(0.5, 0.1, 3), rng.normal(0, 0.1, 3)]))
    nodes = [g.add_node(NodeKind.KEYFRAME, p @ Pose.exp(rng.normal(scale=init_noise, size=6)) if i else p, time=float(i)) for i, p in enumerate(truth)]
    g.add_factor(FactorKind.PRIOR, [nodes[0]], truth[0], 1e6 * np.eye(6))
    for i in range(n - 1):
        m = between(truth[i], truth[i + 1]) @ Pose.exp(rng.normal(scale=noise, size=6))
        g.add_factor(FactorKind.ODOMETRY, [nodes[i], nodes[i + 1]], m, np.eye(6))
    return g, nodes, truth


def test_single_prior_is_already_optimal():
    g = FactorGraph()
    a = g.add_node(NodeKind.KEYFRAME, Pose.identity(), time=0.0)
    g.add_factor(FactorKind.PRIOR, [a], Pose.identity(), 1e6 * np.eye(6))
    rep = optimize(g)
    assert rep.success and rep.final_cost == 0.0
    assert g.value(a).isclose(Pose.identity())


def test_two_keyframes_closed_form():
    g = FactorGraph()
    a = g.add_node(NodeKind.KEYFRAME, Pose.identity(), time=0.0)
    b = g.add_node(NodeKind.KEYFRAME, Pose.identity(), time=1.0)
    g.add_factor(FactorKind.PRIOR, [a], Pose.identity(), 1e6 * np.eye(6))
    g.add_factor(FactorKind.ODOMETRY, [a, b], Tx(1), np.eye(6))
    rep = optimize(g)
    assert rep.success
    assert g.value(b).isclose(Tx(1), 1e-6)


def test_loop_closure_matches_dense_solver():
    # three keyframes whose odometry disagrees with a loop closure
    g = FactorGraph()
    n = [g.add_node(NodeKind.KEYFRAME, Pose.identity(), time=float(i)) for i in range(3)]
    g.add_factor(FactorKind.PRIOR, [n[0]], Pose.identity(), 1e6 * np.eye(6))
    odo = [Pose.from_rotvec([0, 0, 0.1], [1.05, 0.02, 0]), Pose.from_rotvec([0, 0.02, -0.05], [0.97, -0.03, 0.01])]
    W = np.diag([4.0, 4.0, 4.0, 100.0, 100.0, 100.0])
    for i, m in enumerate(odo):
        g.add_factor(FactorKind.ODOMETRY, [n[i], n[i + 1]], m, W)
    loop = Tx(1.9, 0.1)
    Wl = np.diag([25.0, 25.0, 25.0, 100.0, 100.0, 100.0])
    g.add_factor(FactorKind.LOOP_CLOSURE, [n[0], n[2]], loop, Wl)
    rep = optimize(g)
    assert rep.success

    # independent route: dense trust-region solve over global exp coordinates
    factors = [(0, None, Pose.identity(), 1e6 * np.eye(6)), (0, 1, odo[0], W), (1, 2, odo[1], W), (0, 2, loop, Wl)]

    def residuals(v):
        xs = [Pose.exp(v[6 * i : 6 * i + 6]) for i in range(3)]
        out = []
        for i, j, m, info in factors:
            pred = xs[i] if j is None else between(xs[i], xs[j])
            out.append(np.sqrt(np.diag(info)) * between(m, pred).log())
        return np.concatenate(out)

    sol = least_squares(residuals, np.zeros(18), method="lm", xtol=1e-15, ftol=1e-15, gtol=1e-15)
    dense_cost = float(sol.fun @ sol.fun)
    assert rep.final_cost == pytest.approx(dense_cost, abs=1e-6)
    for i in range(3):
        assert g.value(n[i]).isclose(Pose.exp(sol.x[6 * i : 6 * i + 6]), 1e-6)


def test_chain_converges_quadratically():
    g, nodes, truth = chain(30, np.random.default_rng(2))
    rep = optimize(g)
    assert rep.final_cost < 1e-12
    assert rep.iterations <= 10
    for n, p in zip(nodes, truth):
        assert g.value(n).isclose(p, 1e-6)


def test_accepted_steps_never_increase_cost():
    g, _, _ = chain(40, np.random.default_rng(3), noise=0.05, init_noise=0.5)
    rep = optimize(g)
    assert all(b <= a for a, b in zip(rep.cost_history, rep.cost_history[1:]))
    assert rep.final_cost == pytest.approx(total_cost(g))


def test_singular_system_reports_failure_and_keeps_state():
    # an entity seen only through a zero-information factor cannot be solved for
    g = FactorGraph()
    a = g.add_node(NodeKind.KEYFRAME, Pose.identity(), time=0.0)
    e = g.add_node(NodeKind.ENTITY, Tx(1), entity_id=1, time=0.0)
    g.add_factor(FactorKind.PRIOR, [a], Tx(0.5), np.eye(6))
    g.add_factor(FactorKind.KEYFRAME_ENTITY, [a, e], Tx(2), np.zeros((6, 6)))
    rep = optimize(g)
    assert not rep.success
    assert "singular" in rep.message
    assert g.value(e).isclose(Tx(1))


def test_mixed_factor_graph_reaches_zero_cost():
    rng = np.random.default_rng(9)
    g = FactorGraph()
    x0, x1 = Pose.identity(), random_pose(rng, 1.0, 0.5)
    eps = random_pose(rng, 1.0, 0.5)
    floor = 0.0
    plane = PlaneParam([0.2, -0.1, 1.0], 0.4)
    a = g.add_node(NodeKind.KEYFRAME, x0, time=0.0)
    b = g.add_node(NodeKind.KEYFRAME, x1 @ Pose.exp(rng.normal(scale=0.1, size=6)), time=1.0)
    e = g.add_node(NodeKind.ENTITY, eps @ Pose.exp(rng.normal(scale=0.1, size=6)), entity_id=1, time=1.0)
    f = g.add_node(NodeKind.FLOOR, 0.05)
    p = g.add_node(NodeKind.PLANE, plane.retract(np.array([0.05, -0.05, 0.1])))
    g.add_factor(FactorKind.PRIOR, [a], x0, 1e6 * np.eye(6))
    g.add_factor(FactorKind.ODOMETRY, [a, b], between(x0, x1), np.eye(6))
    g.add_factor(FactorKind.KEYFRAME_ENTITY, [b, e], between(x1, eps), np.eye(6))
    g.add_factor(FactorKind.PRIOR, [f], floor, [[100.0]])
    g.add_factor(FactorKind.FLOOR_ENTITY, [f, e], eps.translation[2] - floor, [[100.0]])
    for x, node in ((x0, a), (x1, b)):
        g.add_factor(FactorKind.KEYFRAME_PLANE, [node, p], plane.in_frame(x), np.eye(4))
    rep = optimize(g)
    assert rep.success and rep.final_cost < 1e-12
    assert g.value(e).isclose(eps, 1e-6)
    np.testing.assert_allclose(g.value(p).vector(), plane.vector(), atol=1e-6)


def test_huber_cost_is_continuous_at_threshold():
    g = FactorGraph()
    a = g.add_node(NodeKind.KEYFRAME, Pose.identity(), time=0.0)
    b = g.add_node(NodeKind.KEYFRAME, Tx(2.0), time=1.0)
    g.add_factor(FactorKind.PRIOR, [a], Pose.identity(), np.eye(6))
    g.add_factor(FactorKind.LOOP_CLOSURE, [a, b], Tx(1.0), np.eye(6), robust_delta=1.0)
    # whitened error is exactly 1: quadratic and linear branches agree
    assert total_cost(g) == pytest.approx(1.0)
    g.set_value(b, Tx(4.0))
    assert total_cost(g) == pytest.approx(2 * 1.0 * 3.0 - 1.0)


def test_drift_and_unused_nodes_stay_out_of_the_state():
    g, _, _ = chain(3, np.random.default_rng(1))
    g.add_node(NodeKind.DRIFT, Pose.identity())
    g.add_node(NodeKind.PLANE, PlaneParam([0, 0, 1], 0.0))
    assert Problem(g).dim == 18


def test_five_hundred_node_graph_under_a_second():
    rng = np.random.default_rng(0)
    g, nodes, _ = chain(500, rng, noise=0.01, init_noise=0.05)
    for i in range(0, 480, 20):
        j = i + 15
        g.add_factor(FactorKind.LOOP_CLOSURE, [nodes[i], nodes[j]], between(g.value(nodes[i]), g.value(nodes[j])), np.eye(6))
    t0 = time.perf_counter()
    rep = optimize(g, OptConfig())
    assert time.perf_counter() - t0 < 1.0
    assert rep.success
