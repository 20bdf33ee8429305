"""Sparse Levenberg-Marquardt over a :class:`~entity_slam.graph.FactorGraph`.

The graph is compiled into flat state arrays (pose quaternions and
translations, plane vectors, floor heights) and one batch per factor family,
so each linearization is a handful of vectorized kernel calls followed by a
sparse assembly of the whitened Jacobian.
"""
from __future__ import annotations

import logging
import time
import warnings
from dataclasses import dataclass, field
from typing import Optional

import numpy as np
import scipy.sparse as sp
import scipy.sparse.linalg as spla

from .geometry import Pose, se3_compose, se3_exp
from .graph import (
    FactorGraph,
    FactorKind,
    NodeKind,
    PlaneParam,
    between_kernel,
    floor_entity_kernel,
    keyframe_plane_kernel,
    plane_tangent_basis,
    pose_prior_kernel,
)

log = logging.getLogger(__name__)

_BETWEEN_KINDS = (
    FactorKind.ODOMETRY,
    FactorKind.LOOP_CLOSURE,
    FactorKind.KEYFRAME_ENTITY,
    FactorKind.INTRA_ENTITY,
)


@dataclass
class OptConfig:
    initial_damping: float = 1e-4
    damping_up: float = 10.0
    damping_down: float = 10.0
    max_damping: float = 1e10
    max_iterations: int = 50
    relative_tolerance: float = 1e-9
    absolute_tolerance: float = 1e-24


@dataclass
class OptReport:
    success: bool
    iterations: int
    initial_cost: float
    final_cost: float
    wall_time: float
    message: str = ""
    cost_history: list = field(default_factory=list)

    @property
    def wall_time_ms(self) -> float:
        return 1e3 * self.wall_time


class _State:
    """Flat copy of the optimizable node values."""

    def __init__(self, q, t, planes, floors):
        self.q = q
        self.t = t
        self.planes = planes
        self.floors = floors

    def retract(self, delta, pose_off, plane_off, floor_off) -> "_State":
        q, t = self.q, self.t
        if len(q):
            dq, dt = se3_exp(delta[pose_off[:, None] + np.arange(6)])
            q, t = se3_compose(q, t, dq, dt)
            q = q / np.linalg.norm(q, axis=-1, keepdims=True)
        planes = self.planes
        if len(planes):
            d = delta[plane_off[:, None] + np.arange(3)]
            n = planes[:, :3] + np.einsum("pij,pj->pi", plane_tangent_basis(planes[:, :3]), d[:, :2])
            n /= np.linalg.norm(n, axis=-1, keepdims=True)
            planes = np.concatenate([n, (planes[:, 3] + d[:, 2])[:, None]], axis=1)
        floors = self.floors
        if len(floors):
            floors = floors + delta[floor_off]
        return _State(q, t, planes, floors)


class _Group:
    """A batch of same-family factors: node slots, measurements, sqrt information."""

    def __init__(self, family, slots, meas, L, robust):
        self.family = family
        self.slots = [np.asarray(s, dtype=int) for s in slots]
        self.meas = meas
        self.L = np.asarray(L)
        self.robust = np.asarray(robust, dtype=float)


class Problem:
    """Compiled view of a graph; node values are read once and written back by :meth:`store`."""

    def __init__(self, graph: FactorGraph):
        self.graph = graph
        used = {n for f in graph.factors for n in f.node_ids}
        poses, planes, floors = [], [], []
        for n in graph.nodes:
            if n not in used or n.kind is NodeKind.DRIFT:
                continue
            if n.kind in (NodeKind.KEYFRAME, NodeKind.ENTITY):
                poses.append(n)
            elif n.kind is NodeKind.PLANE:
                planes.append(n)
            elif n.kind is NodeKind.FLOOR:
                floors.append(n)
        self.pose_nodes, self.plane_nodes, self.floor_nodes = poses, planes, floors
        self.slot = {n: i for i, n in enumerate(poses)}
        self.slot.update({n: i for i, n in enumerate(planes)})
        self.slot.update({n: i for i, n in enumerate(floors)})
        self.pose_off = 6 * np.arange(len(poses))
        self.plane_off = 6 * len(poses) + 3 * np.arange(len(planes))
        self.floor_off = 6 * len(poses) + 3 * len(planes) + np.arange(len(floors))
        self.dim = 6 * len(poses) + 3 * len(planes) + len(floors)

        pv = [graph.nodes[n] for n in poses]
        self.state = _State(
            np.array([p.rotation for p in pv]).reshape(-1, 4),
            np.array([p.translation for p in pv]).reshape(-1, 3),
            np.array([graph.nodes[n].vector() for n in planes]).reshape(-1, 4),
            np.array([graph.nodes[n] for n in floors], dtype=float),
        )
        self.groups = self._compile(graph)

    def _compile(self, graph):
        buckets: dict[str, list] = {}
        for f in graph.factors:
            if f.kind in _BETWEEN_KINDS:
                family = "between"
            elif f.kind is FactorKind.FLOOR_ENTITY:
                family = "floor_entity"
            elif f.kind is FactorKind.KEYFRAME_PLANE:
                family = "plane"
            elif f.node_ids[0].kind is NodeKind.FLOOR:
                family = "floor_prior"
            else:
                family = "pose_prior"
            buckets.setdefault(family, []).append(f)
        groups = []
        for family, fs in buckets.items():
            slots = list(zip(*[[self.slot[n] for n in f.node_ids] for f in fs]))
            if family in ("between", "pose_prior"):
                meas = (
                    np.array([f.measurement.rotation for f in fs]),
                    np.array([f.measurement.translation for f in fs]),
                )
            elif family == "plane":
                meas = np.array([f.measurement.vector() for f in fs])
            else:
                meas = np.array([f.measurement for f in fs], dtype=float)
            robust = [np.inf if f.robust_delta is None else f.robust_delta for f in fs]
            groups.append(_Group(family, slots, meas, [f.sqrt_info for f in fs], robust))
        return groups

    # -- evaluation ------------------------------------------------------------

    def _offsets(self, family, k):
        if family == "plane" and k == 1:
            return self.plane_off, 3
        if family == "floor_entity" and k == 0:
            return self.floor_off, 1
        if family == "floor_prior":
            return self.floor_off, 1
        return self.pose_off, 6

    def _evaluate_group(self, g: _Group, s: _State, jacobians: bool):
        fam = g.family
        if fam == "between":
            a, b = g.slots
            r, JA, JB = between_kernel(s.q[a], s.t[a], s.q[b], s.t[b], *g.meas)
            blocks = [JA, JB]
        elif fam == "pose_prior":
            (a,) = g.slots
            r, J = pose_prior_kernel(s.q[a], s.t[a], *g.meas)
            blocks = [J]
        elif fam == "floor_entity":
            f, e = g.slots
            r, JF, JE = floor_entity_kernel(s.floors[f], s.q[e], s.t[e], g.meas)
            blocks = [JF, JE]
        elif fam == "floor_prior":
            (f,) = g.slots
            r = (s.floors[f] - g.meas)[:, None]
            blocks = [np.ones((len(f), 1, 1))]
        else:
            k, p = g.slots
            pl = s.planes[p]
            r, JK, JP = keyframe_plane_kernel(s.q[k], s.t[k], pl[:, :3], pl[:, 3], g.meas[:, :3], g.meas[:, 3])
            blocks = [JK, JP]
        rw = np.einsum("nij,nj->ni", g.L, r)
        sq = np.sum(rw * rw, axis=1)
        e = np.sqrt(sq)
        huber = e > g.robust
        terms = sq.copy()
        terms[huber] = 2.0 * g.robust[huber] * e[huber] - g.robust[huber] ** 2
        cost = terms.sum()
        if not jacobians:
            return cost, None, None
        w = np.ones_like(e)
        w[huber] = np.sqrt(g.robust[huber] / e[huber])
        rw = rw * w[:, None]
        blocks = [(g.L @ J) * w[:, None, None] for J in blocks]
        return cost, rw, blocks

    def cost(self, s: Optional[_State] = None) -> float:
        s = self.state if s is None else s
        return float(sum(self._evaluate_group(g, s, False)[0] for g in self.groups))

    def linearize(self, s: _State):
        rows, cols, vals, res = [], [], [], []
        cost = 0.0
        row0 = 0
        for g in self.groups:
            c, rw, blocks = self._evaluate_group(g, s, True)
            cost += c
            n, m = rw.shape
            res.append(rw.ravel())
            rbase = row0 + m * np.arange(n)
            for k, J in enumerate(blocks):
                off, d = self._offsets(g.family, k)
                cbase = off[g.slots[k]]
                rr = rbase[:, None, None] + np.arange(m)[None, :, None]
                cc = cbase[:, None, None] + np.arange(d)[None, None, :]
                rows.append(np.broadcast_to(rr, J.shape).ravel())
                cols.append(np.broadcast_to(cc, J.shape).ravel())
                vals.append(J.ravel())
            row0 += n * m
        J = sp.csr_matrix(
            (np.concatenate(vals), (np.concatenate(rows), np.concatenate(cols))),
            shape=(row0, self.dim),
        )
        return float(cost), J, np.concatenate(res)

    def store(self, s: Optional[_State] = None) -> None:
        s = self.state if s is None else s
        g = self.graph
        for i, n in enumerate(self.pose_nodes):
            g.nodes[n] = Pose(s.q[i], s.t[i])
        for i, n in enumerate(self.plane_nodes):
            g.nodes[n] = PlaneParam(s.planes[i, :3], s.planes[i, 3])
        for i, n in enumerate(self.floor_nodes):
            g.nodes[n] = float(s.floors[i])


def total_cost(graph: FactorGraph) -> float:
    """Sum of (robustified) whitened squared residuals at the current node values."""
    if not graph.factors:
        return 0.0
    return Problem(graph).cost()


def optimize(graph: FactorGraph, config: Optional[OptConfig] = None) -> OptReport:
    """Minimize the total weighted squared cost in place.

    Accepted steps never increase the cost. When every damping level yields
    a singular system the graph keeps its last accepted state and the report
    has ``success=False``.
    """
    cfg = config or OptConfig()
    t0 = time.perf_counter()
    if not graph.factors:
        return OptReport(True, 0, 0.0, 0.0, time.perf_counter() - t0, "empty graph")
    prob = Problem(graph)
    state = prob.state
    cost, J, r = prob.linearize(state)
    initial = cost
    history = [cost]
    lam = cfg.initial_damping
    iterations = 0
    success, message = True, "converged"
    while iterations < cfg.max_iterations:
        if cost <= cfg.absolute_tolerance:
            message = "cost below absolute tolerance"
            break
        H = (J.T @ J).tocsc()
        g = J.T @ r
        diag = H.diagonal()
        accepted = False
        solved_any = False
        while lam <= cfg.max_damping:
            A = H + sp.diags(lam * diag, format="csc")
            try:
                with warnings.catch_warnings():
                    warnings.simplefilter("ignore")
                    # H is symmetric positive (semi-)definite: symmetric ordering, no pivoting
                    lu = spla.splu(A, permc_spec="MMD_AT_PLUS_A", diag_pivot_thresh=0.0, options={"SymmetricMode": True})
                    delta = lu.solve(-g)
            except RuntimeError:
                delta = None
            if delta is None or not np.all(np.isfinite(delta)):
                lam *= cfg.damping_up
                continue
            solved_any = True
            candidate = state.retract(delta, prob.pose_off, prob.plane_off, prob.floor_off)
            new_cost = prob.cost(candidate)
            if new_cost < cost:
                accepted = True
                break
            lam *= cfg.damping_up
        iterations += 1
        if not accepted:
            if not solved_any:
                success, message = False, "singular normal equations, damping exhausted"
            else:
                message = "no further decrease"
            break
        decrease = cost - new_cost
        state = candidate
        cost = new_cost
        history.append(cost)
        lam = max(lam / cfg.damping_down, 1e-12)
        if decrease <= cfg.relative_tolerance * history[-2]:
            break
        cost, J, r = prob.linearize(state)
    else:
        message = "max iterations"
    prob.store(state)
    report = OptReport(success, iterations, initial, cost, time.perf_counter() - t0, message, history)
    log.debug("optimize: %s after %d iterations, cost %.3e -> %.3e", message, iterations, initial, cost)
    return report
