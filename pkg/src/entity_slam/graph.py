"""Typed factor graph over keyframes, time-indexed entity poses, planes and the floor.

All pose residuals follow one convention, ``log(meas^-1 * predicted)``, and
information matrices are expressed in that tangent space. Poses are
perturbed on the right, ``X <- X * exp(delta)``; planes through a 2-D normal
tangent plus an additive distance; the floor additively.

The ``*_kernel`` functions broadcast over leading axes and return the
residual together with the Jacobian blocks for each connected node; the
public ``residual_*`` functions are their single-factor views.
"""
from __future__ import annotations

import enum
import math
from dataclasses import dataclass, field
from typing import Iterable, Optional, Union

import numpy as np

from .geometry import (
    Pose,
    check_psd,
    quat_to_matrix,
    se3_adjoint,
    se3_between,
    se3_compose,
    se3_inverse,
    se3_log,
    se3_right_jacobian_inv,
    skew,
    sqrt_information,
)


class NodeKind(enum.Enum):
    KEYFRAME = "KEYFRAME"
    ENTITY = "ENTITY"
    PLANE = "PLANE"
    FLOOR = "FLOOR"
    DRIFT = "DRIFT"


class FactorKind(enum.Enum):
    ODOMETRY = "ODOMETRY"
    KEYFRAME_ENTITY = "KEYFRAME_ENTITY"
    INTRA_ENTITY = "INTRA_ENTITY"
    FLOOR_ENTITY = "FLOOR_ENTITY"
    KEYFRAME_PLANE = "KEYFRAME_PLANE"
    LOOP_CLOSURE = "LOOP_CLOSURE"
    PRIOR = "PRIOR"


@dataclass(frozen=True)
class NodeId:
    kind: NodeKind
    index: int
    entity_id: Optional[int] = None
    time: Optional[float] = None

    def ref(self) -> str:
        return f"{self.kind.value}:{self.index}"


def _canonical_sign(n: np.ndarray) -> float:
    for v in (n[2], n[0], n[1]):
        if abs(v) > 1e-12:
            return 1.0 if v > 0 else -1.0
    return 1.0


@dataclass(frozen=True, eq=False)
class PlaneParam:
    """Plane ``{p : normal . p = distance}``; sign fixed so that n_z >= 0 (ties: n_x, then n_y)."""

    normal: np.ndarray
    distance: float

    def __post_init__(self):
        n = np.asarray(self.normal, dtype=float).reshape(3)
        norm = np.linalg.norm(n)
        if not np.isfinite(norm) or norm < 1e-12:
            raise ValueError("plane normal must be a non-zero finite vector")
        d = float(self.distance) / norm
        n = n / norm
        s = _canonical_sign(n)
        n = s * n
        n.flags.writeable = False
        object.__setattr__(self, "normal", n)
        object.__setattr__(self, "distance", s * d)

    def vector(self) -> np.ndarray:
        return np.append(self.normal, self.distance)

    def in_frame(self, pose: Pose) -> "PlaneParam":
        """The same plane expressed in the frame of ``pose`` (pose maps frame -> world)."""
        return PlaneParam(pose.R.T @ self.normal, self.distance - self.normal @ pose.translation)

    def tangent_basis(self) -> np.ndarray:
        return plane_tangent_basis(self.normal)

    def retract(self, delta: np.ndarray) -> "PlaneParam":
        delta = np.asarray(delta, dtype=float)
        n = self.normal + self.tangent_basis() @ delta[:2]
        return PlaneParam(n / np.linalg.norm(n), self.distance + delta[2])


def plane_tangent_basis(n: np.ndarray) -> np.ndarray:
    """3x2 orthonormal basis of the plane orthogonal to unit ``n`` (vectorized)."""
    n = np.asarray(n, dtype=float)
    axis = np.argmin(np.abs(n), axis=-1)
    a = np.zeros(n.shape)
    np.put_along_axis(a, axis[..., None], 1.0, axis=-1)
    b1 = a - np.sum(a * n, axis=-1, keepdims=True) * n
    b1 /= np.linalg.norm(b1, axis=-1, keepdims=True)
    b2 = np.cross(n, b1)
    return np.stack([b1, b2], axis=-1)


Value = Union[Pose, PlaneParam, float]

_POSE_KINDS = (NodeKind.KEYFRAME, NodeKind.ENTITY, NodeKind.DRIFT)

# allowed node kinds per factor, in order
_FACTOR_SIGNATURES: dict[FactorKind, tuple[tuple[NodeKind, ...], ...]] = {
    FactorKind.ODOMETRY: ((NodeKind.KEYFRAME, NodeKind.KEYFRAME),),
    FactorKind.LOOP_CLOSURE: ((NodeKind.KEYFRAME, NodeKind.KEYFRAME),),
    FactorKind.KEYFRAME_ENTITY: ((NodeKind.KEYFRAME, NodeKind.ENTITY),),
    FactorKind.INTRA_ENTITY: ((NodeKind.ENTITY, NodeKind.ENTITY),),
    FactorKind.FLOOR_ENTITY: ((NodeKind.FLOOR, NodeKind.ENTITY),),
    FactorKind.KEYFRAME_PLANE: ((NodeKind.KEYFRAME, NodeKind.PLANE),),
    FactorKind.PRIOR: ((NodeKind.KEYFRAME,), (NodeKind.ENTITY,), (NodeKind.FLOOR,)),
}

TANGENT_DIM = {NodeKind.KEYFRAME: 6, NodeKind.ENTITY: 6, NodeKind.PLANE: 3, NodeKind.FLOOR: 1}


@dataclass(eq=False)
class Factor:
    kind: FactorKind
    node_ids: tuple[NodeId, ...]
    measurement: Value
    info: np.ndarray
    robust_delta: Optional[float] = None
    sqrt_info: np.ndarray = field(init=False, repr=False)

    def __post_init__(self):
        self.node_ids = tuple(self.node_ids)
        self.info = np.atleast_2d(np.asarray(self.info, dtype=float))
        self.sqrt_info = sqrt_information(self.info)

    @property
    def residual_dim(self) -> int:
        return self.info.shape[0]


# ---------------------------------------------------------------------------
# residual kernels


def between_kernel(qa, ta, qb, tb, qm, tm):
    """r = log(M^-1 A^-1 B) and its Jacobians w.r.t. A and B."""
    qe, te = se3_between(qa, ta, qb, tb)
    qr, tr = se3_compose(*se3_inverse(qm, tm), qe, te)
    r = se3_log(qr, tr)
    Jinv = se3_right_jacobian_inv(r)
    JA = -Jinv @ se3_adjoint(*se3_between(qb, tb, qa, ta))
    return r, JA, Jinv


def pose_prior_kernel(q, t, qm, tm):
    qr, tr = se3_between(qm, tm, q, t)
    r = se3_log(qr, tr)
    return r, se3_right_jacobian_inv(r)


def floor_entity_kernel(z_floor, q, t, z_ref):
    """r = (eps_z - floor_z) - z_ref."""
    z_floor = np.asarray(z_floor, dtype=float)
    t = np.asarray(t, dtype=float)
    r = (t[..., 2] - z_floor) - np.asarray(z_ref, dtype=float)
    J_eps = np.zeros(np.shape(r) + (1, 6))
    J_eps[..., 0, :3] = quat_to_matrix(q)[..., 2, :]
    J_floor = -np.ones(np.shape(r) + (1, 1))
    return r[..., None], J_floor, J_eps


def keyframe_plane_kernel(q, t, n, d, n_meas, d_meas):
    """r = meas - plane seen from the keyframe, sign-aligned with the measurement."""
    q = np.asarray(q, dtype=float)
    t = np.asarray(t, dtype=float)
    n = np.asarray(n, dtype=float)
    d = np.asarray(d, dtype=float)
    R = quat_to_matrix(q)
    n_local = np.einsum("...ji,...j->...i", R, n)
    d_local = d - np.sum(n * t, axis=-1)
    s = np.where(np.sum(n_local * np.asarray(n_meas), axis=-1) < 0.0, -1.0, 1.0)
    r = np.concatenate(
        [np.asarray(n_meas) - s[..., None] * n_local, (np.asarray(d_meas) - s * d_local)[..., None]],
        axis=-1,
    )
    B = plane_tangent_basis(n)
    sc = s[..., None, None]
    J_pose = np.zeros(np.shape(s) + (4, 6))
    J_pose[..., :3, 3:] = -sc * skew(n_local)
    J_pose[..., 3, :3] = s[..., None] * np.einsum("...j,...ji->...i", n, R)
    J_plane = np.zeros(np.shape(s) + (4, 3))
    J_plane[..., :3, :2] = -sc * np.einsum("...ji,...jk->...ik", R, B)
    J_plane[..., 3, :2] = s[..., None] * np.einsum("...j,...jk->...k", t, B)
    J_plane[..., 3, 2] = -s
    return r, J_pose, J_plane


# ---------------------------------------------------------------------------
# single-factor residuals


def residual_keyframe_entity(x_R: Pose, eps: Pose, meas: Pose) -> np.ndarray:
    return between_kernel(
        x_R.rotation, x_R.translation, eps.rotation, eps.translation, meas.rotation, meas.translation
    )[0]


def residual_intra_entity(eps_prev: Pose, eps_cur: Pose, model: Pose) -> np.ndarray:
    return between_kernel(
        eps_prev.rotation,
        eps_prev.translation,
        eps_cur.rotation,
        eps_cur.translation,
        model.rotation,
        model.translation,
    )[0]


def residual_odometry(x_a: Pose, x_b: Pose, meas: Pose) -> np.ndarray:
    return between_kernel(
        x_a.rotation, x_a.translation, x_b.rotation, x_b.translation, meas.rotation, meas.translation
    )[0]


residual_loop_closure = residual_odometry


def residual_floor_entity(floor_z: float, eps: Pose, z_ref: float) -> float:
    return float(floor_entity_kernel(floor_z, eps.rotation, eps.translation, z_ref)[0][0])


def residual_keyframe_plane(x_R: Pose, plane: PlaneParam, meas: PlaneParam) -> np.ndarray:
    return keyframe_plane_kernel(
        x_R.rotation, x_R.translation, plane.normal, plane.distance, meas.normal, meas.distance
    )[0]


def residual_prior(value: Value, meas: Value) -> np.ndarray:
    if isinstance(value, Pose):
        return pose_prior_kernel(value.rotation, value.translation, meas.rotation, meas.translation)[0]
    return np.array([float(value) - float(meas)])


# ---------------------------------------------------------------------------


class GraphError(ValueError):
    pass


class FactorGraph:
    """Nodes keyed by :class:`NodeId` plus a flat list of factors.

    Single writer; :meth:`copy` gives an independent snapshot for readers.
    """

    def __init__(self):
        self.nodes: dict[NodeId, Value] = {}
        self.factors: list[Factor] = []
        self._next_index: dict[NodeKind, int] = {k: 0 for k in NodeKind}
        self._tracks: dict[int, list[NodeId]] = {}

    # -- nodes ---------------------------------------------------------------

    def add_node(
        self,
        kind: NodeKind,
        value: Value,
        entity_id: Optional[int] = None,
        time: Optional[float] = None,
    ) -> NodeId:
        value = _check_value(kind, value)
        if kind is NodeKind.ENTITY:
            if entity_id is None or time is None:
                raise GraphError("entity nodes need an entity_id and a time")
            track = self._tracks.setdefault(int(entity_id), [])
            if any(n.time == float(time) for n in track):
                raise GraphError(f"entity {entity_id} already has a node at t={time}")
            if track and track[-1].time > float(time):
                raise GraphError(f"entity {entity_id} nodes must be added in time order")
        node = NodeId(
            kind,
            self._next_index[kind],
            None if entity_id is None else int(entity_id),
            None if time is None else float(time),
        )
        self._next_index[kind] += 1
        self.nodes[node] = value
        if kind is NodeKind.ENTITY:
            self._tracks[node.entity_id].append(node)
        return node

    def value(self, node: NodeId) -> Value:
        return self.nodes[node]

    def set_value(self, node: NodeId, value: Value) -> None:
        if node not in self.nodes:
            raise KeyError(node)
        self.nodes[node] = _check_value(node.kind, value)

    def nodes_of(self, kind: NodeKind) -> list[NodeId]:
        return [n for n in self.nodes if n.kind is kind]

    def keyframes(self) -> list[NodeId]:
        return self.nodes_of(NodeKind.KEYFRAME)

    def entity_ids(self) -> list[int]:
        return sorted(self._tracks)

    def entity_track(self, entity_id: int) -> list[NodeId]:
        return list(self._tracks.get(entity_id, ()))

    def entity_node_at(self, entity_id: int, time: float) -> Optional[NodeId]:
        """Latest node of ``entity_id`` with node time <= ``time``."""
        best = None
        for n in self._tracks.get(entity_id, ()):
            if n.time <= time:
                best = n
            else:
                break
        return best

    # -- factors -------------------------------------------------------------

    def add_factor(
        self,
        kind: FactorKind,
        node_ids: Iterable[NodeId],
        measurement: Value,
        info,
        robust_delta: Optional[float] = None,
    ) -> Factor:
        node_ids = tuple(node_ids)
        kinds = tuple(n.kind for n in node_ids)
        if kinds not in _FACTOR_SIGNATURES[kind]:
            raise GraphError(f"{kind.value} cannot connect nodes of kind {[k.value for k in kinds]}")
        for n in node_ids:
            if n not in self.nodes:
                raise GraphError(f"unknown node {n.ref()}")
        if kind is FactorKind.INTRA_ENTITY:
            a, b = node_ids
            if a.entity_id != b.entity_id or not a.time < b.time:
                raise GraphError("intra-entity factors link earlier to later nodes of one entity")
        dim = _residual_dim(kind, node_ids)
        info = np.atleast_2d(np.asarray(info, dtype=float))
        if info.shape != (dim, dim):
            raise GraphError(f"{kind.value} expects a {dim}x{dim} information matrix, got {info.shape}")
        check_psd(info)
        if dim == 1 and not isinstance(measurement, (int, float, np.floating)):
            raise GraphError(f"{kind.value} expects a scalar measurement")
        if kind is FactorKind.KEYFRAME_PLANE and not isinstance(measurement, PlaneParam):
            raise GraphError("KEYFRAME_PLANE expects a PlaneParam measurement")
        if dim == 6 and not isinstance(measurement, Pose):
            raise GraphError(f"{kind.value} expects a Pose measurement")
        if dim == 1:
            measurement = float(measurement)
        factor = Factor(kind, node_ids, measurement, info, robust_delta)
        self.factors.append(factor)
        return factor

    def factors_of(self, kind: FactorKind) -> list[Factor]:
        return [f for f in self.factors if f.kind is kind]

    def residual(self, factor: Factor) -> np.ndarray:
        """Unwhitened residual of one factor at the current node values."""
        vals = [self.nodes[n] for n in factor.node_ids]
        k = factor.kind
        if k in (FactorKind.ODOMETRY, FactorKind.LOOP_CLOSURE, FactorKind.KEYFRAME_ENTITY, FactorKind.INTRA_ENTITY):
            return residual_odometry(vals[0], vals[1], factor.measurement)
        if k is FactorKind.FLOOR_ENTITY:
            return np.array([residual_floor_entity(vals[0], vals[1], factor.measurement)])
        if k is FactorKind.KEYFRAME_PLANE:
            return residual_keyframe_plane(vals[0], vals[1], factor.measurement)
        return residual_prior(vals[0], factor.measurement)

    def copy(self) -> "FactorGraph":
        g = FactorGraph()
        g.nodes = dict(self.nodes)
        g.factors = list(self.factors)
        g._next_index = dict(self._next_index)
        g._tracks = {k: list(v) for k, v in self._tracks.items()}
        return g

    def __len__(self) -> int:
        return len(self.nodes)

    # -- text format ---------------------------------------------------------

    def to_text(self) -> str:
        """Line-oriented dump; see :func:`graph_from_text` for the grammar."""
        lines = ["# entity_slam graph v1"]
        for node, value in self.nodes.items():
            eid = "-" if node.entity_id is None else str(node.entity_id)
            t = "-" if node.time is None else repr(node.time)
            lines.append(" ".join(["NODE", node.kind.value, str(node.index), eid, t, *_fmt(_value_list(value))]))
        for f in self.factors:
            info = f.info[np.triu_indices(f.info.shape[0])]
            parts = ["FACTOR", f.kind.value, str(len(f.node_ids)), *(n.ref() for n in f.node_ids)]
            parts += ["MEAS", *_fmt(_value_list(f.measurement)), "INFO", *_fmt(info)]
            if f.robust_delta is not None:
                parts += ["HUBER", repr(float(f.robust_delta))]
            lines.append(" ".join(parts))
        return "\n".join(lines) + "\n"

    def save(self, path) -> None:
        with open(path, "w", encoding="utf-8") as fh:
            fh.write(self.to_text())


def _fmt(values) -> list[str]:
    return [repr(float(v)) for v in values]


def _value_list(value: Value) -> list[float]:
    if isinstance(value, Pose):
        return value.to_list()
    if isinstance(value, PlaneParam):
        return list(value.vector())
    return [float(value)]


def _check_value(kind: NodeKind, value: Value) -> Value:
    if kind in _POSE_KINDS:
        if not isinstance(value, Pose):
            raise GraphError(f"{kind.value} nodes hold a Pose")
        return value
    if kind is NodeKind.PLANE:
        if not isinstance(value, PlaneParam):
            raise GraphError("PLANE nodes hold a PlaneParam")
        return value
    if isinstance(value, (Pose, PlaneParam)) or not math.isfinite(float(value)):
        raise GraphError("FLOOR nodes hold a finite scalar height")
    return float(value)


def _residual_dim(kind: FactorKind, node_ids) -> int:
    if kind is FactorKind.FLOOR_ENTITY:
        return 1
    if kind is FactorKind.KEYFRAME_PLANE:
        return 4
    if kind is FactorKind.PRIOR and node_ids[0].kind is NodeKind.FLOOR:
        return 1
    return 6


def graph_from_text(text: str) -> FactorGraph:
    """Parse the :meth:`FactorGraph.to_text` format.

    Grammar, one record per line (``#`` starts a comment)::

        NODE <kind> <index> <entity_id|-> <time|-> <values...>
        FACTOR <kind> <n> <kind:index>*n MEAS <values...> INFO <upper-triangle...> [HUBER <delta>]

    Pose values are ``tx ty tz qx qy qz qw``, planes ``nx ny nz d``, floors ``z``.
    """
    g = FactorGraph()
    by_ref: dict[str, NodeId] = {}
    for lineno, raw in enumerate(text.splitlines(), 1):
        line = raw.strip()
        if not line or line.startswith("#"):
            continue
        tok = line.split()
        try:
            if tok[0] == "NODE":
                kind = NodeKind(tok[1])
                node = NodeId(
                    kind,
                    int(tok[2]),
                    None if tok[3] == "-" else int(tok[3]),
                    None if tok[4] == "-" else float(tok[4]),
                )
                g.nodes[node] = _parse_value(kind, [float(v) for v in tok[5:]])
                g._next_index[kind] = max(g._next_index[kind], node.index + 1)
                if kind is NodeKind.ENTITY:
                    g._tracks.setdefault(node.entity_id, []).append(node)
                by_ref[node.ref()] = node
            elif tok[0] == "FACTOR":
                kind = FactorKind(tok[1])
                n = int(tok[2])
                nodes = tuple(by_ref[r] for r in tok[3 : 3 + n])
                i_meas = tok.index("MEAS")
                i_info = tok.index("INFO")
                i_hub = tok.index("HUBER") if "HUBER" in tok else len(tok)
                meas_vals = [float(v) for v in tok[i_meas + 1 : i_info]]
                info_vals = np.array([float(v) for v in tok[i_info + 1 : i_hub]])
                dim = _residual_dim(kind, nodes)
                info = np.zeros((dim, dim))
                info[np.triu_indices(dim)] = info_vals
                info = info + np.triu(info, 1).T
                if dim == 6:
                    meas = Pose.from_list(meas_vals)
                elif kind is FactorKind.KEYFRAME_PLANE:
                    meas = PlaneParam(meas_vals[:3], meas_vals[3])
                else:
                    meas = meas_vals[0]
                delta = float(tok[i_hub + 1]) if i_hub < len(tok) else None
                g.add_factor(kind, nodes, meas, info, delta)
            else:
                raise GraphError(f"unknown record {tok[0]!r}")
        except (IndexError, KeyError, ValueError) as exc:
            raise GraphError(f"line {lineno}: {exc}") from exc
    for track in g._tracks.values():
        track.sort(key=lambda n: n.time)
    return g


def _parse_value(kind: NodeKind, vals: list[float]) -> Value:
    if kind in _POSE_KINDS:
        return Pose.from_list(vals)
    if kind is NodeKind.PLANE:
        return PlaneParam(vals[:3], vals[3])
    return float(vals[0])


def load_graph(path) -> FactorGraph:
    with open(path, encoding="utf-8") as fh:
        return graph_from_text(fh.read())
