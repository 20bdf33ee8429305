"""Entity-aware loop closure: candidate search, moved-entity point removal, ICP."""
from __future__ import annotations

import enum
from dataclasses import dataclass, field
from typing import Iterable, Optional, Sequence

import numpy as np
from scipy.spatial import cKDTree

from .geometry import Pose, between, tangent_norm
from .graph import Factor, FactorGraph, FactorKind, NodeId, NodeKind

STATIC_LABEL = -1


@dataclass(eq=False)
class Scan:
    """Points in the sensor frame; ``labels`` (simulation only) hold -1 for static
    surfaces and the entity id for entity fragments."""

    points: np.ndarray
    labels: Optional[np.ndarray] = None

    def __post_init__(self):
        self.points = np.asarray(self.points, dtype=float).reshape(-1, 3)
        if not np.all(np.isfinite(self.points)):
            raise ValueError("scan points must be finite")
        if self.labels is not None:
            self.labels = np.asarray(self.labels, dtype=int)
            if self.labels.shape != (len(self.points),):
                raise ValueError("labels must have one entry per point")

    def __len__(self) -> int:
        return len(self.points)

    def subset(self, keep: np.ndarray) -> "Scan":
        return Scan(self.points[keep], None if self.labels is None else self.labels[keep])


@dataclass(eq=False)
class Fragment:
    entity_id: int
    time: float
    indices: np.ndarray

    def __post_init__(self):
        self.indices = np.unique(np.asarray(self.indices, dtype=int))


@dataclass
class LoopCandidate:
    kf_old: NodeId
    kf_new: NodeId
    relative_pose: Optional[Pose] = None
    fitness: float = float("inf")
    accepted: bool = False

    def __post_init__(self):
        if self.kf_old.time is not None and self.kf_new.time is not None and not self.kf_old.time < self.kf_new.time:
            raise ValueError("loop candidates pair an older keyframe with a newer one")


class EpcrMode(enum.Enum):
    """Entity point-cloud removal before scan matching."""

    NO = "no"
    ALWAYS = "always"
    CONDITIONAL = "conditional"


def find_candidates(graph: FactorGraph, kf_new: NodeId, radius: float, min_gap: float) -> list[NodeId]:
    """Earlier keyframes within ``radius`` of ``kf_new`` and at least ``min_gap`` seconds older, nearest first."""
    p_new = graph.value(kf_new).translation
    found = []
    for kf in graph.keyframes():
        if kf == kf_new or kf.time is None or kf_new.time - kf.time < min_gap:
            continue
        dist = float(np.linalg.norm(graph.value(kf).translation - p_new))
        if dist <= radius:
            found.append((dist, kf.time, kf))
    found.sort(key=lambda x: (x[0], x[1]))
    return [kf for _, _, kf in found]


def inconsistent_entities(
    graph: FactorGraph,
    t_old: float,
    t_new: float,
    delta_e_prime: float,
    rotation_weight: float = 1.0,
) -> set[int]:
    """Entities whose optimized pose at ``t_old`` and ``t_new`` differ by more than ``delta_e_prime``.

    Each time resolves to the entity's latest node at or before it; entities
    without a node at or before ``t_old`` are left out.
    """
    out = set()
    for eid in graph.entity_ids():
        a = graph.entity_node_at(eid, t_old)
        b = graph.entity_node_at(eid, t_new)
        if a is None or b is None or a == b:
            continue
        if tangent_norm(between(graph.value(a), graph.value(b)), rotation_weight) > delta_e_prime:
            out.add(eid)
    return out


def _removal_mask(scan: Scan, fragments: Iterable[Fragment], entities: set) -> np.ndarray:
    drop = np.zeros(len(scan), dtype=bool)
    for frag in fragments:
        if frag.indices.size and (frag.indices.min() < 0 or frag.indices.max() >= len(scan)):
            raise IndexError(f"fragment of entity {frag.entity_id} indexes outside its scan ({len(scan)} points)")
        if frag.entity_id in entities:
            drop[frag.indices] = True
    return drop


def filter_scans(
    scan_old: Scan,
    scan_new: Scan,
    fragments_old: Sequence[Fragment],
    fragments_new: Sequence[Fragment],
    inconsistent: set,
    inconsistent_new: Optional[set] = None,
) -> tuple[Scan, Scan]:
    """Remove the fragments of inconsistent entities from both scans.

    ``inconsistent_new`` lets the newer scan be filtered by a wider set (the
    union over every candidate it is matched against); it defaults to
    ``inconsistent``.
    """
    inconsistent = set(inconsistent)
    inconsistent_new = inconsistent if inconsistent_new is None else set(inconsistent_new)
    old = scan_old.subset(~_removal_mask(scan_old, fragments_old, inconsistent))
    new = scan_new.subset(~_removal_mask(scan_new, fragments_new, inconsistent_new))
    return old, new


def extract_fragment(
    scan: Scan,
    entity_pose_sensor: Pose,
    half_extent,
    entity_id: int = -1,
    time: float = 0.0,
) -> Fragment:
    """Points inside the entity-aligned box of the given half extents."""
    half_extent = np.asarray(half_extent, dtype=float)
    if np.any(half_extent <= 0):
        raise ValueError("half extents must be positive")
    if len(scan) == 0:
        return Fragment(entity_id, time, np.zeros(0, dtype=int))
    local = (scan.points - entity_pose_sensor.translation) @ entity_pose_sensor.R
    inside = np.all(np.abs(local) <= half_extent, axis=1)
    return Fragment(entity_id, time, np.flatnonzero(inside))


@dataclass
class IcpConfig:
    max_iterations: int = 30
    max_correspondence_distance: float = 0.5
    tolerance: float = 1e-8


@dataclass
class Registration:
    """Result of :func:`register_scans`; ``pose`` maps points of scan b into scan a's frame."""

    pose: Pose
    fitness: float
    success: bool
    iterations: int = 0
    inliers: int = 0
    overlap: float = 0.0
    history: list = field(default_factory=list)

    def __iter__(self):
        yield self.pose
        yield self.fitness


def best_rigid_transform(src: np.ndarray, dst: np.ndarray) -> Pose:
    """Least-squares rotation and translation with ``R src + t ~ dst`` (Kabsch)."""
    mu_s = src.mean(axis=0)
    mu_d = dst.mean(axis=0)
    H = (src - mu_s).T @ (dst - mu_d)
    U, _, Vt = np.linalg.svd(H)
    D = np.eye(3)
    D[2, 2] = np.sign(np.linalg.det(Vt.T @ U.T)) or 1.0
    R = Vt.T @ D @ U.T
    T = np.eye(4)
    T[:3, :3] = R
    T[:3, 3] = mu_d - R @ mu_s
    return Pose.from_matrix(T)


def register_scans(scan_a: Scan, scan_b: Scan, initial_guess: Pose, config: Optional[IcpConfig] = None) -> Registration:
    """Point-to-point ICP aligning ``scan_b`` onto ``scan_a``.

    ``history`` holds, per iteration, the mean squared inlier distance before
    and after the closed-form update at fixed correspondences.
    """
    cfg = config or IcpConfig()
    if len(scan_a) == 0 or len(scan_b) == 0:
        return Registration(initial_guess, float("inf"), False)
    tree = cKDTree(scan_a.points)
    pose = initial_guess
    prev_pairs = None
    history = []
    it = 0
    for it in range(1, cfg.max_iterations + 1):
        moved = pose.transform_points(scan_b.points)
        dist, idx = tree.query(moved, distance_upper_bound=cfg.max_correspondence_distance)
        inl = np.isfinite(dist)
        if inl.sum() < 3:
            return Registration(pose, float("inf"), False, it, int(inl.sum()), float(inl.mean()), history)
        src = scan_b.points[inl]
        dst = scan_a.points[idx[inl]]
        before = float(np.mean(dist[inl] ** 2))
        new_pose = best_rigid_transform(src, dst)
        after = float(np.mean(np.sum((new_pose.transform_points(src) - dst) ** 2, axis=1)))
        history.append((before, after))
        pairs = (inl, idx)
        step = tangent_norm(between(pose, new_pose))
        pose = new_pose
        if prev_pairs is not None and np.array_equal(prev_pairs[0], inl) and np.array_equal(prev_pairs[1], idx):
            break
        if step < cfg.tolerance:
            break
        prev_pairs = pairs
    moved = pose.transform_points(scan_b.points)
    dist, _ = tree.query(moved, distance_upper_bound=cfg.max_correspondence_distance)
    inl = np.isfinite(dist)
    if inl.sum() < 3:
        return Registration(pose, float("inf"), False, it, int(inl.sum()), float(inl.mean()), history)
    return Registration(pose, float(np.mean(dist[inl] ** 2)), True, it, int(inl.sum()), float(inl.mean()), history)


def sensor_to_keyframe(relative_sensor: Pose, sensor_extrinsic: Pose) -> Pose:
    """Relative pose between two sensor frames -> between the keyframes carrying them."""
    return sensor_extrinsic @ relative_sensor @ sensor_extrinsic.inverse()


def keyframe_to_sensor(relative_kf: Pose, sensor_extrinsic: Pose) -> Pose:
    return sensor_extrinsic.inverse() @ relative_kf @ sensor_extrinsic


def propose_loop_factor(
    graph: FactorGraph,
    candidate: LoopCandidate,
    accept_fitness: float,
    info: np.ndarray,
    robust_delta: Optional[float] = None,
) -> Optional[Factor]:
    """A LOOP_CLOSURE factor for a registered candidate, or None when the fit is too poor.

    The factor is returned, not added; the caller owns the graph.
    """
    if candidate.relative_pose is None or not candidate.fitness < accept_fitness:
        candidate.accepted = False
        return None
    for kf in (candidate.kf_old, candidate.kf_new):
        if kf.kind is not NodeKind.KEYFRAME or kf not in graph.nodes:
            raise ValueError(f"{kf} is not a keyframe of this graph")
    candidate.accepted = True
    return Factor(
        FactorKind.LOOP_CLOSURE,
        (candidate.kf_old, candidate.kf_new),
        candidate.relative_pose,
        np.asarray(info, dtype=float),
        robust_delta,
    )
