"""Keyframe registration policy driven by situational changes.

A frame becomes a keyframe when the robot moved far enough since the last
keyframe, when an unmapped entity shows up, when a mapped entity is seen
away from where the map has it, or when a re-detected entity's refresh
timer has run out.
"""
from __future__ import annotations

import enum
from dataclasses import dataclass, field, replace
from typing import Iterable, Mapping, Optional

import numpy as np

from .geometry import Pose, between, check_psd, tangent_norm
from .motion import SemanticClass


@dataclass(eq=False)
class EntitySnapshot:
    """One detection of an entity as handed from the front end to the back end."""

    entity_id: int
    semantic_class: SemanticClass
    pose_sensor: Pose
    sigma: np.ndarray
    time: float
    fragment: np.ndarray = field(default_factory=lambda: np.zeros(0, dtype=int))

    def __post_init__(self):
        self.sigma = check_psd(np.asarray(self.sigma, dtype=float), "detection covariance")
        if self.sigma.shape != (6, 6):
            raise ValueError("detection covariance must be 6x6")
        if not (np.all(np.isfinite(self.pose_sensor.translation)) and np.all(np.isfinite(self.pose_sensor.rotation))):
            raise ValueError("detection pose must be finite")
        self.fragment = np.asarray(self.fragment, dtype=int)


class Reason(enum.Enum):
    ROBOT_MOVED = "robot_moved"
    NEW_ENTITY = "new_entity"
    ENTITY_MOVED = "entity_moved"
    TIMER_EXPIRED = "timer_expired"


@dataclass(frozen=True)
class Decision:
    register: bool
    reasons: frozenset = frozenset()


@dataclass(frozen=True)
class PolicyConfig:
    delta_r: float = 0.5
    delta_e: float = 0.1
    timer_period: float = 20.0
    rotation_weight: float = 1.0
    # False reduces the policy to the robot-displacement test alone
    entity_triggers: bool = True
    timer: bool = True


@dataclass(frozen=True)
class PolicyState:
    last_kf_odom: Pose
    config: PolicyConfig = PolicyConfig()
    mapped_ids: frozenset = frozenset()
    last_mapped_pose: Mapping[int, tuple[Pose, float]] = field(default_factory=dict)
    timers: Mapping[int, float] = field(default_factory=dict)


def detection_in_map(drift: Pose, odom_now: Pose, sensor_extrinsic: Pose, pose_sensor: Pose) -> Pose:
    """drift * odom * extrinsic * detection: a detection expressed in the map frame."""
    return drift @ odom_now @ sensor_extrinsic @ pose_sensor


def should_register(
    state: PolicyState,
    odom_now: Pose,
    drift: Pose,
    detections: Iterable[EntitySnapshot],
    sensor_extrinsic: Pose,
    now: float,
) -> Decision:
    cfg = state.config
    w = cfg.rotation_weight
    reasons = set()
    if tangent_norm(between(state.last_kf_odom, odom_now), w) > cfg.delta_r:
        reasons.add(Reason.ROBOT_MOVED)
    if cfg.entity_triggers:
        for det in detections:
            eid = det.entity_id
            if eid not in state.mapped_ids:
                reasons.add(Reason.NEW_ENTITY)
                continue
            stored = state.last_mapped_pose.get(eid)
            if stored is not None and Reason.ENTITY_MOVED not in reasons:
                seen = detection_in_map(drift, odom_now, sensor_extrinsic, det.pose_sensor)
                if tangent_norm(between(stored[0], seen), w) > cfg.delta_e:
                    reasons.add(Reason.ENTITY_MOVED)
            if cfg.timer:
                deadline = state.timers.get(eid)
                if deadline is not None and deadline <= now:
                    reasons.add(Reason.TIMER_EXPIRED)
    return Decision(bool(reasons), frozenset(reasons))


def commit_registration(
    state: PolicyState,
    odom_now: Pose,
    detections: Iterable[EntitySnapshot],
    optimized_map_poses: Mapping[int, Pose],
    now: float,
) -> PolicyState:
    """State after the back end registered a keyframe at ``now`` and mapped ``detections``."""
    detections = list(detections)
    mapped = set(state.mapped_ids)
    last = dict(state.last_mapped_pose)
    timers = dict(state.timers)
    for det in detections:
        eid = det.entity_id
        mapped.add(eid)
        if eid in optimized_map_poses:
            last[eid] = (optimized_map_poses[eid], now)
        timers[eid] = now + state.config.timer_period
    return replace(
        state,
        last_kf_odom=odom_now,
        mapped_ids=frozenset(mapped),
        last_mapped_pose=last,
        timers=timers,
    )


def initial_state(odom: Pose, config: Optional[PolicyConfig] = None) -> PolicyState:
    return PolicyState(last_kf_odom=odom, config=config or PolicyConfig())
