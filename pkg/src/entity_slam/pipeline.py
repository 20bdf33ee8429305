"""Full system: simulator frames -> keyframe policy -> entity mapper -> graph -> loop closure.

:func:`run` drives one scenario under one :class:`AblationSetup` and returns a
:class:`RunReport` with everything the evaluation needs.
"""
from __future__ import annotations

import logging
import time
from dataclasses import dataclass, field, fields, replace
from pathlib import Path
from typing import Mapping, Optional

import numpy as np

from .geometry import Pose, between, check_psd
from .graph import FactorGraph, FactorKind, NodeId, NodeKind, PlaneParam
from .keyframes import EntitySnapshot, PolicyConfig, commit_registration, initial_state, should_register
from .loop_closure import (
    EpcrMode,
    Fragment,
    IcpConfig,
    LoopCandidate,
    extract_fragment,
    filter_scans,
    find_candidates,
    inconsistent_entities,
    keyframe_to_sensor,
    propose_loop_factor,
    register_scans,
    sensor_to_keyframe,
)
from .motion import MotionConfig, PriorKind, SemanticClass, select_model
from .optimizer import OptConfig, OptReport, optimize
from .simulator import Scenario, Simulator

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class AblationSetup:
    name: str = "custom"
    kf_entity: bool = False
    intra_entity: bool = False
    floor_entity: bool = False
    epcr_mode: EpcrMode = EpcrMode.NO
    dynamic_policy: bool = False
    timer: bool = False

    def __post_init__(self):
        if (self.intra_entity or self.floor_entity) and not self.kf_entity:
            raise ValueError("intra-entity and floor-entity factors need keyframe-entity factors")
        if self.timer and not self.dynamic_policy:
            raise ValueError("the entity timer is part of the dynamic keyframe policy")


def _preset(name, kfe, intra, fe, epcr, dyn, timer):
    return AblationSetup(name, kfe, intra, fe, epcr, dyn, timer)


_NO, _ALWAYS, _COND = EpcrMode.NO, EpcrMode.ALWAYS, EpcrMode.CONDITIONAL
PRESETS: dict[str, AblationSetup] = {
    p.name: p
    for p in (
        _preset("baseline", False, False, False, _NO, False, False),
        _preset("only_kf_e", True, False, False, _NO, True, False),
        _preset("intra_e", True, True, False, _NO, True, False),
        _preset("f_e", True, False, True, _NO, True, False),
        _preset("fcs", True, True, True, _NO, True, False),
        _preset("always_epcr", True, True, True, _ALWAYS, True, False),
        _preset("mb_epcr", True, True, True, _COND, True, False),
        _preset("full", True, True, True, _COND, True, True),
    )
}


def parse_setup(text: str) -> AblationSetup:
    """A preset name, or comma-separated flags such as ``kf_entity=1,epcr_mode=conditional``."""
    key = text.strip().lower().replace("-", "_")
    if key in PRESETS:
        return PRESETS[key]
    if "=" not in text:
        raise ValueError(f"unknown setup {text!r}; presets are {', '.join(PRESETS)}")
    kwargs = {"name": "custom"}
    names = {f.name for f in fields(AblationSetup)}
    for item in text.split(","):
        k, _, v = item.partition("=")
        k = k.strip()
        if k not in names:
            raise ValueError(f"unknown setup flag {k!r}")
        v = v.strip()
        if k == "epcr_mode":
            kwargs[k] = EpcrMode(v.lower())
        elif k == "name":
            kwargs[k] = v
        else:
            kwargs[k] = v.lower() in ("1", "true", "yes", "on")
    return AblationSetup(**kwargs)


@dataclass
class SlamConfig:
    """Back-end parameters; ``from_mapping`` reads the scenario's ``slam`` section."""

    delta_r: float = 0.5
    delta_e: float = 0.1
    delta_e_prime: Optional[float] = None  # defaults to 2 * delta_e
    timer_period: float = 20.0
    rotation_weight: float = 1.0
    prior_info: float = 1e6
    floor_prior_info: float = 1e2
    floor_entity_info: float = 1e2
    odom_sigma_floor: float = 1e-4
    detection_sigma_floor: float = 1e-6
    object_info: tuple = (400.0, 400.0, 400.0, 400.0, 400.0, 400.0)
    agent_info: tuple = (100.0, 100.0, 100.0, 100.0, 100.0, 100.0)
    nu: float = 0.05
    kappa: float = 0.01
    loop_radius: float = 1.5
    loop_min_gap: float = 30.0
    loop_min_interval: float = 3.0
    loop_max_candidates: int = 2
    accept_fitness: float = 0.05
    loop_sigma: tuple = (0.05, 0.05, 0.05, 0.01, 0.01, 0.01)
    loop_robust_delta: Optional[float] = None
    fragment_margin: float = 0.15
    icp_max_iterations: int = 30
    icp_max_correspondence: float = 0.5
    max_opt_iterations: int = 50

    @classmethod
    def from_mapping(cls, values: Optional[Mapping]) -> "SlamConfig":
        values = dict(values or {})
        known = {f.name for f in fields(cls)}
        unknown = set(values) - known
        if unknown:
            raise ValueError(f"unknown slam options: {sorted(unknown)}")
        for k, v in values.items():
            if isinstance(v, list):
                values[k] = tuple(v)
        return cls(**values)

    @property
    def entity_gate(self) -> float:
        return 2.0 * self.delta_e if self.delta_e_prime is None else self.delta_e_prime

    def motion(self) -> MotionConfig:
        return MotionConfig(np.diag(self.object_info), np.diag(self.agent_info), self.nu, self.kappa)


@dataclass
class LoopEvent:
    time: float
    kf_old: str
    kf_new: str
    inconsistent: tuple
    points_before: tuple
    points_after: tuple
    fitness: float
    fitness_unfiltered: float
    accepted: bool


@dataclass
class EntityRecord:
    epoch: int
    entity_id: int
    time: float
    pose: Pose
    stage: str  # "insert" when first added, "optimized" after an optimization


@dataclass
class RunReport:
    scenario: str
    seed: int
    setup: AblationSetup
    trajectory: list  # (time, Pose) per keyframe, final estimate
    ground_truth: list  # (time, Pose) per keyframe
    entity_records: list
    loop_log: list
    decision_log: list  # (time, sorted reason names) for registered frames
    opt_times_ms: list
    opt_reports: list
    graph: FactorGraph
    failures: int = 0
    frames: int = 0
    wall_time: float = 0.0

    @property
    def keyframe_times(self) -> list[float]:
        return [t for t, _ in self.trajectory]

    def write_trajectory(self, path) -> None:
        write_trajectory(self.trajectory, path)


def format_trajectory(traj) -> str:
    return "".join(f"{t!r} " + " ".join(repr(float(v)) for v in p.to_list()) + "\n" for t, p in traj)


def write_trajectory(traj, path) -> None:
    Path(path).write_text(format_trajectory(traj), encoding="utf-8")


def read_trajectory(path) -> list:
    out = []
    for line in Path(path).read_text(encoding="utf-8").splitlines():
        if line.strip() and not line.startswith("#"):
            vals = [float(v) for v in line.split()]
            out.append((vals[0], Pose.from_list(vals[1:8])))
    return out


def map_entity(detection: EntitySnapshot, kf_pose: Pose, sensor_extrinsic: Pose, min_sigma: float = 1e-9):
    """Detection -> (map-frame pose, information matrix).

    A near-singular covariance gets ``min_sigma`` added to its diagonal before
    inversion.
    """
    sigma = check_psd(np.asarray(detection.sigma, dtype=float), "detection covariance")
    w = np.linalg.eigvalsh(sigma)
    if w.min() < min_sigma:
        sigma = sigma + (min_sigma - min(w.min(), 0.0)) * np.eye(6)
    info = np.linalg.inv(sigma)
    return kf_pose @ sensor_extrinsic @ detection.pose_sensor, 0.5 * (info + info.T)


@dataclass
class _Keyframe:
    node: NodeId
    odom: Pose
    frame_index: int
    scan: object
    fragments: list


class _Runner:
    def __init__(self, scenario: Scenario, setup: AblationSetup, config: SlamConfig, opt: OptConfig):
        self.sc = scenario
        self.setup = setup
        self.cfg = config
        self.opt = opt
        self.motion = config.motion()
        self.sim = Simulator(scenario)
        self.graph = FactorGraph()
        self.ext = scenario.sensor_extrinsic
        self.keyframes: list[_Keyframe] = []
        self.z_ref: dict[int, float] = {}
        self.planes: dict[int, NodeId] = {}
        self.entity_records: list[EntityRecord] = []
        self.loop_log: list[LoopEvent] = []
        self.decisions: list = []
        self.opt_times: list = []
        self.opt_reports: list[OptReport] = []
        self.failures = 0
        self.epoch = 0
        self.last_loop_time = -np.inf
        self.drift = Pose.identity()
        self.drift_node = self.graph.add_node(NodeKind.DRIFT, self.drift)
        self.floor = None
        if setup.floor_entity:
            self.floor = self.graph.add_node(NodeKind.FLOOR, 0.0)
            self.graph.add_factor(FactorKind.PRIOR, [self.floor], 0.0, [[config.floor_prior_info]])
        policy = PolicyConfig(
            delta_r=config.delta_r,
            delta_e=config.delta_e,
            timer_period=config.timer_period,
            rotation_weight=config.rotation_weight,
            entity_triggers=setup.dynamic_policy,
            timer=setup.timer,
        )
        self.policy = initial_state(self.sim.odometry[0], policy)
        sigma = np.maximum(scenario.noise.odom_sigma, config.odom_sigma_floor)
        self.odom_step_var = sigma**2
        pn = max(scenario.noise.plane_normal_sigma, 1e-3)
        pd = max(scenario.noise.plane_distance_sigma, 1e-3)
        self.plane_info = np.diag([1 / pn**2] * 3 + [1 / pd**2])
        self.loop_info = np.diag(1.0 / np.asarray(config.loop_sigma) ** 2)
        self.icp = IcpConfig(config.icp_max_iterations, config.icp_max_correspondence)

    # -- per frame ---------------------------------------------------------------

    def step(self, frame) -> None:
        if not self.keyframes:
            self.register(frame, ("first_frame",))
            return
        decision = should_register(self.policy, frame.odom, self.drift, frame.detections, self.ext, frame.time)
        if decision.register:
            self.register(frame, tuple(sorted(r.value for r in decision.reasons)))

    def register(self, frame, reasons) -> None:
        g, cfg = self.graph, self.cfg
        pose0 = self.drift @ frame.odom
        kf = g.add_node(NodeKind.KEYFRAME, pose0, time=frame.time)
        if not self.keyframes:
            g.add_factor(FactorKind.PRIOR, [kf], pose0, cfg.prior_info * np.eye(6))
        else:
            prev = self.keyframes[-1]
            n = frame.index - prev.frame_index
            g.add_factor(FactorKind.ODOMETRY, [prev.node, kf], between(prev.odom, frame.odom), np.diag(1.0 / (n * self.odom_step_var)))
        self.decisions.append((frame.time, reasons))

        for idx, local in frame.planes:
            node = self.planes.get(idx)
            if node is None:
                world = PlaneParam(pose0.R @ local.normal, local.distance + (pose0.R @ local.normal) @ pose0.translation)
                node = self.planes[idx] = g.add_node(NodeKind.PLANE, world)
            g.add_factor(FactorKind.KEYFRAME_PLANE, [kf, node], local, self.plane_info)

        scan = frame.scan
        fragments = []
        for det in frame.detections:
            half = self.sc.entity_size(det.entity_id) / 2 + cfg.fragment_margin
            fragments.append(extract_fragment(scan, det.pose_sensor, half, det.entity_id, frame.time))
        self.keyframes.append(_Keyframe(kf, frame.odom, frame.index, scan, fragments))

        if self.setup.kf_entity:
            for det in frame.detections:
                self.map_detection(kf, pose0, det, frame.time)

        self.run_optimizer()
        self.close_loops(frame.time)
        self.update_drift(frame.odom)
        self.snapshot_entities()
        mapped = {}
        for det in frame.detections:
            node = g.entity_node_at(det.entity_id, frame.time)
            if node is not None:
                mapped[det.entity_id] = g.value(node)
            else:
                mapped[det.entity_id] = map_entity(det, g.value(kf), self.ext)[0]
        self.policy = commit_registration(self.policy, frame.odom, frame.detections, mapped, frame.time)

    def map_detection(self, kf: NodeId, kf_pose: Pose, det: EntitySnapshot, now: float) -> None:
        g, cfg = self.graph, self.cfg
        eid = det.entity_id
        eps, info = map_entity(det, kf_pose, self.ext, cfg.detection_sigma_floor)
        prev = g.entity_node_at(eid, now)
        node = g.add_node(NodeKind.ENTITY, eps, entity_id=eid, time=now)
        g.add_factor(FactorKind.KEYFRAME_ENTITY, [kf, node], self.ext @ det.pose_sensor, info)
        self.entity_records.append(EntityRecord(self.epoch, eid, now, eps, "insert"))
        if self.setup.intra_entity and prev is not None:
            eps_prev = g.value(prev)
            prior = self.sc.motion_prior(eid)
            if prior.kind is PriorKind.STRAIGHT_LINE:
                # the direction is scripted in the map frame; the model wants it in eps_prev's frame
                prior = replace(prior, direction=eps_prev.R.T @ prior.direction)
            model, minfo = select_model(det.semantic_class, prior, eps_prev, eps, self.motion)
            g.add_factor(FactorKind.INTRA_ENTITY, [prev, node], model, minfo)
        if self.setup.floor_entity:
            if eid not in self.z_ref:
                self.z_ref[eid] = float(eps.translation[2] - g.value(self.floor))
            g.add_factor(FactorKind.FLOOR_ENTITY, [self.floor, node], self.z_ref[eid], [[cfg.floor_entity_info]])

    def run_optimizer(self) -> None:
        report = optimize(self.graph, self.opt)
        self.epoch += 1
        self.opt_reports.append(report)
        self.opt_times.append(report.wall_time_ms)
        if not report.success:
            self.failures += 1
            log.warning("optimization failed at epoch %d: %s", self.epoch, report.message)

    def update_drift(self, odom_now: Pose) -> None:
        # drift maps odometry into the map frame: drift * odom = optimized keyframe
        latest = self.graph.value(self.keyframes[-1].node)
        self.drift = latest @ odom_now.inverse()
        self.graph.set_value(self.drift_node, self.drift)

    def snapshot_entities(self) -> None:
        g = self.graph
        for eid in g.entity_ids():
            node = g.entity_track(eid)[-1]
            self.entity_records.append(EntityRecord(self.epoch, eid, node.time, g.value(node), "optimized"))

    # -- loop closure ------------------------------------------------------------

    def close_loops(self, now: float) -> None:
        cfg = self.cfg
        if now - self.last_loop_time < cfg.loop_min_interval:
            return
        g = self.graph
        new = self.keyframes[-1]
        by_node = {k.node: k for k in self.keyframes}
        cands = find_candidates(g, new.node, cfg.loop_radius, cfg.loop_min_gap)[: cfg.loop_max_candidates]
        if not cands:
            return
        mode = self.setup.epcr_mode
        per_cand = {}
        for c in cands:
            if mode is EpcrMode.NO:
                per_cand[c] = set()
            elif mode is EpcrMode.ALWAYS:
                per_cand[c] = {f.entity_id for f in by_node[c].fragments} | {f.entity_id for f in new.fragments}
            else:
                per_cand[c] = inconsistent_entities(g, c.time, new.node.time, cfg.entity_gate, cfg.rotation_weight)
        # the newer scan is filtered by every entity found inconsistent with any candidate
        union_new = set().union(*per_cand.values())
        accepted_any = False
        for c in cands:
            old = by_node[c]
            guess = keyframe_to_sensor(between(g.value(c), g.value(new.node)), self.ext)
            s_old, s_new = filter_scans(old.scan, new.scan, old.fragments, new.fragments, per_cand[c], union_new)
            reg = register_scans(s_old, s_new, guess, self.icp)
            if len(s_old) == len(old.scan) and len(s_new) == len(new.scan):
                unfiltered = reg.fitness
            else:
                unfiltered = register_scans(old.scan, new.scan, guess, self.icp).fitness
            cand = LoopCandidate(c, new.node)
            accepted = False
            if reg.success:
                cand.relative_pose = sensor_to_keyframe(reg.pose, self.ext)
                cand.fitness = reg.fitness
                factor = propose_loop_factor(g, cand, cfg.accept_fitness, self.loop_info, cfg.loop_robust_delta)
                if factor is not None:
                    g.add_factor(factor.kind, factor.node_ids, factor.measurement, factor.info, factor.robust_delta)
                    accepted = accepted_any = True
            self.loop_log.append(
                LoopEvent(
                    now,
                    c.ref(),
                    new.node.ref(),
                    tuple(sorted(per_cand[c])),
                    (len(old.scan), len(new.scan)),
                    (len(s_old), len(s_new)),
                    reg.fitness,
                    unfiltered,
                    accepted,
                )
            )
        if accepted_any:
            self.last_loop_time = now
            self.run_optimizer()

    # -- report -------------------------------------------------------------------

    def report(self, wall: float, frames: int) -> RunReport:
        g = self.graph
        traj = [(k.node.time, g.value(k.node)) for k in self.keyframes]
        gt = [(k.node.time, self.sc.robot_path[k.frame_index]) for k in self.keyframes]
        return RunReport(
            scenario=self.sc.name,
            seed=self.sc.seed,
            setup=self.setup,
            trajectory=traj,
            ground_truth=gt,
            entity_records=self.entity_records,
            loop_log=self.loop_log,
            decision_log=self.decisions,
            opt_times_ms=self.opt_times,
            opt_reports=self.opt_reports,
            graph=g,
            failures=self.failures,
            frames=frames,
            wall_time=wall,
        )


def run(
    scenario: Scenario,
    setup: AblationSetup,
    config: Optional[SlamConfig] = None,
    opt_config: Optional[OptConfig] = None,
) -> RunReport:
    """Process every frame of ``scenario`` under ``setup``."""
    if isinstance(setup, str):
        setup = parse_setup(setup)
    cfg = config or SlamConfig.from_mapping(scenario.slam)
    opt = opt_config or OptConfig(max_iterations=cfg.max_opt_iterations)
    t0 = time.perf_counter()
    runner = _Runner(scenario, setup, cfg, opt)
    n = 0
    for frame in runner.sim.run():
        runner.step(frame)
        n += 1
    return runner.report(time.perf_counter() - t0, n)
