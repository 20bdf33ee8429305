"""Deterministic scenario simulator standing in for the sensing front end.

A scenario config (a plain mapping, usually loaded from YAML) is resolved by
:func:`build` into an immutable :class:`Scenario`. :class:`Simulator` then
produces :class:`SensorFrame` objects: drifting odometry, noisy entity
detections with their covariance, plane observations and labeled scans.

Every random draw comes from a generator seeded with ``(seed, stream, frame)``
so a frame depends only on the scenario and its index.
"""
from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Iterator, Mapping, Optional, Sequence

import numpy as np
import yaml

from .geometry import Pose, between, so3_exp
from .graph import PlaneParam
from .keyframes import EntitySnapshot
from .loop_closure import STATIC_LABEL, Scan
from .motion import MotionPrior, SemanticClass

_STREAM_BUILD, _STREAM_ODOM, _STREAM_DET, _STREAM_SCAN, _STREAM_PLANE = range(5)

SCENARIO_DIR = Path(__file__).parent / "scenarios"


class ScenarioError(ValueError):
    pass


@dataclass(frozen=True, eq=False)
class NoiseModel:
    odom_sigma: np.ndarray
    detection_sigma: np.ndarray
    detection_range_scaling: float = 0.0
    scan_point_sigma: float = 0.0
    plane_normal_sigma: float = 0.0
    plane_distance_sigma: float = 0.0


@dataclass(frozen=True, eq=False)
class PlanePatch:
    plane: PlaneParam
    center: np.ndarray
    axes: np.ndarray  # 3x2, in-plane unit vectors
    half_size: np.ndarray
    density: float

    def nearest_point(self, p: np.ndarray) -> np.ndarray:
        local = np.clip((p - self.center) @ self.axes, -self.half_size, self.half_size)
        return self.center + self.axes @ local


@dataclass(frozen=True, eq=False)
class ObjectSpec:
    entity_id: int
    pose: Pose
    size: np.ndarray
    relocations: tuple = ()  # (time, Pose), sorted

    def pose_at(self, t: float) -> Pose:
        pose = self.pose
        for when, new in self.relocations:
            if t >= when:
                pose = new
        return pose


@dataclass(frozen=True, eq=False)
class AgentSpec:
    entity_id: int
    start: Pose
    direction: np.ndarray
    speed: float
    active: tuple
    size: np.ndarray
    path_length: float = math.inf

    def pose_at(self, t: float) -> Optional[Pose]:
        t0, t1 = self.active
        if t < t0 or t > t1:
            return None
        s = self.speed * (t - t0)
        if math.isfinite(self.path_length) and self.path_length > 0:
            s = math.fmod(s, self.path_length)
        return Pose(self.start.rotation, self.start.translation + s * self.direction)


@dataclass(frozen=True, eq=False)
class Scenario:
    name: str
    seed: int
    rate: float
    times: np.ndarray
    robot_path: tuple  # Pose per frame time
    sensor_extrinsic: Pose
    detection_range: float
    fov: float
    noise: NoiseModel
    planes: tuple
    objects: tuple
    agents: tuple
    slam: Mapping = field(default_factory=dict)
    config: Mapping = field(default_factory=dict)

    @property
    def duration(self) -> float:
        return float(len(self.times) / self.rate)

    def entity_ids(self) -> list[int]:
        return sorted([o.entity_id for o in self.objects] + [a.entity_id for a in self.agents])

    def entity(self, entity_id: int):
        for e in (*self.objects, *self.agents):
            if e.entity_id == entity_id:
                return e
        raise KeyError(entity_id)

    def semantic_class(self, entity_id: int) -> SemanticClass:
        return SemanticClass.AGENT if isinstance(self.entity(entity_id), AgentSpec) else SemanticClass.OBJECT

    def motion_prior(self, entity_id: int) -> MotionPrior:
        e = self.entity(entity_id)
        if isinstance(e, AgentSpec) and self.config.get("agent_prior", "straight_line") == "straight_line":
            return MotionPrior.straight(e.direction)
        return MotionPrior()

    def entity_pose(self, entity_id: int, t: float) -> Optional[Pose]:
        return self.entity(entity_id).pose_at(t)

    def entity_size(self, entity_id: int) -> np.ndarray:
        return self.entity(entity_id).size


# ---------------------------------------------------------------------------
# config resolution


def _pose(value, what: str) -> Pose:
    vals = np.asarray(value, dtype=float).ravel()
    if vals.size == 7:
        q = vals[3:]
        if abs(np.linalg.norm(q) - 1.0) > 1e-6:
            raise ScenarioError(f"{what}: quaternion must be unit length")
        return Pose.from_list(vals)
    if vals.size == 4:  # x y z yaw
        return Pose.from_yaw(vals[3], vals[:3])
    if vals.size == 3:
        return Pose.from_translation(*vals)
    raise ScenarioError(f"{what}: expected [x y z], [x y z yaw] or [tx ty tz qx qy qz qw]")


def _vec(value, n: int, what: str) -> np.ndarray:
    vals = np.asarray(value, dtype=float).ravel()
    if vals.size == 1:
        vals = np.repeat(vals, n)
    if vals.size != n or not np.all(np.isfinite(vals)):
        raise ScenarioError(f"{what}: expected {n} finite values")
    return vals


def _unit(value, what: str) -> np.ndarray:
    u = _vec(value, 3, what)
    if abs(np.linalg.norm(u) - 1.0) > 1e-9:
        raise ScenarioError(f"{what}: must be a unit vector, |u| = {np.linalg.norm(u):.6f}")
    return u


def _resolve_noise(cfg: Mapping) -> NoiseModel:
    odom = _vec(cfg.get("odom_sigma", 0.0), 6, "noise.odom_sigma")
    det = _vec(cfg.get("detection_sigma", 0.0), 6, "noise.detection_sigma")
    scalars = {}
    for key in ("detection_range_scaling", "scan_point_sigma", "plane_normal_sigma", "plane_distance_sigma"):
        scalars[key] = float(cfg.get(key, 0.0))
    if np.any(odom < 0) or np.any(det < 0) or any(v < 0 for v in scalars.values()):
        raise ScenarioError("noise standard deviations must be non-negative")
    return NoiseModel(odom, det, **scalars)


def _resolve_planes(items: Sequence[Mapping]) -> tuple:
    out = []
    for i, item in enumerate(items or ()):
        n = _unit(item["normal"], f"planes[{i}].normal")
        center = _vec(item["center"], 3, f"planes[{i}].center")
        plane = PlaneParam(n, float(n @ center))
        ref = np.array([0.0, 0.0, 1.0]) if abs(n[2]) < 0.9 else np.array([1.0, 0.0, 0.0])
        a1 = np.cross(ref, n)
        a1 /= np.linalg.norm(a1)
        a2 = np.cross(n, a1)
        out.append(
            PlanePatch(
                plane,
                center,
                np.stack([a1, a2], axis=1),
                _vec(item.get("half_size", [5.0, 5.0]), 2, f"planes[{i}].half_size"),
                float(item.get("density", 4.0)),
            )
        )
    return tuple(out)


def _resolve_objects(items, relocation: Optional[Mapping], rng, default_size) -> tuple:
    objects = []
    for i, item in enumerate(items or ()):
        relocs = []
        for j, ev in enumerate(item.get("relocations", ())):
            relocs.append((float(ev["time"]), _pose(ev["pose"], f"objects[{i}].relocations[{j}]")))
        size = _vec(item.get("size", default_size), 3, f"objects[{i}].size")
        objects.append([int(item["id"]), _pose(item["pose"], f"objects[{i}].pose"), size, relocs])
    if relocation:
        frac = float(relocation.get("fraction", 0.6))
        when = float(relocation["time"])
        lo, hi = relocation.get("shift", [1.5, 3.0])
        bounds = np.asarray(relocation.get("bounds", [[-5, -5], [5, 5]]), dtype=float)
        k = int(round(frac * len(objects)))
        chosen = sorted(rng.choice(len(objects), size=k, replace=False)) if k else []
        for idx in chosen:
            base = objects[idx][1]
            for _ in range(1000):
                ang = rng.uniform(-np.pi, np.pi)
                r = rng.uniform(lo, hi)
                xy = base.translation[:2] + r * np.array([np.cos(ang), np.sin(ang)])
                if np.all(xy >= bounds[0]) and np.all(xy <= bounds[1]):
                    break
            else:
                raise ScenarioError("could not place a relocated object inside the bounds")
            yaw = rng.uniform(-np.pi, np.pi)
            objects[idx][3].append((when, Pose.from_yaw(yaw, [xy[0], xy[1], base.translation[2]])))
    return tuple(ObjectSpec(eid, pose, size, tuple(sorted(rel, key=lambda e: e[0]))) for eid, pose, size, rel in objects)


def _resolve_agents(items, duration: float, default_size) -> tuple:
    out = []
    for i, item in enumerate(items or ()):
        u = _unit(item["direction"], f"agents[{i}].direction")
        start = _pose(item["start"], f"agents[{i}].start")
        if item.get("face_direction", True):
            start = Pose.from_yaw(math.atan2(u[1], u[0]), start.translation)
        active = tuple(float(v) for v in item.get("active", [0.0, duration]))
        out.append(
            AgentSpec(
                int(item["id"]),
                start,
                u,
                float(item.get("speed", 0.5)),
                active,
                _vec(item.get("size", default_size), 3, f"agents[{i}].size"),
                float(item.get("path_length", math.inf)),
            )
        )
    return tuple(out)


def _waypoint_path(cfg: Mapping, rate: float):
    """Constant-speed polyline with turn-in-place corners and optional dwells.

    Returns a function of time and the total path duration.
    """
    wps = np.asarray(cfg["waypoints"], dtype=float)
    if wps.ndim != 2 or wps.shape[1] != 2 or len(wps) < 2:
        raise ScenarioError("robot.waypoints must be a list of [x, y] with at least two entries")
    laps = int(cfg.get("laps", 1))
    speed = float(cfg.get("speed", 0.5))
    turn_rate = float(cfg.get("turn_rate", 1.0))
    height = float(cfg.get("height", 0.0))
    closed = bool(cfg.get("closed", True))
    dwell = {}
    for d in cfg.get("dwell", ()):
        dwell[(int(d.get("lap", 0)), int(d["waypoint"]))] = float(d["duration"])
    seq = []
    for lap in range(laps):
        for i in range(len(wps)):
            seq.append((lap, i))
    if closed:
        seq.append((laps - 1, 0))
        seq[-1] = (laps, 0)
    # legs: (duration, x0, y0, yaw0, x1, y1, yaw1)
    legs = []
    yaw = math.atan2(*(wps[1] - wps[0])[::-1])
    pos = wps[0].copy()
    for (lap, i), (_, j) in zip(seq[:-1], seq[1:]):
        if (lap, i) in dwell:
            legs.append((dwell[(lap, i)], *pos, yaw, *pos, yaw))
        target = wps[j]
        delta = target - pos
        dist = float(np.linalg.norm(delta))
        if dist < 1e-9:
            continue
        new_yaw = math.atan2(delta[1], delta[0])
        dyaw = (new_yaw - yaw + math.pi) % (2 * math.pi) - math.pi
        if abs(dyaw) > 1e-9:
            legs.append((abs(dyaw) / turn_rate, *pos, yaw, *pos, yaw + dyaw))
        yaw = yaw + dyaw
        legs.append((dist / speed, *pos, yaw, *target, yaw))
        pos = target.copy()
    starts = np.concatenate([[0.0], np.cumsum([leg[0] for leg in legs])])

    def at(t: float) -> Pose:
        k = int(np.searchsorted(starts, t, side="right") - 1)
        if k >= len(legs):
            _, _, _, _, x, y, yw = legs[-1]
            return Pose.from_yaw(yw, [x, y, height])
        dur, x0, y0, w0, x1, y1, w1 = legs[max(k, 0)]
        s = 0.0 if dur <= 0 else min(max((t - starts[k]) / dur, 0.0), 1.0)
        return Pose.from_yaw(w0 + s * (w1 - w0), [x0 + s * (x1 - x0), y0 + s * (y1 - y0), height])

    return at, float(starts[-1])


def build(config: Mapping) -> Scenario:
    """Resolve a scenario config into a :class:`Scenario`; the same config always gives the same scenario."""
    if not isinstance(config, Mapping):
        raise ScenarioError("scenario config must be a mapping")
    seed = int(config.get("seed", 0))
    rate = float(config.get("rate", 10.0))
    if rate <= 0:
        raise ScenarioError("rate must be positive")
    robot = config.get("robot")
    if not robot:
        raise ScenarioError("scenario needs a robot section")
    if "path" in robot:
        rows = np.asarray(robot["path"], dtype=float)
        if rows.ndim != 2 or rows.shape[1] != 8:
            raise ScenarioError("robot.path rows are [t tx ty tz qx qy qz qw]")
        if np.any(np.diff(rows[:, 0]) <= 0):
            raise ScenarioError("robot.path timestamps must be strictly increasing")
        times = rows[:, 0]
        poses = tuple(Pose.from_list(r[1:]) for r in rows)
        rate = float(config.get("rate", 1.0 / np.mean(np.diff(times)) if len(times) > 1 else rate))
    else:
        path_at, path_time = _waypoint_path(robot, rate)
        duration = float(config.get("duration", path_time))
        n = int(round(duration * rate))
        times = np.arange(n) / rate
        poses = tuple(path_at(t) for t in times)
    duration = float(len(times) / rate)

    rng = np.random.default_rng([seed, _STREAM_BUILD])
    relocation = config.get("relocation")
    if relocation and float(relocation["time"]) > duration:
        raise ScenarioError("relocation time lies beyond the run duration")
    objects = _resolve_objects(config.get("objects"), relocation, rng, config.get("object_size", [0.4, 0.4, 0.4]))
    for o in objects:
        for when, _ in o.relocations:
            if not 0 <= when <= duration:
                raise ScenarioError(f"object {o.entity_id}: relocation at t={when} outside the run")
    agents = _resolve_agents(config.get("agents"), duration, config.get("agent_size", [0.5, 0.5, 1.7]))
    ids = [o.entity_id for o in objects] + [a.entity_id for a in agents]
    if len(set(ids)) != len(ids):
        raise ScenarioError("entity ids must be unique")
    return Scenario(
        name=str(config.get("name", "scenario")),
        seed=seed,
        rate=rate,
        times=np.asarray(times, dtype=float),
        robot_path=poses,
        sensor_extrinsic=_pose(config.get("sensor_extrinsic", [0.0, 0.0, 0.0]), "sensor_extrinsic"),
        detection_range=float(config.get("detection_range", 5.0)),
        fov=float(config.get("fov", np.pi)),
        noise=_resolve_noise(config.get("noise", {})),
        planes=_resolve_planes(config.get("planes")),
        objects=objects,
        agents=agents,
        slam=dict(config.get("slam", {})),
        config=dict(config),
    )


def load_config(path) -> dict:
    """Read a YAML (or JSON) scenario config; bare names resolve to the bundled library."""
    p = Path(path)
    if not p.exists() and (SCENARIO_DIR / f"{p.stem}.yaml").exists() and p.suffix in ("", ".yaml"):
        p = SCENARIO_DIR / f"{p.stem}.yaml"
    with open(p, encoding="utf-8") as fh:
        return yaml.safe_load(fh)


def load_scenario(path, seed: Optional[int] = None) -> Scenario:
    cfg = load_config(path)
    if seed is not None:
        cfg["seed"] = int(seed)
    return build(cfg)


def canonical_scenarios() -> list[str]:
    return sorted(p.stem for p in SCENARIO_DIR.glob("*.yaml"))


# ---------------------------------------------------------------------------
# frames


@dataclass(eq=False)
class SensorFrame:
    """One synchronized sensor reading. The scan is generated on first access,
    since only keyframes ever look at it."""

    index: int
    time: float
    odom: Pose
    detections: list
    planes: list  # (plane index, PlaneParam in the robot frame)
    ground_truth_robot: Pose
    ground_truth_entities: dict
    scan_data: Optional[Scan] = field(default=None, repr=False)
    scan_source: Optional[Callable[[], Scan]] = field(default=None, repr=False)

    @property
    def scan(self) -> Scan:
        if self.scan_data is None:
            self.scan_data = self.scan_source() if self.scan_source else Scan(np.zeros((0, 3)))
        return self.scan_data


def _box_surface(size: np.ndarray, density: float, rng) -> np.ndarray:
    hx, hy, hz = size / 2
    faces = [
        (0, hx, (1, 2)), (0, -hx, (1, 2)),
        (1, hy, (0, 2)), (1, -hy, (0, 2)),
        (2, hz, (0, 1)), (2, -hz, (0, 1)),
    ]
    pts = []
    for axis, value, (i, j) in faces:
        area = size[i] * size[j]
        k = max(int(round(area * density)), 1)
        p = np.empty((k, 3))
        p[:, axis] = value
        p[:, i] = rng.uniform(-size[i] / 2, size[i] / 2, k)
        p[:, j] = rng.uniform(-size[j] / 2, size[j] / 2, k)
        pts.append(p)
    return np.concatenate(pts)


class Simulator:
    """Frame generator for one scenario; odometry is integrated once up front."""

    def __init__(self, scenario: Scenario):
        self.scenario = scenario
        sc = scenario
        n = len(sc.times)
        rng = np.random.default_rng([sc.seed, _STREAM_ODOM])
        noise = rng.standard_normal((n, 6)) * sc.noise.odom_sigma
        odom = [sc.robot_path[0]]
        for k in range(1, n):
            rel = between(sc.robot_path[k - 1], sc.robot_path[k])
            odom.append(odom[-1] @ rel @ Pose.exp(noise[k]))
        self.odometry = tuple(odom)
        self.entity_density = float(sc.config.get("entity_point_density", 150.0))

    def __len__(self) -> int:
        return len(self.scenario.times)

    def index_of(self, t: float) -> int:
        k = int(round(t * self.scenario.rate))
        if not 0 <= k < len(self):
            raise ValueError(f"t={t} lies outside the run")
        return k

    def entity_poses(self, t: float) -> dict[int, Pose]:
        out = {}
        for e in (*self.scenario.objects, *self.scenario.agents):
            p = e.pose_at(t)
            if p is not None:
                out[e.entity_id] = p
        return out

    def frame_at(self, t: float) -> SensorFrame:
        return self.frame(self.index_of(t))

    def frame(self, k: int) -> SensorFrame:
        sc = self.scenario
        t = float(sc.times[k])
        robot = sc.robot_path[k]
        sensor = robot @ sc.sensor_extrinsic
        sensor_inv = sensor.inverse()
        truth = self.entity_poses(t)

        det_rng = np.random.default_rng([sc.seed, _STREAM_DET, k])
        detections = []
        for eid in sorted(truth):
            rel = sensor_inv @ truth[eid]
            rng_m = float(np.linalg.norm(rel.translation))
            bearing = math.atan2(rel.translation[1], rel.translation[0])
            if not (rng_m < sc.detection_range and abs(bearing) <= sc.fov / 2):
                continue
            sigma = sc.noise.detection_sigma * (1.0 + rng_m * sc.noise.detection_range_scaling)
            n = det_rng.standard_normal(6) * sigma
            detections.append(
                EntitySnapshot(eid, sc.semantic_class(eid), rel @ Pose.exp(n), np.diag(sigma**2), t)
            )

        plane_rng = np.random.default_rng([sc.seed, _STREAM_PLANE, k])
        planes = []
        for i, patch in enumerate(sc.planes):
            near = patch.nearest_point(sensor.translation)
            if np.linalg.norm(near - sensor.translation) >= sc.detection_range:
                continue
            local = patch.plane.in_frame(robot)
            dn = so3_exp(plane_rng.standard_normal(3) * sc.noise.plane_normal_sigma)
            n = Pose(dn, np.zeros(3)).R @ local.normal
            d = local.distance + plane_rng.standard_normal() * sc.noise.plane_distance_sigma
            planes.append((i, PlaneParam(n, d)))

        return SensorFrame(
            k, t, self.odometry[k], detections, planes, robot, truth,
            scan_source=lambda: self._scan(k, sensor, truth),
        )

    def _scan(self, k: int, sensor: Pose, truth: Mapping[int, Pose]) -> Scan:
        sc = self.scenario
        rng = np.random.default_rng([sc.seed, _STREAM_SCAN, k])
        pts, labels = [], []
        origin = sensor.translation
        for patch in sc.planes:
            if np.linalg.norm(patch.nearest_point(origin) - origin) >= sc.detection_range:
                continue
            area = 4.0 * patch.half_size[0] * patch.half_size[1]
            m = rng.poisson(area * patch.density)
            uv = rng.uniform(-1.0, 1.0, (m, 2)) * patch.half_size
            p = patch.center + uv @ patch.axes.T
            p = p[np.linalg.norm(p - origin, axis=1) < sc.detection_range]
            pts.append(p)
            labels.append(np.full(len(p), STATIC_LABEL))
        for eid in sorted(truth):
            pose = truth[eid]
            if np.linalg.norm(pose.translation - origin) >= sc.detection_range:
                continue
            body = _box_surface(sc.entity_size(eid), self.entity_density, rng)
            pts.append(pose.transform_points(body))
            labels.append(np.full(len(body), eid))
        if not pts:
            return Scan(np.zeros((0, 3)), np.zeros(0, dtype=int))
        world = np.concatenate(pts)
        labels = np.concatenate(labels)
        sigma = sc.noise.scan_point_sigma
        if sigma > 0:
            world = world + np.clip(rng.standard_normal(world.shape), -3.0, 3.0) * sigma
        return Scan(sensor.inverse().transform_points(world), labels)

    def run(self) -> Iterator[SensorFrame]:
        for k in range(len(self)):
            yield self.frame(k)


def frame_at(scenario: Scenario, t: float, simulator: Optional[Simulator] = None) -> SensorFrame:
    return (simulator or Simulator(scenario)).frame_at(t)


def scripted_run(scenario: Scenario) -> Iterator[SensorFrame]:
    """All frames of the scenario at its configured rate."""
    return Simulator(scenario).run()


# ---------------------------------------------------------------------------
# frame records


def frame_to_record(frame: SensorFrame) -> dict:
    return {
        "index": frame.index,
        "time": frame.time,
        "odom": frame.odom.to_list(),
        "scan": {
            "points": frame.scan.points.tolist(),
            "labels": None if frame.scan.labels is None else frame.scan.labels.tolist(),
        },
        "detections": [
            {
                "id": d.entity_id,
                "class": d.semantic_class.value,
                "pose": d.pose_sensor.to_list(),
                "sigma": d.sigma.tolist(),
                "time": d.time,
                "fragment": d.fragment.tolist(),
            }
            for d in frame.detections
        ],
        "planes": [[i, p.vector().tolist()] for i, p in frame.planes],
        "ground_truth_robot": frame.ground_truth_robot.to_list(),
        "ground_truth_entities": {str(k): v.to_list() for k, v in frame.ground_truth_entities.items()},
    }


def frame_from_record(rec: Mapping) -> SensorFrame:
    labels = rec["scan"]["labels"]
    return SensorFrame(
        index=int(rec["index"]),
        time=float(rec["time"]),
        odom=Pose.from_list(rec["odom"]),
        detections=[
            EntitySnapshot(
                int(d["id"]),
                SemanticClass(d["class"]),
                Pose.from_list(d["pose"]),
                np.asarray(d["sigma"]),
                float(d["time"]),
                np.asarray(d["fragment"], dtype=int),
            )
            for d in rec["detections"]
        ],
        planes=[(int(i), PlaneParam(v[:3], v[3])) for i, v in rec["planes"]],
        ground_truth_robot=Pose.from_list(rec["ground_truth_robot"]),
        ground_truth_entities={int(k): Pose.from_list(v) for k, v in rec["ground_truth_entities"].items()},
        scan_data=Scan(np.asarray(rec["scan"]["points"], dtype=float).reshape(-1, 3), labels),
    )


def write_frames(frames, path) -> int:
    """One JSON record per line; returns the number of frames written."""
    n = 0
    with open(path, "w", encoding="utf-8") as fh:
        for f in frames:
            fh.write(json.dumps(frame_to_record(f)) + "\n")
            n += 1
    return n


def read_frames(path) -> Iterator[SensorFrame]:
    with open(path, encoding="utf-8") as fh:
        for line in fh:
            if line.strip():
                yield frame_from_record(json.loads(line))
