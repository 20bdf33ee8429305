"""Trajectory alignment, ATE, entity pose-error series and ablation tables."""
from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Callable, Mapping, Optional, Sequence

import numpy as np

from .geometry import Pose, between, so3_log
from .graph import FactorKind


def _matched(est, gt) -> tuple[np.ndarray, np.ndarray, list[float]]:
    """Translations of poses sharing an exact timestamp, in ``est`` order."""
    gt_by_time = {float(t): p for t, p in gt}
    times, a, b = [], [], []
    for t, p in est:
        q = gt_by_time.get(float(t))
        if q is not None:
            times.append(float(t))
            a.append(p.translation)
            b.append(q.translation)
    return np.array(a).reshape(-1, 3), np.array(b).reshape(-1, 3), times


def align(est, gt) -> Pose:
    """Rigid transform T (no scale) minimizing sum |gt_i - T est_i|^2 over matched translations."""
    a, b, _ = _matched(est, gt)
    if len(a) < 3:
        raise ValueError(f"alignment needs at least 3 timestamp-matched poses, got {len(a)}")
    mu_a, mu_b = a.mean(axis=0), b.mean(axis=0)
    U, _, Vt = np.linalg.svd((a - mu_a).T @ (b - mu_b))
    D = np.eye(3)
    D[2, 2] = np.sign(np.linalg.det(Vt.T @ U.T)) or 1.0
    R = Vt.T @ D @ U.T
    T = np.eye(4)
    T[:3, :3] = R
    T[:3, 3] = mu_b - R @ mu_a
    return Pose.from_matrix(T)


def translation_errors(est, gt, transform: Optional[Pose] = None) -> np.ndarray:
    a, b, _ = _matched(est, gt)
    if len(a) == 0:
        raise ValueError("no timestamps in common")
    T = transform if transform is not None else align(est, gt)
    return np.linalg.norm(b - T.transform_points(a), axis=1)


def ate(est, gt, transform: Optional[Pose] = None) -> tuple[float, float]:
    """(RMSE, std) of translational errors after alignment; std is of the per-pose norms."""
    err = translation_errors(est, gt, transform)
    return float(np.sqrt(np.mean(err**2))), float(np.std(err))


def rotational_ate(est, gt, transform: Optional[Pose] = None) -> float:
    """RMS rotation angle (rad) between aligned estimates and ground truth."""
    T = transform if transform is not None else align(est, gt)
    gt_by_time = {float(t): p for t, p in gt}
    ang = [np.linalg.norm(so3_log(between(gt_by_time[float(t)], T @ p).rotation)) for t, p in est if float(t) in gt_by_time]
    if not ang:
        raise ValueError("no timestamps in common")
    return float(np.sqrt(np.mean(np.square(ang))))


@dataclass
class EntityError:
    epoch: int
    time: float
    translation: float
    rotation: float
    stage: str


def pose_error(est: Pose, truth: Pose) -> tuple[float, float]:
    d = between(truth, est)
    return float(np.linalg.norm(est.translation - truth.translation)), float(np.linalg.norm(so3_log(d.rotation)))


def entity_error_series(report, gt_entities: Callable[[int, float], Optional[Pose]]) -> dict[int, list[EntityError]]:
    """Per entity, one error entry per record: the insertion estimate, then one per optimization epoch.

    ``gt_entities(entity_id, t)`` gives the ground truth at the node's time.
    """
    out: dict[int, list[EntityError]] = {}
    for rec in report.entity_records:
        truth = gt_entities(rec.entity_id, rec.time)
        if truth is None:
            continue
        et, er = pose_error(rec.pose, truth)
        out.setdefault(rec.entity_id, []).append(EntityError(rec.epoch, rec.time, et, er, rec.stage))
    return out


def first_last(series: Mapping[int, Sequence[EntityError]]) -> tuple[dict, dict]:
    first = {eid: s[0].translation for eid, s in series.items() if s}
    last = {eid: s[-1].translation for eid, s in series.items() if s}
    return first, last


@dataclass
class MetricReport:
    scenario: str
    setup: str
    seed: int
    ate_rmse: float
    ate_std: float
    ate_rot_rmse: float
    num_loop_closures: int
    mean_opt_time: float
    keyframes: int
    entity_error_first: dict = field(default_factory=dict)
    entity_error_last: dict = field(default_factory=dict)
    error_series: dict = field(default_factory=dict)

    def to_json(self) -> str:
        data = asdict(self)
        data["entity_error_first"] = {str(k): v for k, v in self.entity_error_first.items()}
        data["entity_error_last"] = {str(k): v for k, v in self.entity_error_last.items()}
        data["error_series"] = {str(k): v for k, v in data["error_series"].items()}
        return json.dumps(data, indent=1, sort_keys=True)


def evaluate(report, scenario) -> MetricReport:
    """Metrics of one run; ``scenario`` provides entity ground truth."""
    T = align(report.trajectory, report.ground_truth)
    rmse, std = ate(report.trajectory, report.ground_truth, T)
    series = entity_error_series(report, scenario.entity_pose)
    first, last = first_last(series)
    return MetricReport(
        scenario=report.scenario,
        setup=report.setup.name,
        seed=report.seed,
        ate_rmse=rmse,
        ate_std=std,
        ate_rot_rmse=rotational_ate(report.trajectory, report.ground_truth, T),
        num_loop_closures=len(report.graph.factors_of(FactorKind.LOOP_CLOSURE)),
        mean_opt_time=float(np.mean(report.opt_times_ms)) if report.opt_times_ms else 0.0,
        keyframes=len(report.trajectory),
        entity_error_first=first,
        entity_error_last=last,
        error_series={eid: [asdict(e) for e in s] for eid, s in series.items()},
    )


def mean_entity_errors(metrics: MetricReport) -> tuple[float, float]:
    """Average over entities of the first and last translational error."""
    keys = sorted(metrics.entity_error_first)
    if not keys:
        return float("nan"), float("nan")
    return (
        float(np.mean([metrics.entity_error_first[k] for k in keys])),
        float(np.mean([metrics.entity_error_last[k] for k in keys])),
    )


def ablation_table(metrics: Sequence[MetricReport]) -> str:
    """Tab-separated rows, one per (scenario, setup), averaged over seeds.

    Columns follow the ablation results layout: RMSE and Std in cm, loop
    closures and mean optimization time in ms.
    """
    groups: dict[tuple, list[MetricReport]] = {}
    for m in metrics:
        groups.setdefault((m.scenario, m.setup), []).append(m)
    lines = ["scenario\tsetup\tseeds\trmse_cm\tstd_cm\tnum_lc\topt_ms"]
    for (scenario, setup), ms in groups.items():
        lines.append(
            "\t".join(
                [
                    scenario,
                    setup,
                    str(len(ms)),
                    f"{100 * np.mean([m.ate_rmse for m in ms]):.3f}",
                    f"{100 * np.mean([m.ate_std for m in ms]):.3f}",
                    f"{np.mean([m.num_loop_closures for m in ms]):.1f}",
                    f"{np.mean([m.mean_opt_time for m in ms]):.1f}",
                ]
            )
        )
    return "\n".join(lines) + "\n"


def entity_table(metrics: Sequence[MetricReport]) -> str:
    """Tab-separated entity errors (cm) when first added and after the last optimization."""
    lines = ["scenario\tsetup\tseed\tentity\tfirst_cm\tlast_cm"]
    for m in metrics:
        for eid in sorted(m.entity_error_first):
            lines.append(
                f"{m.scenario}\t{m.setup}\t{m.seed}\t{eid}\t"
                f"{100 * m.entity_error_first[eid]:.3f}\t{100 * m.entity_error_last[eid]:.3f}"
            )
    return "\n".join(lines) + "\n"


def write_metrics(metrics: MetricReport, path) -> None:
    Path(path).write_text(metrics.to_json() + "\n", encoding="utf-8")
