"""Pose-graph SLAM back end with time-indexed dynamic entities, plus a scenario simulator."""
from .evaluation import MetricReport, align, ate, evaluate
from .geometry import Pose, between, compose, inverse, tangent_norm
from .graph import FactorGraph, FactorKind, NodeId, NodeKind, PlaneParam
from .optimizer import OptConfig, OptReport, optimize
from .pipeline import PRESETS, AblationSetup, RunReport, SlamConfig, map_entity, parse_setup, run
from .simulator import Scenario, Simulator, build, load_scenario, scripted_run

__all__ = [
    "AblationSetup",
    "FactorGraph",
    "FactorKind",
    "MetricReport",
    "NodeId",
    "NodeKind",
    "OptConfig",
    "OptReport",
    "PRESETS",
    "PlaneParam",
    "Pose",
    "RunReport",
    "Scenario",
    "Simulator",
    "SlamConfig",
    "align",
    "ate",
    "between",
    "build",
    "compose",
    "evaluate",
    "inverse",
    "load_scenario",
    "map_entity",
    "optimize",
    "parse_setup",
    "run",
    "scripted_run",
    "tangent_norm",
]
