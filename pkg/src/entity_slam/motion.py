"""Expected motion models for intra-entity factors, chosen by semantic class."""
from __future__ import annotations

import enum
from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from .geometry import Pose, between, check_psd, mahalanobis


class SemanticClass(enum.Enum):
    AGENT = "agent"
    OBJECT = "object"


class PriorKind(enum.Enum):
    NONE = "none"
    STRAIGHT_LINE = "straight_line"


@dataclass(frozen=True, eq=False)
class MotionPrior:
    kind: PriorKind = PriorKind.NONE
    direction: Optional[np.ndarray] = None

    def __post_init__(self):
        if self.kind is PriorKind.STRAIGHT_LINE:
            u = np.asarray(self.direction, dtype=float).reshape(3)
            if abs(np.linalg.norm(u) - 1.0) > 1e-9:
                raise ValueError(f"straight-line direction must be a unit vector, |u| = {np.linalg.norm(u)}")
            object.__setattr__(self, "direction", u)

    @classmethod
    def straight(cls, direction) -> "MotionPrior":
        return cls(PriorKind.STRAIGHT_LINE, np.asarray(direction, dtype=float))


NONE = MotionPrior()


@dataclass
class MotionConfig:
    """Class-level information matrices and thresholds for the motion models.

    ``nu`` is compared against the Mahalanobis norm under ``object_info``;
    ``kappa`` scales the off-axis and rotational information of the
    straight-line agent model.
    """

    object_info: np.ndarray = field(default_factory=lambda: np.eye(6))
    agent_info: np.ndarray = field(default_factory=lambda: np.eye(6))
    nu: float = 0.05
    kappa: float = 0.01

    def __post_init__(self):
        self.object_info = check_psd(np.asarray(self.object_info, dtype=float))
        self.agent_info = check_psd(np.asarray(self.agent_info, dtype=float))
        if self.nu <= 0:
            raise ValueError("nu must be positive")
        if not 0 < self.kappa <= 1:
            raise ValueError("kappa must lie in (0, 1]")


def object_model(eps_prev: Pose, eps_detected: Pose, info: np.ndarray, nu: float) -> Pose:
    """Identity when the relative pose is within the noise gate ``nu``, else the relative pose."""
    rel = between(eps_prev, eps_detected)
    if mahalanobis(rel.log(), info) < nu:
        return Pose.identity()
    return rel


def agent_model_free(eps_prev: Pose, eps_detected: Pose) -> Pose:
    return between(eps_prev, eps_detected)


def straight_line_info(info: np.ndarray, u: np.ndarray, kappa: float) -> np.ndarray:
    """Keep the along-``u`` information, scale the orthogonal and rotational parts by ``kappa``."""
    u = np.asarray(u, dtype=float)
    P = np.outer(u, u)
    S = np.zeros((6, 6))
    S[:3, :3] = P + np.sqrt(kappa) * (np.eye(3) - P)
    S[3:, 3:] = np.sqrt(kappa) * np.eye(3)
    out = S @ np.asarray(info, dtype=float) @ S
    return 0.5 * (out + out.T)


def agent_model_straight(
    eps_prev: Pose,
    eps_detected: Pose,
    u: np.ndarray,
    info: Optional[np.ndarray] = None,
    kappa: float = 0.01,
) -> tuple[Pose, np.ndarray]:
    """Project the relative pose onto the line spanned by ``u``.

    ``u`` is expressed in the frame of ``eps_prev``. Rotation is dropped
    entirely; only the translation component along ``u`` survives.
    """
    u = np.asarray(u, dtype=float)
    if abs(np.linalg.norm(u) - 1.0) > 1e-9:
        raise ValueError("u must be a unit vector")
    rel = between(eps_prev, eps_detected)
    model = Pose.from_translation(*((u @ rel.translation) * u))
    base = np.eye(6) if info is None else info
    return model, straight_line_info(base, u, kappa)


def select_model(
    semantic_class: SemanticClass,
    prior: MotionPrior,
    eps_prev: Pose,
    eps_detected: Pose,
    config: MotionConfig,
) -> tuple[Pose, np.ndarray]:
    """Expected motion and its information matrix for one pair of observations."""
    if semantic_class is SemanticClass.OBJECT:
        return object_model(eps_prev, eps_detected, config.object_info, config.nu), config.object_info
    if prior.kind is PriorKind.STRAIGHT_LINE:
        return agent_model_straight(eps_prev, eps_detected, prior.direction, config.agent_info, config.kappa)
    return agent_model_free(eps_prev, eps_detected), config.agent_info
