"""SE(3) arithmetic on unit quaternions.

Quaternions are stored as ``[qx, qy, qz, qw]`` and tangent vectors as
``[rho, phi]`` (translation first, rotation second). The array functions in
this module broadcast over leading axes so the optimizer can evaluate whole
factor groups in one call; :class:`Pose` wraps a single element.
"""
from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

# below this angle the trigonometric coefficients switch to series expansions
SMALL_ANGLE = 1e-6
_SERIES_ANGLE = 1e-2


def skew(v: np.ndarray) -> np.ndarray:
    v = np.asarray(v, dtype=float)
    out = np.zeros(v.shape[:-1] + (3, 3))
    out[..., 0, 1] = -v[..., 2]
    out[..., 0, 2] = v[..., 1]
    out[..., 1, 0] = v[..., 2]
    out[..., 1, 2] = -v[..., 0]
    out[..., 2, 0] = -v[..., 1]
    out[..., 2, 1] = v[..., 0]
    return out


def quat_canonical(q: np.ndarray) -> np.ndarray:
    q = np.asarray(q, dtype=float)
    q = q / np.linalg.norm(q, axis=-1, keepdims=True)
    return np.where(q[..., 3:4] < 0.0, -q, q)


def quat_multiply(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    a = np.asarray(a, dtype=float)
    b = np.asarray(b, dtype=float)
    if a.ndim == 1 and b.ndim == 1:
        ax, ay, az, aw = a.tolist()
        bx, by, bz, bw = b.tolist()
        return np.array([
            aw * bx + ax * bw + ay * bz - az * by,
            aw * by - ax * bz + ay * bw + az * bx,
            aw * bz + ax * by - ay * bx + az * bw,
            aw * bw - ax * bx - ay * by - az * bz,
        ])
    ax, ay, az, aw = a[..., 0], a[..., 1], a[..., 2], a[..., 3]
    bx, by, bz, bw = b[..., 0], b[..., 1], b[..., 2], b[..., 3]
    return np.stack(
        [
            aw * bx + ax * bw + ay * bz - az * by,
            aw * by - ax * bz + ay * bw + az * bx,
            aw * bz + ax * by - ay * bx + az * bw,
            aw * bw - ax * bx - ay * by - az * bz,
        ],
        axis=-1,
    )


def quat_conjugate(q: np.ndarray) -> np.ndarray:
    q = np.array(q, dtype=float)
    q[..., :3] *= -1.0
    return q


def _cross(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    # np.cross carries a lot of per-call overhead for tiny arrays
    if a.ndim == 1 and b.ndim == 1:
        a0, a1, a2 = a.tolist()
        b0, b1, b2 = b.tolist()
        return np.array([a1 * b2 - a2 * b1, a2 * b0 - a0 * b2, a0 * b1 - a1 * b0])
    a0, a1, a2 = a[..., 0], a[..., 1], a[..., 2]
    b0, b1, b2 = b[..., 0], b[..., 1], b[..., 2]
    return np.stack([a1 * b2 - a2 * b1, a2 * b0 - a0 * b2, a0 * b1 - a1 * b0], axis=-1)


def quat_rotate(q: np.ndarray, v: np.ndarray) -> np.ndarray:
    q = np.asarray(q, dtype=float)
    v = np.asarray(v, dtype=float)
    u = q[..., :3]
    w = q[..., 3:4]
    t = 2.0 * _cross(u, v)
    return v + w * t + _cross(u, t)


def quat_to_matrix(q: np.ndarray) -> np.ndarray:
    x, y, z, w = np.moveaxis(np.asarray(q, dtype=float), -1, 0)
    out = np.empty(np.shape(x) + (3, 3))
    out[..., 0, 0] = 1 - 2 * (y * y + z * z)
    out[..., 0, 1] = 2 * (x * y - z * w)
    out[..., 0, 2] = 2 * (x * z + y * w)
    out[..., 1, 0] = 2 * (x * y + z * w)
    out[..., 1, 1] = 1 - 2 * (x * x + z * z)
    out[..., 1, 2] = 2 * (y * z - x * w)
    out[..., 2, 0] = 2 * (x * z - y * w)
    out[..., 2, 1] = 2 * (y * z + x * w)
    out[..., 2, 2] = 1 - 2 * (x * x + y * y)
    return out


def matrix_to_quat(R: np.ndarray) -> np.ndarray:
    """Shepperd's method, single 3x3 matrix."""
    R = np.asarray(R, dtype=float)
    tr = np.trace(R)
    if tr > 0:
        s = 2.0 * np.sqrt(tr + 1.0)
        q = [(R[2, 1] - R[1, 2]) / s, (R[0, 2] - R[2, 0]) / s, (R[1, 0] - R[0, 1]) / s, 0.25 * s]
    elif R[0, 0] > R[1, 1] and R[0, 0] > R[2, 2]:
        s = 2.0 * np.sqrt(1.0 + R[0, 0] - R[1, 1] - R[2, 2])
        q = [0.25 * s, (R[0, 1] + R[1, 0]) / s, (R[0, 2] + R[2, 0]) / s, (R[2, 1] - R[1, 2]) / s]
    elif R[1, 1] > R[2, 2]:
        s = 2.0 * np.sqrt(1.0 + R[1, 1] - R[0, 0] - R[2, 2])
        q = [(R[0, 1] + R[1, 0]) / s, 0.25 * s, (R[1, 2] + R[2, 1]) / s, (R[0, 2] - R[2, 0]) / s]
    else:
        s = 2.0 * np.sqrt(1.0 + R[2, 2] - R[0, 0] - R[1, 1])
        q = [(R[0, 2] + R[2, 0]) / s, (R[1, 2] + R[2, 1]) / s, 0.25 * s, (R[1, 0] - R[0, 1]) / s]
    return quat_canonical(np.array(q))


def so3_exp(phi: np.ndarray) -> np.ndarray:
    """Rotation vector to unit quaternion."""
    phi = np.asarray(phi, dtype=float)
    theta = np.linalg.norm(phi, axis=-1, keepdims=True)
    small = theta < SMALL_ANGLE
    safe = np.where(small, 1.0, theta)
    k = np.where(small, 0.5 - theta**2 / 48.0, np.sin(0.5 * safe) / safe)
    return np.concatenate([k * phi, np.cos(0.5 * theta)], axis=-1)


def so3_log(q: np.ndarray) -> np.ndarray:
    """Unit quaternion to rotation vector with angle in [0, pi]."""
    q = np.asarray(q, dtype=float)
    q = np.where(q[..., 3:4] < 0.0, -q, q)
    v = q[..., :3]
    w = q[..., 3:4]
    n = np.linalg.norm(v, axis=-1, keepdims=True)
    small = n < SMALL_ANGLE
    safe_n = np.where(small, 1.0, n)
    safe_w = np.where(small, np.maximum(w, SMALL_ANGLE), w)
    k = np.where(
        small,
        2.0 / safe_w * (1.0 - n**2 / (3.0 * safe_w**2)),
        2.0 * np.arctan2(n, w) / safe_n,
    )
    return k * v


def _coefficients(theta: np.ndarray):
    """sin(t)/t, (1-cos t)/t^2, (t-sin t)/t^3 with series near zero."""
    small = theta < _SERIES_ANGLE
    t = np.where(small, 1.0, theta)
    t2 = theta * theta
    a = np.where(small, 1.0 - t2 / 6.0 + t2 * t2 / 120.0, np.sin(t) / t)
    b = np.where(small, 0.5 - t2 / 24.0 + t2 * t2 / 720.0, (1.0 - np.cos(t)) / t**2)
    c = np.where(small, 1.0 / 6.0 - t2 / 120.0 + t2 * t2 / 5040.0, (t - np.sin(t)) / t**3)
    return a, b, c


def so3_left_jacobian(phi: np.ndarray) -> np.ndarray:
    phi = np.asarray(phi, dtype=float)
    theta = np.linalg.norm(phi, axis=-1)[..., None, None]
    _, b, c = _coefficients(theta)
    K = skew(phi)
    return np.eye(3) + b * K + c * (K @ K)


def so3_left_jacobian_inv(phi: np.ndarray) -> np.ndarray:
    phi = np.asarray(phi, dtype=float)
    theta = np.linalg.norm(phi, axis=-1)[..., None, None]
    small = theta < _SERIES_ANGLE
    t = np.where(small, 1.0, theta)
    t2 = theta * theta
    # 1/t^2 - cot(t/2)/(2t), finite at t = pi
    d = np.where(
        small,
        1.0 / 12.0 + t2 / 720.0 + t2 * t2 / 30240.0,
        1.0 / t**2 - np.cos(0.5 * t) / (2.0 * t * np.sin(0.5 * t)),
    )
    K = skew(phi)
    return np.eye(3) - 0.5 * K + d * (K @ K)


def se3_exp(xi: np.ndarray):
    """Tangent vector [rho, phi] to (quaternion, translation)."""
    xi = np.asarray(xi, dtype=float)
    rho, phi = xi[..., :3], xi[..., 3:]
    t = np.einsum("...ij,...j->...i", so3_left_jacobian(phi), rho)
    return so3_exp(phi), t


def se3_log(q: np.ndarray, t: np.ndarray) -> np.ndarray:
    phi = so3_log(q)
    rho = np.einsum("...ij,...j->...i", so3_left_jacobian_inv(phi), np.asarray(t, dtype=float))
    return np.concatenate([rho, phi], axis=-1)


def se3_compose(qa, ta, qb, tb):
    return quat_multiply(qa, qb), np.asarray(ta, dtype=float) + quat_rotate(qa, tb)


def se3_inverse(q, t):
    qi = quat_conjugate(q)
    return qi, -quat_rotate(qi, t)


def se3_between(qa, ta, qb, tb):
    qi, ti = se3_inverse(qa, ta)
    return se3_compose(qi, ti, qb, tb)


def _q_block(rho: np.ndarray, phi: np.ndarray) -> np.ndarray:
    """Off-diagonal block of the SE(3) left Jacobian."""
    theta = np.linalg.norm(phi, axis=-1)[..., None, None]
    small = theta < _SERIES_ANGLE
    t = np.where(small, 1.0, theta)
    t2 = theta * theta
    c1 = np.where(small, 1.0 / 6.0 - t2 / 120.0 + t2 * t2 / 5040.0, (t - np.sin(t)) / t**3)
    c2 = np.where(
        small,
        1.0 / 24.0 - t2 / 720.0 + t2 * t2 / 40320.0,
        (t * t + 2.0 * np.cos(t) - 2.0) / (2.0 * t**4),
    )
    c3 = np.where(
        small,
        1.0 / 120.0 - t2 / 2520.0 + t2 * t2 / 120960.0,
        (2.0 * t - 3.0 * np.sin(t) + t * np.cos(t)) / (2.0 * t**5),
    )
    P = skew(phi)
    Rr = skew(rho)
    PR = P @ Rr
    RP = Rr @ P
    PRP = PR @ P
    PP = P @ P
    return (
        0.5 * Rr
        + c1 * (PR + RP + PRP)
        + c2 * (PP @ Rr + RP @ P - 3.0 * PRP)
        + c3 * (PRP @ P + PP @ RP)
    )


def se3_left_jacobian(xi: np.ndarray) -> np.ndarray:
    xi = np.asarray(xi, dtype=float)
    rho, phi = xi[..., :3], xi[..., 3:]
    J = np.zeros(xi.shape[:-1] + (6, 6))
    Jl = so3_left_jacobian(phi)
    J[..., :3, :3] = Jl
    J[..., 3:, 3:] = Jl
    J[..., :3, 3:] = _q_block(rho, phi)
    return J


def se3_right_jacobian(xi: np.ndarray) -> np.ndarray:
    return se3_left_jacobian(-np.asarray(xi, dtype=float))


def se3_right_jacobian_inv(xi: np.ndarray) -> np.ndarray:
    xi = np.asarray(xi, dtype=float)
    rho, phi = -xi[..., :3], -xi[..., 3:]
    Ji = so3_left_jacobian_inv(phi)
    J = np.zeros(xi.shape[:-1] + (6, 6))
    J[..., :3, :3] = Ji
    J[..., 3:, 3:] = Ji
    J[..., :3, 3:] = -Ji @ _q_block(rho, phi) @ Ji
    return J


def se3_adjoint(q: np.ndarray, t: np.ndarray) -> np.ndarray:
    R = quat_to_matrix(q)
    Ad = np.zeros(R.shape[:-2] + (6, 6))
    Ad[..., :3, :3] = R
    Ad[..., 3:, 3:] = R
    Ad[..., :3, 3:] = skew(t) @ R
    return Ad


def _rotate_scalar(x, y, z, w, vx, vy, vz) -> np.ndarray:
    tx = 2.0 * (y * vz - z * vy)
    ty = 2.0 * (z * vx - x * vz)
    tz = 2.0 * (x * vy - y * vx)
    return np.array(
        [
            vx + w * tx + (y * tz - z * ty),
            vy + w * ty + (z * tx - x * tz),
            vz + w * tz + (x * ty - y * tx),
        ]
    )


@dataclass(frozen=True, eq=False)
class Pose:
    """Rigid transform with a unit quaternion ``[qx, qy, qz, qw]`` and a translation in meters."""

    rotation: np.ndarray
    translation: np.ndarray

    def __post_init__(self):
        q = np.array(self.rotation, dtype=float).reshape(4)
        n = math.sqrt(q @ q)
        q = q / (-n if q[3] < 0.0 else n)
        t = np.array(self.translation, dtype=float).reshape(3)
        q.flags.writeable = False
        t.flags.writeable = False
        object.__setattr__(self, "rotation", q)
        object.__setattr__(self, "translation", t)

    @classmethod
    def identity(cls) -> "Pose":
        return cls(np.array([0.0, 0.0, 0.0, 1.0]), np.zeros(3))

    @classmethod
    def from_translation(cls, x: float = 0.0, y: float = 0.0, z: float = 0.0) -> "Pose":
        return cls(np.array([0.0, 0.0, 0.0, 1.0]), np.array([x, y, z], dtype=float))

    @classmethod
    def from_rotvec(cls, rotvec, translation=(0.0, 0.0, 0.0)) -> "Pose":
        return cls(so3_exp(np.asarray(rotvec, dtype=float)), np.asarray(translation, dtype=float))

    @classmethod
    def from_yaw(cls, yaw: float, translation=(0.0, 0.0, 0.0)) -> "Pose":
        return cls.from_rotvec([0.0, 0.0, yaw], translation)

    @classmethod
    def exp(cls, xi) -> "Pose":
        q, t = se3_exp(np.asarray(xi, dtype=float))
        return cls(q, t)

    @classmethod
    def from_matrix(cls, T) -> "Pose":
        T = np.asarray(T, dtype=float)
        return cls(matrix_to_quat(T[:3, :3]), T[:3, 3])

    @classmethod
    def from_list(cls, values) -> "Pose":
        """Inverse of :meth:`to_list`: ``[tx, ty, tz, qx, qy, qz, qw]``."""
        values = np.asarray(values, dtype=float)
        if values.shape != (7,):
            raise ValueError(f"pose needs 7 values [tx ty tz qx qy qz qw], got {values.shape}")
        return cls(values[3:], values[:3])

    def to_list(self) -> list[float]:
        return [float(v) for v in np.concatenate([self.translation, self.rotation])]

    def log(self) -> np.ndarray:
        return se3_log(self.rotation, self.translation)

    def matrix(self) -> np.ndarray:
        T = np.eye(4)
        T[:3, :3] = quat_to_matrix(self.rotation)
        T[:3, 3] = self.translation
        return T

    @property
    def R(self) -> np.ndarray:
        return quat_to_matrix(self.rotation)

    # Scalar code paths: these run per frame and per detection, where numpy
    # call overhead dominates the arithmetic.
    def inverse(self) -> "Pose":
        x, y, z, w = self.rotation.tolist()
        return Pose(np.array([-x, -y, -z, w]), -_rotate_scalar(-x, -y, -z, w, *self.translation.tolist()))

    def compose(self, other: "Pose") -> "Pose":
        ax, ay, az, aw = self.rotation.tolist()
        bx, by, bz, bw = other.rotation.tolist()
        q = np.array(
            [
                aw * bx + ax * bw + ay * bz - az * by,
                aw * by - ax * bz + ay * bw + az * bx,
                aw * bz + ax * by - ay * bx + az * bw,
                aw * bw - ax * bx - ay * by - az * bz,
            ]
        )
        return Pose(q, self.translation + _rotate_scalar(ax, ay, az, aw, *other.translation.tolist()))

    __matmul__ = compose

    def transform_points(self, points: np.ndarray) -> np.ndarray:
        points = np.asarray(points, dtype=float)
        if points.size == 0:
            return points.reshape(-1, 3).copy()
        return points @ self.R.T + self.translation

    def isclose(self, other: "Pose", tol: float = 1e-9) -> bool:
        return tangent_norm(between(self, other)) <= tol

    def __repr__(self) -> str:
        t = np.array2string(self.translation, precision=4, suppress_small=True)
        q = np.array2string(self.rotation, precision=4, suppress_small=True)
        return f"Pose(t={t}, q={q})"


def compose(a: Pose, b: Pose) -> Pose:
    return a.compose(b)


def inverse(p: Pose) -> Pose:
    return p.inverse()


def between(a: Pose, b: Pose) -> Pose:
    """``inverse(a) * b``: pose of ``b`` expressed in the frame of ``a``."""
    return a.inverse().compose(b)


def tangent_norm(p: Pose, rotation_weight: float = 1.0) -> float:
    """sqrt(|rho|^2 + w |phi|^2) of log(p)."""
    xi = p.log()
    return float(np.sqrt(xi[:3] @ xi[:3] + rotation_weight * (xi[3:] @ xi[3:])))


def check_psd(info: np.ndarray, name: str = "information matrix") -> np.ndarray:
    info = np.asarray(info, dtype=float)
    if info.ndim != 2 or info.shape[0] != info.shape[1]:
        raise ValueError(f"{name} must be square, got shape {info.shape}")
    scale = max(1.0, float(np.abs(info).max(initial=0.0)))
    if not np.allclose(info, info.T, atol=1e-12 * scale):
        raise ValueError(f"{name} is not symmetric")
    if np.linalg.eigvalsh(info).min() < -1e-12 * scale:
        raise ValueError(f"{name} is not positive semi-definite")
    return info


def mahalanobis(r: np.ndarray, info: np.ndarray) -> float:
    """sqrt(r^T info r) for a PSD information matrix."""
    info = check_psd(info)
    r = np.asarray(r, dtype=float)
    return float(np.sqrt(max(r @ info @ r, 0.0)))


def sqrt_information(info) -> np.ndarray:
    """Square root factor L with ``L.T @ L == info`` (works for singular PSD matrices)."""
    info = np.atleast_2d(check_psd(np.atleast_2d(np.asarray(info, dtype=float))))
    w, V = np.linalg.eigh(0.5 * (info + info.T))
    return (V * np.sqrt(np.clip(w, 0.0, None))).T
