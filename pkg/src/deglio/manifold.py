"""Rotation and navigation-state manifold primitives.

Conventions used across the package:

- Rotation matrices are plain (3, 3) numpy arrays mapping body-frame vectors
  into the world frame.
- Perturbations act on the right, ``R_new = R @ rot_exp(dr)``, so rotation
  increments ``dr`` live in the body frame; translation (and every other
  vector block) perturbs by plain addition in its own frame.
- The 18-dim error vector is ordered ``[dr, dt, dv, dbg, dba, dg]``.  The
  slice constants below are the single source of truth for that layout and
  must match the measurement Jacobian block order used by the filter.

The perturbation side is a convention choice: the body-frame (right) form is
used because the backend pose residual is computed as ``log(R^T R_meas)``,
which is a body-frame error.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

# Error-state layout: rotation, translation, velocity, gyro bias, accel bias,
# gravity.
DR = slice(0, 3)
DT = slice(3, 6)
DV = slice(6, 9)
DBG = slice(9, 12)
DBA = slice(12, 15)
DG = slice(15, 18)
ERROR_DIM = 18

POSE_DR = slice(0, 3)
POSE_DT = slice(3, 6)
POSE_DIM = 6

_SMALL_ANGLE = 1e-8

GRAVITY_BAND = (9.0, 10.6)


def skew(v: np.ndarray) -> np.ndarray:
    """Cross-product matrix; batched over leading axes of a (..., 3) input."""
    v = np.asarray(v, dtype=float)
    out = np.zeros(v.shape[:-1] + (3, 3))
    out[..., 0, 1] = -v[..., 2]
    out[..., 0, 2] = v[..., 1]
    out[..., 1, 0] = v[..., 2]
    out[..., 1, 2] = -v[..., 0]
    out[..., 2, 0] = -v[..., 1]
    out[..., 2, 1] = v[..., 0]
    return out


def rot_exp(phi: np.ndarray) -> np.ndarray:
    """Rodrigues exponential map, (..., 3) -> (..., 3, 3).

    Below ``1e-8`` rad the sinc coefficients switch to their second-order
    series to avoid catastrophic cancellation.
    """
    phi = np.asarray(phi, dtype=float)
    theta = np.linalg.norm(phi, axis=-1)
    s = skew(phi)
    s2 = s @ s

    small = theta < _SMALL_ANGLE
    theta_safe = np.where(small, 1.0, theta)
    t2 = theta * theta
    # sin(t)/t and (1-cos(t))/t^2 with series fallbacks
    a = np.where(small, 1.0 - t2 / 6.0, np.sin(theta_safe) / theta_safe)
    b = np.where(small, 0.5 - t2 / 24.0, (1.0 - np.cos(theta_safe)) / (theta_safe * theta_safe))

    eye = np.broadcast_to(np.eye(3), s.shape)
    return eye + a[..., None, None] * s + b[..., None, None] * s2


def is_rotation(R: np.ndarray, tol: float = 1e-8) -> bool:
    R = np.asarray(R)
    if R.shape != (3, 3) or not np.all(np.isfinite(R)):
        return False
    if not np.allclose(R @ R.T, np.eye(3), atol=tol):
        return False
    return abs(np.linalg.det(R) - 1.0) <= tol


def require_rotation(R: np.ndarray, tol: float = 1e-8) -> np.ndarray:
    R = np.asarray(R, dtype=float)
    if not is_rotation(R, tol):
        raise ValueError("matrix is not a proper rotation (orthonormality/det check failed)")
    return R


def rot_log(R: np.ndarray) -> np.ndarray:
    """Logarithm map of a rotation matrix to a 3-vector with norm <= pi.

    Handles the angle pi branch by axis extraction from the symmetric part;
    at exactly pi the axis sign is arbitrary and either is returned.
    Non-orthonormal input is rejected.
    """
    R = require_rotation(R)
    return _log_unchecked(R)


def _log_unchecked(R: np.ndarray) -> np.ndarray:
    """rot_log without the validity check, for hot paths with trusted input."""
    cos_theta = np.clip((np.trace(R) - 1.0) * 0.5, -1.0, 1.0)
    theta = np.arccos(cos_theta)
    w = 0.5 * np.array([R[2, 1] - R[1, 2], R[0, 2] - R[2, 0], R[1, 0] - R[0, 1]])

    if theta < 1e-7:
        # w = sin(theta) * axis; for tiny angles w itself is phi to O(theta^3)
        return w
    if theta > np.pi - 1e-3:
        # Near pi the antisymmetric part loses the axis: recover it from
        # aa^T = (R + R^T - 2 cos(theta) I) / (2 (1 - cos(theta))).
        outer = (R + R.T - 2.0 * cos_theta * np.eye(3)) / (2.0 * (1.0 - cos_theta))
        j = int(np.argmax(np.diag(outer)))
        axis = outer[:, j] / np.sqrt(outer[j, j])
        # Align with the antisymmetric part when it still carries sign info.
        if np.dot(axis, w) < 0.0:
            axis = -axis
        return theta * axis
    return theta / np.sin(theta) * w


def right_jacobian(phi: np.ndarray) -> np.ndarray:
    """Right Jacobian J_r of the exponential: exp(phi + J_r d) ~ exp(phi) exp(d)."""
    phi = np.asarray(phi, dtype=float)
    theta = np.linalg.norm(phi)
    s = skew(phi)
    if theta < _SMALL_ANGLE:
        return np.eye(3) - 0.5 * s + s @ s / 6.0
    t2 = theta * theta
    return (
        np.eye(3)
        - (1.0 - np.cos(theta)) / t2 * s
        + (theta - np.sin(theta)) / (t2 * theta) * (s @ s)
    )


def right_jacobian_inv(phi: np.ndarray) -> np.ndarray:
    phi = np.asarray(phi, dtype=float)
    theta = np.linalg.norm(phi)
    s = skew(phi)
    if theta < _SMALL_ANGLE:
        return np.eye(3) + 0.5 * s + s @ s / 12.0
    t2 = theta * theta
    cot_term = 1.0 / t2 - (1.0 + np.cos(theta)) / (2.0 * theta * np.sin(theta))
    return np.eye(3) + 0.5 * s + cot_term * (s @ s)


def left_jacobian(phi: np.ndarray) -> np.ndarray:
    return right_jacobian(-np.asarray(phi, dtype=float))


def left_jacobian_inv(phi: np.ndarray) -> np.ndarray:
    return right_jacobian_inv(-np.asarray(phi, dtype=float))


def _frozen(a, shape) -> np.ndarray:
    out = np.array(a, dtype=float).reshape(shape)
    if not np.all(np.isfinite(out)):
        raise ValueError("state component contains non-finite values")
    out.setflags(write=False)
    return out


@dataclass(frozen=True)
class State:
    """Full navigation state: attitude, position, velocity, IMU biases, gravity.

    Units: pos [m], vel [m/s], bias_gyro [rad/s], bias_accel [m/s^2],
    gravity [m/s^2] (world frame, typically ~(0, 0, -9.81)).
    Instances are immutable value objects; arrays are defensive read-only
    copies.
    """

    rot: np.ndarray
    pos: np.ndarray
    vel: np.ndarray
    bias_gyro: np.ndarray
    bias_accel: np.ndarray
    gravity: np.ndarray

    def __post_init__(self):
        object.__setattr__(self, "rot", _frozen(require_rotation(self.rot), (3, 3)))
        for name in ("pos", "vel", "bias_gyro", "bias_accel", "gravity"):
            object.__setattr__(self, name, _frozen(getattr(self, name), (3,)))

    @classmethod
    def identity(cls, gravity=(0.0, 0.0, -9.81)) -> "State":
        z = np.zeros(3)
        return cls(np.eye(3), z, z, z, z, np.asarray(gravity, dtype=float))

    def check_gravity_band(self, band=GRAVITY_BAND) -> None:
        g = float(np.linalg.norm(self.gravity))
        if not (band[0] <= g <= band[1]):
            raise ValueError(f"gravity magnitude {g:.3f} outside sanity band {band}")


def boxplus(x: State, dx: np.ndarray) -> State:
    """Apply an 18-dim tangent increment: rotation on the right, vectors added."""
    dx = np.asarray(dx, dtype=float).reshape(ERROR_DIM)
    return State(
        rot=x.rot @ rot_exp(dx[DR]),
        pos=x.pos + dx[DT],
        vel=x.vel + dx[DV],
        bias_gyro=x.bias_gyro + dx[DBG],
        bias_accel=x.bias_accel + dx[DBA],
        gravity=x.gravity + dx[DG],
    )


def boxminus(a: State, b: State) -> np.ndarray:
    """Tangent difference such that ``boxplus(b, boxminus(a, b)) == a``."""
    dx = np.empty(ERROR_DIM)
    dx[DR] = _log_unchecked(b.rot.T @ a.rot)
    dx[DT] = a.pos - b.pos
    dx[DV] = a.vel - b.vel
    dx[DBG] = a.bias_gyro - b.bias_gyro
    dx[DBA] = a.bias_accel - b.bias_accel
    dx[DG] = a.gravity - b.gravity
    return dx


# --- SE(3) pose helpers shared by the spline, registration and the graph ---

def pose_boxplus(rot: np.ndarray, pos: np.ndarray, delta: np.ndarray):
    """6-dim pose increment [dr, dt] with the same conventions as boxplus."""
    delta = np.asarray(delta, dtype=float).reshape(POSE_DIM)
    return rot @ rot_exp(delta[POSE_DR]), pos + delta[POSE_DT]


def pose_boxminus(rot_a, pos_a, rot_b, pos_b) -> np.ndarray:
    out = np.empty(POSE_DIM)
    out[POSE_DR] = _log_unchecked(np.asarray(rot_b).T @ np.asarray(rot_a))
    out[POSE_DT] = np.asarray(pos_a) - np.asarray(pos_b)
    return out


def compose_pose(rot_a, pos_a, rot_b, pos_b):
    """(R_a, p_a) * (R_b, p_b): first apply b, then a."""
    return rot_a @ rot_b, rot_a @ pos_b + pos_a


def invert_pose(rot, pos):
    return rot.T, -(rot.T @ pos)


def relative_pose(rot_a, pos_a, rot_b, pos_b):
    """Pose of b expressed in frame a: T_a^-1 * T_b."""
    rot_ai, pos_ai = invert_pose(rot_a, pos_a)
    return compose_pose(rot_ai, pos_ai, rot_b, pos_b)


def transform_points(rot, pos, pts: np.ndarray) -> np.ndarray:
    return np.asarray(pts) @ np.asarray(rot).T + np.asarray(pos)
