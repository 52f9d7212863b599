"""IMU propagation, preintegration and B-spline pose interpolation.

Propagation follows the discrete kinematic model, one Euler step per IMU
sample:

    R' = R Exp((w - bg) dt)
    t' = t + v dt
    v' = v + (R (a - ba) + g) dt

with the covariance advanced as F P F^T + Q.  Preintegration compounds the
gravity-free relative motion between two graph nodes together with
first-order bias Jacobians and a 9x9 covariance over [dtheta, dv, dp].
Undistortion interpolates body poses with a cumulative cubic B-spline on
rotation and a plain cubic B-spline on translation over uniform knots.
"""
from __future__ import annotations

from dataclasses import dataclass
from typing import Optional, Sequence

import numpy as np

from . import manifold as mf
from .manifold import DBA, DBG, DG, DR, DT, DV, ERROR_DIM
from .registration import Scan


@dataclass(frozen=True)
class ImuSample:
    """One IMU reading: time [s], angular rate [rad/s], specific force [m/s^2]."""

    timestamp: float
    gyro: np.ndarray
    accel: np.ndarray

    def __post_init__(self):
        g = np.asarray(self.gyro, dtype=float).reshape(3)
        a = np.asarray(self.accel, dtype=float).reshape(3)
        if not (np.all(np.isfinite(g)) and np.all(np.isfinite(a)) and np.isfinite(self.timestamp)):
            raise ValueError("IMU sample contains non-finite values")
        g.setflags(write=False)
        a.setflags(write=False)
        object.__setattr__(self, "gyro", g)
        object.__setattr__(self, "accel", a)


@dataclass(frozen=True)
class NoiseParams:
    """Continuous-time IMU noise densities (PSDs), all strictly positive.

    gyro_noise [rad/s/sqrt(Hz)], accel_noise [m/s^2/sqrt(Hz)],
    gyro_bias_walk [rad/s^2/sqrt(Hz)], accel_bias_walk [m/s^3/sqrt(Hz)].
    """

    gyro_noise: float
    accel_noise: float
    gyro_bias_walk: float
    accel_bias_walk: float

    def __post_init__(self):
        for name in ("gyro_noise", "accel_noise", "gyro_bias_walk", "accel_bias_walk"):
            if not getattr(self, name) > 0.0:
                raise ValueError(f"{name} must be strictly positive")


def _check_psd(P: np.ndarray, what: str) -> None:
    if not np.allclose(P, P.T, atol=1e-9):
        raise ValueError(f"{what} must be symmetric")
    evals = np.linalg.eigvalsh(P)
    if evals.min() < -1e-10 * max(evals.max(), 1.0):
        raise ValueError(f"{what} must be positive semidefinite")


def transition_matrix(x: mf.State, u: ImuSample, dt: float) -> np.ndarray:
    """Error-state Jacobian F of one discrete propagation step."""
    w = u.gyro - x.bias_gyro
    a = u.accel - x.bias_accel
    F = np.eye(ERROR_DIM)
    F[DR, DR] = mf.rot_exp(-w * dt)
    F[DR, DBG] = -mf.right_jacobian(w * dt) * dt
    F[DT, DV] = np.eye(3) * dt
    F[DV, DR] = -x.rot @ mf.skew(a) * dt
    F[DV, DBA] = -x.rot * dt
    F[DV, DG] = np.eye(3) * dt
    return F


def process_noise(x: mf.State, u: ImuSample, dt: float, noise: NoiseParams) -> np.ndarray:
    """Discrete process noise Q for one step (white noise PSDs scaled by dt)."""
    Q = np.zeros((ERROR_DIM, ERROR_DIM))
    jr = mf.right_jacobian((u.gyro - x.bias_gyro) * dt)
    Q[DR, DR] = noise.gyro_noise**2 * dt * (jr @ jr.T)
    Q[DV, DV] = noise.accel_noise**2 * dt * np.eye(3)
    Q[DBG, DBG] = noise.gyro_bias_walk**2 * dt * np.eye(3)
    Q[DBA, DBA] = noise.accel_bias_walk**2 * dt * np.eye(3)
    return Q


def propagate(
    x: mf.State,
    P: np.ndarray,
    u: ImuSample,
    dt: float,
    noise: NoiseParams,
) -> tuple[mf.State, np.ndarray]:
    """One discrete propagation step of the state and its 18x18 covariance."""
    if not dt > 0.0:
        raise ValueError("dt must be positive")
    P = np.asarray(P, dtype=float)
    _check_psd(P, "input covariance")

    w = u.gyro - x.bias_gyro
    a = u.accel - x.bias_accel
    x_next = mf.State(
        rot=x.rot @ mf.rot_exp(w * dt),
        pos=x.pos + x.vel * dt,
        vel=x.vel + (x.rot @ a + x.gravity) * dt,
        bias_gyro=x.bias_gyro,
        bias_accel=x.bias_accel,
        gravity=x.gravity,
    )
    F = transition_matrix(x, u, dt)
    P_next = F @ P @ F.T + process_noise(x, u, dt, noise)
    return x_next, 0.5 * (P_next + P_next.T)


@dataclass(frozen=True)
class Preintegrated:
    """Gravity-free relative motion compounded from IMU samples.

    Deltas are expressed in the frame of the first sample's body pose.
    ``cov`` is over the right-perturbation error [dtheta, dv, dp].  The
    Jacobian blocks give the first-order sensitivity of the deltas to the
    linearization biases ``bias_gyro_ref`` / ``bias_accel_ref``.
    """

    d_rot: np.ndarray
    d_vel: np.ndarray
    d_pos: np.ndarray
    dt_total: float
    cov: np.ndarray
    j_rot_bg: np.ndarray
    j_vel_bg: np.ndarray
    j_vel_ba: np.ndarray
    j_pos_bg: np.ndarray
    j_pos_ba: np.ndarray
    bias_gyro_ref: np.ndarray
    bias_accel_ref: np.ndarray


def preintegrate(
    samples: Sequence[ImuSample],
    bias_gyro: np.ndarray,
    bias_accel: np.ndarray,
    noise: NoiseParams,
) -> Preintegrated:
    """Compound samples into a relative-motion factor at a fixed bias.

    Integration is zero-order hold: sample k's measurement acts over
    [t_k, t_{k+1}), so the last sample only closes the interval.  A single
    sample therefore yields identity deltas, and preintegrating [a..b] then
    [b..c] composes exactly to [a..c].
    """
    if len(samples) == 0:
        raise ValueError("need at least one IMU sample")
    ts = np.array([s.timestamp for s in samples])
    if np.any(np.diff(ts) <= 0.0):
        raise ValueError("sample timestamps must be strictly increasing")
    bg = np.asarray(bias_gyro, dtype=float).reshape(3)
    ba = np.asarray(bias_accel, dtype=float).reshape(3)

    d_rot = np.eye(3)
    d_vel = np.zeros(3)
    d_pos = np.zeros(3)
    j_rot_bg = np.zeros((3, 3))
    j_vel_bg = np.zeros((3, 3))
    j_vel_ba = np.zeros((3, 3))
    j_pos_bg = np.zeros((3, 3))
    j_pos_ba = np.zeros((3, 3))
    cov = np.zeros((9, 9))
    sg2 = noise.gyro_noise**2
    sa2 = noise.accel_noise**2

    for k in range(len(samples) - 1):
        dt = float(ts[k + 1] - ts[k])
        w = samples[k].gyro - bg
        a = samples[k].accel - ba
        dtheta = w * dt
        exp_dtheta = mf.rot_exp(dtheta)
        jr = mf.right_jacobian(dtheta)
        ra = d_rot @ a
        a_skew = mf.skew(a)

        # Covariance first (uses the pre-update d_rot)
        A = np.eye(9)
        A[0:3, 0:3] = exp_dtheta.T
        A[3:6, 0:3] = -d_rot @ a_skew * dt
        A[6:9, 0:3] = -0.5 * d_rot @ a_skew * dt * dt
        A[6:9, 3:6] = np.eye(3) * dt
        B = np.zeros((9, 6))
        B[0:3, 0:3] = jr * dt
        B[3:6, 3:6] = d_rot * dt
        B[6:9, 3:6] = 0.5 * d_rot * dt * dt
        Qd = np.diag([sg2 / dt] * 3 + [sa2 / dt] * 3)
        cov = A @ cov @ A.T + B @ Qd @ B.T

        # Bias Jacobians (pre-update values on the right-hand side)
        j_pos_bg = j_pos_bg + j_vel_bg * dt - 0.5 * d_rot @ a_skew @ j_rot_bg * dt * dt
        j_pos_ba = j_pos_ba + j_vel_ba * dt - 0.5 * d_rot * dt * dt
        j_vel_bg = j_vel_bg - d_rot @ a_skew @ j_rot_bg * dt
        j_vel_ba = j_vel_ba - d_rot * dt
        j_rot_bg = exp_dtheta.T @ j_rot_bg - jr * dt

        # Deltas
        d_pos = d_pos + d_vel * dt + 0.5 * ra * dt * dt
        d_vel = d_vel + ra * dt
        d_rot = d_rot @ exp_dtheta

    return Preintegrated(
        d_rot=d_rot,
        d_vel=d_vel,
        d_pos=d_pos,
        dt_total=float(ts[-1] - ts[0]),
        cov=0.5 * (cov + cov.T),
        j_rot_bg=j_rot_bg,
        j_vel_bg=j_vel_bg,
        j_vel_ba=j_vel_ba,
        j_pos_bg=j_pos_bg,
        j_pos_ba=j_pos_ba,
        bias_gyro_ref=bg,
        bias_accel_ref=ba,
    )


def compose(a: Preintegrated, b: Preintegrated) -> Preintegrated:
    """Chain two preintegrated segments sharing their boundary sample."""
    d_rot = a.d_rot @ b.d_rot
    d_vel = a.d_vel + a.d_rot @ b.d_vel
    d_pos = a.d_pos + a.d_vel * b.dt_total + a.d_rot @ b.d_pos

    sv = mf.skew(b.d_vel)
    sp = mf.skew(b.d_pos)
    Aa = np.eye(9)
    Aa[0:3, 0:3] = b.d_rot.T
    Aa[3:6, 0:3] = -a.d_rot @ sv
    Aa[6:9, 0:3] = -a.d_rot @ sp
    Aa[6:9, 3:6] = np.eye(3) * b.dt_total
    Ab = np.eye(9)
    Ab[3:6, 3:6] = a.d_rot
    Ab[6:9, 6:9] = a.d_rot
    cov = Aa @ a.cov @ Aa.T + Ab @ b.cov @ Ab.T

    j_rot_bg = b.d_rot.T @ a.j_rot_bg + b.j_rot_bg
    j_vel_bg = a.j_vel_bg - a.d_rot @ sv @ a.j_rot_bg + a.d_rot @ b.j_vel_bg
    j_vel_ba = a.j_vel_ba + a.d_rot @ b.j_vel_ba
    j_pos_bg = (
        a.j_pos_bg + a.j_vel_bg * b.dt_total - a.d_rot @ sp @ a.j_rot_bg + a.d_rot @ b.j_pos_bg
    )
    j_pos_ba = a.j_pos_ba + a.j_vel_ba * b.dt_total + a.d_rot @ b.j_pos_ba

    return Preintegrated(
        d_rot, d_vel, d_pos, a.dt_total + b.dt_total, 0.5 * (cov + cov.T),
        j_rot_bg, j_vel_bg, j_vel_ba, j_pos_bg, j_pos_ba,
        a.bias_gyro_ref, a.bias_accel_ref,
    )


def corrected_deltas(p: Preintegrated, bias_gyro, bias_accel):
    """First-order bias-corrected (d_rot, d_vel, d_pos) at a shifted bias."""
    dbg = np.asarray(bias_gyro, dtype=float) - p.bias_gyro_ref
    dba = np.asarray(bias_accel, dtype=float) - p.bias_accel_ref
    d_rot = p.d_rot @ mf.rot_exp(p.j_rot_bg @ dbg)
    d_vel = p.d_vel + p.j_vel_bg @ dbg + p.j_vel_ba @ dba
    d_pos = p.d_pos + p.j_pos_bg @ dbg + p.j_pos_ba @ dba
    return d_rot, d_vel, d_pos


def predict(x: mf.State, p: Preintegrated) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Predict (rot, pos, vel) after the preintegrated interval, injecting gravity."""
    dt = p.dt_total
    rot = x.rot @ p.d_rot
    vel = x.vel + x.gravity * dt + x.rot @ p.d_vel
    pos = x.pos + x.vel * dt + 0.5 * x.gravity * dt * dt + x.rot @ p.d_pos
    return rot, pos, vel


# --- Cumulative cubic B-spline over uniformly spaced control poses ---

# Cumulative basis: lambda_k(u) columns applied to consecutive increments.
_CUM = np.array([
    [5.0, 3.0, -3.0, 1.0],   # lambda_1
    [1.0, 3.0, 3.0, -2.0],   # lambda_2
    [0.0, 0.0, 0.0, 1.0],    # lambda_3
]) / 6.0


class PoseSpline:
    """Cubic pose spline: cumulative B-spline on rotation, B-spline on translation.

    Control poses sit at uniform knot times.  The valid query span is
    [knots[1], knots[n-2]] since a segment needs one control pose before and
    two after its left knot.  On a constant-twist trajectory sampled at the
    knots the spline reproduces the trajectory exactly.
    """

    def __init__(self, times: np.ndarray, rotations: np.ndarray, positions: np.ndarray):
        times = np.asarray(times, dtype=float)
        rotations = np.asarray(rotations, dtype=float)
        positions = np.asarray(positions, dtype=float)
        n = times.shape[0]
        if n < 4:
            raise ValueError("need at least 4 control poses")
        dt = np.diff(times)
        if dt.min() <= 0 or np.abs(dt - dt[0]).max() > 1e-9 * max(1.0, abs(dt[0])):
            raise ValueError("control poses must be uniformly spaced in time")
        self.times = times
        self.dt = float(dt[0])
        self.rotations = rotations
        self.positions = positions
        # Body-frame rotation increments between consecutive control poses.
        self._d_rot = np.stack(
            [mf.rot_log(rotations[j - 1].T @ rotations[j]) for j in range(1, n)]
        )
        self._d_pos = np.diff(positions, axis=0)

    @property
    def span(self) -> tuple[float, float]:
        return float(self.times[1]), float(self.times[-2])

    def _segments(self, ts: np.ndarray):
        lo, hi = self.span
        ts = np.asarray(ts, dtype=float)
        if ts.size and (ts.min() < lo - 1e-9 or ts.max() > hi + 1e-9):
            raise ValueError(f"query time outside spline span [{lo}, {hi}]")
        i = np.clip(((ts - self.times[0]) / self.dt).astype(int), 1, len(self.times) - 3)
        u = (ts - self.times[i]) / self.dt
        # Guard rounding at the segment boundaries.
        step_down = u < 0.0
        i = np.where(step_down, i - 1, i)
        u = np.where(step_down, u + 1.0, u)
        i = np.clip(i, 1, len(self.times) - 3)
        u = np.clip((ts - self.times[i]) / self.dt, 0.0, 1.0)
        return i, u

    def poses(self, ts: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        """Batched pose query: returns rotations (N, 3, 3) and positions (N, 3)."""
        ts = np.atleast_1d(np.asarray(ts, dtype=float))
        i, u = self._segments(ts)
        up = np.stack([np.ones_like(u), u, u * u, u**3], axis=-1)
        lam = up @ _CUM.T  # (N, 3)

        d1 = self._d_rot[i - 1]
        d2 = self._d_rot[i]
        d3 = self._d_rot[i + 1]
        r = self.rotations[i - 1]
        e1 = mf.rot_exp(lam[:, 0:1] * d1)
        e2 = mf.rot_exp(lam[:, 1:2] * d2)
        e3 = mf.rot_exp(lam[:, 2:3] * d3)
        rot = r @ e1 @ e2 @ e3

        pos = (
            self.positions[i - 1]
            + lam[:, 0:1] * self._d_pos[i - 1]
            + lam[:, 1:2] * self._d_pos[i]
            + lam[:, 2:3] * self._d_pos[i + 1]
        )
        return rot, pos

    def pose(self, t: float) -> tuple[np.ndarray, np.ndarray]:
        rot, pos = self.poses(np.array([t]))
        return rot[0], pos[0]


def fit_spline(times, rotations, positions) -> PoseSpline:
    """Build the interpolating cumulative spline over timestamped control poses."""
    return PoseSpline(times, rotations, positions)


def undistort(scan: Scan, spline: PoseSpline, extrinsic: Optional[tuple] = None) -> Scan:
    """Re-express each point in the scan-end sensor frame.

    The spline interpolates body poses; with a sensor extrinsic (rot, pos)
    the sensor pose is body_pose * extrinsic.  Every point timestamp and the
    scan end must lie inside the spline span.
    """
    if len(scan) == 0:
        return scan
    rot_b, pos_b = spline.poses(scan.times)
    if extrinsic is not None:
        rot_e, pos_e = extrinsic
        rot_s = rot_b @ rot_e
        pos_s = np.einsum("nij,j->ni", rot_b, pos_e) + pos_b
    else:
        rot_s, pos_s = rot_b, pos_b
    p_world = np.einsum("nij,nj->ni", rot_s, scan.points) + pos_s

    rot_end_b, pos_end_b = spline.pose(scan.t_end)
    if extrinsic is not None:
        rot_end, pos_end = mf.compose_pose(rot_end_b, pos_end_b, rot_e, pos_e)
    else:
        rot_end, pos_end = rot_end_b, pos_end_b
    p_end = (p_world - pos_end) @ rot_end
    return Scan(points=p_end, times=scan.times, t_end=scan.t_end)
