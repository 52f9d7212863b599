"""Constrained error-state iterated Kalman filter.

The belief is a nominal state plus an 18x18 covariance over the tangent
error [dr, dt, dv, dbg, dba, dg].  Two measurement paths exist:

- ``fuse_backend_pose``: the smoother's pose enters as a direct observation
  of the rotation/translation error blocks with residual
  [log(R^T R_meas), t_meas - t]; a chi-square gate rejects outliers that
  slipped through the backend.
- ``iterated_update``: iterated point-to-plane updates.  Degeneracy is
  detected on the first iteration from the body-frame information pairs;
  the eigendirections yield equality constraints that the accumulated pose
  increment must satisfy, enforced by projecting each candidate increment
  onto the constraint plane (Lagrange projection under the pose-block
  covariance metric).  Posterior variance along constrained directions is
  reset to the prior's so downstream consumers see those directions as
  uninformed.
"""
from __future__ import annotations

from dataclasses import dataclass, field, replace
from typing import Optional

import numpy as np
from scipy.stats import chi2

from . import degeneracy as deg
from . import manifold as mf
from . import registration as reg
from .manifold import DR, DT, ERROR_DIM

_POSE = slice(0, 6)
CHI2_GATE_6DOF = float(chi2.ppf(0.999, df=6))


@dataclass(frozen=True)
class Belief:
    """Nominal state with tangent-space covariance."""

    state: mf.State
    cov: np.ndarray

    def __post_init__(self):
        P = np.asarray(self.cov, dtype=float)
        if P.shape != (ERROR_DIM, ERROR_DIM):
            raise ValueError("covariance must be 18x18")
        if not np.allclose(P, P.T, atol=1e-10):
            raise ValueError("covariance must be symmetric")
        evals = np.linalg.eigvalsh(P)
        if evals.min() < -1e-12 * max(np.trace(P), 1.0):
            raise ValueError("covariance must be positive semidefinite")
        P = 0.5 * (P + P.T)
        P.setflags(write=False)
        object.__setattr__(self, "cov", P)


@dataclass(frozen=True)
class BackendPoseMeasurement:
    """Global pose observation from the smoother with per-block noise."""

    rot: np.ndarray
    pos: np.ndarray
    cov_rot: np.ndarray
    cov_trans: np.ndarray
    timestamp: float

    def __post_init__(self):
        for name in ("cov_rot", "cov_trans"):
            M = np.asarray(getattr(self, name), dtype=float)
            if not np.allclose(M, M.T, atol=1e-9) or np.linalg.eigvalsh(M).min() <= 0:
                raise ValueError(f"{name} must be symmetric positive definite")


def _symmetrize_floor(P: np.ndarray) -> np.ndarray:
    """Symmetrize and clip tiny negative eigenvalues to keep the belief valid."""
    P = 0.5 * (P + P.T)
    evals, evecs = np.linalg.eigh(P)
    if evals.min() < 0.0:
        evals = np.maximum(evals, 0.0)
        P = (evecs * evals) @ evecs.T
        P = 0.5 * (P + P.T)
    return P


def fuse_jacobian(belief: Belief, meas: BackendPoseMeasurement) -> np.ndarray:
    """Exact 6x18 Jacobian of the pose residual wrt the error state.

    The rotation block is -Jl^-1(log(R^T R_meas)), which reduces to the
    identity-block form at zero error; the translation block is -I.
    """
    e_rot = mf.rot_log(belief.state.rot.T @ meas.rot)
    H = np.zeros((6, ERROR_DIM))
    H[0:3, DR] = -mf.left_jacobian_inv(e_rot)
    H[3:6, DT] = -np.eye(3)
    return H


def fuse_backend_pose(
    belief: Belief,
    meas: BackendPoseMeasurement,
    gate: float = CHI2_GATE_6DOF,
) -> tuple[Belief, bool]:
    """Kalman update with the backend pose; returns (belief, accepted).

    The innovation is gated at chi-square(6, 0.999) by default; a rejected
    measurement leaves the belief unchanged and returns accepted=False,
    signalling a backend outlier that slipped through.
    """
    r = np.empty(6)
    r[0:3] = mf.rot_log(belief.state.rot.T @ meas.rot)
    r[3:6] = meas.pos - belief.state.pos
    H = fuse_jacobian(belief, meas)
    R = np.zeros((6, 6))
    R[0:3, 0:3] = meas.cov_rot
    R[3:6, 3:6] = meas.cov_trans

    P = belief.cov
    S = H @ P @ H.T + R
    S = 0.5 * (S + S.T)
    maha = float(r @ np.linalg.solve(S, r))
    if gate is not None and maha > gate:
        return belief, False

    K = P @ H.T @ np.linalg.inv(S)
    # Gauss-Newton step on the linearized residual r + H dx.
    dx = -K @ r
    state = mf.boxplus(belief.state, dx)
    IKH = np.eye(ERROR_DIM) - K @ H
    P_post = IKH @ P @ IKH.T + K @ R @ K.T  # Joseph form
    return Belief(state, _symmetrize_floor(P_post)), True


def constrained_project(
    dx: np.ndarray,
    cov_pose: np.ndarray,
    C: np.ndarray,
    d: np.ndarray,
    cond_limit: float = 1e12,
) -> np.ndarray:
    """Project a 6-dim pose increment onto the constraint plane C dx = d.

    Uses the gain G = Sigma C^T (C Sigma C^T)^-1, which is the minimizer of
    the Mahalanobis distance to the unconstrained increment under the pose
    covariance metric.  An ill-conditioned C Sigma C^T is ridge-regularized.
    Empty constraints return the increment unchanged.
    """
    dx = np.asarray(dx, dtype=float).reshape(6)
    C = np.asarray(C, dtype=float)
    if C.size == 0:
        return dx.copy()
    d = np.asarray(d, dtype=float).reshape(C.shape[0])
    cov_pose = np.asarray(cov_pose, dtype=float)
    S = C @ cov_pose @ C.T
    S = 0.5 * (S + S.T)
    evals = np.linalg.eigvalsh(S)
    if evals.min() <= 0.0 or evals.max() / max(evals.min(), 1e-300) > cond_limit:
        S = S + (evals.max() / cond_limit + 1e-300) * np.eye(S.shape[0])
    lam = np.linalg.solve(S, C @ dx - d)
    return dx - cov_pose @ C.T @ lam


@dataclass(frozen=True)
class UpdateConfig:
    """Knobs for the iterated point-to-plane update."""

    meas_sigma: float = 0.02          # point-to-plane noise [m]
    k_neighbors: int = 5
    max_plane_rms: float = 0.1        # plane-fit gate [m]
    max_corr_dist: float = 1.0        # nearest-support gate [m]
    max_iterations: int = 5
    step_tolerance: float = 1e-4
    thresholds: deg.Thresholds = field(default_factory=deg.Thresholds)
    partial_mode: str = "constrain"
    constraints_enabled: bool = True
    redetect_each_iteration: bool = False
    inflate_degenerate_cov: bool = True
    extrinsic: Optional[tuple] = None  # (rot, pos) of the LiDAR in the body frame


def _world_constraints(report: deg.LocalizabilityReport, rot_prior: np.ndarray,
                       partial_mode: str):
    """Constraint system in the update's tangent frame.

    Translation eigendirections come from body-frame pairs and are rotated to
    the world frame; rotation directions already live in the body frame of
    the right-perturbed attitude increment and are used as-is.
    """
    return deg.build_constraints(
        report.cat_trans, report.cat_rot,
        rot_prior @ report.v_trans, report.v_rot,
        partial_mode=partial_mode,
    )


def iterated_update(
    belief: Belief,
    scan: reg.Scan,
    map_obj,
    cfg: UpdateConfig = UpdateConfig(),
) -> tuple[Belief, deg.LocalizabilityReport]:
    """Iterated ESIKF update against the map with degeneracy constraints.

    Each iteration re-associates, takes the Gauss-Newton/Kalman step that
    fuses the prior with the stacked point-to-plane residuals, projects the
    accumulated pose increment onto the constraint plane and applies the
    increment on the manifold.  With zero valid correspondences the prior is
    returned untouched with an all-none report (total degeneration: the
    backend carries the state).
    """
    prior = belief
    x = belief.state
    P_prior = belief.cov
    P_prior_inv = np.linalg.inv(P_prior)
    inv_r = 1.0 / (cfg.meas_sigma**2)

    report: Optional[deg.LocalizabilityReport] = None
    C = np.zeros((0, 6))
    d = np.zeros(0)
    P_post = P_prior
    iterations = 0

    for it in range(cfg.max_iterations):
        corrs = reg.associate(
            scan, x.rot, x.pos, map_obj,
            k=cfg.k_neighbors, max_rms=cfg.max_plane_rms,
            max_dist=cfg.max_corr_dist, extrinsic=cfg.extrinsic,
        )
        if corrs.num_valid == 0:
            if report is None:
                return prior, deg.all_none_report()
            break

        if report is None or cfg.redetect_each_iteration:
            pairs = reg.info_pairs(x.rot, corrs)
            report = deg.analyze(pairs, cfg.thresholds, partial_mode=cfg.partial_mode)
            if cfg.constraints_enabled:
                C, d = _world_constraints(report, x.rot, cfg.partial_mode)

        m = corrs.valid
        r = reg.residuals(x.rot, x.pos, corrs)[m]
        J = reg.residual_jacobians(x.rot, x.pos, corrs)[m]

        # Information-form Gauss-Newton step fusing prior and measurements.
        dx_acc = mf.boxminus(x, prior.state)
        Hinfo = P_prior_inv.copy()
        Hinfo[_POSE, _POSE] += inv_r * (J.T @ J)
        g = P_prior_inv @ dx_acc
        g[_POSE] += inv_r * (J.T @ r)
        P_post = np.linalg.inv(Hinfo)
        step = -P_post @ g

        if C.shape[0]:
            # Constrain the accumulated increment from the prior, not the
            # per-iteration step: project (dx_acc + step) onto C dx = d.
            target = constrained_project(
                dx_acc[_POSE] + step[_POSE], P_post[_POSE, _POSE], C, d
            )
            step = step.copy()
            step[_POSE] = target - dx_acc[_POSE]

        x = mf.boxplus(x, step)
        iterations = it + 1
        if float(np.linalg.norm(step)) < cfg.step_tolerance:
            break

    P_post = _symmetrize_floor(P_post)
    if cfg.constraints_enabled and cfg.inflate_degenerate_cov and C.shape[0]:
        # Along constrained directions the update carries no information:
        # reset the posterior variance there to the prior's level.
        for i in range(C.shape[0]):
            w = np.zeros(ERROR_DIM)
            w[_POSE] = C[i]
            s_prior = float(w @ P_prior @ w)
            s_post = float(w @ P_post @ w)
            if s_prior > s_post:
                P_post = P_post + (s_prior - s_post) * np.outer(w, w)
        P_post = _symmetrize_floor(P_post)

    assert report is not None
    return Belief(x, P_post), replace(report, iterations=iterations)
