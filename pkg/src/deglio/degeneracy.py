"""Localizability analysis of the registration Hessian.

The 6x6 point-to-plane Hessian is split into its rotation and translation
3x3 diagonal blocks, each eigendecomposed.  Per eigendirection, the
information pairs are scored by how strongly they constrain that direction;
thresholds turn the scores into {none, partial, full} categories, and the
non-full directions become rows of an equality-constraint system
``C dx = d`` (rotation rows first, matching the [dr, dt] pose layout) that
pins the pose update to an anchor along those directions.
"""
from __future__ import annotations

import enum
from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from .registration import InfoPairs, assemble_hessian


class Category(enum.Enum):
    NONE = "none"
    PARTIAL = "partial"
    FULL = "full"


@dataclass(frozen=True)
class Thresholds:
    """Strength thresholds for categorization.

    ``full`` and ``partial`` are unitless contribution sums (per-pair
    averages when ``normalized``); ``kappa`` is the per-pair contribution
    floor in [0, 1).  Defaults were calibrated on the built-in corridor,
    tunnel and box scenes and are environment-tuned constants.
    """

    full: float = 0.20
    partial: float = 0.05
    kappa: float = 0.10
    normalized: bool = True

    def __post_init__(self):
        if not (self.full > self.partial > 0.0):
            raise ValueError("need full > partial > 0")
        if not (0.0 <= self.kappa < 1.0):
            raise ValueError("kappa must be in [0, 1)")


@dataclass(frozen=True)
class LocalizabilityReport:
    """Eigenstructure, per-direction strengths, categories and constraints.

    Eigenvector columns are sorted by descending eigenvalue.  ``constraints``
    / ``constraint_values`` hold the (m x 6) system with rotation rows in
    columns 0:3 and translation rows in columns 3:6; directions appear in the
    frame the information pairs were expressed in (callers rotate as needed).
    """

    v_trans: np.ndarray
    eigvals_trans: np.ndarray
    v_rot: np.ndarray
    eigvals_rot: np.ndarray
    strength_trans: np.ndarray
    strength_rot: np.ndarray
    cat_trans: tuple
    cat_rot: tuple
    constraints: np.ndarray
    constraint_values: np.ndarray
    iterations: int = 0

    @property
    def num_constraints(self) -> int:
        return self.constraints.shape[0]

    @property
    def all_full(self) -> bool:
        return all(c is Category.FULL for c in self.cat_trans + self.cat_rot)

    @property
    def any_degenerate(self) -> bool:
        return not self.all_full

    def csv_row(self, timestamp: float) -> str:
        """Log line: timestamp, 6 strengths (t1..t3, r1..r3), 6 categories."""
        s = list(self.strength_trans) + list(self.strength_rot)
        c = [cat.value for cat in self.cat_trans + self.cat_rot]
        return ",".join([f"{timestamp:.6f}"] + [f"{v:.6f}" for v in s] + c)


def all_none_report() -> LocalizabilityReport:
    """Report for a scan with no usable correspondences: everything degenerate."""
    eye = np.eye(3)
    zeros = np.zeros(3)
    cats = (Category.NONE, Category.NONE, Category.NONE)
    C, d = build_constraints(cats, cats, eye, eye)
    return LocalizabilityReport(eye, zeros, eye, zeros, zeros, zeros, cats, cats, C, d)


def _fix_signs(vecs: np.ndarray) -> np.ndarray:
    out = vecs.copy()
    for j in range(out.shape[1]):
        i = int(np.argmax(np.abs(out[:, j])))
        if out[i, j] < 0:
            out[:, j] = -out[:, j]
    return out


def eigen_blocks(hess: np.ndarray):
    """Eigendecompose the translation and rotation 3x3 blocks of the 6x6 Hessian.

    Returns (v_trans, eigvals_trans, v_rot, eigvals_rot) with eigenvalues
    descending, unit eigenvector columns, sign fixed so the
    largest-magnitude component of each vector is positive.
    """
    hess = np.asarray(hess, dtype=float)
    if hess.shape != (6, 6) or not np.allclose(hess, hess.T, atol=1e-9):
        raise ValueError("Hessian must be symmetric 6x6")
    out = []
    for block in (hess[3:6, 3:6], hess[0:3, 0:3]):
        evals, evecs = np.linalg.eigh(block)
        order = np.argsort(evals)[::-1]
        out.append((_fix_signs(evecs[:, order]), evals[order]))
    (v_t, s_t), (v_r, s_r) = out
    return v_t, s_t, v_r, s_r


def direction_strengths(
    pairs: InfoPairs,
    v_trans: np.ndarray,
    v_rot: np.ndarray,
    kappa: float = 0.0,
    normalized: bool = False,
    eps: float = 1e-12,
):
    """Constraint strength of the pair set along each eigendirection.

    Translation direction v scores sum_i max(|u_i . v| - kappa, 0); rotation
    direction v scores the same with the normalized rotation lever
    (p_i x u_i) / ||p_i x u_i||.  Contributions are absolute values since
    directions are signless lines.
    """
    if len(pairs) == 0:
        raise ValueError("need at least one information pair")
    u = pairs.normals
    lever = np.cross(pairs.points, pairs.normals)
    lever_norm = np.maximum(np.linalg.norm(lever, axis=1, keepdims=True), eps)
    lever_unit = lever / lever_norm

    st = np.maximum(np.abs(u @ v_trans) - kappa, 0.0).sum(axis=0)
    sr = np.maximum(np.abs(lever_unit @ v_rot) - kappa, 0.0).sum(axis=0)
    if normalized:
        st = st / len(pairs)
        sr = sr / len(pairs)
    return st, sr


def categorize(strengths: np.ndarray, thresholds: Thresholds) -> tuple:
    """Map strengths to categories; the partial band is closed at its lower bound."""
    out = []
    for s in np.atleast_1d(strengths):
        if s >= thresholds.full:
            out.append(Category.FULL)
        elif s >= thresholds.partial:
            out.append(Category.PARTIAL)
        else:
            out.append(Category.NONE)
    return tuple(out)


def build_constraints(
    cat_trans: tuple,
    cat_rot: tuple,
    v_trans: np.ndarray,
    v_rot: np.ndarray,
    anchor_rot: Optional[np.ndarray] = None,
    anchor_trans: Optional[np.ndarray] = None,
    partial_mode: str = "constrain",
):
    """Equality constraints pinning non-full directions to the anchor.

    One row per constrained direction: rotation rows occupy columns 0:3 with
    right-hand side v . anchor_rot, translation rows columns 3:6 with
    v . anchor_trans.  ``partial_mode`` "constrain" treats partial directions
    like none (conservative); "free" leaves them unconstrained.  All
    directions full yields an empty (0 x 6) system.
    """
    if partial_mode not in ("constrain", "free"):
        raise ValueError("partial_mode must be 'constrain' or 'free'")
    anchor_rot = np.zeros(3) if anchor_rot is None else np.asarray(anchor_rot, dtype=float)
    anchor_trans = np.zeros(3) if anchor_trans is None else np.asarray(anchor_trans, dtype=float)
    if not (np.all(np.isfinite(anchor_rot)) and np.all(np.isfinite(anchor_trans))):
        raise ValueError("anchor must be finite")

    def constrained(cat: Category) -> bool:
        if cat is Category.FULL:
            return False
        if cat is Category.PARTIAL and partial_mode == "free":
            return False
        return True

    rows = []
    rhs = []
    for j, cat in enumerate(cat_rot):
        if constrained(cat):
            row = np.zeros(6)
            row[0:3] = v_rot[:, j]
            rows.append(row)
            rhs.append(float(v_rot[:, j] @ anchor_rot))
    for j, cat in enumerate(cat_trans):
        if constrained(cat):
            row = np.zeros(6)
            row[3:6] = v_trans[:, j]
            rows.append(row)
            rhs.append(float(v_trans[:, j] @ anchor_trans))
    if not rows:
        return np.zeros((0, 6)), np.zeros(0)
    return np.stack(rows), np.array(rhs)


def analyze(
    pairs: InfoPairs,
    thresholds: Thresholds,
    anchor_rot: Optional[np.ndarray] = None,
    anchor_trans: Optional[np.ndarray] = None,
    partial_mode: str = "constrain",
) -> LocalizabilityReport:
    """Full detection pass: Hessian, eigenblocks, strengths, categories, constraints."""
    if len(pairs) == 0:
        return all_none_report()
    hess = assemble_hessian(pairs)
    v_t, s_t, v_r, s_r = eigen_blocks(hess)
    st, sr = direction_strengths(
        pairs, v_t, v_r, kappa=thresholds.kappa, normalized=thresholds.normalized
    )
    cat_t = categorize(st, thresholds)
    cat_r = categorize(sr, thresholds)
    C, d = build_constraints(cat_t, cat_r, v_t, v_r, anchor_rot, anchor_trans, partial_mode)
    return LocalizabilityReport(v_t, s_t, v_r, s_r, st, sr, cat_t, cat_r, C, d)
