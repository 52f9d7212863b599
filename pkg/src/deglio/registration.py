"""Point-to-plane registration against a map of locally fitted planes.

Residual for a correspondence: signed distance ``u . (R p_body + t - q)``
where ``u``/``q`` are the plane normal and an in-plane point in the world
frame and ``p_body`` is the LiDAR point expressed in the body (IMU) frame.

The Jacobian row with respect to the 6-dim pose perturbation [dr, dt]
(right-perturbed rotation, world-frame translation) is
``[(p_body x R^T u)^T, u^T]``.  Stacking ``a_i = [p_i x u_i; u_i]`` of
body-frame information pairs gives the 6x6 registration Hessian
``A = sum a_i a_i^T`` whose 3x3 diagonal blocks drive degeneracy analysis.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import NamedTuple, Optional, Sequence

import numpy as np
from scipy.spatial import cKDTree

from . import manifold as mf


class ScanPoint(NamedTuple):
    """One LiDAR return: position in the sensor frame [m] and absolute time [s]."""

    position: np.ndarray
    timestamp: float


@dataclass(frozen=True)
class Scan:
    """A sweep of LiDAR returns stored column-wise for vectorized processing.

    ``points`` is (N, 3) in the LiDAR frame at each point's emission time;
    ``times`` is (N,) absolute seconds; ``t_end`` is the sweep-end timestamp.
    """

    points: np.ndarray
    times: np.ndarray
    t_end: float

    def __post_init__(self):
        pts = np.atleast_2d(np.asarray(self.points, dtype=float))
        ts = np.atleast_1d(np.asarray(self.times, dtype=float))
        if pts.shape[0] != ts.shape[0] or (pts.size and pts.shape[1] != 3):
            raise ValueError("points must be (N, 3) with matching (N,) times")
        if not (np.all(np.isfinite(pts)) and np.all(np.isfinite(ts))):
            raise ValueError("scan contains non-finite values")
        if ts.size and ts.max() > self.t_end + 1e-12:
            raise ValueError("point timestamps must not exceed the scan-end time")
        pts.setflags(write=False)
        ts.setflags(write=False)
        object.__setattr__(self, "points", pts)
        object.__setattr__(self, "times", ts)

    def __len__(self) -> int:
        return self.points.shape[0]

    def point(self, i: int) -> ScanPoint:
        return ScanPoint(self.points[i], float(self.times[i]))


class PlaneFit(NamedTuple):
    normal: np.ndarray
    point: np.ndarray
    rms: float
    valid: bool


def fit_plane(neighbors: np.ndarray, min_points: int = 5) -> PlaneFit:
    """Least-squares plane through >= min_points neighbors.

    Normal is the smallest-eigenvalue eigenvector of the centered scatter
    matrix, the in-plane point is the centroid.  A neighborhood whose
    mid eigenvalue is negligible (collinear or coincident points) is flagged
    invalid because the normal direction is not determined.
    """
    pts = np.asarray(neighbors, dtype=float)
    if pts.ndim != 2 or pts.shape[1] != 3 or pts.shape[0] < min_points:
        raise ValueError(f"need at least {min_points} neighbors of shape (k, 3)")
    centroid = pts.mean(axis=0)
    centered = pts - centroid
    scatter = centered.T @ centered
    evals, evecs = np.linalg.eigh(scatter)  # ascending
    if evals[1] <= 1e-12 * max(evals[2], 1e-30) + 1e-18:
        return PlaneFit(evecs[:, 0], centroid, float("nan"), False)
    normal = evecs[:, 0]
    rms = float(np.sqrt(np.mean((centered @ normal) ** 2)))
    return PlaneFit(normal, centroid, rms, True)


def _fit_planes_batch(neighbors: np.ndarray):
    """Vectorized plane fits for (M, k, 3) neighborhoods.

    Returns (normals (M,3), centroids (M,3), rms (M,), valid (M,)).
    """
    pts = np.asarray(neighbors, dtype=float)
    centroids = pts.mean(axis=1)
    centered = pts - centroids[:, None, :]
    scatter = np.einsum("mki,mkj->mij", centered, centered)
    evals, evecs = np.linalg.eigh(scatter)
    normals = evecs[:, :, 0]
    rms = np.sqrt(np.mean(np.einsum("mki,mi->mk", centered, normals) ** 2, axis=1))
    valid = evals[:, 1] > 1e-12 * np.maximum(evals[:, 2], 1e-30) + 1e-18
    return normals, centroids, rms, valid


@dataclass(frozen=True)
class PlaneCorrespondence:
    """A validated point-to-plane match in the world frame."""

    point_global: np.ndarray
    normal: np.ndarray
    plane_point: np.ndarray
    valid: bool = True


class Correspondences:
    """Struct-of-arrays result of association.

    Attributes (all over the N input points, with ``valid`` masking the rows
    that passed the gates): ``p_lidar``, ``p_body``, ``p_global`` (N, 3),
    ``normals`` (N, 3) world-frame unit normals, ``plane_points`` (N, 3),
    ``valid`` (N,) bool.  Indexing yields PlaneCorrespondence views.
    """

    def __init__(self, p_lidar, p_body, p_global, normals, plane_points, valid):
        self.p_lidar = p_lidar
        self.p_body = p_body
        self.p_global = p_global
        self.normals = normals
        self.plane_points = plane_points
        self.valid = valid

    def __len__(self) -> int:
        return self.p_body.shape[0]

    @property
    def num_valid(self) -> int:
        return int(np.count_nonzero(self.valid))

    def __getitem__(self, i: int) -> PlaneCorrespondence:
        return PlaneCorrespondence(
            self.p_global[i], self.normals[i], self.plane_points[i], bool(self.valid[i])
        )


class PlaneQuery(NamedTuple):
    """Local plane answers from a map for a batch of world-frame points."""

    normals: np.ndarray
    plane_points: np.ndarray
    nn_dist: np.ndarray
    rms: np.ndarray
    valid: np.ndarray


class PointMap:
    """Accumulated point store with k-NN plane fitting.

    Brute-force scale (< ~1e5 points) backed by a kd-tree that is rebuilt
    lazily after insertions; reads are safe to share between threads as long
    as insertions are serialized between updates.
    """

    def __init__(self, voxel: Optional[float] = None):
        self._chunks: list[np.ndarray] = []
        self._tree: Optional[cKDTree] = None
        self._pts: Optional[np.ndarray] = None
        self.voxel = voxel
        self._voxel_seen: set = set()

    def add_points(self, pts: np.ndarray) -> None:
        pts = np.atleast_2d(np.asarray(pts, dtype=float))
        if pts.size == 0:
            return
        if self.voxel is not None:
            keys = np.floor(pts / self.voxel).astype(np.int64)
            keep = []
            for i, k in enumerate(map(tuple, keys)):
                if k not in self._voxel_seen:
                    self._voxel_seen.add(k)
                    keep.append(i)
            if not keep:
                return
            pts = pts[keep]
        self._chunks.append(pts)
        self._tree = None
        self._pts = None

    @property
    def size(self) -> int:
        return sum(c.shape[0] for c in self._chunks)

    def points(self) -> np.ndarray:
        if self._pts is None:
            self._pts = (
                np.concatenate(self._chunks, axis=0) if self._chunks else np.zeros((0, 3))
            )
        return self._pts

    def _ensure_tree(self) -> Optional[cKDTree]:
        if self._tree is None and self.size > 0:
            self._tree = cKDTree(self.points())
        return self._tree

    def query_local_planes(self, pts_world: np.ndarray, k: int, max_rms: float) -> PlaneQuery:
        pts_world = np.atleast_2d(np.asarray(pts_world, dtype=float))
        n = pts_world.shape[0]
        if self.size < k:
            zero = np.zeros((n, 3))
            return PlaneQuery(zero, zero, np.full(n, np.inf), np.full(n, np.inf),
                              np.zeros(n, dtype=bool))
        tree = self._ensure_tree()
        dist, idx = tree.query(pts_world, k=k)
        neigh = self.points()[idx]
        normals, centroids, rms, valid = _fit_planes_batch(neigh)
        valid = valid & (rms <= max_rms)
        return PlaneQuery(normals, centroids, dist[:, 0], rms, valid)

    def write_ply(self, path: str) -> None:
        """ASCII PLY dump (x y z per vertex) for external inspection."""
        pts = self.points()
        with open(path, "w") as f:
            f.write("ply\nformat ascii 1.0\n")
            f.write(f"element vertex {pts.shape[0]}\n")
            f.write("property float x\nproperty float y\nproperty float z\n")
            f.write("end_header\n")
            for p in pts:
                f.write(f"{p[0]:.6f} {p[1]:.6f} {p[2]:.6f}\n")


def associate(
    scan: Scan,
    rot: np.ndarray,
    pos: np.ndarray,
    map_obj,
    k: int = 5,
    max_rms: float = 0.1,
    max_dist: float = 1.0,
    extrinsic: Optional[tuple] = None,
) -> Correspondences:
    """Match scan points to local map planes at the prior body pose.

    ``map_obj`` must provide ``query_local_planes(points_world, k, max_rms)``;
    both the accumulated PointMap and the analytic surface maps from the
    simulator qualify.  Points farther than ``max_dist`` from their nearest
    map support are rejected.  An empty or too-small map yields zero valid
    correspondences, which callers treat as a skip-update signal.
    """
    if extrinsic is not None:
        rot_e, pos_e = extrinsic
        p_body = mf.transform_points(rot_e, pos_e, scan.points)
    else:
        p_body = scan.points
    p_global = mf.transform_points(rot, pos, p_body)
    if len(scan) == 0:
        e = np.zeros((0, 3))
        return Correspondences(scan.points, p_body, p_global, e, e, np.zeros(0, dtype=bool))
    q = map_obj.query_local_planes(p_global, k, max_rms)
    valid = q.valid & (q.nn_dist <= max_dist)
    return Correspondences(scan.points, p_body, p_global, q.normals, q.plane_points, valid)


def residual(rot: np.ndarray, pos: np.ndarray, corr: PlaneCorrespondence,
             p_body: Optional[np.ndarray] = None) -> float:
    """Signed point-to-plane distance at the given body pose.

    ``p_body`` defaults to mapping ``corr.point_global`` back through the
    pose, so the stored global point may be stale relative to ``rot, pos``.
    """
    if p_body is None:
        p_body = rot.T @ (np.asarray(corr.point_global) - pos)
    g = rot @ np.asarray(p_body) + pos
    return float(np.dot(corr.normal, g - corr.plane_point))


def residuals(rot, pos, corrs: Correspondences) -> np.ndarray:
    g = mf.transform_points(rot, pos, corrs.p_body)
    return np.einsum("ni,ni->n", corrs.normals, g - corrs.plane_points)


def residual_jacobian(rot: np.ndarray, pos: np.ndarray, corr: PlaneCorrespondence,
                      p_body: Optional[np.ndarray] = None) -> np.ndarray:
    """1x6 row [d r/d dr | d r/d dt] for the right-perturbation convention."""
    if p_body is None:
        p_body = rot.T @ (np.asarray(corr.point_global) - pos)
    u = np.asarray(corr.normal)
    u_body = rot.T @ u
    row = np.empty(6)
    row[:3] = np.cross(np.asarray(p_body), u_body)
    row[3:] = u
    return row


def residual_jacobians(rot, pos, corrs: Correspondences) -> np.ndarray:
    u_body = corrs.normals @ rot
    rows = np.empty((len(corrs), 6))
    rows[:, :3] = np.cross(corrs.p_body, u_body)
    rows[:, 3:] = corrs.normals
    return rows


@dataclass(frozen=True)
class InfoPair:
    """Body-frame point and unit surface normal, the atomic Hessian contribution."""

    point: np.ndarray
    normal: np.ndarray


class InfoPairs:
    """Array bundle of body-frame (point, normal) pairs."""

    def __init__(self, points: np.ndarray, normals: np.ndarray):
        self.points = np.atleast_2d(np.asarray(points, dtype=float))
        self.normals = np.atleast_2d(np.asarray(normals, dtype=float))
        if self.points.shape != self.normals.shape:
            raise ValueError("points and normals must have matching shapes")

    def __len__(self) -> int:
        return self.points.shape[0]

    def __getitem__(self, i: int) -> InfoPair:
        return InfoPair(self.points[i], self.normals[i])


def info_pairs(rot: np.ndarray, corrs: Correspondences) -> InfoPairs:
    """Body-frame information pairs of the valid correspondences at the prior pose."""
    m = corrs.valid
    return InfoPairs(corrs.p_body[m], corrs.normals[m] @ rot)


def assemble_hessian(pairs: InfoPairs) -> np.ndarray:
    """6x6 registration Hessian, rotation block first: sum of a a^T with
    a = [p x u; u]."""
    if len(pairs) == 0:
        raise ValueError("need at least one information pair")
    a = np.concatenate([np.cross(pairs.points, pairs.normals), pairs.normals], axis=1)
    return a.T @ a
