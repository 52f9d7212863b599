"""Delay-tolerant sliding-window pose graph with robust kernels.

Structure: one node per IMU sample, chained by trusted relative-pose factors
derived from preintegration; lower-rate odometry measurements attach to the
nearest nodes, optionally guarded by a graduated-non-convexity kernel.
Optimization runs on a reduced problem: chain segments between factor
anchors are composed into single relative factors (exact elimination in the
linear case), interior nodes are recovered afterwards by conditional-mean
back-substitution.  Sliding marginalizes nodes older than the window into a
single Gaussian prior on the boundary nodes via a Schur complement at the
current linearization point.

Residual conventions for a relative factor (a -> b) with measurement
(d_rot, d_pos):

    e_rot = Log(d_rot^T R_a^T R_b)
    e_pos = R_a^T (p_b - p_a) - d_pos

whitened by the factor information W.  Node perturbations follow the package
convention (right-perturbed rotation, additive world translation).
"""
from __future__ import annotations

import json
from bisect import bisect_left, bisect_right
from dataclasses import dataclass
from typing import NamedTuple, Optional, Sequence

import numpy as np
from scipy.spatial.transform import Rotation as SciRotation

from . import manifold as mf
from .filter import BackendPoseMeasurement
from .inertial import Preintegrated


class StaleMeasurementError(RuntimeError):
    """Raised when a measurement anchors to an already-marginalized node."""


class GraphEmptyError(RuntimeError):
    """Raised when a pose is requested from a graph without nodes."""


class NodeKey(NamedTuple):
    id: int
    timestamp: float


class _Node:
    __slots__ = ("id", "t", "rot", "pos", "lin_rot", "lin_pos", "lin_version")

    def __init__(self, node_id: int, t: float, rot: np.ndarray, pos: np.ndarray):
        self.id = node_id
        self.t = t
        self.rot = rot
        self.pos = pos
        self.lin_rot = rot
        self.lin_pos = pos
        self.lin_version = 0


def gnc_weight(r_sq: float, mu: float, c: float = 1.0, basin: float = 0.25) -> float:
    """Graduated robust weight in [0, 1] for a squared whitened residual.

    Inside the quadratic basin (r_sq <= basin * mu * c^2) the kernel is
    exactly least squares (weight 1), so converged inlier sets reproduce the
    L2 solution; a short linear ramp keeps the weight continuous, and beyond
    it the Geman-McClure graduated weight (mu c^2 / (r_sq + mu c^2))^2
    applies.  mu -> infinity recovers the convex surrogate (weight 1
    everywhere); mu = 1 is the terminal robust kernel.
    """
    if r_sq < 0.0 or mu < 1.0:
        raise ValueError("need r_sq >= 0 and mu >= 1")
    mc2 = mu * c * c
    a = basin * mc2
    if r_sq <= a:
        return 1.0
    b = 1.44 * a  # ramp ends at (1.2 * 0.5 c)^2 at mu = 1
    gm = (mc2 / (r_sq + mc2)) ** 2
    if r_sq >= b:
        return gm
    gm_b = (mc2 / (b + mc2)) ** 2
    return 1.0 + (r_sq - a) / (b - a) * (gm_b - 1.0)


class _RelFactor:
    """Relative-pose factor, either a trusted chain link or guarded odometry."""

    __slots__ = ("id", "kind", "key_a", "key_b", "d_rot", "d_pos", "W", "guarded",
                 "mu", "weight", "_lin")

    def __init__(self, fid, kind, key_a, key_b, d_rot, d_pos, W, guarded):
        self.id = fid
        self.kind = kind  # "imu" | "odom"
        self.key_a = key_a
        self.key_b = key_b
        self.d_rot = d_rot
        self.d_pos = d_pos
        self.W = W
        self.guarded = guarded
        self.mu = 1.0
        self.weight = 1.0
        self._lin = None  # (ver_a, ver_b, J_a, J_b)

    def error(self, node_a: _Node, node_b: _Node) -> np.ndarray:
        e = np.empty(6)
        e[0:3] = mf.rot_log(self.d_rot.T @ node_a.rot.T @ node_b.rot)
        e[3:6] = node_a.rot.T @ (node_b.pos - node_a.pos) - self.d_pos
        return e

    def jacobians(self, node_a: _Node, node_b: _Node, e: np.ndarray):
        if self._lin is not None and self._lin[0] == node_a.lin_version \
                and self._lin[1] == node_b.lin_version:
            return self._lin[2], self._lin[3]
        jr_inv = mf.right_jacobian_inv(e[0:3])
        rel = node_b.rot.T @ node_a.rot
        v = node_a.rot.T @ (node_b.pos - node_a.pos)
        J_a = np.zeros((6, 6))
        J_a[0:3, 0:3] = -jr_inv @ rel
        J_a[3:6, 0:3] = mf.skew(v)
        J_a[3:6, 3:6] = -node_a.rot.T
        J_b = np.zeros((6, 6))
        J_b[0:3, 0:3] = jr_inv
        J_b[3:6, 3:6] = node_a.rot.T
        self._lin = (node_a.lin_version, node_b.lin_version, J_a, J_b)
        return J_a, J_b


class _PriorFactor:
    __slots__ = ("id", "key", "rot0", "pos0", "W")

    def __init__(self, fid, key, rot0, pos0, W):
        self.id = fid
        self.key = key
        self.rot0 = rot0
        self.pos0 = pos0
        self.W = W

    def error(self, node: _Node) -> np.ndarray:
        e = np.empty(6)
        e[0:3] = mf.rot_log(self.rot0.T @ node.rot)
        e[3:6] = node.pos - self.pos0
        return e

    def jacobian(self, e: np.ndarray) -> np.ndarray:
        J = np.zeros((6, 6))
        J[0:3, 0:3] = mf.right_jacobian_inv(e[0:3])
        J[3:6, 3:6] = np.eye(3)
        return J


class _MarginalPrior:
    """Gaussian summary of eliminated states on the boundary nodes.

    Stores the information matrix and gradient of the eliminated factors at
    the boundary linearization points: cost(x) ~ const + eta^T delta
    + 0.5 delta^T Lambda delta with delta the stacked pose differences from
    the linearization points.
    """

    __slots__ = ("id", "keys", "lin", "Lambda", "eta", "const")

    def __init__(self, fid, keys, lin, Lambda, eta):
        self.id = fid
        self.keys = tuple(keys)
        self.lin = list(lin)
        self.Lambda = Lambda
        self.eta = eta
        # Constant completing the square so the reported cost stays >= 0.
        try:
            self.const = float(eta @ np.linalg.solve(Lambda, eta))
        except np.linalg.LinAlgError:
            self.const = 0.0

    def deltas(self, nodes: dict) -> np.ndarray:
        out = np.empty(6 * len(self.keys))
        for i, k in enumerate(self.keys):
            n = nodes[k]
            out[6 * i:6 * i + 6] = mf.pose_boxminus(n.rot, n.pos, *self.lin[i])
        return out

    def jacobian(self, delta: np.ndarray) -> np.ndarray:
        J = np.eye(delta.size)
        for i in range(len(self.keys)):
            J[6 * i:6 * i + 3, 6 * i:6 * i + 3] = mf.right_jacobian_inv(
                delta[6 * i:6 * i + 3]
            )
        return J


def _sigma_info(sigma_rot: float, sigma_trans: float) -> np.ndarray:
    W = np.zeros((6, 6))
    W[0:3, 0:3] = np.eye(3) / sigma_rot**2
    W[3:6, 3:6] = np.eye(3) / sigma_trans**2
    return W


def _compose_rel(d_rot_a, d_pos_a, cov_a, d_rot_b, d_pos_b, cov_b):
    """Compose two relative measurements with covariance (adjoint chaining)."""
    d_rot = d_rot_a @ d_rot_b
    d_pos = d_pos_a + d_rot_a @ d_pos_b
    A1 = np.zeros((6, 6))
    A1[0:3, 0:3] = d_rot_b.T
    A1[3:6, 0:3] = -d_rot_a @ mf.skew(d_pos_b)
    A1[3:6, 3:6] = np.eye(3)
    A2 = np.zeros((6, 6))
    A2[0:3, 0:3] = np.eye(3)
    A2[3:6, 3:6] = d_rot_a
    cov = A1 @ cov_a @ A1.T + A2 @ cov_b @ A2.T
    return d_rot, d_pos, 0.5 * (cov + cov.T)


class SlidingGraph:
    """Node-per-IMU pose graph with GNC factors and a marginalization prior."""

    def __init__(
        self,
        window: float = 1.0,
        imu_period: float = 0.005,
        gravity=(0.0, 0.0, -9.81),
        prior_sigma_rot: float = 1e-3,
        prior_sigma_trans: float = 1e-3,
        imu_sigma_rot: float = 2e-4,
        imu_sigma_trans: float = 2e-3,
        gnc_scale: float = 1.0,
        gnc_enabled: bool = True,
        mu_decay: float = 1.4,
        relin_threshold: float = 0.01,
        cost_tolerance: float = 1e-6,
        max_outer: int = 50,
    ):
        self.window = window
        self.imu_period = imu_period
        self.gravity = np.asarray(gravity, dtype=float)
        self.prior_W = _sigma_info(prior_sigma_rot, prior_sigma_trans)
        self.imu_W = _sigma_info(imu_sigma_rot, imu_sigma_trans)
        self.gnc_scale = gnc_scale
        self.gnc_enabled = gnc_enabled
        self.mu_decay = mu_decay
        self.relin_threshold = relin_threshold
        self.cost_tolerance = cost_tolerance
        self.max_outer = max_outer

        self._nodes: dict[int, _Node] = {}
        self._ids: list[int] = []          # active node ids in time order
        self._times: list[float] = []
        self._chain: dict[int, _RelFactor] = {}  # node id -> factor from previous node
        self._odom: dict[int, _RelFactor] = {}
        self._prior: Optional[_PriorFactor] = None
        self._marginal: Optional[_MarginalPrior] = None
        self._next_node_id = 0
        self._next_factor_id = 0
        self._optimized_once = False
        self._interior_stale = False
        self._segment_cache: dict = {}
        self._frozen: list[tuple] = []     # (t, rot, pos) of marginalized nodes
        self._weight_log: list[tuple] = []  # (factor id, kind, mu, weight) at freeze
        self.diverged = False

    # ------------------------------------------------------------------
    # Insertion
    # ------------------------------------------------------------------

    @property
    def num_nodes(self) -> int:
        return len(self._ids)

    @property
    def latest_time(self) -> float:
        if not self._times:
            raise GraphEmptyError("graph has no nodes")
        return self._times[-1]

    @property
    def num_imu_factors(self) -> int:
        return len(self._chain)

    @property
    def num_odom_factors(self) -> int:
        return len(self._odom)

    def node_key(self, node_id: int) -> NodeKey:
        n = self._nodes[node_id]
        return NodeKey(n.id, n.t)

    def add_imu_node(
        self,
        t: float,
        preint: Optional[Preintegrated],
        vel_world: Optional[np.ndarray] = None,
        init_rot: Optional[np.ndarray] = None,
        init_pos: Optional[np.ndarray] = None,
    ) -> NodeKey:
        """Append a node at an IMU sample time.

        The first node takes the bootstrap prior at (init_rot, init_pos).
        Subsequent nodes need the preintegrated interval from the previous
        node; the world-frame velocity hint converts the gravity-free deltas
        into a relative-pose measurement, and the initial value is predicted
        from the previous estimate.
        """
        if self._ids and t <= self._times[-1]:
            raise ValueError("node times must be strictly increasing")
        node_id = self._next_node_id
        self._next_node_id += 1

        if not self._ids:
            rot = np.eye(3) if init_rot is None else np.asarray(init_rot, dtype=float)
            pos = np.zeros(3) if init_pos is None else np.asarray(init_pos, dtype=float)
            node = _Node(node_id, t, rot, pos)
            self._prior = _PriorFactor(self._new_factor_id(), node_id, rot.copy(),
                                       pos.copy(), self.prior_W)
        else:
            if preint is None:
                raise ValueError("non-initial nodes require a preintegrated interval")
            prev = self._nodes[self._ids[-1]]
            dt = preint.dt_total
            vel = np.zeros(3) if vel_world is None else np.asarray(vel_world, dtype=float)
            # Gravity-free deltas -> relative pose in the previous body frame.
            d_pos = prev.rot.T @ (vel * dt + 0.5 * self.gravity * dt * dt) + preint.d_pos
            d_rot = preint.d_rot
            rot, pos = mf.compose_pose(prev.rot, prev.pos, d_rot, d_pos)
            node = _Node(node_id, t, rot, pos)
            f = _RelFactor(self._new_factor_id(), "imu", prev.id, node_id,
                           d_rot, d_pos, self.imu_W, guarded=False)
            self._chain[node_id] = f

        self._nodes[node_id] = node
        self._ids.append(node_id)
        self._times.append(t)
        return NodeKey(node_id, t)

    def _new_factor_id(self) -> int:
        fid = self._next_factor_id
        self._next_factor_id += 1
        return fid

    def _node_near(self, t: float) -> int:
        if not self._ids:
            raise StaleMeasurementError("graph has no nodes")
        i = bisect_left(self._times, t)
        best, best_err = None, float("inf")
        for j in (i - 1, i):
            if 0 <= j < len(self._times):
                err = abs(self._times[j] - t)
                if err < best_err:
                    best, best_err = j, err
        if best_err > self.imu_period + 1e-9:
            if t < self._times[0]:
                raise StaleMeasurementError(
                    f"anchor time {t:.4f} precedes the active window"
                )
            raise StaleMeasurementError(f"no node within one IMU period of {t:.4f}")
        return self._ids[best]

    def attach_odometry(
        self,
        d_rot: np.ndarray,
        d_pos: np.ndarray,
        t_a: float,
        t_b: float,
        W: Optional[np.ndarray] = None,
        guarded: bool = True,
    ) -> int:
        """Insert a relative-pose factor between the nodes nearest t_a and t_b.

        Arrival lateness is irrelevant as long as both anchors are still
        inside the window; anchors that were already marginalized raise
        StaleMeasurementError.
        """
        key_a = self._node_near(t_a)
        key_b = self._node_near(t_b)
        if key_a == key_b:
            raise ValueError("odometry endpoints resolve to the same node")
        W = self.imu_W if W is None else np.asarray(W, dtype=float)
        f = _RelFactor(self._new_factor_id(), "odom", key_a, key_b,
                       np.asarray(d_rot, dtype=float), np.asarray(d_pos, dtype=float),
                       W, guarded=guarded)
        if f.guarded and self.gnc_enabled:
            e = f.error(self._nodes[key_a], self._nodes[key_b])
            r_sq = float(e @ f.W @ e)
            # Residual-scaled convexity init, capped so the fixed decay
            # schedule terminates within the outer-iteration budget.
            f.mu = min(2.0 * max(r_sq / self.gnc_scale**2, 1.0), 1e4)
            f.weight = gnc_weight(r_sq, f.mu, self.gnc_scale)
        self._odom[f.id] = f
        return f.id

    # ------------------------------------------------------------------
    # Reduced system assembly
    # ------------------------------------------------------------------

    def _anchor_indices(self) -> list[int]:
        idx_of = {nid: i for i, nid in enumerate(self._ids)}
        anchors = {0, len(self._ids) - 1}
        if self._prior is not None and self._prior.key in idx_of:
            anchors.add(idx_of[self._prior.key])
        if self._marginal is not None:
            for k in self._marginal.keys:
                anchors.add(idx_of[k])
        for f in self._odom.values():
            anchors.add(idx_of[f.key_a])
            anchors.add(idx_of[f.key_b])
        return sorted(anchors)

    def _composed_segment(self, i0: int, i1: int):
        """Compose the chain factors between order indices i0 < i1."""
        key = (self._ids[i0], self._ids[i1])
        cached = self._segment_cache.get(key)
        if cached is not None:
            return cached
        start = i0
        d_rot, d_pos = np.eye(3), np.zeros(3)
        cov = np.zeros((6, 6))
        # Extend from a cached proper prefix when available.
        prefix = self._segment_cache.get((self._ids[i0], self._ids[i1 - 1]))
        if i1 - 1 > i0 and prefix is not None:
            d_rot, d_pos, cov = prefix
            start = i1 - 1
        for j in range(start + 1, i1 + 1):
            f = self._chain[self._ids[j]]
            cov_f = np.linalg.inv(f.W)
            d_rot, d_pos, cov = _compose_rel(d_rot, d_pos, cov, f.d_rot, f.d_pos, cov_f)
        out = (d_rot, d_pos, cov)
        self._segment_cache[key] = out
        return out

    def _reduced_factors(self, anchors: list[int]):
        """Factor list over anchor variables: composed chain + odometry + priors."""
        factors = []
        for a, b in zip(anchors[:-1], anchors[1:]):
            if b == a + 1:
                f = self._chain[self._ids[b]]
                factors.append(("rel", f, self._ids[a], self._ids[b]))
            else:
                d_rot, d_pos, cov = self._composed_segment(a, b)
                W = np.linalg.inv(cov)
                f = _RelFactor(-1, "imu", self._ids[a], self._ids[b],
                               d_rot, d_pos, 0.5 * (W + W.T), guarded=False)
                factors.append(("rel", f, self._ids[a], self._ids[b]))
        for f in self._odom.values():
            factors.append(("rel", f, f.key_a, f.key_b))
        if self._prior is not None:
            factors.append(("prior", self._prior, self._prior.key, None))
        if self._marginal is not None:
            factors.append(("marg", self._marginal, None, None))
        return factors

    def _factor_weight(self, f: _RelFactor, e: np.ndarray) -> float:
        if not (f.guarded and self.gnc_enabled):
            return 1.0
        r_sq = float(e @ f.W @ e)
        f.weight = gnc_weight(r_sq, f.mu, self.gnc_scale)
        return f.weight

    def _assemble(self, anchors: list[int], factors):
        """Gauss-Newton normal equations over the anchor variables."""
        col = {self._ids[i]: 6 * k for k, i in enumerate(anchors)}
        dim = 6 * len(anchors)
        H = np.zeros((dim, dim))
        g = np.zeros(dim)
        cost = 0.0
        for kind, f, ka, kb in factors:
            if kind == "rel":
                na, nb = self._nodes[ka], self._nodes[kb]
                e = f.error(na, nb)
                w = self._factor_weight(f, e)
                Ja, Jb = f.jacobians(na, nb, e)
                Weff = w * f.W
                ca, cb = col[ka], col[kb]
                H[ca:ca + 6, ca:ca + 6] += Ja.T @ Weff @ Ja
                H[cb:cb + 6, cb:cb + 6] += Jb.T @ Weff @ Jb
                Hab = Ja.T @ Weff @ Jb
                H[ca:ca + 6, cb:cb + 6] += Hab
                H[cb:cb + 6, ca:ca + 6] += Hab.T
                g[ca:ca + 6] += Ja.T @ (Weff @ e)
                g[cb:cb + 6] += Jb.T @ (Weff @ e)
                cost += float(w * (e @ f.W @ e))
            elif kind == "prior":
                n = self._nodes[f.key]
                e = f.error(n)
                J = f.jacobian(e)
                c = col[f.key]
                H[c:c + 6, c:c + 6] += J.T @ f.W @ J
                g[c:c + 6] += J.T @ (f.W @ e)
                cost += float(e @ f.W @ e)
            else:  # marginal prior
                delta = f.deltas(self._nodes)
                J = f.jacobian(delta)
                grad = f.eta + f.Lambda @ delta
                idx = np.concatenate([np.arange(col[k], col[k] + 6) for k in f.keys])
                H[np.ix_(idx, idx)] += J.T @ f.Lambda @ J
                g[idx] += J.T @ grad
                cost += float(delta @ (2.0 * f.eta + f.Lambda @ delta)) + f.const
        return H, g, cost, col

    # ------------------------------------------------------------------
    # Optimization
    # ------------------------------------------------------------------

    def _apply_step(self, anchors, col, step) -> float:
        max_delta = 0.0
        for i in anchors:
            nid = self._ids[i]
            n = self._nodes[nid]
            d = step[col[nid]:col[nid] + 6]
            n.rot, n.pos = mf.pose_boxplus(n.rot, n.pos, d)
            max_delta = max(max_delta, float(np.abs(d).max()))
            moved = mf.pose_boxminus(n.rot, n.pos, n.lin_rot, n.lin_pos)
            if np.abs(moved).max() > self.relin_threshold:
                n.lin_rot, n.lin_pos = n.rot, n.pos
                n.lin_version += 1
        return max_delta

    def _snapshot(self, anchors):
        return [(self._nodes[self._ids[i]].rot, self._nodes[self._ids[i]].pos)
                for i in anchors]

    def _restore(self, anchors, snap):
        for i, (rot, pos) in zip(anchors, snap):
            n = self._nodes[self._ids[i]]
            n.rot, n.pos = rot, pos

    def optimize(self) -> None:
        """Iteratively reweighted Gauss-Newton with a per-factor mu schedule.

        Outer iterations recompute weights, take one damped step and decay
        every guarded factor's mu by the fixed schedule.  Convergence
        requires all mu at 1 and a relative cost change below tolerance,
        after which one fully relinearized polish pass removes any bias from
        relinearization gating.  Node estimates are available from
        ``estimates()`` afterwards (interior nodes are recovered lazily).
        """
        if not self._ids:
            raise GraphEmptyError("cannot optimize an empty graph")
        anchors = self._anchor_indices()
        factors = self._reduced_factors(anchors)
        lam = 0.0
        prev_cost = None
        best = (np.inf, None)
        polished = False
        converged = False

        for _ in range(self.max_outer):
            H, g, cost, col = self._assemble(anchors, factors)
            if cost < best[0]:
                best = (cost, self._snapshot(anchors))
            all_mu_done = all(
                (not f.guarded) or (not self.gnc_enabled) or f.mu <= 1.0
                for f in self._odom.values()
            )
            if prev_cost is not None and all_mu_done:
                rel = abs(prev_cost - cost) / max(abs(prev_cost), 1e-30)
                if rel < self.cost_tolerance:
                    if polished:
                        converged = True
                        break
                    # Force a full relinearization pass so the fixed point
                    # does not depend on the gating history.
                    for i in anchors:
                        n = self._nodes[self._ids[i]]
                        n.lin_rot, n.lin_pos = n.rot, n.pos
                        n.lin_version += 1
                    polished = True
            prev_cost = cost

            snap = self._snapshot(anchors)
            step = None
            for _try in range(8):
                try:
                    step = np.linalg.solve(H + lam * np.eye(H.shape[0]), -g)
                except np.linalg.LinAlgError:
                    lam = max(lam * 10.0, 1e-8)
                    continue
                if np.all(np.isfinite(step)):
                    self._apply_step(anchors, col, step)
                    if lam == 0.0 and float(np.abs(step).max()) < 1e-6:
                        break  # near convergence a plain GN step cannot blow up
                    _, _, new_cost, _ = self._assemble(anchors, factors)
                    if new_cost <= cost * (1.0 + 1e-12) or lam > 1e6:
                        lam = lam / 10.0 if lam > 1e-9 else 0.0
                        break
                    self._restore(anchors, snap)
                lam = max(lam * 10.0, 1e-8)
            if step is None:
                self.diverged = True
                break

            for f in self._odom.values():
                if f.guarded and self.gnc_enabled and f.mu > 1.0:
                    f.mu = max(1.0, f.mu / self.mu_decay)
        else:
            converged = False

        if not converged and best[1] is not None:
            _, _, final_cost, _ = self._assemble(anchors, factors)
            if final_cost > best[0]:
                self.diverged = True
                self._restore(anchors, best[1])

        self._optimized_once = True
        self._interior_stale = True

    # ------------------------------------------------------------------
    # Interior recovery
    # ------------------------------------------------------------------

    def _backsubstitute(self, limit_idx: Optional[int] = None) -> None:
        """Conditional-mean recovery of non-anchor nodes between anchors.

        With ``limit_idx`` only segments starting at or before that order
        index are refreshed (enough to freeze nodes about to be
        marginalized); the staleness flag then stays set for the rest.
        """
        if not self._interior_stale:
            return
        anchors = self._anchor_indices()
        for a, b in zip(anchors[:-1], anchors[1:]):
            if b - a < 2:
                continue
            if limit_idx is not None and a > limit_idx:
                continue
            interior = list(range(a + 1, b))
            for _ in range(2):  # two GN passes; exact after one in the linear case
                dim = 6 * len(interior)
                H = np.zeros((dim, dim))
                g = np.zeros(dim)
                pos_of = {self._ids[i]: 6 * k for k, i in enumerate(interior)}
                for j in range(a + 1, b + 1):
                    f = self._chain[self._ids[j]]
                    na, nb = self._nodes[f.key_a], self._nodes[f.key_b]
                    e = f.error(na, nb)
                    Ja, Jb = f.jacobians(na, nb, e)
                    for key, J in ((f.key_a, Ja), (f.key_b, Jb)):
                        if key not in pos_of:
                            continue
                        c = pos_of[key]
                        H[c:c + 6, c:c + 6] += J.T @ f.W @ J
                        g[c:c + 6] += J.T @ (f.W @ e)
                    if f.key_a in pos_of and f.key_b in pos_of:
                        ca, cb = pos_of[f.key_a], pos_of[f.key_b]
                        Hab = Ja.T @ f.W @ Jb
                        H[ca:ca + 6, cb:cb + 6] += Hab
                        H[cb:cb + 6, ca:ca + 6] += Hab.T
                step = np.linalg.solve(H, -g)
                for key, c in pos_of.items():
                    n = self._nodes[key]
                    n.rot, n.pos = mf.pose_boxplus(n.rot, n.pos, step[c:c + 6])
                if float(np.abs(step).max()) < 1e-12:
                    break
        if limit_idx is None:
            self._interior_stale = False

    def estimates(self) -> dict[int, tuple]:
        """Current estimates of all active nodes: id -> (t, rot, pos)."""
        self._backsubstitute()
        return {nid: (self._nodes[nid].t, self._nodes[nid].rot, self._nodes[nid].pos)
                for nid in self._ids}

    # ------------------------------------------------------------------
    # Marginalization
    # ------------------------------------------------------------------

    def slide(self, t_now: float) -> None:
        """Marginalize nodes older than t_now - window into the boundary prior."""
        cut = t_now - self.window
        n_elim = bisect_left(self._times, cut)
        if n_elim <= 0:
            return
        if n_elim >= len(self._ids):
            n_elim = len(self._ids) - 1  # always retain the newest node
        if n_elim <= 0:
            return
        self._backsubstitute(limit_idx=n_elim)

        elim_ids = set(self._ids[:n_elim])
        consumed_rel: list[_RelFactor] = []
        boundary: list[int] = []
        seen = set()

        def note_boundary(key):
            if key not in elim_ids and key not in seen:
                seen.add(key)
                boundary.append(key)

        for nid in self._ids[1:]:
            f = self._chain[nid]
            if f.key_a in elim_ids or f.key_b in elim_ids:
                consumed_rel.append(f)
                note_boundary(f.key_a)
                note_boundary(f.key_b)
        for f in self._odom.values():
            if f.key_a in elim_ids or f.key_b in elim_ids:
                consumed_rel.append(f)
                note_boundary(f.key_a)
                note_boundary(f.key_b)
        consumed_prior = self._prior if (self._prior and self._prior.key in elim_ids) else None
        consumed_marg = None
        if self._marginal is not None and any(k in elim_ids for k in self._marginal.keys):
            consumed_marg = self._marginal
            for k in self._marginal.keys:
                note_boundary(k)

        boundary.sort(key=lambda k: self._nodes[k].t)
        order = [k for k in self._ids[:n_elim]] + boundary
        col = {k: 6 * i for i, k in enumerate(order)}
        dim = 6 * len(order)
        Lam = np.zeros((dim, dim))
        eta = np.zeros(dim)

        for f in consumed_rel:
            na, nb = self._nodes[f.key_a], self._nodes[f.key_b]
            e = f.error(na, nb)
            w = self._factor_weight(f, e)
            Ja, Jb = f.jacobians(na, nb, e)
            Weff = w * f.W
            ca, cb = col[f.key_a], col[f.key_b]
            Lam[ca:ca + 6, ca:ca + 6] += Ja.T @ Weff @ Ja
            Lam[cb:cb + 6, cb:cb + 6] += Jb.T @ Weff @ Jb
            Hab = Ja.T @ Weff @ Jb
            Lam[ca:ca + 6, cb:cb + 6] += Hab
            Lam[cb:cb + 6, ca:ca + 6] += Hab.T
            eta[ca:ca + 6] += Ja.T @ (Weff @ e)
            eta[cb:cb + 6] += Jb.T @ (Weff @ e)
            self._weight_log.append((f.id, f.kind, f.mu, f.weight))
        if consumed_prior is not None:
            n = self._nodes[consumed_prior.key]
            e = consumed_prior.error(n)
            J = consumed_prior.jacobian(e)
            c = col[consumed_prior.key]
            Lam[c:c + 6, c:c + 6] += J.T @ consumed_prior.W @ J
            eta[c:c + 6] += J.T @ (consumed_prior.W @ e)
        if consumed_marg is not None:
            delta = consumed_marg.deltas(self._nodes)
            J = consumed_marg.jacobian(delta)
            idx = np.concatenate([np.arange(col[k], col[k] + 6) for k in consumed_marg.keys])
            Lam[np.ix_(idx, idx)] += J.T @ consumed_marg.Lambda @ J
            eta[idx] += J.T @ (consumed_marg.eta + consumed_marg.Lambda @ delta)

        ne = 6 * n_elim
        Lee = Lam[:ne, :ne]
        Leb = Lam[:ne, ne:]
        Lbb = Lam[ne:, ne:]
        sol = np.linalg.solve(Lee, np.concatenate([Leb, eta[:ne, None]], axis=1))
        Lam_new = Lbb - Leb.T @ sol[:, :-1]
        eta_new = eta[ne:] - Leb.T @ sol[:, -1]

        self._marginal = _MarginalPrior(
            self._new_factor_id(),
            boundary,
            [(self._nodes[k].rot, self._nodes[k].pos) for k in boundary],
            0.5 * (Lam_new + Lam_new.T),
            eta_new,
        )
        if consumed_prior is not None:
            self._prior = None

        for nid in self._ids[:n_elim]:
            n = self._nodes.pop(nid)
            self._frozen.append((n.t, n.rot, n.pos))
            self._chain.pop(nid, None)
        # Chain factor entering the first retained node was consumed above.
        first_retained = self._ids[n_elim]
        self._chain.pop(first_retained, None)
        for f in consumed_rel:
            self._odom.pop(f.id, None)
        self._ids = self._ids[n_elim:]
        self._times = self._times[n_elim:]
        self._segment_cache.clear()

    # ------------------------------------------------------------------
    # Output
    # ------------------------------------------------------------------

    def latest_pose(self) -> BackendPoseMeasurement:
        """Newest node estimate with its marginal covariance blocks."""
        if not self._ids:
            raise GraphEmptyError("graph has no nodes")
        anchors = self._anchor_indices()
        factors = self._reduced_factors(anchors)
        H, _, _, col = self._assemble(anchors, factors)
        newest = self._ids[-1]
        c = col[newest]
        rhs = np.zeros((H.shape[0], 6))
        rhs[c:c + 6] = np.eye(6)
        cov = np.linalg.solve(H, rhs)[c:c + 6]
        cov = 0.5 * (cov + cov.T)
        n = self._nodes[newest]
        return BackendPoseMeasurement(
            rot=n.rot.copy(),
            pos=n.pos.copy(),
            cov_rot=cov[0:3, 0:3],
            cov_trans=cov[3:6, 3:6],
            timestamp=n.t,
        )

    def factor_states(self) -> list[dict]:
        rows = [
            {"id": fid, "kind": kind, "mu": mu, "weight": w, "active": False}
            for fid, kind, mu, w in self._weight_log
        ]
        for nid in self._ids[1:]:
            f = self._chain[nid]
            rows.append({"id": f.id, "kind": f.kind, "mu": f.mu, "weight": f.weight,
                         "active": True})
        for f in self._odom.values():
            rows.append({"id": f.id, "kind": f.kind, "mu": f.mu, "weight": f.weight,
                         "active": True})
        return rows

    def trajectory(self) -> list[tuple]:
        """Frozen history followed by the active window, (t, rot, pos) tuples."""
        self._backsubstitute()
        out = list(self._frozen)
        out.extend(
            (self._nodes[nid].t, self._nodes[nid].rot, self._nodes[nid].pos)
            for nid in self._ids
        )
        return out

    def write_tum(self, path: str) -> None:
        with open(path, "w") as f:
            for t, rot, pos in self.trajectory():
                q = SciRotation.from_matrix(rot).as_quat()
                f.write(
                    f"{t:.9f} {pos[0]:.9f} {pos[1]:.9f} {pos[2]:.9f} "
                    f"{q[0]:.9f} {q[1]:.9f} {q[2]:.9f} {q[3]:.9f}\n"
                )

    def dump_json(self, path: str) -> None:
        self._backsubstitute()
        data = {
            "nodes": [
                {
                    "id": nid,
                    "t": self._nodes[nid].t,
                    "rot": self._nodes[nid].rot.tolist(),
                    "pos": self._nodes[nid].pos.tolist(),
                }
                for nid in self._ids
            ],
            "factors": self.factor_states(),
            "marginal_prior_keys": list(self._marginal.keys) if self._marginal else [],
        }
        with open(path, "w") as f:
            json.dump(data, f, indent=1)
