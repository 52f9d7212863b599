"""Ground-truth worlds, trajectories and sensor simulators.

Everything is a pure function of (spec, seed): a single seed sequence is
split per sensor stream, so runs are bit-reproducible.  Environments are
unions of analytic surface patches (rectangles and cylinder segments) that
support vectorized ray casting, nearest-point queries and exact normals;
a curved tunnel is a circular-arc axis approximated by straight cylinder
segments, which *are* the ground-truth geometry (ray hits lie exactly on
them).
"""
from __future__ import annotations

import dataclasses
from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np

from . import manifold as mf
from .inertial import ImuSample, NoiseParams
from .registration import PlaneQuery, Scan

GRAVITY = np.array([0.0, 0.0, -9.81])


def _left_jacobian_batch(phi: np.ndarray) -> np.ndarray:
    """Batched SO(3) left Jacobian for (N, 3) rotation vectors."""
    theta = np.linalg.norm(phi, axis=-1)
    s = mf.skew(phi)
    s2 = s @ s
    small = theta < 1e-8
    t = np.where(small, 1.0, theta)
    t2 = theta * theta
    b = np.where(small, 0.5 - t2 / 24.0, (1.0 - np.cos(t)) / (t * t))
    c = np.where(small, 1.0 / 6.0 - t2 / 120.0, (t - np.sin(t)) / (t * t * t))
    return np.eye(3) + b[:, None, None] * s + c[:, None, None] * s2


# ---------------------------------------------------------------------------
# Surfaces
# ---------------------------------------------------------------------------

class RectPatch:
    """Finite rectangle: origin corner plus two orthogonal edge vectors."""

    def __init__(self, origin, edge_u, edge_v, normal_sign: float = 1.0):
        self.origin = np.asarray(origin, dtype=float)
        self.edge_u = np.asarray(edge_u, dtype=float)
        self.edge_v = np.asarray(edge_v, dtype=float)
        self.len_u = float(np.linalg.norm(self.edge_u))
        self.len_v = float(np.linalg.norm(self.edge_v))
        self.dir_u = self.edge_u / self.len_u
        self.dir_v = self.edge_v / self.len_v
        n = np.cross(self.dir_u, self.dir_v)
        self.normal = normal_sign * n / np.linalg.norm(n)

    @property
    def area(self) -> float:
        return self.len_u * self.len_v

    def sample(self, density: float, rng: np.random.Generator):
        n = int(round(self.area * density))
        uv = rng.random((n, 2))
        pts = self.origin + uv[:, :1] * self.edge_u + uv[:, 1:] * self.edge_v
        return pts, np.tile(self.normal, (n, 1))

    def raycast(self, origins: np.ndarray, dirs: np.ndarray) -> np.ndarray:
        denom = dirs @ self.normal
        with np.errstate(divide="ignore", invalid="ignore"):
            t = ((self.origin - origins) @ self.normal) / denom
        rel = origins + t[:, None] * dirs - self.origin
        u = rel @ self.dir_u
        v = rel @ self.dir_v
        ok = (
            (np.abs(denom) > 1e-12)
            & (t > 1e-6)
            & (u >= -1e-9) & (u <= self.len_u + 1e-9)
            & (v >= -1e-9) & (v <= self.len_v + 1e-9)
        )
        return np.where(ok, t, np.inf)

    def nearest(self, pts: np.ndarray):
        rel = pts - self.origin
        u = np.clip(rel @ self.dir_u, 0.0, self.len_u)
        v = np.clip(rel @ self.dir_v, 0.0, self.len_v)
        foot = self.origin + u[:, None] * self.dir_u + v[:, None] * self.dir_v
        dist = np.linalg.norm(pts - foot, axis=1)
        normals = np.tile(self.normal, (pts.shape[0], 1))
        return dist, foot, normals


class CylinderSegment:
    """Inside of a finite cylinder: base point, unit axis, radius, length.

    Normals point inward (toward the axis), matching a sensor inside a
    tunnel.
    """

    def __init__(self, base, axis, radius: float, length: float):
        self.base = np.asarray(base, dtype=float)
        axis = np.asarray(axis, dtype=float)
        self.axis = axis / np.linalg.norm(axis)
        self.radius = float(radius)
        self.length = float(length)
        # Orthonormal frame for sampling
        ref = np.array([0.0, 0.0, 1.0])
        if abs(self.axis @ ref) > 0.9:
            ref = np.array([0.0, 1.0, 0.0])
        self.u = np.cross(self.axis, ref)
        self.u /= np.linalg.norm(self.u)
        self.v = np.cross(self.axis, self.u)

    @property
    def area(self) -> float:
        return 2.0 * np.pi * self.radius * self.length

    def sample(self, density: float, rng: np.random.Generator):
        n = int(round(self.area * density))
        s = rng.random(n) * self.length
        phi = rng.random(n) * 2.0 * np.pi
        radial = np.cos(phi)[:, None] * self.u + np.sin(phi)[:, None] * self.v
        pts = self.base + s[:, None] * self.axis + self.radius * radial
        return pts, -radial

    def raycast(self, origins: np.ndarray, dirs: np.ndarray) -> np.ndarray:
        # Solve |(o + t d) - axis projection|^2 = r^2 for the radial part.
        rel = origins - self.base
        d_ax = dirs @ self.axis
        r_ax = rel @ self.axis
        d_perp = dirs - d_ax[:, None] * self.axis
        r_perp = rel - r_ax[:, None] * self.axis
        a = np.einsum("ni,ni->n", d_perp, d_perp)
        b = 2.0 * np.einsum("ni,ni->n", d_perp, r_perp)
        c = np.einsum("ni,ni->n", r_perp, r_perp) - self.radius**2
        disc = b * b - 4.0 * a * c
        out = np.full(origins.shape[0], np.inf)
        ok = (disc >= 0.0) & (a > 1e-12)
        sq = np.sqrt(np.where(ok, disc, 0.0))
        with np.errstate(divide="ignore", invalid="ignore"):
            for sign in (-1.0, 1.0):  # nearer root first; inside gives the + root
                t = (-b + sign * sq) / (2.0 * a)
                s = r_ax + t * d_ax
                good = ok & (t > 1e-6) & (s >= -1e-9) & (s <= self.length + 1e-9)
                out = np.where(good & (t < out), t, out)
        return out

    def nearest(self, pts: np.ndarray):
        rel = pts - self.base
        s = np.clip(rel @ self.axis, 0.0, self.length)
        radial = rel - (rel @ self.axis)[:, None] * self.axis
        rn = np.linalg.norm(radial, axis=1)
        rn_safe = np.maximum(rn, 1e-12)
        radial_unit = radial / rn_safe[:, None]
        foot = self.base + s[:, None] * self.axis + self.radius * radial_unit
        dist = np.linalg.norm(pts - foot, axis=1)
        return dist, foot, -radial_unit


class SurfaceMap:
    """Analytic map: nearest-surface tangent planes with exact normals.

    Implements the same local-plane query protocol as the accumulated
    PointMap, with zero plane-fit rms.
    """

    def __init__(self, surfaces: Sequence):
        self.surfaces = list(surfaces)

    def query_local_planes(self, pts_world: np.ndarray, k: int, max_rms: float) -> PlaneQuery:
        pts_world = np.atleast_2d(np.asarray(pts_world, dtype=float))
        n = pts_world.shape[0]
        best = np.full(n, np.inf)
        foot = np.zeros((n, 3))
        normals = np.zeros((n, 3))
        for s in self.surfaces:
            dist, f, nn = s.nearest(pts_world)
            closer = dist < best
            best = np.where(closer, dist, best)
            foot[closer] = f[closer]
            normals[closer] = nn[closer]
        valid = np.isfinite(best)
        return PlaneQuery(normals, foot, best, np.zeros(n), valid)

    def raycast(self, origins: np.ndarray, dirs: np.ndarray):
        t = np.full(origins.shape[0], np.inf)
        for s in self.surfaces:
            t = np.minimum(t, s.raycast(origins, dirs))
        return t


# ---------------------------------------------------------------------------
# Environments
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class Environment:
    """World geometry: box room, corridor, tunnel or open plane.

    ``size`` is (Lx, Ly, Lz) for box/corridor (corridor open along x) and the
    plane extent; ``radius``/``curvature`` apply to the tunnel, whose axis
    starts at the origin pointing +x and bends in the xy-plane.  ``density``
    is the surface sampling density in points/m^2.
    """

    kind: str = "box"
    size: tuple = (10.0, 10.0, 3.0)
    radius: float = 3.0
    length: float = 60.0
    curvature: float = 0.0
    density: float = 10.0

    def __post_init__(self):
        if self.kind not in ("box", "corridor", "tunnel", "plane"):
            raise ValueError(f"unknown environment kind {self.kind!r}")
        if min(self.size) <= 0 or self.radius <= 0 or self.length <= 0:
            raise ValueError("environment dimensions must be positive")


def build_surfaces(env: Environment) -> list:
    """Analytic surface list of an environment (before any pose transform)."""
    lx, ly, lz = env.size
    if env.kind == "box":
        # Interior of [-lx/2, lx/2] x [-ly/2, ly/2] x [0, lz]
        x0, y0 = -lx / 2.0, -ly / 2.0
        ex = np.array([lx, 0.0, 0.0])
        ey = np.array([0.0, ly, 0.0])
        ez = np.array([0.0, 0.0, lz])
        return [
            RectPatch((x0, y0, 0.0), ex, ey, +1.0),                 # floor +z
            RectPatch((x0, y0, lz), ex, ey, -1.0),                  # ceiling -z
            RectPatch((x0, y0, 0.0), ey, ez, +1.0),                 # wall +x
            RectPatch((lx / 2.0, y0, 0.0), ey, ez, -1.0),           # wall -x
            RectPatch((x0, y0, 0.0), ex, ez, -1.0),                 # wall +y
            RectPatch((x0, ly / 2.0, 0.0), ex, ez, +1.0),           # wall -y
        ]
    if env.kind == "corridor":
        # Open along x: two walls, floor, ceiling; x in [-5, length+5].
        x0 = -5.0
        span = env.length + 10.0
        ex = np.array([span, 0.0, 0.0])
        ez = np.array([0.0, 0.0, lz])
        return [
            RectPatch((x0, -ly / 2.0, 0.0), ex, np.array([0.0, ly, 0.0]), +1.0),
            RectPatch((x0, -ly / 2.0, lz), ex, np.array([0.0, ly, 0.0]), -1.0),
            RectPatch((x0, -ly / 2.0, 0.0), ex, ez, -1.0),
            RectPatch((x0, ly / 2.0, 0.0), ex, ez, +1.0),
        ]
    if env.kind == "tunnel":
        margin = 6.0
        if abs(env.curvature) < 1e-9:
            return [CylinderSegment((-margin, 0.0, 0.0), (1.0, 0.0, 0.0),
                                    env.radius, env.length + 2 * margin)]
        # Circular-arc axis in the xy-plane approximated by straight
        # cylinder segments; the segmented set is the ground truth.
        seg_len = 1.0
        total = env.length + 2 * margin
        n_seg = max(int(np.ceil(total / seg_len)), 1)
        segs = []
        s0 = -margin
        for i in range(n_seg):
            s = s0 + i * seg_len
            mid = s + 0.5 * seg_len
            c, pos = _arc_pose(env.curvature, mid)
            axis = c[:, 0]
            base = pos - 0.5 * seg_len * axis
            segs.append(CylinderSegment(base, axis, env.radius, seg_len * 1.02))
        return segs
    # plane
    half = env.length
    return [
        RectPatch((-half, -half, 0.0), np.array([2 * half, 0, 0]),
                  np.array([0, 2 * half, 0]), +1.0)
    ]


def _arc_pose(curvature: float, s: float):
    """Pose on the circular arc at path length s: rotation columns = (tangent,
    normal, up), position in world."""
    if abs(curvature) < 1e-12:
        return np.eye(3), np.array([s, 0.0, 0.0])
    ang = curvature * s
    rot = mf.rot_exp(np.array([0.0, 0.0, ang]))
    r = 1.0 / curvature
    pos = np.array([np.sin(ang) * r, (1.0 - np.cos(ang)) * r, 0.0])
    return rot, pos


def axis_direction(env: Environment, positions: np.ndarray) -> np.ndarray:
    """Local along-axis unit direction at given world positions."""
    positions = np.atleast_2d(np.asarray(positions, dtype=float))
    if env.kind == "tunnel" and abs(env.curvature) > 1e-12:
        r = 1.0 / env.curvature
        ang = np.arctan2(positions[:, 0], r - positions[:, 1])
        out = np.stack([np.cos(ang), np.sin(ang), np.zeros_like(ang)], axis=1)
        return out
    return np.tile(np.array([1.0, 0.0, 0.0]), (positions.shape[0], 1))


def sample_environment(env: Environment, seed: int = 0):
    """Uniform surface samples with exact normals: (points, normals, surfaces)."""
    surfaces = build_surfaces(env)
    rng = np.random.default_rng(np.random.SeedSequence([seed, 0xE5]))
    pts, normals = [], []
    for s in surfaces:
        p, n = s.sample(env.density, rng)
        pts.append(p)
        normals.append(n)
    return np.concatenate(pts, axis=0), np.concatenate(normals, axis=0), surfaces


# ---------------------------------------------------------------------------
# Trajectories
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class TwistSegment:
    duration: float
    omega: tuple = (0.0, 0.0, 0.0)   # body angular velocity [rad/s]
    vel: tuple = (0.0, 0.0, 0.0)     # body linear velocity [m/s]


@dataclass(frozen=True)
class TrajectorySpec:
    """Analytic motion profile plus sensor rates.

    ``profile`` "twist" chains constant-twist segments (closed-form screw
    motion); "sinusoid" superimposes a world-frame sinusoidal translation on
    a single constant twist.
    """

    segments: tuple = (TwistSegment(10.0, (0.0, 0.0, 0.0), (1.0, 0.0, 0.0)),)
    profile: str = "twist"
    sin_amplitude: tuple = (0.0, 0.0, 0.0)
    sin_frequency: float = 0.5
    start_rot: tuple = ((1, 0, 0), (0, 1, 0), (0, 0, 1))
    start_pos: tuple = (0.0, 0.0, 0.0)
    imu_rate: float = 200.0
    scan_rate: float = 10.0

    def __post_init__(self):
        if self.imu_rate <= 0 or self.scan_rate <= 0:
            raise ValueError("rates must be positive")
        if not self.segments or any(s.duration <= 0 for s in self.segments):
            raise ValueError("segments must have positive duration")

    @property
    def duration(self) -> float:
        return float(sum(s.duration for s in self.segments))


class Trajectory:
    """Closed-form ground truth evaluated from a TrajectorySpec."""

    def __init__(self, spec: TrajectorySpec):
        self.spec = spec
        # Precompute segment boundary poses.
        rot = np.asarray(spec.start_rot, dtype=float)
        pos = np.asarray(spec.start_pos, dtype=float)
        self._bounds = [0.0]
        self._poses = [(rot, pos)]
        for seg in spec.segments:
            w = np.asarray(seg.omega, dtype=float)
            v = np.asarray(seg.vel, dtype=float)
            d = seg.duration
            rot, pos = self._advance(rot, pos, w, v, d)
            self._bounds.append(self._bounds[-1] + d)
            self._poses.append((rot, pos))

    @staticmethod
    def _advance(rot, pos, w, v, dt):
        drot = mf.rot_exp(w * dt)
        dpos = mf.left_jacobian(w * dt) @ (v * dt)
        return rot @ drot, pos + rot @ dpos

    def _segment(self, t: float):
        i = int(np.searchsorted(self._bounds, t, side="right")) - 1
        i = min(max(i, 0), len(self.spec.segments) - 1)
        return i, t - self._bounds[i]

    def state_at(self, t: float):
        """(rot, pos, vel_world, omega_body, accel_world) at time t."""
        i, tau = self._segment(t)
        seg = self.spec.segments[i]
        w = np.asarray(seg.omega, dtype=float)
        v = np.asarray(seg.vel, dtype=float)
        rot0, pos0 = self._poses[i]
        rot, pos = self._advance(rot0, pos0, w, v, tau)
        vel = rot @ v
        acc = rot @ np.cross(w, v)
        if self.spec.profile == "sinusoid":
            amp = np.asarray(self.spec.sin_amplitude, dtype=float)
            om = 2.0 * np.pi * self.spec.sin_frequency
            pos = pos + amp * np.sin(om * t)
            vel = vel + amp * om * np.cos(om * t)
            acc = acc - amp * om * om * np.sin(om * t)
        return rot, pos, vel, w, acc

    def imu_at(self, t: float):
        """Ideal body-frame angular rate and specific force at time t."""
        rot, _, _, w, acc = self.state_at(t)
        return w, rot.T @ (acc - GRAVITY)

    def poses_at(self, ts: np.ndarray):
        """Vectorized (rotations, positions) lookup for an array of times."""
        ts = np.asarray(ts, dtype=float)
        rots = np.empty((ts.size, 3, 3))
        poss = np.empty((ts.size, 3))
        idx = np.clip(
            np.searchsorted(self._bounds, ts, side="right") - 1,
            0, len(self.spec.segments) - 1,
        )
        for i in np.unique(idx):
            m = idx == i
            seg = self.spec.segments[i]
            w = np.asarray(seg.omega, dtype=float)
            v = np.asarray(seg.vel, dtype=float)
            rot0, pos0 = self._poses[i]
            tau = ts[m] - self._bounds[i]
            phi = tau[:, None] * w
            drot = mf.rot_exp(phi)
            dpos = np.einsum("nij,nj->ni", _left_jacobian_batch(phi), tau[:, None] * v)
            rots[m] = np.einsum("ij,njk->nik", rot0, drot)
            poss[m] = pos0 + dpos @ rot0.T
        if self.spec.profile == "sinusoid":
            amp = np.asarray(self.spec.sin_amplitude, dtype=float)
            om = 2.0 * np.pi * self.spec.sin_frequency
            poss = poss + np.sin(om * ts)[:, None] * amp
        return rots, poss

    def true_state(self, t: float, bias_gyro=None, bias_accel=None):
        from .manifold import State

        rot, pos, vel, _, _ = self.state_at(t)
        z = np.zeros(3)
        return State(rot, pos, vel,
                     z if bias_gyro is None else bias_gyro,
                     z if bias_accel is None else bias_accel,
                     GRAVITY)


# ---------------------------------------------------------------------------
# Sensor streams
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class OutlierSpec:
    probability: float = 0.0
    trans_magnitude: float = 20.0   # [m]
    rot_magnitude: float = 0.5      # [rad]

    def __post_init__(self):
        if not (0.0 <= self.probability < 1.0):
            raise ValueError("outlier probability must be in [0, 1)")


@dataclass(frozen=True)
class ImuStream:
    samples: list
    truth: list          # ground-truth State at each sample time
    true_bias_gyro: np.ndarray
    true_bias_accel: np.ndarray


def simulate_imu(
    traj: Trajectory,
    noise: Optional[NoiseParams] = None,
    seed: int = 0,
    init_bias_gyro=(0.0, 0.0, 0.0),
    init_bias_accel=(0.0, 0.0, 0.0),
    duration: Optional[float] = None,
) -> ImuStream:
    """IMU stream from analytic derivatives plus noise and bias random walk.

    ``noise=None`` gives the ideal zero-noise stream (biases still applied).
    Truth states carry the instantaneous true biases.
    """
    rate = traj.spec.imu_rate
    dt = 1.0 / rate
    if duration is None:
        duration = traj.spec.duration
    n = int(round(duration * rate)) + 1
    rng = np.random.default_rng(np.random.SeedSequence([seed, 0x1]))
    bg = np.asarray(init_bias_gyro, dtype=float).copy()
    ba = np.asarray(init_bias_accel, dtype=float).copy()
    samples, truth = [], []
    for k in range(n):
        t = k * dt
        w, f = traj.imu_at(t)
        wm, am = w + bg, f + ba
        if noise is not None:
            wm = wm + rng.normal(0.0, noise.gyro_noise / np.sqrt(dt), 3)
            am = am + rng.normal(0.0, noise.accel_noise / np.sqrt(dt), 3)
        samples.append(ImuSample(t, wm, am))
        truth.append(traj.true_state(t, bg.copy(), ba.copy()))
        if noise is not None:
            bg = bg + rng.normal(0.0, noise.gyro_bias_walk * np.sqrt(dt), 3)
            ba = ba + rng.normal(0.0, noise.accel_bias_walk * np.sqrt(dt), 3)
    return ImuStream(samples, truth, np.asarray(init_bias_gyro, dtype=float),
                     np.asarray(init_bias_accel, dtype=float))


def simulate_lidar(
    traj: Trajectory,
    surfaces: Sequence,
    pts_per_scan: int = 800,
    range_sigma: float = 0.0,
    max_range: float = 60.0,
    seed: int = 0,
    extrinsic: Optional[tuple] = None,
    duration: Optional[float] = None,
) -> list[Scan]:
    """Ray-cast scans along the trajectory.

    Each sweep spreads per-point timestamps uniformly over the scan period;
    points are emitted in the sensor frame at their emission time.  Misses
    (no surface within max_range) are dropped.
    """
    world = SurfaceMap(surfaces)
    rate = traj.spec.scan_rate
    period = 1.0 / rate
    if duration is None:
        duration = traj.spec.duration
    n_scans = int(round(duration * rate))
    rng = np.random.default_rng(np.random.SeedSequence([seed, 0x2]))
    scans = []
    for k in range(1, n_scans + 1):
        t_end = k * period
        times = t_end - period + (np.arange(pts_per_scan) + 1) / pts_per_scan * period
        dirs_sensor = rng.normal(size=(pts_per_scan, 3))
        dirs_sensor /= np.linalg.norm(dirs_sensor, axis=1, keepdims=True)
        noise_r = rng.normal(0.0, range_sigma, pts_per_scan) if range_sigma > 0 else None

        rots, origins = traj.poses_at(times)
        if extrinsic is not None:
            rot_e, pos_e = extrinsic
            origins = origins + np.einsum("nij,j->ni", rots, pos_e)
            rots = rots @ rot_e
        dirs = np.einsum("nij,nj->ni", rots, dirs_sensor)

        t_hit = world.raycast(origins, dirs)
        hit = np.isfinite(t_hit) & (t_hit <= max_range)
        rng_hit = t_hit[hit]
        if noise_r is not None:
            rng_hit = rng_hit + noise_r[hit]
        p_sensor = dirs_sensor[hit] * rng_hit[:, None]
        scans.append(Scan(points=p_sensor, times=times[hit], t_end=t_end))
    return scans


@dataclass(frozen=True)
class AuxOdom:
    """Relative pose measurement between two trajectory times."""

    t_a: float
    t_b: float
    d_rot: np.ndarray
    d_pos: np.ndarray
    arrival: float
    is_outlier: bool


def simulate_aux_odometry(
    traj: Trajectory,
    rate: float = 10.0,
    sigma_rot: float = 0.002,
    sigma_trans: float = 0.01,
    outliers: Optional[OutlierSpec] = None,
    latency: float = 0.0,
    seed: int = 0,
    duration: Optional[float] = None,
) -> list[AuxOdom]:
    """Noisy relative ground-truth poses at a lower rate, optionally corrupted
    by gross outliers, delivered with a fixed latency."""
    period = 1.0 / rate
    if duration is None:
        duration = traj.spec.duration
    n = int(round(duration * rate))
    rng = np.random.default_rng(np.random.SeedSequence([seed, 0x3]))
    out = []
    for k in range(n):
        t_a, t_b = k * period, (k + 1) * period
        ra, pa = traj.state_at(t_a)[:2]
        rb, pb = traj.state_at(t_b)[:2]
        d_rot, d_pos = mf.relative_pose(ra, pa, rb, pb)
        d_rot = d_rot @ mf.rot_exp(rng.normal(0.0, sigma_rot, 3))
        d_pos = d_pos + rng.normal(0.0, sigma_trans, 3)
        is_outlier = False
        if outliers is not None and outliers.probability > 0.0:
            if rng.random() < outliers.probability:
                is_outlier = True
                direction = rng.normal(size=3)
                direction /= np.linalg.norm(direction)
                d_pos = d_pos + direction * outliers.trans_magnitude
                axis = rng.normal(size=3)
                axis /= np.linalg.norm(axis)
                d_rot = d_rot @ mf.rot_exp(axis * outliers.rot_magnitude)
        out.append(AuxOdom(t_a, t_b, d_rot, d_pos, t_b + latency, is_outlier))
    return out
