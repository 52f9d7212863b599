"""End-to-end estimation runs: simulate, filter, fuse, evaluate, write artifacts.

Per IMU sample the filter propagates and the backend gains a node; per scan
the point cloud is spline-undistorted, the backend pose is fused into the
prior, the constrained iterated update runs, and the resulting relative pose
feeds back into the graph as a LiDAR odometry factor (guarded and
covariance-inflated along degenerate directions).  Auxiliary odometry
attaches at its arrival time, which may lag its measurement interval.
Events are processed in arrival order; all randomness comes from the
scenario seed, so artifacts regenerate bit-identically (wall-clock timing is
written to a separate file).
"""
from __future__ import annotations

import json
import os
import time
from dataclasses import dataclass, field
from typing import Optional

import numpy as np
from scipy.spatial.transform import Rotation as SciRotation

from . import config as cfgmod
from . import degeneracy as deg
from . import filter as flt
from . import graph as gr
from . import inertial as ine
from . import manifold as mf
from . import registration as reg
from . import sim


@dataclass
class EvalResult:
    """Trajectory accuracy and runtime summary of one run."""

    ate_rmse: float
    per_axis_rmse: tuple
    max_error: float
    n_pairs: int
    mean_scan_ms: float = 0.0
    diverged: bool = False
    category_counts: dict = field(default_factory=dict)

    def metrics_dict(self) -> dict:
        return {
            "ate_rmse": self.ate_rmse,
            "per_axis_rmse": list(self.per_axis_rmse),
            "max_error": self.max_error,
            "n_pairs": self.n_pairs,
            "diverged": self.diverged,
            "category_counts": self.category_counts,
        }


def evaluate_ate(est: np.ndarray, gt: np.ndarray, assoc_tol: Optional[float] = None):
    """ATE RMSE after first-pose rigid alignment (no scale).

    ``est``/``gt`` are (N, 8) TUM arrays [t x y z qx qy qz qw].  Pairs are
    associated by nearest timestamp within ``assoc_tol`` (default: half the
    median ground-truth spacing).  The first associated pose anchors the
    alignment and is excluded from the error statistics, so a trajectory
    offset by a constant after the anchor scores exactly that offset.
    """
    est = np.atleast_2d(np.asarray(est, dtype=float))
    gt = np.atleast_2d(np.asarray(gt, dtype=float))
    if assoc_tol is None:
        spacing = np.median(np.diff(gt[:, 0])) if gt.shape[0] > 1 else 0.0
        assoc_tol = 0.5 * spacing + 1e-9
    idx = np.searchsorted(gt[:, 0], est[:, 0])
    pairs = []
    for i, t in enumerate(est[:, 0]):
        best, best_err = None, np.inf
        for j in (idx[i] - 1, idx[i]):
            if 0 <= j < gt.shape[0] and abs(gt[j, 0] - t) < best_err:
                best, best_err = j, abs(gt[j, 0] - t)
        if best is not None and best_err <= assoc_tol:
            pairs.append((i, best))
    if not pairs:
        raise ValueError("no overlapping timestamps between trajectories")

    def pose_of(row):
        return SciRotation.from_quat(row[4:8]).as_matrix(), row[1:4]

    i0, j0 = pairs[0]
    r_e0, p_e0 = pose_of(est[i0])
    r_g0, p_g0 = pose_of(gt[j0])
    # Align est into the gt frame at the anchor pose.
    r_al, p_al = mf.compose_pose(r_g0, p_g0, *mf.invert_pose(r_e0, p_e0))

    errs = []
    for i, j in pairs[1:]:
        p = r_al @ est[i, 1:4] + p_al
        errs.append(p - gt[j, 1:4])
    if not errs:
        errs = [np.zeros(3)]
        n_pairs = 1
    else:
        n_pairs = len(errs)
    errs = np.asarray(errs)
    norms = np.linalg.norm(errs, axis=1)
    return EvalResult(
        ate_rmse=float(np.sqrt(np.mean(norms**2))),
        per_axis_rmse=tuple(np.sqrt(np.mean(errs**2, axis=0))),
        max_error=float(norms.max()),
        n_pairs=n_pairs,
    )


def traj_to_tum(traj) -> np.ndarray:
    """(t, rot, pos) tuples -> (N, 8) TUM array."""
    out = np.empty((len(traj), 8))
    for i, (t, rot, pos) in enumerate(traj):
        out[i, 0] = t
        out[i, 1:4] = pos
        out[i, 4:8] = SciRotation.from_matrix(rot).as_quat()
    return out


def write_tum(path: str, tum: np.ndarray) -> None:
    with open(path, "w") as f:
        for row in tum:
            f.write(" ".join(f"{v:.9f}" for v in row) + "\n")


def read_tum(path: str) -> np.ndarray:
    rows = []
    with open(path) as f:
        for line in f:
            line = line.strip()
            if not line or line.startswith("#"):
                continue
            rows.append([float(v) for v in line.split()])
    return np.asarray(rows)


def along_axis_errors(env: sim.Environment, est_tum: np.ndarray,
                      gt_tum: np.ndarray) -> np.ndarray:
    """Signed error components along the local environment axis per est pose."""
    res = []
    idx = np.searchsorted(gt_tum[:, 0], est_tum[:, 0])
    for i, t in enumerate(est_tum[:, 0]):
        j = min(max(idx[i], 0), gt_tum.shape[0] - 1)
        axis = sim.axis_direction(env, gt_tum[j, 1:4][None, :])[0]
        res.append(float((est_tum[i, 1:4] - gt_tum[j, 1:4]) @ axis))
    return np.asarray(res)


@dataclass
class RunArtifacts:
    result: EvalResult
    est_tum: np.ndarray
    gt_tum: np.ndarray
    backend_tum: np.ndarray
    localizability_rows: list
    scan_rows: list
    factor_rows: list
    rejected_fusions: int
    stale_measurements: int
    measurement_log: list


class PipelineRun:
    """Single-scenario batch run; construct then call ``execute()``."""

    def __init__(self, run_cfg: cfgmod.RunConfig):
        self.cfg = run_cfg
        scen = dict(run_cfg.scenario)
        if run_cfg.seed_override is not None:
            scen["seed"] = run_cfg.seed_override
        self.scenario = scen
        self.env, self.traj, self.noise = cfgmod.scenario_objects(scen)
        self.seed = scen["seed"]

    # -- simulation ------------------------------------------------------

    def _simulate(self):
        scen = self.scenario
        duration = scen["duration"]
        imu = sim.simulate_imu(
            self.traj, self.noise, seed=self.seed,
            init_bias_gyro=scen["imu"]["init_bias_gyro"],
            init_bias_accel=scen["imu"]["init_bias_accel"],
            duration=duration,
        )
        surfaces = sim.build_surfaces(self.env)
        scans = sim.simulate_lidar(
            self.traj, surfaces,
            pts_per_scan=scen["lidar"]["points_per_scan"],
            range_sigma=scen["lidar"]["range_sigma"],
            max_range=scen["lidar"]["max_range"],
            seed=self.seed,
            duration=duration,
        )
        aux_cfg = scen["aux_odometry"]
        aux = []
        if aux_cfg["enabled"]:
            out = aux_cfg["outliers"]
            spec = sim.OutlierSpec(out["probability"], out["trans_magnitude"],
                                   out["rot_magnitude"]) if out["probability"] > 0 else None
            aux = sim.simulate_aux_odometry(
                self.traj, rate=aux_cfg["rate"], sigma_rot=aux_cfg["sigma_rot"],
                sigma_trans=aux_cfg["sigma_trans"], outliers=spec,
                latency=aux_cfg["latency"], seed=self.seed,
                duration=duration,
            )
        return imu, scans, aux, surfaces

    def _make_map(self, surfaces):
        mode = self.scenario["map"]["mode"]
        if mode == "surfaces":
            return sim.SurfaceMap(surfaces)
        pmap = reg.PointMap(voxel=self.scenario["map"]["voxel"])
        if mode == "sampled":
            pts, _, _ = sim.sample_environment(self.env, seed=self.seed)
            pmap.add_points(pts)
        return pmap

    # -- execution -------------------------------------------------------

    def execute(self) -> RunArtifacts:
        scen = self.scenario
        imu, scans, aux, surfaces = self._simulate()
        map_obj = self._make_map(surfaces)
        slam_mode = scen["map"]["mode"] == "slam"

        imu_dt = 1.0 / scen["imu"]["rate"]
        aux_cfg = scen["aux_odometry"]

        # Filter bootstrap from the true initial pose/velocity; biases unknown.
        x0 = imu.truth[0]
        init = mf.State(x0.rot, x0.pos, x0.vel, np.zeros(3), np.zeros(3), sim.GRAVITY)
        init.check_gravity_band()
        P0 = np.diag(
            [1e-6] * 3 + [1e-6] * 3 + [1e-4] * 3
            + [1e-4] * 3 + [2.5e-3] * 3 + [1e-8] * 3
        )
        belief = flt.Belief(init, P0)

        graph = gr.SlidingGraph(
            window=self.cfg.window,
            imu_period=imu_dt,
            prior_sigma_rot=1e-3,
            prior_sigma_trans=1e-3,
            imu_sigma_rot=3e-4,
            imu_sigma_trans=3e-3,
            gnc_enabled=self.cfg.gnc_enabled,
        )

        upd_cfg = flt.UpdateConfig(
            meas_sigma=scen["lidar"]["meas_sigma"],
            thresholds=self.cfg.thresholds,
            constraints_enabled=self.cfg.constraints_enabled,
        )
        aux_W = gr._sigma_info(aux_cfg["sigma_rot"], aux_cfg["sigma_trans"])
        lidar_odom_sigmas = (2e-3, 1e-2)

        # Event queue: (time, priority, kind, payload)
        events = [(s.timestamp, 0, "imu", i) for i, s in enumerate(imu.samples)]
        events += [(sc.t_end, 1, "scan", i) for i, sc in enumerate(scans)]
        events += [(a.arrival, 2, "aux", i) for i, a in enumerate(aux)]
        events.sort(key=lambda e: (e[0], e[1]))

        pose_buffer: list[tuple] = []    # (t, rot, pos) propagated body poses
        est_traj: list[tuple] = []
        loc_rows: list[str] = []
        scan_rows: list[str] = []
        measurement_log: list = []
        prev_scan: Optional[tuple] = None   # (t, rot, pos) at last scan posterior
        rejected = 0
        stale = 0
        scan_seconds = 0.0
        n_scans_done = 0
        diverged = False

        for t_ev, _prio, kind, payload in events:
            if kind == "imu":
                i = payload
                s = imu.samples[i]
                if i == 0:
                    graph.add_imu_node(s.timestamp, None,
                                       init_rot=belief.state.rot,
                                       init_pos=belief.state.pos)
                    graph.optimize()
                    pose_buffer.append((s.timestamp, belief.state.rot, belief.state.pos))
                    continue
                prev_sample = imu.samples[i - 1]
                vel_before = belief.state.vel
                preint = ine.preintegrate(
                    [prev_sample, s], belief.state.bias_gyro,
                    belief.state.bias_accel, self.noise,
                )
                state, cov = ine.propagate(
                    belief.state, belief.cov, prev_sample,
                    s.timestamp - prev_sample.timestamp, self.noise,
                )
                belief = flt.Belief(state, cov)
                pose_buffer.append((s.timestamp, state.rot, state.pos))
                graph.add_imu_node(s.timestamp, preint, vel_world=vel_before)

            elif kind == "scan":
                t_start = time.perf_counter()
                scan = scans[payload]
                spline = self._scan_spline(scan, pose_buffer, imu_dt)
                und = ine.undistort(scan, spline)

                if self.cfg.backend_prior_enabled:
                    meas = graph.latest_pose()
                    if abs(meas.timestamp - scan.t_end) <= imu_dt + 1e-9:
                        belief, ok = flt.fuse_backend_pose(belief, meas)
                        if not ok:
                            rejected += 1

                prior_pose = pose_buffer[-1]
                belief, report = flt.iterated_update(belief, und, map_obj, upd_cfg)
                pose = (scan.t_end, belief.state.rot, belief.state.pos)
                est_traj.append(pose)
                loc_rows.append(report.csv_row(scan.t_end))
                scan_rows.append(self._scan_row(scan.t_end, belief, report))
                # Rebase the propagated-pose buffer onto the posterior so the
                # next sweep's spline sees no correction jump: left-multiply
                # every buffered pose by T_post * T_prop_end^-1.
                d_rot, d_pos = mf.compose_pose(
                    pose[1], pose[2], *mf.invert_pose(prior_pose[1], prior_pose[2])
                )
                pose_buffer = [
                    (t, d_rot @ r, d_rot @ p + d_pos) for (t, r, p) in pose_buffer
                ]
                # Buffer only needs to cover a couple of sweeps.
                keep_from = scan.t_end - 3.0 / scen["lidar"]["rate"]
                pose_buffer = [e for e in pose_buffer if e[0] >= keep_from]

                if prev_scan is not None:
                    d_rot, d_pos = mf.relative_pose(prev_scan[1], prev_scan[2],
                                                    pose[1], pose[2])
                    W = self._lidar_odom_info(report, prev_scan[1], lidar_odom_sigmas)
                    try:
                        graph.attach_odometry(
                            d_rot, d_pos, prev_scan[0], pose[0], W=W,
                            guarded=report.any_degenerate,
                        )
                        measurement_log.append(
                            ("lidar", prev_scan[0], pose[0], d_rot, d_pos, W,
                             report.any_degenerate)
                        )
                        graph.optimize()
                        graph.slide(pose[0])
                    except gr.StaleMeasurementError:
                        stale += 1
                prev_scan = pose

                if slam_mode:
                    pts_w = mf.transform_points(pose[1], pose[2], und.points)
                    map_obj.add_points(pts_w)

                if not np.all(np.isfinite(belief.state.pos)) or \
                        np.linalg.norm(belief.state.pos) > 1e4:
                    diverged = True
                    break
                scan_seconds += time.perf_counter() - t_start
                n_scans_done += 1

            else:  # aux odometry
                a = aux[payload]
                t_aux = time.perf_counter()
                try:
                    graph.attach_odometry(a.d_rot, a.d_pos, a.t_a, a.t_b,
                                          W=aux_W, guarded=True)
                    measurement_log.append(
                        ("aux", a.t_a, a.t_b, a.d_rot, a.d_pos, aux_W, True)
                    )
                    graph.optimize()
                    graph.slide(graph.latest_time)
                except gr.StaleMeasurementError:
                    stale += 1
                scan_seconds += time.perf_counter() - t_aux

        gt_tum = traj_to_tum([(s.timestamp, st.rot, st.pos)
                              for s, st in zip(imu.samples, imu.truth)])
        est_tum = traj_to_tum(est_traj)
        backend_tum = traj_to_tum(graph.trajectory())
        result = evaluate_ate(est_tum, gt_tum)
        result.diverged = diverged or graph.diverged
        result.mean_scan_ms = 1000.0 * scan_seconds / max(n_scans_done, 1)
        counts = {}
        for row in loc_rows:
            for cat in row.split(",")[7:]:
                counts[cat] = counts.get(cat, 0) + 1
        result.category_counts = counts

        return RunArtifacts(
            result=result,
            est_tum=est_tum,
            gt_tum=gt_tum,
            backend_tum=backend_tum,
            localizability_rows=loc_rows,
            scan_rows=scan_rows,
            factor_rows=graph.factor_states(),
            rejected_fusions=rejected,
            stale_measurements=stale,
            measurement_log=measurement_log,
        )

    # -- helpers ---------------------------------------------------------

    @staticmethod
    def _scan_spline(scan, pose_buffer, imu_dt):
        """Control poses bracketing the sweep, twist-extrapolated at the ends."""
        t_first = float(scan.times.min())
        times = np.array([p[0] for p in pose_buffer])
        lo = int(np.searchsorted(times, t_first - 2 * imu_dt)) - 1
        lo = max(lo, 0)
        ctrl = list(pose_buffer[lo:])
        # Backward padding so the span covers the oldest point.
        while len(ctrl) < 4 or ctrl[1][0] > t_first:
            t0, r0, p0 = ctrl[0]
            t1, r1, p1 = ctrl[1] if len(ctrl) > 1 else (t0 + imu_dt, r0, p0)
            d_rot, d_pos = mf.relative_pose(r1, p1, r0, p0)
            r_new, p_new = mf.compose_pose(r0, p0, d_rot, d_pos)
            ctrl.insert(0, (t0 - (t1 - t0 if len(ctrl) > 1 else imu_dt), r_new, p_new))
        # Forward padding: the cumulative form needs two controls past the end.
        while ctrl[-2][0] < scan.t_end:
            t1, r1, p1 = ctrl[-1]
            t0, r0, p0 = ctrl[-2]
            d_rot, d_pos = mf.relative_pose(r0, p0, r1, p1)
            r_new, p_new = mf.compose_pose(r1, p1, d_rot, d_pos)
            ctrl.append((t1 + (t1 - t0), r_new, p_new))
        return ine.fit_spline(
            np.array([c[0] for c in ctrl]),
            np.stack([c[1] for c in ctrl]),
            np.stack([c[2] for c in ctrl]),
        )

    @staticmethod
    def _lidar_odom_info(report, rot_world, sigmas):
        """6x6 information of the scan-to-scan factor, inflated along
        degenerate directions (expressed in the factor's body-a frame)."""
        cov = np.zeros((6, 6))
        cov[0:3, 0:3] = sigmas[0] ** 2 * np.eye(3)
        cov[3:6, 3:6] = sigmas[1] ** 2 * np.eye(3)
        inflate = 25.0
        for j, cat in enumerate(report.cat_rot):
            if cat is not deg.Category.FULL:
                v = report.v_rot[:, j]
                cov[0:3, 0:3] += inflate * np.outer(v, v)
        for j, cat in enumerate(report.cat_trans):
            if cat is not deg.Category.FULL:
                v = report.v_trans[:, j]
                cov[3:6, 3:6] += inflate * np.outer(v, v)
        return np.linalg.inv(cov)

    @staticmethod
    def _scan_row(t, belief, report) -> str:
        q = SciRotation.from_matrix(belief.state.rot).as_quat()
        p = belief.state.pos
        cats = [c.value for c in report.cat_trans + report.cat_rot]
        vals = [f"{t:.6f}"] + [f"{v:.6f}" for v in (*p, *q)] + cats \
            + [str(report.iterations)]
        return ",".join(vals)


def run(run_cfg: cfgmod.RunConfig) -> RunArtifacts:
    """Execute a configured run and optionally write artifacts to out_dir."""
    art = PipelineRun(run_cfg).execute()
    if run_cfg.out_dir:
        write_artifacts(run_cfg, art)
    return art


def write_artifacts(run_cfg: cfgmod.RunConfig, art: RunArtifacts) -> None:
    out = run_cfg.out_dir
    os.makedirs(out, exist_ok=True)
    write_tum(os.path.join(out, "estimate.tum"), art.est_tum)
    write_tum(os.path.join(out, "groundtruth.tum"), art.gt_tum)
    write_tum(os.path.join(out, "backend.tum"), art.backend_tum)
    with open(os.path.join(out, "localizability.csv"), "w") as f:
        f.write("timestamp,s_t1,s_t2,s_t3,s_r1,s_r2,s_r3,"
                "cat_t1,cat_t2,cat_t3,cat_r1,cat_r2,cat_r3\n")
        f.write("\n".join(art.localizability_rows) + ("\n" if art.localizability_rows else ""))
    with open(os.path.join(out, "scan_updates.csv"), "w") as f:
        f.write("timestamp,tx,ty,tz,qx,qy,qz,qw,"
                "cat_t1,cat_t2,cat_t3,cat_r1,cat_r2,cat_r3,iterations\n")
        f.write("\n".join(art.scan_rows) + ("\n" if art.scan_rows else ""))
    with open(os.path.join(out, "factor_weights.csv"), "w") as f:
        f.write("id,kind,mu,weight,active\n")
        for row in art.factor_rows:
            f.write(f"{row['id']},{row['kind']},{row['mu']:.9g},"
                    f"{row['weight']:.9g},{int(row['active'])}\n")
    with open(os.path.join(out, "result.json"), "w") as f:
        json.dump(art.result.metrics_dict(), f, indent=1, sort_keys=True)
    with open(os.path.join(out, "timing.json"), "w") as f:
        json.dump({"mean_scan_ms": art.result.mean_scan_ms}, f, indent=1)
