"""Depth-map and trajectory quality metrics."""

from __future__ import annotations

from dataclasses import asdict, dataclass

import numpy as np

from .geometry import Pose, rotation_angle, umeyama_align

DELTA_BASE = 1.25
LOG_DEPTH_FLOOR = 1e-3  # m


@dataclass(frozen=True)
class DepthMetricReport:
    abs_rel: float
    sq_rel: float
    rmse: float  # m
    rmse_log: float
    delta1: float
    delta2: float
    delta3: float

    def to_text(self) -> str:
        return "".join(f"{k} {v:.10g}\n" for k, v in asdict(self).items())


@dataclass(frozen=True)
class TrajectoryErrorReport:
    ate_rmse: float  # cm
    rpe_trans: float  # cm
    rpe_rot: float  # deg
    median_t: float  # cm
    median_r: float  # deg

    def to_text(self) -> str:
        return "".join(f"{k} {v:.10g}\n" for k, v in asdict(self).items())


def depth_metrics(d_est, d_gt, valid) -> DepthMetricReport:
    d_est = np.asarray(d_est, dtype=np.float64)
    d_gt = np.asarray(d_gt, dtype=np.float64)
    valid = np.asarray(valid, dtype=bool)
    if not (d_est.shape == d_gt.shape == valid.shape):
        raise ValueError(f"shape mismatch: {d_est.shape}, {d_gt.shape}, {valid.shape}")
    if not valid.any():
        raise ValueError("depth_metrics: valid set is empty")
    d, g = d_est[valid], d_gt[valid]
    if not np.all(g > 0):
        raise ValueError("depth_metrics: ground-truth depth must be positive on valid pixels")
    diff = d - g
    # log and ratio metrics are undefined for nonpositive estimates (points
    # behind the camera); those use a 1 mm floor, the linear metrics do not
    dl = np.maximum(d, LOG_DEPTH_FLOOR)
    ratio = np.maximum(dl / g, g / dl)
    return DepthMetricReport(
        abs_rel=float(np.mean(np.abs(diff) / g)),
        sq_rel=float(np.mean(diff ** 2 / g)),
        rmse=float(np.sqrt(np.mean(diff ** 2))),
        rmse_log=float(np.sqrt(np.mean((np.log(dl) - np.log(g)) ** 2))),
        delta1=float(np.mean(ratio < DELTA_BASE)),
        delta2=float(np.mean(ratio < DELTA_BASE ** 2)),
        delta3=float(np.mean(ratio < DELTA_BASE ** 3)),
    )


def _relative(a: Pose, b: Pose) -> np.ndarray:
    """Motion from ``a`` to ``b`` as a 4x4 matrix: inv(a) @ b."""
    return np.linalg.inv(a.matrix()) @ b.matrix()


def trajectory_errors(traj_est, traj_gt, rpe_delta: int = 1, with_scale: bool = True) -> TrajectoryErrorReport:
    """ATE after least-squares similarity alignment; RPE and medians on the
    aligned estimate."""
    n = len(traj_gt)
    if len(traj_est) != n:
        raise ValueError("trajectories must have equal length")
    if n < 3:
        raise ValueError("trajectory_errors needs at least 3 poses")
    if not 1 <= rpe_delta < n:
        raise ValueError(f"rpe_delta must be in [1, {n - 1}]")
    sim = umeyama_align(traj_est, traj_gt, with_scale)
    aligned = [sim.apply_pose(p) for p in traj_est]
    pos_err = np.array([np.linalg.norm(a.translation - g.translation) for a, g in zip(aligned, traj_gt)])
    rot_err = np.array([np.degrees(rotation_angle(a.R.T @ g.R)) for a, g in zip(aligned, traj_gt)])
    rpe_t, rpe_r = [], []
    for i in range(n - rpe_delta):
        e = np.linalg.inv(_relative(traj_gt[i], traj_gt[i + rpe_delta])) @ _relative(aligned[i], aligned[i + rpe_delta])
        rpe_t.append(np.linalg.norm(e[:3, 3]))
        rpe_r.append(np.degrees(rotation_angle(e[:3, :3])))
    return TrajectoryErrorReport(
        ate_rmse=100.0 * float(np.sqrt(np.mean(pos_err ** 2))),
        rpe_trans=100.0 * float(np.sqrt(np.mean(np.square(rpe_t)))),
        rpe_rot=float(np.sqrt(np.mean(np.square(rpe_r)))),
        median_t=100.0 * float(np.median(pos_err)),
        median_r=float(np.median(rot_err)),
    )


def registration_rate(flags) -> float:
    flags = np.asarray(list(flags), dtype=bool)
    if flags.size == 0:
        raise ValueError("registration_rate needs at least one flag")
    return float(flags.mean())


def format_rate(rate: float) -> str:
    return f"{100.0 * rate:.1f}%"
