"""Glue between mapping, relocalization and metrics, shared by the CLI and
the acceptance experiments."""

from __future__ import annotations

import math
from dataclasses import replace

import numpy as np

from .evalmetrics import DepthMetricReport, TrajectoryErrorReport, depth_metrics, trajectory_errors
from .geometry import DegenerateConfigurationError
from .priors import PriorSchedule
from .reloc import RansacConfig, estimate_pose
from .scr import HeadConfig, MappingConfig, predict_depth, predict_frame


def desk_mapping_config(iterations: int = 3000, seed: int = 0, **overrides) -> MappingConfig:
    """Small single-core budget: fewer, smaller batches and a wider initial
    soft-clamp so that points far off their pixel still receive gradient."""
    base = MappingConfig(iterations=iterations, batch_size=1024, buffer_size=100_000, lr_peak=1e-2,
                         tau_max=200.0, snapshot_every=max(iterations // 10, 1), seed=seed,
                         head=HeadConfig(hidden=(128, 128, 128)))
    return replace(base, **overrides)


def scaled_schedule(iterations: int, base: PriorSchedule | None = None) -> PriorSchedule:
    """Diffusion schedule with start, end and warm-up rescaled from the
    25k-iteration reference run to ``iterations``."""
    base = base or PriorSchedule()
    ref = base.end_iter
    f = iterations / ref
    start = int(round(base.start_iter * f))
    return replace(base, start_iter=start, end_iter=iterations,
                   warmup_iters=int(round(base.warmup_iters * f)))


# Calibrated on held-out scene seeds 100 and 101 over {300, 30, 10, 3, 1, 0.3}.
# The reference weight of 1000 drives the desk-scale map to divergence.
DESK_DIFFUSION_WEIGHT = 3.0


def desk_prior_schedule(iterations: int = 3000) -> PriorSchedule:
    """``scaled_schedule`` with the diffusion weight calibrated for the desk budget."""
    return replace(scaled_schedule(iterations), diffusion_weight=DESK_DIFFUSION_WEIGHT)


def evaluate_depth(head, frames) -> DepthMetricReport:
    est, gt = [], []
    for f in frames:
        est.append(predict_depth(head, f).ravel())
        gt.append(f.gt_depth.ravel())
    est, gt = np.concatenate(est), np.concatenate(gt)
    return depth_metrics(est, np.nan_to_num(gt, nan=0.0), np.isfinite(gt))


def estimate_trajectory(head, frames, cfg: RansacConfig | None = None):
    """PnP pose of every frame from the head's predictions. Returns
    ``(poses, inlier_counts)``; failed frames keep the identity pose."""
    cfg = cfg or RansacConfig()
    poses, counts = [], []
    for f in frames:
        coords = predict_frame(head, f).reshape(-1, 3)
        est = estimate_pose(f.pixel_grid().reshape(-1, 2), coords, f.K, cfg)
        poses.append(est.pose)
        counts.append(est.inlier_count)
    return poses, counts


def evaluate_trajectory(head, frames, cfg: RansacConfig | None = None, rpe_delta: int = 1) -> TrajectoryErrorReport:
    """Errors of the PnP trajectory. When too few frames register for a
    similarity alignment every error is reported as infinite."""
    frames = list(frames)
    poses, _ = estimate_trajectory(head, frames, cfg)
    try:
        return trajectory_errors(poses, [f.pose for f in frames], rpe_delta)
    except DegenerateConfigurationError:
        return TrajectoryErrorReport(*(5 * [math.inf]))
