"""Scene-specific regression head, training buffer and the mapping loop.

The loop follows the ACE recipe: a buffer of (feature, pixel, frame) rows is
shuffled every epoch, each iteration predicts scene coordinates for a batch,
and a soft-clamped reprojection loss is minimized. Invalid predictions (behind
the camera, too far, or reprojecting wildly) are handled either by the
baseline initialization loss or, when a prior replaces it, by the prior only.
"""

from __future__ import annotations

import hashlib
import json
import logging
import math
import struct
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np
import torch
import torch.nn as nn

from .pointcloud import PointCloud, write_ply
from .priors import Prior, PriorConfigurationError, PriorContext
from .synthscene import DatasetBundle, FrameBundle

logger = logging.getLogger(__name__)


class MappingDivergedError(FloatingPointError):
    def __init__(self, message, diagnostics=None):
        super().__init__(message)
        self.diagnostics = diagnostics


@dataclass(frozen=True)
class HeadConfig:
    feature_dim: int = 32
    hidden: tuple[int, ...] = (128, 128, 128)
    residual_bound: float = 25.0


@dataclass(frozen=True)
class MappingConfig:
    iterations: int = 25000
    batch_size: int = 5120
    buffer_size: int = 200_000
    lr_peak: float = 5e-3
    lr_warmup_frac: float = 0.1
    weight_decay: float = 0.01
    d_min: float = 0.1
    d_max: float = 10.0
    init_target_depth: float = 10.0
    tau_max: float = 50.0
    tau_min: float = 1.0
    hard_clamp: float = 1000.0
    snapshot_every: int = 1000
    snapshot_points: int = 2048
    seed: int = 0
    head: HeadConfig = field(default_factory=HeadConfig)

    def __post_init__(self):
        if self.iterations < 1 or self.batch_size < 1:
            raise ValueError("iterations and batch_size must be positive")
        if not 0 < self.d_min < self.d_max:
            raise ValueError("need 0 < d_min < d_max")
        if not 0 < self.tau_min <= self.tau_max:
            raise ValueError("need 0 < tau_min <= tau_max")

    def digest(self) -> str:
        return hashlib.sha256(json.dumps(asdict(self), sort_keys=True).encode()).hexdigest()[:16]


class RegressionHead(nn.Module):
    """MLP from a feature vector to a scene coordinate: anchor + bounded residual."""

    def __init__(self, cfg: HeadConfig, anchor):
        super().__init__()
        self.cfg = cfg
        layers, width = [], cfg.feature_dim
        for h in cfg.hidden:
            layers += [nn.Linear(width, h), nn.ReLU()]
            width = h
        layers.append(nn.Linear(width, 3))
        self.mlp = nn.Sequential(*layers)
        self.register_buffer("anchor", torch.as_tensor(np.asarray(anchor, dtype=np.float32)).reshape(3))

    def forward(self, features: torch.Tensor) -> torch.Tensor:
        if features.shape[-1] != self.cfg.feature_dim:
            raise ValueError(f"expected {self.cfg.feature_dim}-dim features, got {features.shape[-1]}")
        b = self.cfg.residual_bound
        return self.anchor.to(features.dtype) + b * torch.tanh(self.mlp(features) / b)

    def parameter_count(self) -> int:
        return sum(p.numel() for p in self.parameters())


def head_anchor(poses, depth: float = 1.73) -> np.ndarray:
    centers = np.array([p.translation for p in poses])
    dirs = np.array([p.R[:, 2] for p in poses])
    return centers.mean(0) + dirs.mean(0) * depth


@torch.no_grad()
def predict(head: RegressionHead, features) -> np.ndarray:
    f = torch.as_tensor(np.asarray(features), dtype=torch.float32)
    if f.ndim != 2:
        raise ValueError("features must be (B, F)")
    head.eval()
    return head(f).double().numpy()


# --- buffer ------------------------------------------------------------------------


@dataclass(eq=False)
class TrainingBuffer:
    features: np.ndarray  # (M, F) float32
    pixel: np.ndarray  # (M, 2)
    frame_id: np.ndarray  # (M,)
    measured_depth: np.ndarray  # (M,), NaN when absent
    gt_coords: np.ndarray  # (M, 3), evaluation only
    frame_ids: list[int]  # distinct frames, row -> index via frame_index
    frame_index: np.ndarray  # (M,)
    w2c_R: np.ndarray  # (n_frames, 3, 3)
    w2c_t: np.ndarray  # (n_frames, 3)
    K: np.ndarray  # (4,) fx fy cx cy

    def __len__(self) -> int:
        return self.features.shape[0]


def build_buffer(dataset: DatasetBundle, M: int, seed: int) -> TrainingBuffer:
    frames = dataset.mapping_frames
    if not frames:
        raise ValueError("dataset has no mapping frames")
    K = frames[0].K
    if any(f.K != K for f in frames):
        raise ValueError("all mapping frames must share intrinsics")
    valid_counts = [int(np.isfinite(f.gt_depth).sum()) for f in frames]
    total = sum(valid_counts)
    if total == 0:
        raise ValueError("mapping frames contain no valid pixels")
    rng = np.random.default_rng([int(seed), 17])
    picks = rng.choice(total, size=M, replace=M > total)
    offsets = np.cumsum([0] + valid_counts)
    fidx = np.searchsorted(offsets, picks, side="right") - 1
    local = picks - offsets[fidx]
    feats, pix, coords, mdepth = [], [], [], []
    order = np.argsort(fidx, kind="stable")
    inv = np.empty_like(order)
    inv[order] = np.arange(order.size)
    for k, f in enumerate(frames):
        cells = np.flatnonzero(np.isfinite(f.gt_depth).ravel())
        sel = cells[local[fidx == k]]
        feats.append(f.feature_map.reshape(-1, f.feature_map.shape[-1])[sel])
        pix.append(f.pixel_grid().reshape(-1, 2)[sel])
        coords.append(f.gt_coords.reshape(-1, 3)[sel])
        d = f.gt_depth.ravel()[sel]
        mdepth.append(d if dataset.depth_sensor else np.full(sel.size, np.nan))
    # rows were gathered frame by frame; restore the sampled order
    cat = lambda xs: np.concatenate(xs)[inv]  # noqa: E731
    rot, trans = zip(*(f.pose.world_to_camera() for f in frames))
    return TrainingBuffer(
        features=cat(feats).astype(np.float32), pixel=cat(pix), frame_id=np.array([frames[i].frame_id for i in fidx]),
        measured_depth=cat(mdepth), gt_coords=cat(coords), frame_ids=[f.frame_id for f in frames],
        frame_index=fidx, w2c_R=np.array(rot), w2c_t=np.array(trans), K=K.as_array(),
    )


@dataclass
class Batch:
    pixels: torch.Tensor  # (N, 2)
    R: torch.Tensor  # (N, 3, 3) world -> camera
    t: torch.Tensor  # (N, 3)
    K: torch.Tensor  # (4,)
    measured_depth: torch.Tensor | None = None

    @classmethod
    def from_buffer(cls, buf: TrainingBuffer, idx, dtype=torch.float32) -> Batch:
        idx = np.asarray(idx)
        fi = buf.frame_index[idx]
        md = buf.measured_depth[idx]
        return cls(
            torch.as_tensor(buf.pixel[idx], dtype=dtype), torch.as_tensor(buf.w2c_R[fi], dtype=dtype),
            torch.as_tensor(buf.w2c_t[fi], dtype=dtype), torch.as_tensor(buf.K, dtype=dtype),
            None if np.isnan(md).all() else torch.as_tensor(md, dtype=dtype),
        )


# --- losses -----------------------------------------------------------------------


def camera_coords(coords: torch.Tensor, batch: Batch) -> torch.Tensor:
    return torch.einsum("nij,nj->ni", batch.R, coords) + batch.t


def reprojection_errors(coords: torch.Tensor, batch: Batch, d_min: float = 0.1):
    """Euclidean pixel error and camera-frame depth of each prediction."""
    cam = camera_coords(coords, batch)
    z = cam[:, 2]
    zc = z.clamp(min=d_min)  # pixel is meaningless below d_min; masked as invalid anyway
    fx, fy, cx, cy = batch.K
    px = torch.stack([fx * cam[:, 0] / zc + cx, fy * cam[:, 1] / zc + cy], dim=1)
    err = torch.linalg.norm(px - batch.pixels, dim=1)
    return err, z


def soft_clamp_threshold(iteration: int, cfg: MappingConfig) -> float:
    frac = min(max(iteration / cfg.iterations, 0.0), 1.0)
    return cfg.tau_max + (cfg.tau_min - cfg.tau_max) * frac


def reprojection_loss(coords: torch.Tensor, batch: Batch, iteration: int, cfg: MappingConfig):
    """Returns ``(loss, per_point_error, valid)``; the loss sums the soft-clamped
    error over valid points and divides by the batch size."""
    err, z = reprojection_errors(coords, batch, cfg.d_min)
    valid = (z > cfg.d_min) & (z < cfg.d_max) & (err < cfg.hard_clamp)
    tau = soft_clamp_threshold(iteration, cfg)
    robust = tau * torch.tanh(err / tau)
    loss = torch.where(valid, robust, torch.zeros_like(robust)).sum() / coords.shape[0]
    return loss, err, valid


def init_targets(batch: Batch, target_depth: float) -> torch.Tensor:
    """Camera-frame points on each pixel ray at ``target_depth``."""
    fx, fy, cx, cy = batch.K
    x = (batch.pixels[:, 0] - cx) / fx
    y = (batch.pixels[:, 1] - cy) / fy
    return torch.stack([x, y, torch.ones_like(x)], dim=1) * target_depth


def init_loss(coords: torch.Tensor, batch: Batch, target_depth: float, mask: torch.Tensor | None = None):
    """Sum of Euclidean distances to the on-ray pseudo targets over ``mask``,
    divided by the batch size."""
    cam = camera_coords(coords, batch)
    dist = torch.linalg.norm(cam - init_targets(batch, target_depth), dim=1)
    if mask is not None:
        dist = torch.where(mask, dist, torch.zeros_like(dist))
    return dist.sum() / coords.shape[0]


# --- mapping loop ---------------------------------------------------------------


@dataclass
class Diagnostics:
    iteration: list[int] = field(default_factory=list)
    loss: list[float] = field(default_factory=list)
    reproj_loss: list[float] = field(default_factory=list)
    prior_loss: list[float] = field(default_factory=list)
    valid_fraction: list[float] = field(default_factory=list)
    median_error: list[float] = field(default_factory=list)
    snapshots: dict[int, np.ndarray] = field(default_factory=dict)
    prior_name: str = "none"

    def report(self, every: int = 1000) -> str:
        lines = ["iteration loss reproj_loss prior_loss valid_fraction median_reproj_px"]
        for k, it in enumerate(self.iteration):
            if it % every == 0 or k == len(self.iteration) - 1:
                lines.append(f"{it} {self.loss[k]:.6g} {self.reproj_loss[k]:.6g} {self.prior_loss[k]:.6g} "
                             f"{self.valid_fraction[k]:.4f} {self.median_error[k]:.4g}")
        return "\n".join(lines) + "\n"


def check_prior_inputs(dataset: DatasetBundle, prior: Prior) -> None:
    if prior.needs_measured_depth and not dataset.depth_sensor:
        raise PriorConfigurationError(
            f"prior '{prior.name}' needs measured_depth, but the bundle has no depth sensor data"
        )


def map_scene(dataset: DatasetBundle, config: MappingConfig, prior: Prior | None = None,
              buffer: TrainingBuffer | None = None, log_every: int = 0):
    """Train a regression head on the mapping split. Returns ``(head, diagnostics)``."""
    prior = prior or Prior()
    check_prior_inputs(dataset, prior)
    buf = buffer or build_buffer(dataset, config.buffer_size, config.seed)
    if prior.needs_measured_depth and np.isnan(buf.measured_depth).all():
        raise PriorConfigurationError(f"prior '{prior.name}' needs measured_depth, buffer has none")
    torch.manual_seed(config.seed)
    gen = torch.Generator().manual_seed(config.seed + 8191)
    anchor = head_anchor([f.pose for f in dataset.mapping_frames])
    head = RegressionHead(config.head, anchor)
    opt = torch.optim.AdamW(head.parameters(), lr=config.lr_peak, weight_decay=config.weight_decay)
    lr_sched = torch.optim.lr_scheduler.OneCycleLR(
        opt, max_lr=config.lr_peak, total_steps=config.iterations, pct_start=config.lr_warmup_frac)

    feats_all = torch.as_tensor(buf.features)
    m, n = len(buf), min(config.batch_size, len(buf))
    snap_rows = np.random.default_rng([config.seed, 23]).choice(m, min(config.snapshot_points, m), replace=False)
    diag = Diagnostics(prior_name=prior.name)
    perm, pos = None, m
    head.train()
    for it in range(config.iterations):
        if pos + n > m:
            perm, pos = torch.randperm(m, generator=gen), 0  # new epoch
        idx = perm[pos:pos + n].numpy()
        pos += n
        batch = Batch.from_buffer(buf, idx)
        coords = head(feats_all[idx])
        loss_r, err, valid = reprojection_loss(coords, batch, it, config)
        total = loss_r
        ctx = PriorContext(coords, camera_coords(coords, batch)[:, 2], err.detach(), it, batch.measured_depth)
        prior_loss = prior.loss(ctx)
        if not prior.replaces_init:
            total = total + init_loss(coords, batch, config.init_target_depth, ~valid)
        if prior_loss is not None:
            total = total + prior_loss
        grad = prior.coord_grad(ctx)
        if grad is not None:
            # surrogate whose coordinate gradient is exactly the injected term
            total = total + (coords * grad.to(coords.dtype)).sum()
        if not torch.isfinite(total):
            raise MappingDivergedError(f"non-finite loss at iteration {it}", diag)
        opt.zero_grad(set_to_none=True)
        total.backward()
        opt.step()
        lr_sched.step()

        diag.iteration.append(it)
        diag.loss.append(float(total.detach()))
        diag.reproj_loss.append(float(loss_r.detach()))
        diag.prior_loss.append(float(prior_loss.detach()) if prior_loss is not None else 0.0)
        diag.valid_fraction.append(float(valid.float().mean()))
        diag.median_error.append(float(err.detach().median()))
        if config.snapshot_every and (it % config.snapshot_every == 0 or it == config.iterations - 1):
            with torch.no_grad():
                diag.snapshots[it] = head(feats_all[snap_rows]).double().numpy()
        if log_every and it % log_every == 0:
            logger.info("it %d loss %.4f valid %.3f med err %.2f px", it, diag.loss[-1],
                        diag.valid_fraction[-1], diag.median_error[-1])
    head.eval()
    for p in head.parameters():
        p.requires_grad_(False)
    return head, diag


# --- outputs -------------------------------------------------------------------------


@torch.no_grad()
def predict_frame(head: RegressionHead, frame: FrameBundle) -> np.ndarray:
    h, w, f = frame.feature_map.shape
    return predict(head, frame.feature_map.reshape(-1, f)).reshape(h, w, 3)


def predict_depth(head: RegressionHead, frame: FrameBundle) -> np.ndarray:
    """Camera-frame z of the predicted coordinates of every cell."""
    coords = predict_frame(head, frame)
    r, t = frame.pose.world_to_camera()
    return (coords @ r.T + t)[..., 2]


def export_pointcloud(head: RegressionHead, dataset: DatasetBundle, stride: int = 8, path=None) -> PointCloud:
    """Predicted coordinates on a grid of mapping-frame pixels spaced ``stride``
    px apart (rounded to whole output cells)."""
    pts = []
    for f in dataset.mapping_frames:
        step = max(1, int(stride) // f.stride)
        coords = predict_frame(head, f)[::step, ::step]
        valid = np.isfinite(f.gt_depth)[::step, ::step]
        pts.append(coords[valid])
    cloud = PointCloud(np.concatenate(pts))
    if path is not None:
        write_ply(path, cloud)
    return cloud


_HEAD_MAGIC = b"SCRHEAD\0"


def save_head(path, head: RegressionHead, config_hash: str = "") -> None:
    """Layout: magic, u32 version, u32 header length, JSON header (config hash,
    widths, anchor, tensor shapes), f32 LE parameters in state-dict order."""
    state = {k: v for k, v in head.state_dict().items() if k != "anchor"}
    header = {"config_hash": config_hash, "head": asdict(head.cfg),
              "anchor": head.anchor.tolist(), "tensors": [[k, list(v.shape)] for k, v in state.items()]}
    hb = json.dumps(header).encode()
    flat = np.concatenate([v.numpy().astype("<f4").ravel() for v in state.values()])
    Path(path).write_bytes(_HEAD_MAGIC + struct.pack("<II", 1, len(hb)) + hb + flat.tobytes())


def load_head(path) -> tuple[RegressionHead, str]:
    path = Path(path)
    raw = path.read_bytes()
    if raw[:8] != _HEAD_MAGIC:
        raise ValueError(f"{path}: not a regression head checkpoint")
    version, hlen = struct.unpack("<II", raw[8:16])
    if version != 1:
        raise ValueError(f"{path}: head checkpoint version {version} not supported")
    header = json.loads(raw[16:16 + hlen])
    cfg = header["head"]
    head = RegressionHead(HeadConfig(cfg["feature_dim"], tuple(cfg["hidden"]), cfg["residual_bound"]),
                          header["anchor"])
    flat = np.frombuffer(raw, dtype="<f4", offset=16 + hlen)
    state, off = {"anchor": head.anchor}, 0
    for name, shape in header["tensors"]:
        k = math.prod(shape)
        if off + k > flat.size:
            raise ValueError(f"{path}: truncated parameter array")
        state[name] = torch.as_tensor(flat[off:off + k].reshape(shape).copy())
        off += k
    head.load_state_dict(state)
    head.eval()
    return head, header["config_hash"]
