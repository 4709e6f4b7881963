"""Denoising diffusion over 3D point clouds.

Two noise predictors are provided: a per-point network (exactly permutation
equivariant, no spatial context) and a point-voxel network whose voxel branch
aggregates neighbourhood structure with 3D convolutions.

Training loss reduction: mean over points of the squared error summed over
the three coordinates, so an all-zero predictor scores E||eps||^2 = 3.
"""

from __future__ import annotations

import json
import logging
import math
import struct
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F
from scipy.spatial import cKDTree
from scipy.spatial.transform import Rotation

from . import kernels
from .pointcloud import PointCloud

logger = logging.getLogger(__name__)


@dataclass(frozen=True, eq=False)
class NoiseSchedule:
    T: int
    beta: np.ndarray
    beta_min: float = 1e-4
    beta_max: float = 0.02

    @property
    def alpha(self) -> np.ndarray:
        return 1.0 - self.beta

    @property
    def alpha_bar(self) -> np.ndarray:
        return np.cumprod(self.alpha)


def make_schedule(T: int = 200, beta_min: float = 1e-4, beta_max: float = 0.02) -> NoiseSchedule:
    if not (0 < beta_min < beta_max < 1):
        raise ValueError("need 0 < beta_min < beta_max < 1")
    if T < 2:
        raise ValueError("T must be at least 2")
    return NoiseSchedule(int(T), np.linspace(beta_min, beta_max, T), beta_min, beta_max)


def _points(x) -> np.ndarray:
    return x.points if isinstance(x, PointCloud) else np.asarray(x, dtype=np.float64)


def forward_diffuse(x0, tau: int, eps, sched: NoiseSchedule) -> np.ndarray:
    """Closed-form marginal q(x_tau | x0)."""
    if not 0 <= tau < sched.T:
        raise ValueError(f"tau={tau} outside [0, {sched.T})")
    x0, eps = _points(x0), np.asarray(eps, dtype=np.float64)
    if eps.shape != x0.shape:
        raise ValueError("noise shape must match the cloud")
    ab = sched.alpha_bar[tau]
    return math.sqrt(ab) * x0 + math.sqrt(1.0 - ab) * eps


def forward_step(x_prev, t: int, eps, sched: NoiseSchedule) -> np.ndarray:
    """Single transition q(x_t | x_{t-1})."""
    return math.sqrt(sched.alpha[t]) * np.asarray(x_prev) + math.sqrt(sched.beta[t]) * np.asarray(eps)


def gaussian_optimal_noise(x_tau, tau: int, sched: NoiseSchedule, sigma0: float = 1.0) -> np.ndarray:
    """E[eps | x_tau] when the clean data is isotropic N(0, sigma0^2)."""
    ab = sched.alpha_bar[tau]
    return math.sqrt(1.0 - ab) * np.asarray(x_tau) / (ab * sigma0 ** 2 + 1.0 - ab)


# --- augmentation ----------------------------------------------------------------------


@dataclass(frozen=True)
class AugmentationConfig:
    sample_points: int = 5120
    rotation_range: tuple[float, float, float] = (0.0, 0.0, math.pi)  # max |angle| per axis, rad
    translate: bool = True  # per-axis N(0, 1) metres
    scale_range: tuple[float, float] = (0.5, 1.5)
    scale_factor: float = 20.0
    recenter_xy: bool = True
    replace: bool = False

    def __post_init__(self):
        if self.sample_points < 1:
            raise ValueError("sample_points must be >= 1")
        lo, hi = self.scale_range
        if not (0 < lo <= hi):
            raise ValueError("scale range must lie in (0, inf)")

    @classmethod
    def identity(cls, sample_points: int = 5120, scale_factor: float = 20.0) -> AugmentationConfig:
        return cls(sample_points, (0.0, 0.0, 0.0), False, (1.0, 1.0), scale_factor, True, False)


def augment_cloud(cloud, cfg: AugmentationConfig, seed) -> np.ndarray:
    pts = _points(cloud)
    if pts.shape[0] == 0:
        raise ValueError("cannot augment an empty cloud")
    rng = seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)
    pts = pts.copy()
    if cfg.recenter_xy:
        pts[:, :2] -= pts[:, :2].mean(0)
    if pts.shape[0] >= cfg.sample_points and not cfg.replace:
        idx = rng.choice(pts.shape[0], cfg.sample_points, replace=False)
    elif cfg.replace:
        idx = rng.choice(pts.shape[0], cfg.sample_points, replace=True)
    else:
        raise ValueError(
            f"cloud has {pts.shape[0]} points < {cfg.sample_points}; enable sampling with replacement"
        )
    pts = pts[idx]
    angles = rng.uniform(-1.0, 1.0, 3) * np.asarray(cfg.rotation_range)
    if np.any(angles != 0):
        pts = pts @ Rotation.from_euler("xyz", angles).as_matrix().T
    if cfg.translate:
        pts = pts + rng.normal(0.0, 1.0, 3)
    lo, hi = cfg.scale_range
    pts = pts * (rng.uniform(lo, hi) if hi > lo else lo)
    return pts / cfg.scale_factor


# --- networks --------------------------------------------------------------------------


def timestep_embedding(tau: torch.Tensor, dim: int) -> torch.Tensor:
    half = dim // 2
    freqs = torch.exp(-math.log(10000.0) * torch.arange(half, dtype=torch.float32) / half)
    args = tau.float()[:, None] * freqs[None]
    return torch.cat([torch.sin(args), torch.cos(args)], dim=1)


@dataclass(frozen=True)
class DenoiserConfig:
    arch: str = "point-voxel"  # or "pointwise"
    hidden: int = 64
    blocks: int = 2
    voxel_channels: int = 16
    resolution: int = 16
    temb_dim: int = 32
    neighbors: int = 0  # k of the optional point-voxel neighbour layer; 0 disables it
    global_context: bool = True  # max-pooled cloud feature fed to every point-voxel block

    def __post_init__(self):
        if self.arch not in ("pointwise", "point-voxel"):
            raise ValueError(f"unknown denoiser architecture {self.arch!r}")


class _TimeMLP(nn.Module):
    def __init__(self, temb_dim, out):
        super().__init__()
        self.temb_dim = temb_dim
        self.net = nn.Sequential(nn.Linear(temb_dim, out), nn.SiLU(), nn.Linear(out, out))

    def forward(self, tau):
        return self.net(timestep_embedding(tau, self.temb_dim))


class _PointBlock(nn.Module):
    def __init__(self, c):
        super().__init__()
        self.lin1, self.lin2 = nn.Linear(c, c), nn.Linear(c, c)
        self.t = nn.Linear(c, c)

    def forward(self, h, temb):
        y = F.silu(self.lin1(h) + self.t(temb)[:, None, :])
        return h + self.lin2(y)


class PointwiseDenoiser(nn.Module):
    arch = "pointwise"

    def __init__(self, cfg: DenoiserConfig, T: int):
        super().__init__()
        self.cfg, self.T = cfg, T
        c = cfg.hidden
        self.time = _TimeMLP(cfg.temb_dim, c)
        self.inp = nn.Linear(3, c)
        self.blocks = nn.ModuleList(_PointBlock(c) for _ in range(cfg.blocks))
        self.out = nn.Linear(c, 3)
        nn.init.zeros_(self.out.weight)
        nn.init.zeros_(self.out.bias)

    def forward(self, x, tau):
        temb = self.time(tau)
        h = self.inp(x)
        for blk in self.blocks:
            h = blk(h, temb)
        return self.out(F.silu(h))


def voxel_coords(x: torch.Tensor, R: int) -> tuple[torch.Tensor, torch.Tensor]:
    """Per-cloud normalized coordinates in [0, 1] and flat voxel indices."""
    c = x - x.mean(dim=1, keepdim=True)
    radius = c.norm(dim=2).amax(dim=1).clamp_min(1e-8)
    nc = c / (2.0 * radius[:, None, None]) + 0.5
    ijk = (nc * R).floor().long().clamp(0, R - 1)
    flat = (ijk[..., 0] * R + ijk[..., 1]) * R + ijk[..., 2]
    return nc, flat


def knn_indices(x: torch.Tensor, k: int) -> torch.Tensor:
    """(B, N, k) indices of each point's nearest neighbours, self excluded."""
    k = min(k, x.shape[1] - 1)
    pts = x.detach().cpu().numpy()
    out = [cKDTree(p).query(p, k + 1)[1][:, 1:] for p in pts]
    return torch.as_tensor(np.stack(out), dtype=torch.long)


class _EdgeBlock(nn.Module):
    """Max-pooled MLP over neighbour offsets, rescaled by the cloud's mean
    neighbour distance so that the input stays O(1) at every noise level."""

    def __init__(self, c):
        super().__init__()
        self.lin1, self.lin2 = nn.Linear(4, c), nn.Linear(c, c)

    def forward(self, x, idx):
        b, n, k = idx.shape
        nb = torch.gather(x, 1, idx.reshape(b, n * k, 1).expand(-1, -1, 3)).reshape(b, n, k, 3)
        rel = nb - x[:, :, None, :]
        scale = rel.norm(dim=-1).mean(dim=(1, 2)).clamp_min(1e-8)[:, None, None, None]
        feat = torch.cat([rel / scale, scale.log().expand(-1, n, k, 1)], dim=-1)
        return self.lin2(F.silu(self.lin1(feat)).amax(dim=2))


class _PVBlock(nn.Module):
    def __init__(self, c, cv, R, global_context=False):
        super().__init__()
        self.R = R
        self.point = _PointBlock(c)
        self.glob = nn.Sequential(nn.Linear(c, c), nn.SiLU(), nn.Linear(c, c)) if global_context else None
        self.down = nn.Linear(c, cv)
        self.conv1 = nn.Conv3d(cv, cv, 3, padding=1)
        self.conv2 = nn.Conv3d(cv, cv, 3, padding=1)
        self.norm1 = nn.GroupNorm(min(8, cv), cv)
        self.norm2 = nn.GroupNorm(min(8, cv), cv)
        self.t = nn.Linear(c, cv)
        self.up = nn.Linear(cv, c)

    def forward(self, h, temb, nc, flat):
        b, n, _ = h.shape
        R = self.R
        if self.glob is not None:
            h = h + self.glob(h.amax(dim=1))[:, None, :]
        f = self.down(h)  # (B, N, Cv)
        cv = f.shape[-1]
        grid = torch.zeros(b, R ** 3, cv, dtype=f.dtype).scatter_add(1, flat[..., None].expand(-1, -1, cv), f)
        counts = torch.zeros(b, R ** 3, dtype=f.dtype).scatter_add(1, flat, torch.ones_like(flat, dtype=f.dtype))
        grid = grid / counts.clamp_min(1.0)[..., None]
        vox = grid.transpose(1, 2).reshape(b, cv, R, R, R)
        y = F.silu(self.norm1(self.conv1(vox)) + self.t(temb)[:, :, None, None, None])
        y = F.silu(self.norm2(self.conv2(y)))
        # trilinear devoxelization; grid_sample wants (z, y, x) ordering in [-1, 1]
        g = (nc * 2.0 - 1.0).flip(-1).reshape(b, n, 1, 1, 3)
        sampled = F.grid_sample(y, g, mode="bilinear", align_corners=False, padding_mode="border")
        sampled = sampled.reshape(b, cv, n).transpose(1, 2)
        return self.point(h, temb) + self.up(sampled)


class PointVoxelDenoiser(nn.Module):
    arch = "point-voxel"

    def __init__(self, cfg: DenoiserConfig, T: int):
        super().__init__()
        self.cfg, self.T = cfg, T
        c = cfg.hidden
        self.time = _TimeMLP(cfg.temb_dim, c)
        # raw coordinates, per-cloud standardized coordinates and log spread
        self.inp = nn.Linear(7, c)
        self.edge = _EdgeBlock(c) if cfg.neighbors > 0 else None
        self.blocks = nn.ModuleList(_PVBlock(c, cfg.voxel_channels, cfg.resolution, cfg.global_context)
                                    for _ in range(cfg.blocks))
        self.out = nn.Linear(c, 3)
        nn.init.zeros_(self.out.weight)
        nn.init.zeros_(self.out.bias)

    def forward(self, x, tau):
        temb = self.time(tau)
        nc, flat = voxel_coords(x, self.cfg.resolution)
        c = x - x.mean(dim=1, keepdim=True)
        spread = c.pow(2).sum(-1).mean(1).sqrt().clamp_min(1e-8)[:, None, None]
        h = self.inp(torch.cat([x, c / spread, spread.log().expand(-1, x.shape[1], 1)], dim=-1))
        if self.edge is not None:
            h = h + self.edge(x, knn_indices(x, self.cfg.neighbors))
        for blk in self.blocks:
            h = blk(h, temb, nc, flat)
        return self.out(F.silu(h))


def build_denoiser(cfg: DenoiserConfig, T: int) -> nn.Module:
    cls = PointwiseDenoiser if cfg.arch == "pointwise" else PointVoxelDenoiser
    return cls(cfg, T)


@torch.no_grad()
def predict_noise(model: nn.Module, x_tau, tau: int) -> torch.Tensor:
    x = torch.as_tensor(_points(x_tau) if not torch.is_tensor(x_tau) else x_tau, dtype=torch.float32)
    if x.ndim not in (2, 3) or x.shape[-1] != 3:
        raise ValueError(f"expected (N, 3) or (B, N, 3) points, got {tuple(x.shape)}")
    if not 0 <= tau < model.T:
        raise ValueError(f"tau={tau} outside [0, {model.T})")
    squeeze = x.ndim == 2
    xb = x[None] if squeeze else x
    was_training = model.training
    model.eval()
    out = model(xb, torch.full((xb.shape[0],), int(tau), dtype=torch.long))
    model.train(was_training)
    return out[0] if squeeze else out


# --- training ----------------------------------------------------------------------------


@dataclass
class TrainResult:
    model: nn.Module
    losses: list[float] = field(default_factory=list)


def denoising_loss(model, x0: torch.Tensor, sched: NoiseSchedule, gen: torch.Generator,
                   low_tau_fraction: float = 0.0, low_tau_max: int | None = None) -> torch.Tensor:
    """Noise-prediction MSE. A ``low_tau_fraction`` of the batch draws its
    time step from ``[0, low_tau_max)`` instead of ``[0, T)``; surface detail
    only resolves at those small steps."""
    b = x0.shape[0]
    tau = torch.randint(0, sched.T, (b,), generator=gen)
    if low_tau_fraction > 0:
        hi = low_tau_max or max(sched.T // 20, 1)
        low = torch.rand(b, generator=gen) < low_tau_fraction
        tau = torch.where(low, torch.randint(0, hi, (b,), generator=gen), tau)
    eps = torch.randn(x0.shape, generator=gen)
    ab = torch.as_tensor(sched.alpha_bar, dtype=torch.float32)[tau][:, None, None]
    x_tau = ab.sqrt() * x0 + (1.0 - ab).sqrt() * eps
    return ((eps - model(x_tau, tau)) ** 2).sum(-1).mean()


def train_denoiser(clouds, model_cfg: DenoiserConfig, sched: NoiseSchedule, iterations: int, batch: int = 16,
                   seed: int = 0, aug: AugmentationConfig | None = None, lr: float = 2e-4,
                   n_points: int | None = None, log_every: int = 0, low_tau_fraction: float = 0.0,
                   low_tau_max: int | None = None) -> TrainResult:
    """Fit the noise predictor; learning rate decays linearly from ``lr`` to 0.

    With ``aug=None`` clouds are only subsampled (to ``n_points``) and used as
    given, e.g. for toy targets already in normalized units.
    """
    clouds = [_points(c) for c in clouds]
    if not clouds:
        raise ValueError("need at least one training cloud")
    torch.manual_seed(seed)
    rng = np.random.default_rng([int(seed), 5])
    gen = torch.Generator().manual_seed(int(seed) + 1)
    model = build_denoiser(model_cfg, sched.T)
    opt = torch.optim.AdamW(model.parameters(), lr=lr)
    lr_sched = torch.optim.lr_scheduler.LambdaLR(opt, lambda it: max(0.0, 1.0 - it / iterations))
    n_pts = n_points or (aug.sample_points if aug else min(len(c) for c in clouds))
    result = TrainResult(model)
    model.train()
    for it in range(iterations):
        picks = rng.integers(len(clouds), size=batch)
        if aug is not None:
            batch_pts = [augment_cloud(clouds[i], aug, rng) for i in picks]
        else:
            batch_pts = [clouds[i][rng.choice(len(clouds[i]), n_pts, replace=len(clouds[i]) < n_pts)]
                         for i in picks]
        x0 = torch.as_tensor(np.stack(batch_pts), dtype=torch.float32)
        loss = denoising_loss(model, x0, sched, gen, low_tau_fraction, low_tau_max)
        if not torch.isfinite(loss):
            raise FloatingPointError(f"non-finite denoising loss at iteration {it}; last losses {result.losses[-5:]}")
        opt.zero_grad(set_to_none=True)
        loss.backward()
        opt.step()
        lr_sched.step()
        result.losses.append(loss.item())
        if log_every and it % log_every == 0:
            logger.info("diffusion it %d loss %.4f", it, result.losses[-1])
    model.eval()
    return result


@torch.no_grad()
def sample_pointcloud(model, sched: NoiseSchedule, n_points: int, seed: int = 0,
                      scale_factor: float = 20.0) -> tuple[np.ndarray, np.ndarray]:
    """Ancestral sampling from tau = T-1 down to 0.

    Returns the cloud in normalized units and in metres.
    """
    if model.T != sched.T:
        raise ValueError("model and schedule disagree on T")
    gen = torch.Generator().manual_seed(int(seed))
    beta = torch.as_tensor(sched.beta, dtype=torch.float32)
    alpha = 1.0 - beta
    ab = torch.as_tensor(sched.alpha_bar, dtype=torch.float32)
    x = torch.randn((1, n_points, 3), generator=gen)
    model.eval()
    for t in range(sched.T - 1, -1, -1):
        eps = model(x, torch.full((1,), t, dtype=torch.long))
        mean = (x - beta[t] / (1.0 - ab[t]).sqrt() * eps) / alpha[t].sqrt()
        if t > 0:
            var = beta[t] * (1.0 - ab[t - 1]) / (1.0 - ab[t])
            x = mean + var.sqrt() * torch.randn(x.shape, generator=gen)
        else:
            x = mean
    pts = x[0].double().numpy()
    return pts, pts * scale_factor


def chamfer_distance(a, b) -> float:
    """Symmetric mean nearest-neighbour distance."""
    a, b = _points(a), _points(b)
    if a.shape[0] == 0 or b.shape[0] == 0:
        raise ValueError("chamfer distance needs non-empty clouds")
    dab, _ = kernels.nearest_sqdist(a, b)
    dba, _ = kernels.nearest_sqdist(b, a)
    return 0.5 * (float(np.sqrt(dab).mean()) + float(np.sqrt(dba).mean()))


# --- checkpoint ----------------------------------------------------------------------------

_MAGIC = b"SCRDIFF\0"
_VERSION = 1


def save_denoiser(path, model: nn.Module, sched: NoiseSchedule) -> None:
    """Layout: magic, u32 version, u32 header length, JSON header
    (arch tag, R, T, beta range, widths, tensor shapes), f32 LE parameters."""
    state = model.state_dict()
    header = {
        "arch": model.cfg.arch, "R": model.cfg.resolution, "T": sched.T,
        "beta_min": sched.beta_min, "beta_max": sched.beta_max,
        "config": asdict(model.cfg),
        "tensors": [[k, list(v.shape)] for k, v in state.items()],
    }
    hb = json.dumps(header).encode()
    flat = np.concatenate([v.detach().cpu().numpy().astype("<f4").ravel() for v in state.values()])
    Path(path).write_bytes(_MAGIC + struct.pack("<II", _VERSION, len(hb)) + hb + flat.tobytes())


def load_denoiser(path) -> tuple[nn.Module, NoiseSchedule]:
    path = Path(path)
    raw = path.read_bytes()
    if raw[:8] != _MAGIC:
        raise ValueError(f"{path}: not a denoiser checkpoint")
    version, hlen = struct.unpack("<II", raw[8:16])
    if version != _VERSION:
        raise ValueError(f"{path}: checkpoint version {version} not supported")
    header = json.loads(raw[16:16 + hlen])
    flat = np.frombuffer(raw, dtype="<f4", offset=16 + hlen)
    cfg = DenoiserConfig(**header["config"])
    sched = make_schedule(header["T"], header["beta_min"], header["beta_max"])
    model = build_denoiser(cfg, sched.T)
    state, off = {}, 0
    for name, shape in header["tensors"]:
        n = int(np.prod(shape)) if shape else 1
        if off + n > flat.size:
            raise ValueError(f"{path}: truncated parameter array")
        state[name] = torch.as_tensor(flat[off:off + n].reshape(shape).copy())
        off += n
    model.load_state_dict(state)
    model.eval()
    return model, sched
