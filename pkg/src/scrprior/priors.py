"""Reconstruction priors acting on predicted scene coordinates.

Depth priors are negative log-likelihoods (or a distribution distance) on the
camera-frame depth of each prediction and are added to the minimized loss.
The diffusion prior has no tractable density; it injects a gradient built
from a frozen noise predictor instead.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
import torch


class PriorConfigurationError(ValueError):
    """The selected prior cannot run with the inputs at hand."""


class DegenerateScaleError(ValueError):
    pass


@dataclass(frozen=True)
class LaplaceParams:
    mu: float = 1.73
    b: float = 0.60

    def __post_init__(self):
        if not (math.isfinite(self.mu) and math.isfinite(self.b)) or self.b <= 0:
            raise ValueError(f"invalid Laplace parameters mu={self.mu}, b={self.b}")

    def to_text(self) -> str:
        return f"{self.mu:.17g} {self.b:.17g}\n"

    @classmethod
    def from_text(cls, text: str) -> LaplaceParams:
        parts = text.split()
        if len(parts) != 2:
            raise ValueError("fitted-prior file must contain exactly 'mu b'")
        return cls(float(parts[0]), float(parts[1]))


@dataclass(frozen=True)
class RgbdParams:
    b_prime: float = 0.10

    def __post_init__(self):
        if not self.b_prime > 0:
            raise ValueError("b_prime must be positive")


@dataclass(frozen=True)
class PriorSchedule:
    lambda_reg: float = 0.1
    start_iter: int = 5000
    end_iter: int = 25000
    warmup_iters: int = 1000
    diffusion_weight: float = 1000.0
    mask_threshold_kappa: float = 30.0
    apply_every_k: int = 4
    tau_start: int | None = None  # None: T // 20
    max_points: int = 5120
    scale_factor: float = 20.0

    def __post_init__(self):
        if self.start_iter >= self.end_iter:
            raise ValueError("start_iter must precede end_iter")
        if self.mask_threshold_kappa < 0:
            raise ValueError("mask threshold must be non-negative")
        if self.apply_every_k < 1:
            raise ValueError("apply_every_k must be >= 1")
        if self.warmup_iters < 0 or self.max_points < 1 or self.scale_factor <= 0:
            raise ValueError("invalid diffusion schedule constants")

    def resolved_tau_start(self, T: int) -> int:
        return T // 20 if self.tau_start is None else int(self.tau_start)


@dataclass
class PriorContext:
    coords: torch.Tensor  # (N, 3) m
    cam_depths: torch.Tensor  # (N,) m
    reproj_errors: torch.Tensor  # (N,) px
    iteration: int = 0
    measured_depths: torch.Tensor | None = None

    def __post_init__(self):
        n = self.coords.shape[0]
        for name in ("cam_depths", "reproj_errors", "measured_depths"):
            arr = getattr(self, name)
            if arr is not None and arr.shape[0] != n:
                raise ValueError(f"{name} has length {arr.shape[0]}, expected {n}")


# --- depth distribution priors -------------------------------------------------------


def fit_laplace(depth_samples) -> LaplaceParams:
    """Maximum-likelihood Laplace fit: median and mean absolute deviation about it."""
    x = np.asarray(depth_samples, dtype=np.float64).ravel()
    x = x[np.isfinite(x)]
    if x.size < 2:
        raise ValueError("fit_laplace needs at least two finite samples")
    mu = float(np.median(x))
    b = float(np.mean(np.abs(x - mu)))
    if b <= 1e-12 * max(1.0, abs(mu)):
        raise DegenerateScaleError("samples are constant; Laplace scale would be zero")
    return LaplaceParams(mu, b)


def laplace_nll(d: torch.Tensor, mu: float, b: float) -> torch.Tensor:
    return math.log(2.0 * b) + (d - mu).abs() / b


def laplace_nll_loss(ctx: PriorContext, p: LaplaceParams, lam: float) -> torch.Tensor:
    return lam * laplace_nll(ctx.cam_depths, p.mu, p.b).mean()


def laplace_quantile(q, mu: float, b: float):
    q = np.asarray(q, dtype=np.float64)
    return mu - b * np.sign(q - 0.5) * np.log1p(-2.0 * np.abs(q - 0.5))


def wasserstein_loss(ctx: PriorContext, p: LaplaceParams, lam: float) -> torch.Tensor:
    """W1 between the batch depths and Lap(mu, b), matching sorted samples to
    quantile midpoints. The target is held fixed."""
    d = ctx.cam_depths
    n = d.shape[0]
    if n < 2:
        raise ValueError("wasserstein_loss needs at least two depths")
    target = laplace_quantile((np.arange(1, n + 1) - 0.5) / n, p.mu, p.b)
    target = torch.as_tensor(target, dtype=d.dtype, device=d.device)
    d_sorted, _ = torch.sort(d)
    return lam * (d_sorted - target).abs().mean()


def rgbd_nll_loss(ctx: PriorContext, p: RgbdParams, lam: float) -> torch.Tensor:
    if ctx.measured_depths is None:
        raise PriorConfigurationError("RGB-D prior selected but measured_depth is absent")
    valid = torch.isfinite(ctx.measured_depths)
    if not bool(valid.any()):
        raise PriorConfigurationError("RGB-D prior selected but every measured_depth is NaN")
    d = ctx.cam_depths[valid]
    target = ctx.measured_depths[valid]
    return lam * (math.log(2.0 * p.b_prime) + (d - target).abs() / p.b_prime).mean()


# --- diffusion prior ------------------------------------------------------------------


@dataclass(frozen=True)
class ScheduleState:
    active: bool
    tau: int
    weight: float


def schedule_state(ps: PriorSchedule, iteration: int, T: int = 200) -> ScheduleState:
    if iteration < 0:
        raise ValueError("iteration must be non-negative")
    tau_start = ps.resolved_tau_start(T)
    frac = (ps.end_iter - iteration) / (ps.end_iter - ps.start_iter)
    tau = int(math.floor(tau_start * min(max(frac, 0.0), 1.0) + 0.5))
    if iteration < ps.start_iter:
        return ScheduleState(False, tau, 0.0)
    ramp = 1.0 if ps.warmup_iters == 0 else min(1.0, (iteration - ps.start_iter) / ps.warmup_iters)
    return ScheduleState(iteration % ps.apply_every_k == 0, tau, ps.diffusion_weight * ramp)


def diffusion_score_block(ctx: PriorContext, model, sched, ps: PriorSchedule, seed: int = 0):
    """Selected row indices and the normalized, weighted noise estimate on them
    (in the model's normalized units). Returns ``(None, None)`` when inactive."""
    from .diffusion import predict_noise

    if getattr(model, "T", sched.T) != sched.T:
        raise ValueError(f"denoiser was trained with T={model.T}, schedule has T={sched.T}")
    tau_start = ps.resolved_tau_start(sched.T)
    if not 0 <= tau_start < sched.T:
        raise ValueError(f"tau_start {tau_start} outside [0, {sched.T})")
    state = schedule_state(ps, ctx.iteration, sched.T)
    if not state.active:
        return None, None
    errs = ctx.reproj_errors.detach()
    sel = torch.nonzero(errs >= ps.mask_threshold_kappa).flatten()
    if sel.numel() == 0:
        return None, None
    if sel.numel() > ps.max_points:
        rng = np.random.default_rng([int(seed), int(ctx.iteration)])
        keep = np.sort(rng.choice(sel.numel(), size=ps.max_points, replace=False))
        sel = sel[torch.as_tensor(keep)]
    x = ctx.coords.detach()[sel].to(torch.float32) / ps.scale_factor
    eps = predict_noise(model, x, state.tau)
    norm = torch.linalg.norm(eps)
    if not torch.isfinite(norm):
        raise FloatingPointError("denoiser produced a non-finite noise estimate")
    if norm == 0:
        return sel, torch.zeros_like(eps)
    # d(-log p)/dx points along +eps
    return sel, eps / norm * state.weight


def diffusion_score_grad(ctx: PriorContext, model, sched, ps: PriorSchedule, seed: int = 0) -> torch.Tensor:
    """Per-point gradient of -log p in 1/m, zero on masked or unselected rows."""
    out = torch.zeros_like(ctx.coords.detach())
    sel, block = diffusion_score_block(ctx, model, sched, ps, seed)
    if sel is None:
        return out
    out[sel] = block.to(out.dtype) / ps.scale_factor
    return out


# --- prior objects used by the mapping loop -------------------------------------------


class Prior:
    """No prior: the ACE-style baseline."""

    name = "none"
    replaces_init = False
    needs_measured_depth = False

    def loss(self, ctx: PriorContext) -> torch.Tensor | None:
        return None

    def coord_grad(self, ctx: PriorContext) -> torch.Tensor | None:
        return None


class LaplaceNLLPrior(Prior):
    name = "laplace-nll"
    replaces_init = True

    def __init__(self, params: LaplaceParams | None = None, lambda_reg: float = 0.1):
        self.params, self.lambda_reg = params or LaplaceParams(), lambda_reg

    def loss(self, ctx):
        return laplace_nll_loss(ctx, self.params, self.lambda_reg)


class LaplaceWassersteinPrior(LaplaceNLLPrior):
    name = "laplace-wd"

    def loss(self, ctx):
        return wasserstein_loss(ctx, self.params, self.lambda_reg)


class RgbdNLLPrior(Prior):
    name = "rgbd-nll"
    replaces_init = True
    needs_measured_depth = True

    def __init__(self, params: RgbdParams | None = None, lambda_reg: float = 1.0):
        self.params, self.lambda_reg = params or RgbdParams(), lambda_reg

    def loss(self, ctx):
        return rgbd_nll_loss(ctx, self.params, self.lambda_reg)


class DiffusionPrior(Prior):
    """Gradient injection from a frozen denoiser; the baseline init loss stays on."""

    name = "diffusion"

    def __init__(self, model, sched, schedule: PriorSchedule | None = None, seed: int = 0):
        self.model, self.sched = model, sched
        self.schedule = schedule or PriorSchedule()
        self.seed = seed
        if getattr(model, "T", sched.T) != sched.T:
            raise ValueError(f"denoiser was trained with T={model.T}, schedule has T={sched.T}")

    def coord_grad(self, ctx):
        if not schedule_state(self.schedule, ctx.iteration, self.sched.T).active:
            return None
        return diffusion_score_grad(ctx, self.model, self.sched, self.schedule, self.seed)


PRIOR_NAMES = ("none", "laplace-nll", "laplace-wd", "rgbd-nll", "diffusion")
