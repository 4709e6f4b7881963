"""Central finite-difference helpers shared by the gradient tests."""

import numpy as np
import torch


def fd_gradient(fn, x: torch.Tensor, h: float = 1e-6) -> torch.Tensor:
    g = torch.zeros_like(x)
    flat, gflat = x.view(-1), g.view(-1)
    for i in range(flat.numel()):
        orig = flat[i].item()
        flat[i] = orig + h
        fp = float(fn(x))
        flat[i] = orig - h
        fm = float(fn(x))
        flat[i] = orig
        gflat[i] = (fp - fm) / (2 * h)
    return g


def analytic_gradient(fn, x: torch.Tensor) -> torch.Tensor:
    x = x.detach().clone().requires_grad_(True)
    fn(x).backward()
    return x.grad.detach()


def relative_error(a: torch.Tensor, b: torch.Tensor) -> float:
    return float(torch.linalg.norm(a - b) / max(float(torch.linalg.norm(b)), 1e-12))


def check(fn, x: torch.Tensor, h: float = 1e-6) -> float:
    x = x.detach().clone().to(torch.float64)
    return relative_error(analytic_gradient(fn, x), fd_gradient(fn, x.clone(), h))


__all__ = ["fd_gradient", "analytic_gradient", "relative_error", "check", "np"]
