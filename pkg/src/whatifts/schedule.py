"""Diffusion noise schedule and deterministic (eta = 0) transitions.

Step indices run 0..T where 0 is clean data. ``alpha_bar`` is the running
product of (1 - beta) with the convention alpha_bar(0) = 1, so the same
formulas cover transitions into and out of the clean state:

    x_t  = sqrt(alpha_bar_t) * x_0 + sqrt(1 - alpha_bar_t) * eps
    x0^  = (x_t - sqrt(1 - alpha_bar_t) * eps^) / sqrt(alpha_bar_t)
    step(t -> s) = sqrt(alpha_bar_s) * x0^ + sqrt(1 - alpha_bar_s) * eps^

The denoise and inversion steps are the same map with s below or above t;
composing them with a frozen eps^ is exactly the identity.

All operators accept numpy arrays or torch tensors (gradients flow through
the torch path) and scalar or per-row integer step indices.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np
import torch

from .errors import GridViolationError

__all__ = [
    "NoiseSchedule",
    "make_schedule",
    "q_sample",
    "x0_estimate",
    "ddim_step",
    "ddim_invert_step",
]


@dataclass(frozen=True)
class NoiseSchedule:
    """Beta sequence, cumulative alpha products, and the inference grid."""

    betas: np.ndarray  # (T,), beta_t for t = 1..T
    inference_grid: tuple[int, ...]  # ascending, starts at 0, ends at T
    alpha_bars: np.ndarray = field(init=False)  # (T + 1,), entry 0 is 1.0

    def __post_init__(self) -> None:
        betas = np.asarray(self.betas, dtype=np.float64)
        if betas.ndim != 1 or len(betas) == 0:
            raise ValueError("betas must be a non-empty 1-d array")
        if not ((betas > 0) & (betas < 1)).all():
            raise ValueError("betas must lie strictly inside (0, 1)")
        grid = tuple(int(t) for t in self.inference_grid)
        if grid[0] != 0 or grid[-1] != len(betas):
            raise ValueError("inference grid must start at 0 and end at T")
        if any(b <= a for a, b in zip(grid, grid[1:])):
            raise ValueError("inference grid must be strictly increasing")
        object.__setattr__(self, "betas", betas)
        object.__setattr__(self, "inference_grid", grid)
        bars = np.concatenate([[1.0], np.cumprod(1.0 - betas)])
        bars.flags.writeable = False
        object.__setattr__(self, "alpha_bars", bars)

    @property
    def T(self) -> int:
        return len(self.betas)

    def alpha_bar(self, t: int) -> float:
        if not 0 <= t <= self.T:
            raise ValueError(f"step {t} outside [0, {self.T}]")
        return float(self.alpha_bars[t])

    def grid_pairs(self) -> list[tuple[int, int]]:
        """Consecutive (lower, upper) step pairs along the inference grid."""
        return list(zip(self.inference_grid, self.inference_grid[1:]))


def make_schedule(
    T: int = 100,
    beta_start: float = 1e-4,
    beta_end: float = 0.02,
    steps: int = 50,
) -> NoiseSchedule:
    """Linear beta schedule with an evenly spaced inference grid of ``steps``
    transitions (grid size steps + 1, always containing 0 and T)."""
    if T < 1:
        raise ValueError("T must be at least 1")
    if not 1 <= steps <= T:
        raise ValueError(f"steps must lie in [1, T={T}], got {steps}")
    betas = np.linspace(beta_start, beta_end, T)
    grid = [round(i * T / steps) for i in range(steps + 1)]
    return NoiseSchedule(betas=betas, inference_grid=tuple(grid))


def _coeffs(sched: NoiseSchedule, t, x):
    """sqrt(alpha_bar_t) and sqrt(1 - alpha_bar_t), broadcastable against x.

    ``t`` may be a python int or an integer array/tensor with one entry per
    row of ``x``.
    """
    if isinstance(t, (int, np.integer)):
        a = sched.alpha_bar(int(t))
        return math.sqrt(a), math.sqrt(1.0 - a)
    if isinstance(x, torch.Tensor):
        tt = torch.as_tensor(t, device=x.device)
        if tt.min() < 0 or tt.max() > sched.T:
            raise ValueError(f"step indices outside [0, {sched.T}]")
        bars = torch.tensor(sched.alpha_bars, dtype=x.dtype, device=x.device)
        a = bars[tt].reshape(-1, *([1] * (x.ndim - 1)))
        return torch.sqrt(a), torch.sqrt(1.0 - a)
    tt = np.asarray(t)
    if tt.min() < 0 or tt.max() > sched.T:
        raise ValueError(f"step indices outside [0, {sched.T}]")
    a = sched.alpha_bars[tt].reshape(-1, *([1] * (np.ndim(x) - 1)))
    return np.sqrt(a), np.sqrt(1.0 - a)


def _check_shapes(x, eps) -> None:
    xs = tuple(x.shape) if hasattr(x, "shape") else (len(x),)
    es = tuple(eps.shape) if hasattr(eps, "shape") else (len(eps),)
    if xs != es:
        raise ValueError(f"shape mismatch between series {xs} and noise {es}")


def _check_grid(sched: NoiseSchedule, t: int, t_to: int, forward: bool) -> None:
    grid = sched.inference_grid
    if t not in grid or t_to not in grid:
        raise GridViolationError(f"steps ({t}, {t_to}) must lie on the grid {grid}")
    if forward and not t_to > t:
        raise GridViolationError(f"inversion needs t_next > t, got {t} -> {t_to}")
    if not forward and not t_to < t:
        raise GridViolationError(f"denoising needs t_prev < t, got {t} -> {t_to}")


def q_sample(x0, t, eps, sched: NoiseSchedule):
    """Forward corruption: sqrt(a_t) x0 + sqrt(1 - a_t) eps for t in [1, T]."""
    _check_shapes(x0, eps)
    if isinstance(t, (int, np.integer)) and t < 1:
        raise ValueError("q_sample needs t >= 1")
    sa, sn = _coeffs(sched, t, x0)
    return sa * x0 + sn * eps


def x0_estimate(x_t, eps_hat, t, sched: NoiseSchedule):
    """Clean-state estimate implied by a noise estimate at step t."""
    _check_shapes(x_t, eps_hat)
    sa, sn = _coeffs(sched, t, x_t)
    return (x_t - sn * eps_hat) / sa


def ddim_step(x_t, eps_hat, t: int, t_prev: int, sched: NoiseSchedule):
    """One deterministic denoising transition t -> t_prev along the grid."""
    _check_grid(sched, t, t_prev, forward=False)
    x0 = x0_estimate(x_t, eps_hat, t, sched)
    sa, sn = _coeffs(sched, t_prev, x_t)
    return sa * x0 + sn * eps_hat


def ddim_invert_step(x_t, eps_hat, t: int, t_next: int, sched: NoiseSchedule):
    """One deterministic inversion transition t -> t_next along the grid."""
    _check_grid(sched, t, t_next, forward=True)
    x0 = x0_estimate(x_t, eps_hat, t, sched)
    sa, sn = _coeffs(sched, t_next, x_t)
    return sa * x0 + sn * eps_hat
