"""Two-stage what-if inference.

Stage 1 (attribution) runs the clean history forward through the inverted
deterministic transitions under the history text, producing the intrinsic
terminal state. Stage 2 (forecasting) initializes the future span from that
terminal state (or standard Gaussian noise when attribution is off), then
denoises the concatenated series under the future text, overwriting the
history span with the clean history before every estimator call.

All engine paths run without gradients and operate in normalized space;
results optionally carry denormalized copies.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import torch

from .checkpoint import ForecasterBundle
from .data_model import Normalizer, apply_normalizer
from .schedule import NoiseSchedule, ddim_invert_step, ddim_step
from .textproc import Vocab, tokenize_batch

__all__ = [
    "ForecastRequest",
    "ForecastResult",
    "attribute",
    "denoise_anchored",
    "denoise_plain",
    "forecast_batch",
    "forecast",
]


@dataclass(frozen=True)
class ForecastRequest:
    """One what-if query in normalized space."""

    history: np.ndarray
    history_text: str
    future_text: str
    horizon: int
    num_samples: int = 1
    use_attribution: bool = True
    seed: int = 0
    steps: int | None = None  # optional coarser/finer inference grid
    perturb_scale: float = 0.0  # extension: jitter extra samples' initial state


@dataclass
class ForecastResult:
    forecasts: np.ndarray  # (num_samples, horizon), normalized
    forecasts_raw: np.ndarray | None  # denormalized copy when available
    initial_states: np.ndarray  # (num_samples, horizon) terminal states used
    full_states: np.ndarray  # (num_samples, L_h + horizon) final denoised states
    attribution_used: bool


def _regrid(sched: NoiseSchedule, steps: int | None) -> NoiseSchedule:
    if steps is None:
        return sched
    if not 1 <= steps <= sched.T:
        raise ValueError(f"steps must lie in [1, {sched.T}], got {steps}")
    grid = tuple(round(i * sched.T / steps) for i in range(steps + 1))
    return NoiseSchedule(betas=sched.betas, inference_grid=grid)


@torch.no_grad()
def attribute(
    model: torch.nn.Module,
    sched: NoiseSchedule,
    histories: torch.Tensor,
    history_ids: torch.Tensor,
) -> torch.Tensor:
    """Stage 1: invert clean histories to their terminal states.

    Uses only the history and its text; future conditions cannot reach it.
    """
    x = histories
    for t, t_next in sched.grid_pairs():
        eps_hat = model(x, history_ids, t)
        x = ddim_invert_step(x, eps_hat, t, t_next, sched)
    return x


@torch.no_grad()
def denoise_anchored(
    model: torch.nn.Module,
    sched: NoiseSchedule,
    histories: torch.Tensor,
    initial_future: torch.Tensor,
    future_ids: torch.Tensor,
    stop_at: int = 0,
) -> torch.Tensor:
    """Stage 2 core: denoise [history | future] from T down to ``stop_at``,
    overwriting the history span with the clean history before every call
    and once more after the last transition."""
    if stop_at not in sched.inference_grid:
        raise ValueError(f"stop_at={stop_at} is not on the inference grid")
    L_h = histories.shape[1]
    state = torch.cat([histories, initial_future], dim=1)
    for t, t_prev in [(hi, lo) for lo, hi in reversed(sched.grid_pairs()) if lo >= stop_at]:
        state[:, :L_h] = histories
        eps_hat = model(state, future_ids, t)
        state = ddim_step(state, eps_hat, t, t_prev, sched)
    state[:, :L_h] = histories
    return state


@torch.no_grad()
def denoise_plain(
    model: torch.nn.Module,
    sched: NoiseSchedule,
    x_terminal: torch.Tensor,
    cond_ids: torch.Tensor,
) -> torch.Tensor:
    """Denoise a bare window (no anchoring); round-trip check for stage 1."""
    x = x_terminal
    for lo, hi in reversed(sched.grid_pairs()):
        eps_hat = model(x, cond_ids, hi)
        x = ddim_step(x, eps_hat, hi, lo, sched)
    return x


def forecast_batch(
    model: torch.nn.Module,
    sched: NoiseSchedule,
    vocab: Vocab,
    histories: torch.Tensor,
    history_texts: list[str],
    future_texts: list[str],
    horizon: int,
    num_samples: int = 1,
    use_attribution: bool = True,
    seed: int = 0,
    steps: int | None = None,
    perturb_scale: float = 0.0,
) -> tuple[torch.Tensor, torch.Tensor, torch.Tensor]:
    """Vectorized engine over B series.

    Returns (full_states, forecasts, initial_states) shaped
    (num_samples, B, L_h + horizon / horizon / horizon).
    """
    if num_samples < 1:
        raise ValueError("num_samples must be at least 1")
    B, L_h = histories.shape
    if use_attribution and horizon != L_h:
        raise ValueError(
            f"attribution requires matching window lengths, got L_h={L_h} horizon={horizon}"
        )
    sched = _regrid(sched, steps)
    width = model.config.text_width
    dtype = next(model.parameters()).dtype
    histories = histories.to(dtype)
    hist_ids = tokenize_batch(history_texts, vocab, width)
    fut_ids = tokenize_batch(future_texts, vocab, width)
    generator = torch.Generator().manual_seed(seed)

    model.eval()
    if use_attribution:
        terminal = attribute(model, sched, histories, hist_ids)
    full_states, forecasts, initials = [], [], []
    for k in range(num_samples):
        if use_attribution:
            init = terminal.clone()
            if k > 0 and perturb_scale > 0.0:
                init = init + perturb_scale * torch.randn(
                    init.shape, generator=generator, dtype=dtype
                )
        else:
            init = torch.randn(B, horizon, generator=generator, dtype=dtype)
        state = denoise_anchored(model, sched, histories, init, fut_ids)
        full_states.append(state)
        forecasts.append(state[:, L_h:])
        initials.append(init)
    return torch.stack(full_states), torch.stack(forecasts), torch.stack(initials)


def forecast(
    bundle: ForecasterBundle,
    request: ForecastRequest,
    normalizer: Normalizer | None = None,
) -> ForecastResult:
    """Single-request wrapper around the batched engine."""
    normalizer = normalizer if normalizer is not None else bundle.normalizer
    history = torch.from_numpy(np.asarray(request.history, dtype=np.float64)).reshape(1, -1)
    full, fc, init = forecast_batch(
        bundle.model,
        bundle.sched,
        bundle.vocab,
        history.float(),
        [request.history_text],
        [request.future_text],
        horizon=request.horizon,
        num_samples=request.num_samples,
        use_attribution=request.use_attribution,
        seed=request.seed,
        steps=request.steps,
        perturb_scale=request.perturb_scale,
    )
    forecasts = fc[:, 0, :].numpy().astype(np.float64)
    raw = None
    if normalizer is not None:
        raw = apply_normalizer(normalizer, forecasts, inverse=True)
    return ForecastResult(
        forecasts=forecasts,
        forecasts_raw=raw,
        initial_states=init[:, 0, :].numpy().astype(np.float64),
        full_states=full[:, 0, :].numpy().astype(np.float64),
        attribution_used=request.use_attribution,
    )
