"""Joint training of the noise estimator on forecast and attribution losses.

Every optimizer step combines two terms computed on the same minibatch:

* forecast loss: noise-estimation MSE on a mixed input whose history span
  stays clean while the future span is corrupted to a per-sample step t;
  only future positions are supervised (mean over supervised elements).
* attribution loss: plain noise-estimation MSE on history-only inputs
  conditioned on the history text, so the model also learns to run the
  history window through the diffusion process on its own.

The total is lambda_forecast * forecast + lambda_attribution * attribution
(2:1 by default).
"""

from __future__ import annotations

import json
import time
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np
import torch

from .checkpoint import ForecasterBundle
from .data_model import Dataset, Normalizer, apply_normalizer, fit_normalizer
from .errors import DataError
from .estimator import EstimatorConfig, NoiseEstimator
from .schedule import NoiseSchedule, make_schedule, q_sample
from .textproc import Vocab, build_vocab, tokenize_batch

__all__ = [
    "TrainConfig",
    "MaskedBatch",
    "make_masked_batch",
    "forecast_loss",
    "attribution_loss",
    "prepare_split",
    "train",
]


@dataclass(frozen=True)
class TrainConfig:
    """Optimizer, schedule, and estimator settings for one training run."""

    epochs: int = 700
    batch_size: int = 1024
    lr: float = 1e-3
    lambda_forecast: float = 2.0
    lambda_attribution: float = 1.0
    seed: int = 0
    # noise schedule
    T: int = 100
    beta_start: float = 1e-4
    beta_end: float = 0.02
    steps: int = 50
    # estimator
    patch_len: int = 8
    d_model: int = 64
    n_blocks: int = 4
    n_heads: int = 4
    text_width: int = 64
    text_layers: int = 2
    min_freq: int = 1
    checkpoint_every: int = 0  # 0 means max(1, epochs // 10)

    def __post_init__(self) -> None:
        if self.epochs < 1 or self.batch_size < 1:
            raise ValueError("epochs and batch_size must be positive")
        if self.lr <= 0:
            raise ValueError("learning rate must be positive")

    def to_json(self) -> dict:
        return {k: getattr(self, k) for k in self.__dataclass_fields__}

    @classmethod
    def from_json(cls, obj: dict) -> "TrainConfig":
        unknown = set(obj) - set(cls.__dataclass_fields__)
        if unknown:
            raise ValueError(f"unknown config fields {sorted(unknown)}")
        return cls(**obj)

    def with_overrides(self, **kwargs) -> "TrainConfig":
        kwargs = {k: v for k, v in kwargs.items() if v is not None}
        return replace(self, **kwargs)


@dataclass
class MaskedBatch:
    """Mixed input with clean history plus corrupted future, and its targets."""

    x: torch.Tensor  # (B, L_h + L_f) clean history then corrupted future
    cond_ids: torch.Tensor  # (B, W) future condition tokens
    t: torch.Tensor  # (B,) per-sample steps in [1, T]
    eps: torch.Tensor  # (B, L_h + L_f), zeros over the history span
    mask: torch.Tensor  # (L_h + L_f,) bool, True on supervised positions


def make_masked_batch(
    histories: torch.Tensor,
    futures: torch.Tensor,
    cond_ids: torch.Tensor,
    sched: NoiseSchedule,
    generator: torch.Generator | None = None,
    t: torch.Tensor | None = None,
    eps_future: torch.Tensor | None = None,
) -> MaskedBatch:
    """Corrupt the future span to per-sample steps; history stays clean.

    ``t`` and ``eps_future`` may be supplied for deterministic tests;
    otherwise they are drawn from ``generator``.
    """
    B, L_h = histories.shape
    L_f = futures.shape[1]
    if t is None:
        t = torch.randint(1, sched.T + 1, (B,), generator=generator)
    if eps_future is None:
        eps_future = torch.randn(B, L_f, generator=generator, dtype=futures.dtype)
    x_future = q_sample(futures, t, eps_future, sched)
    x = torch.cat([histories, x_future], dim=1)
    eps = torch.cat([torch.zeros_like(histories), eps_future], dim=1)
    mask = torch.cat(
        [torch.zeros(L_h, dtype=torch.bool), torch.ones(L_f, dtype=torch.bool)]
    )
    return MaskedBatch(x=x, cond_ids=cond_ids, t=t, eps=eps, mask=mask)


def forecast_loss(model: NoiseEstimator, batch: MaskedBatch) -> torch.Tensor:
    """Masked noise-estimation MSE, mean over supervised elements only."""
    eps_hat = model(batch.x, batch.cond_ids, batch.t)
    diff = eps_hat[:, batch.mask] - batch.eps[:, batch.mask]
    return diff.pow(2).mean()


def attribution_loss(
    model: NoiseEstimator,
    histories: torch.Tensor,
    cond_ids: torch.Tensor,
    sched: NoiseSchedule,
    generator: torch.Generator | None = None,
    t: torch.Tensor | None = None,
    eps: torch.Tensor | None = None,
) -> torch.Tensor:
    """Noise-estimation MSE on history-only inputs under the history text."""
    B = histories.shape[0]
    if t is None:
        t = torch.randint(1, sched.T + 1, (B,), generator=generator)
    if eps is None:
        eps = torch.randn_like(histories)
        if generator is not None:
            eps = torch.randn(histories.shape, generator=generator, dtype=histories.dtype)
    x_t = q_sample(histories, t, eps, sched)
    eps_hat = model(x_t, cond_ids, t)
    return (eps_hat - eps).pow(2).mean()


def prepare_split(
    dataset: Dataset,
    split: str,
    vocab: Vocab,
    width: int,
    normalizer: Normalizer | None,
    require_futures: bool = True,
):
    """Tensors for one split: normalized series plus tokenized conditions.

    Returns (histories, futures, history_ids, future_ids); ``futures`` is
    None when the split holds counterfactual samples.
    """
    samples = dataset.split(split)
    if not samples:
        raise DataError(f"split {split!r} of {dataset.name!r} is empty")
    H = np.stack([s.history for s in samples])
    have_futures = all(s.future is not None for s in samples)
    if require_futures and not have_futures:
        raise DataError(f"split {split!r} holds samples without futures")
    F = np.stack([s.future for s in samples]) if have_futures else None
    if normalizer is not None:
        H = apply_normalizer(normalizer, H)
        F = apply_normalizer(normalizer, F) if F is not None else None
    hist_ids = tokenize_batch([s.history_text for s in samples], vocab, width)
    fut_ids = tokenize_batch([s.future_text for s in samples], vocab, width)
    histories = torch.from_numpy(H).float()
    futures = torch.from_numpy(F).float() if F is not None else None
    return histories, futures, hist_ids, fut_ids


def _epoch_losses(
    model: NoiseEstimator,
    tensors,
    sched: NoiseSchedule,
    config: TrainConfig,
    generator: torch.Generator,
    optimizer: torch.optim.Optimizer | None,
) -> tuple[float, float]:
    """One pass over the data; returns mean (forecast, attribution) losses."""
    histories, futures, hist_ids, fut_ids = tensors
    N = histories.shape[0]
    order = torch.randperm(N, generator=generator)
    sum_f, sum_a, n_batches = 0.0, 0.0, 0
    for start in range(0, N, config.batch_size):
        idx = order[start : start + config.batch_size]
        batch = make_masked_batch(
            histories[idx], futures[idx], fut_ids[idx], sched, generator
        )
        loss_f = forecast_loss(model, batch)
        loss_a = attribution_loss(model, histories[idx], hist_ids[idx], sched, generator)
        loss = config.lambda_forecast * loss_f + config.lambda_attribution * loss_a
        if optimizer is not None:
            optimizer.zero_grad()
            loss.backward()
            optimizer.step()
        sum_f += float(loss_f.detach())
        sum_a += float(loss_a.detach())
        n_batches += 1
    return sum_f / n_batches, sum_a / n_batches


def train(
    dataset: Dataset,
    config: TrainConfig,
    out_dir: str | Path,
    vocab: Vocab | None = None,
) -> tuple[ForecasterBundle, Path]:
    """Train from scratch; writes periodic/best/final checkpoints and a
    JSONL log, and returns the final bundle plus its path."""
    if dataset.L_h % config.patch_len or dataset.L_f % config.patch_len:
        raise DataError(
            f"window lengths ({dataset.L_h}, {dataset.L_f}) must be divisible "
            f"by patch length {config.patch_len}"
        )
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)

    torch.manual_seed(config.seed)
    if vocab is None:
        corpus = [s.history_text for s in dataset.split("train")]
        corpus += [s.future_text for s in dataset.split("train")]
        vocab = build_vocab(corpus, min_freq=config.min_freq)
    normalizer = fit_normalizer(dataset, "train")
    sched = make_schedule(config.T, config.beta_start, config.beta_end, config.steps)
    est_config = EstimatorConfig(
        vocab_size=len(vocab),
        patch_len=config.patch_len,
        d_model=config.d_model,
        n_blocks=config.n_blocks,
        n_heads=config.n_heads,
        text_width=config.text_width,
        text_layers=config.text_layers,
        max_len=dataset.L_h + dataset.L_f,
    )
    model = NoiseEstimator(est_config)

    train_tensors = prepare_split(dataset, "train", vocab, config.text_width, normalizer)
    has_val = bool(dataset.splits.get("val"))
    val_tensors = (
        prepare_split(dataset, "val", vocab, config.text_width, normalizer)
        if has_val
        else None
    )

    optimizer = torch.optim.Adam(model.parameters(), lr=config.lr)
    generator = torch.Generator().manual_seed(config.seed)
    cadence = config.checkpoint_every or max(1, config.epochs // 10)
    log_path = out_dir / "train.log.jsonl"
    best_val = float("inf")
    last = {"L_F": float("nan"), "L_A": float("nan")}

    def bundle(state: dict) -> ForecasterBundle:
        return ForecasterBundle(
            model=model, vocab=vocab, sched=sched, normalizer=normalizer, training_state=state
        )

    with log_path.open("w") as log:
        for epoch in range(1, config.epochs + 1):
            tic = time.perf_counter()
            model.train()
            loss_f, loss_a = _epoch_losses(
                model, train_tensors, sched, config, generator, optimizer
            )
            total = config.lambda_forecast * loss_f + config.lambda_attribution * loss_a
            last = {"L_F": loss_f, "L_A": loss_a}
            wall_ms = (time.perf_counter() - tic) * 1000.0
            log.write(
                json.dumps(
                    {
                        "epoch": epoch,
                        "L_F": loss_f,
                        "L_A": loss_a,
                        "total": total,
                        "wall_ms": round(wall_ms, 3),
                    }
                )
                + "\n"
            )
            log.flush()

            if val_tensors is not None:
                model.eval()
                val_gen = torch.Generator().manual_seed(config.seed + 100_000 + epoch)
                with torch.no_grad():
                    vf, va = _epoch_losses(model, val_tensors, sched, config, val_gen, None)
                val_total = config.lambda_forecast * vf + config.lambda_attribution * va
                if val_total < best_val:
                    best_val = val_total
                    bundle({"epoch": epoch, "val_total": val_total}).save(
                        out_dir / "model-best.ckpt"
                    )
            if epoch % cadence == 0 and epoch != config.epochs:
                bundle({"epoch": epoch, "train_total": total}).save(
                    out_dir / f"model-epoch{epoch:04d}.ckpt"
                )

    final_state = {
        "epoch": config.epochs,
        "train_forecast": last["L_F"],
        "train_attribution": last["L_A"],
        "best_val_total": None if best_val == float("inf") else best_val,
        "config": config.to_json(),
    }
    final = bundle(final_state)
    final_path = out_dir / "model-final.ckpt"
    final.save(final_path)
    model.eval()
    return final, final_path
