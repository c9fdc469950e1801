"""Counterfactual dataset construction and consistency-driven finetuning.

Construction: for each sample, draw M candidate future conditions from its
split's pool (the sample's own future text excluded by string equality) and
keep the candidate whose text embedding is most similar to the history
text's embedding under the consistency model's text encoder. The result is
a dataset of (history, history_text, chosen condition) records with no
ground-truth future.

Finetuning interleaves factual batches (the usual forecast + attribution
losses) with counterfactual batches 1:1. A counterfactual batch samples a
Gaussian terminal state, denoises it without gradients down to a sampled
grid step t, then takes one gradient-tracked estimator call whose implied
clean future is scored by the frozen consistency encoders:

    loss = -mean(lambda_i * <I(history), I(future^)> +
                 lambda_e * <E(future^), T(condition)>)

Only the forecaster's parameters receive gradients.
"""

from __future__ import annotations

import json
import time
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Iterator

import numpy as np
import torch

from .checkpoint import ForecasterBundle, checkpoint_id
from .data_model import Dataset, SampleTuple
from .dttc import DttcBundle, dttc_scores
from .errors import DataError
from .inference import denoise_anchored
from .schedule import NoiseSchedule, x0_estimate
from .textproc import tokenize_batch
from .training import (
    TrainConfig,
    attribution_loss,
    forecast_loss,
    make_masked_batch,
    prepare_split,
)

__all__ = [
    "CfConfig",
    "CandidateChoice",
    "candidate_choices",
    "construct_counterfactual",
    "counterfactual_loss",
    "finetune",
]


@dataclass(frozen=True)
class CfConfig:
    """Finetuning settings; intrinsic:extrinsic weights default to 5:1."""

    epochs: int = 200
    batch_size: int = 256
    lr: float = 1e-4
    lambda_intrinsic: float = 5.0
    lambda_extrinsic: float = 1.0
    num_candidates: int = 10
    seed: int = 0

    def to_json(self) -> dict:
        return {k: getattr(self, k) for k in self.__dataclass_fields__}

    @classmethod
    def from_json(cls, obj: dict) -> "CfConfig":
        unknown = set(obj) - set(cls.__dataclass_fields__)
        if unknown:
            raise ValueError(f"unknown config fields {sorted(unknown)}")
        return cls(**obj)

    def with_overrides(self, **kwargs) -> "CfConfig":
        kwargs = {k: v for k, v in kwargs.items() if v is not None}
        return replace(self, **kwargs)


@dataclass(frozen=True)
class CandidateChoice:
    """Audit record of one counterfactual selection."""

    sample_id: str
    candidate_texts: tuple[str, ...]
    similarities: tuple[float, ...]
    chosen: int  # index into candidate_texts


def _text_embeddings(bundle: DttcBundle, texts: list[str]) -> torch.Tensor:
    ids = tokenize_batch(texts, bundle.vocab, bundle.model.config.text_width)
    with torch.no_grad():
        return bundle.model.encode_condition(ids)


def candidate_choices(
    dataset: Dataset,
    dttc: DttcBundle,
    split: str,
    num_candidates: int = 10,
    seed: int = 0,
) -> Iterator[CandidateChoice]:
    """Deterministic per-split candidate draws and argmax selections.

    Yields one audit record per sample in split order; ties resolve to the
    lowest candidate index (numpy argmax picks the first maximum).
    """
    samples = dataset.split(split)
    pool = [s.future_text for s in samples]
    unique_texts = sorted(set(pool) | {s.history_text for s in samples})
    text_index = {t: i for i, t in enumerate(unique_texts)}
    emb = _text_embeddings(dttc, unique_texts).numpy()

    rng = np.random.default_rng(seed)
    for sample in samples:
        eligible = [j for j, text in enumerate(pool) if text != sample.future_text]
        if len(eligible) < num_candidates:
            raise DataError(
                f"{split!r} pool has {len(eligible)} eligible conditions for "
                f"{sample.sample_id}, need {num_candidates}"
            )
        draw = rng.choice(len(eligible), size=num_candidates, replace=False)
        candidates = tuple(pool[eligible[d]] for d in draw)
        h_vec = emb[text_index[sample.history_text]]
        sims = tuple(
            float(h_vec @ emb[text_index[text]]) for text in candidates
        )
        yield CandidateChoice(
            sample_id=sample.sample_id,
            candidate_texts=candidates,
            similarities=sims,
            chosen=int(np.argmax(sims)),
        )


def construct_counterfactual(
    dataset: Dataset,
    dttc: DttcBundle,
    num_candidates: int = 10,
    seed: int = 0,
    name: str | None = None,
) -> Dataset:
    """Build the counterfactual companion dataset (futures absent)."""
    if dataset.kind != "factual":
        raise DataError("counterfactual construction needs a factual dataset")
    splits: dict[str, list[SampleTuple]] = {}
    for split, samples in dataset.splits.items():
        chosen_texts = {
            choice.sample_id: choice.candidate_texts[choice.chosen]
            for choice in candidate_choices(dataset, dttc, split, num_candidates, seed)
        }
        splits[split] = [
            SampleTuple(
                sample_id=s.sample_id,
                channel_id=s.channel_id,
                history=s.history,
                history_text=s.history_text,
                future=None,
                future_text=chosen_texts[s.sample_id],
            )
            for s in samples
        ]
    return Dataset(
        name=name or f"{dataset.name}-cf",
        L_h=dataset.L_h,
        L_f=dataset.L_f,
        kind="counterfactual",
        splits=splits,
        normalizer=dataset.normalizer,
    )


def counterfactual_loss(
    model: torch.nn.Module,
    dttc_model: torch.nn.Module,
    sched: NoiseSchedule,
    histories: torch.Tensor,
    cond_ids: torch.Tensor,
    dttc_cond_ids: torch.Tensor,
    t: int,
    horizon: int,
    generator: torch.Generator | None = None,
    state_t: torch.Tensor | None = None,
    lambda_intrinsic: float = 5.0,
    lambda_extrinsic: float = 1.0,
) -> torch.Tensor:
    """Consistency loss at grid step t with gradients through one call.

    The trajectory from T down to t is treated as a constant; pass
    ``state_t`` to supply it directly (it must have clean history in the
    first span). The consistency encoders stay frozen.
    """
    L_h = histories.shape[1]
    if state_t is None:
        init = torch.randn(
            histories.shape[0], horizon, generator=generator, dtype=histories.dtype
        )
        state_t = denoise_anchored(model, sched, histories, init, cond_ids, stop_at=t)
    state = state_t.detach().clone()
    state[:, :L_h] = histories

    eps_hat = model(state, cond_ids, t)
    x0_hat = x0_estimate(state, eps_hat, t, sched)
    future_hat = x0_hat[:, L_h:]

    dttc_model.requires_grad_(False)
    with torch.no_grad():
        intrinsic_h, _ = dttc_model.encode_series(histories)
        text_vec = dttc_model.encode_condition(dttc_cond_ids)
    intrinsic_f, extrinsic_f = dttc_model.encode_series(future_hat)
    score = lambda_intrinsic * (intrinsic_f * intrinsic_h).sum(dim=1)
    score = score + lambda_extrinsic * (extrinsic_f * text_vec).sum(dim=1)
    return -score.mean()


def finetune(
    factual: Dataset,
    counterfactual: Dataset,
    bundle: ForecasterBundle,
    dttc: DttcBundle,
    config: CfConfig,
    out_dir: str | Path,
    parent_id: str | None = None,
) -> tuple[ForecasterBundle, Path]:
    """Interleave factual and counterfactual batches 1:1 over the train split."""
    if counterfactual.kind != "counterfactual":
        raise DataError("second dataset must be counterfactual")
    if (factual.L_h, factual.L_f) != (counterfactual.L_h, counterfactual.L_f):
        raise DataError("factual and counterfactual window lengths differ")
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    torch.manual_seed(config.seed)

    model, vocab, sched = bundle.model, bundle.vocab, bundle.sched
    width = model.config.text_width
    normalizer = bundle.normalizer
    fact = prepare_split(factual, "train", vocab, width, normalizer)
    cf_hist, _, _, cf_fut_ids = prepare_split(
        counterfactual, "train", vocab, width, normalizer, require_futures=False
    )
    cf_texts = [s.future_text for s in counterfactual.split("train")]
    cf_dttc_ids = tokenize_batch(cf_texts, dttc.vocab, dttc.model.config.text_width)

    # the consistency model is a frozen scorer during finetuning
    dttc.model.eval()
    dttc.model.requires_grad_(False)
    optimizer = torch.optim.Adam(model.parameters(), lr=config.lr)
    generator = torch.Generator().manual_seed(config.seed)
    grid_upper = [t for t in sched.inference_grid if t > 0]
    train_cfg = TrainConfig(
        epochs=1,
        batch_size=config.batch_size,
        lambda_forecast=2.0,
        lambda_attribution=1.0,
    )
    histories, futures, hist_ids, fut_ids = fact
    N_fact, N_cf = histories.shape[0], cf_hist.shape[0]
    last = {"L_fact": float("nan"), "L_dttc": float("nan")}

    with (out_dir / "finetune.log.jsonl").open("w") as log:
        for epoch in range(1, config.epochs + 1):
            tic = time.perf_counter()
            model.train()
            fact_order = torch.randperm(N_fact, generator=generator)
            cf_order = torch.randperm(N_cf, generator=generator)
            n_steps = max(
                (N_fact + config.batch_size - 1) // config.batch_size,
                (N_cf + config.batch_size - 1) // config.batch_size,
            )
            sum_fact, sum_cf = 0.0, 0.0
            for step in range(n_steps):
                lo = (step * config.batch_size) % N_fact
                idx = fact_order[lo : lo + config.batch_size]
                batch = make_masked_batch(
                    histories[idx], futures[idx], fut_ids[idx], sched, generator
                )
                loss_fact = train_cfg.lambda_forecast * forecast_loss(model, batch)
                loss_fact = loss_fact + train_cfg.lambda_attribution * attribution_loss(
                    model, histories[idx], hist_ids[idx], sched, generator
                )
                optimizer.zero_grad()
                loss_fact.backward()
                optimizer.step()

                lo = (step * config.batch_size) % N_cf
                cidx = cf_order[lo : lo + config.batch_size]
                t = grid_upper[
                    int(torch.randint(len(grid_upper), (1,), generator=generator))
                ]
                loss_cf = counterfactual_loss(
                    model,
                    dttc.model,
                    sched,
                    cf_hist[cidx],
                    cf_fut_ids[cidx],
                    cf_dttc_ids[cidx],
                    t,
                    horizon=counterfactual.L_f,
                    generator=generator,
                    lambda_intrinsic=config.lambda_intrinsic,
                    lambda_extrinsic=config.lambda_extrinsic,
                )
                optimizer.zero_grad()
                loss_cf.backward()
                optimizer.step()
                sum_fact += float(loss_fact.detach())
                sum_cf += float(loss_cf.detach())
            last = {"L_fact": sum_fact / n_steps, "L_dttc": sum_cf / n_steps}
            log.write(
                json.dumps(
                    {
                        "epoch": epoch,
                        "L_fact": last["L_fact"],
                        "L_dttc": last["L_dttc"],
                        "wall_ms": round((time.perf_counter() - tic) * 1000.0, 3),
                    }
                )
                + "\n"
            )
            log.flush()

    model.eval()
    tuned = ForecasterBundle(
        model=model,
        vocab=vocab,
        sched=sched,
        normalizer=normalizer,
        training_state={
            "finetune_epochs": config.epochs,
            **last,
            "config": config.to_json(),
        },
        parent=parent_id,
    )
    path = out_dir / "model-finetuned.ckpt"
    tuned.save(path)
    return tuned, path
