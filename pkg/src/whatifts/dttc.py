"""Dual-encoder consistency metric for text-conditioned forecasts.

A series encoder (patch transformer backbone) produces two projections per
window: an intrinsic vector meant to match across a sample's history and
future, and an extrinsic vector meant to match the window's text condition
(embedded by a separate text encoder into the same space).

Training is in-batch contrastive with a learnable temperature; scoring uses
raw unnormalized inner products:

* intrinsic score: mean_i <I(future_i), I(history_i)>
* extrinsic score: mean_i <E(future_i), T(condition_i)>

The module also provides the independence probe: a fresh two-tower aligner
trained from scratch to retrieve a window's text, used to check how much
caption information survives in attributed terminal states.
"""

from __future__ import annotations

import json
import math
import time
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

from .checkpoint import (
    _normalizer_from_meta,
    _normalizer_meta,
    load_archive,
    save_archive,
    state_to_tensors,
    tensors_to_state,
)
from .data_model import Dataset, Normalizer, fit_normalizer
from .errors import CheckpointError, DataError
from .textproc import TextEncoder, Vocab, build_vocab, tokenize_batch
from .training import prepare_split

__all__ = [
    "DttcConfig",
    "SeriesEncoder",
    "DttcModel",
    "DttcBundle",
    "contrastive_losses",
    "dttc_scores",
    "train_dttc",
    "retrieval_eval",
    "independence_probe",
]


@dataclass(frozen=True)
class DttcConfig:
    vocab_size: int
    patch_len: int = 8
    d_model: int = 64
    out_dim: int = 64
    n_layers: int = 2
    n_heads: int = 4
    text_width: int = 64
    text_layers: int = 2
    max_len: int = 128
    temperature_init: float = 0.07

    def __post_init__(self) -> None:
        if self.max_len % self.patch_len != 0:
            raise ValueError("max_len must be divisible by patch_len")
        if not 0 < self.temperature_init < 1:
            raise ValueError("temperature_init must lie in (0, 1)")

    def to_json(self) -> dict:
        return {k: getattr(self, k) for k in self.__dataclass_fields__}

    @classmethod
    def from_json(cls, obj: dict) -> "DttcConfig":
        obj = dict(obj)
        obj["temperature_init"] = float(obj.get("temperature_init", 0.07))
        for key in set(obj) - {"temperature_init"}:
            obj[key] = int(obj[key])
        return cls(**obj)


class SeriesEncoder(nn.Module):
    """Patch transformer backbone with intrinsic and extrinsic heads."""

    def __init__(self, config: DttcConfig):
        super().__init__()
        d = config.d_model
        self.patch_len = config.patch_len
        self.patch_embed = nn.Linear(config.patch_len, d)
        self.pos_emb = nn.Parameter(torch.zeros(config.max_len // config.patch_len, d))
        nn.init.normal_(self.pos_emb, std=0.02)
        self.layers = nn.ModuleList(
            nn.TransformerEncoderLayer(
                d,
                config.n_heads,
                dim_feedforward=4 * d,
                dropout=0.0,
                activation="gelu",
                batch_first=True,
                norm_first=True,
            )
            for _ in range(config.n_layers)
        )
        self.norm = nn.LayerNorm(d)
        self.head_intrinsic = nn.Linear(d, config.out_dim)
        self.head_extrinsic = nn.Linear(d, config.out_dim)

    def forward(self, x: torch.Tensor) -> tuple[torch.Tensor, torch.Tensor]:
        B, L = x.shape
        if L % self.patch_len != 0:
            raise ValueError(f"length {L} not divisible by patch length {self.patch_len}")
        n = L // self.patch_len
        if n > self.pos_emb.shape[0]:
            raise ValueError(f"length {L} exceeds configured maximum")
        h = self.patch_embed(x.reshape(B, n, self.patch_len)) + self.pos_emb[:n]
        for layer in self.layers:
            h = layer(h)
        pooled = self.norm(h).mean(dim=1)  # (B, D)
        return self.head_intrinsic(pooled), self.head_extrinsic(pooled)


class DttcModel(nn.Module):
    """Series encoder + text encoder + learnable contrastive temperature."""

    def __init__(self, config: DttcConfig):
        super().__init__()
        self.config = config
        self.series_encoder = SeriesEncoder(config)
        self.text_encoder = TextEncoder(
            vocab_size=config.vocab_size,
            width=config.text_width,
            d_model=config.d_model,
            out_dim=config.out_dim,
            n_layers=config.text_layers,
            n_heads=config.n_heads,
        )
        self.log_temperature = nn.Parameter(
            torch.tensor(math.log(config.temperature_init))
        )

    def encode_series(self, x: torch.Tensor) -> tuple[torch.Tensor, torch.Tensor]:
        return self.series_encoder(x)

    def encode_condition(self, ids: torch.Tensor) -> torch.Tensor:
        return self.text_encoder(ids)

    @property
    def temperature(self) -> torch.Tensor:
        return self.log_temperature.exp()


def contrastive_losses(
    model: DttcModel,
    x_h: torch.Tensor,
    x_f: torch.Tensor,
    ids_h: torch.Tensor,
    ids_f: torch.Tensor,
) -> tuple[torch.Tensor, torch.Tensor]:
    """In-batch losses: intrinsic history-future alignment and the mean of
    the two extrinsic window-text alignments."""
    I_h, E_h = model.encode_series(x_h)
    I_f, E_f = model.encode_series(x_f)
    T_h = model.encode_condition(ids_h)
    T_f = model.encode_condition(ids_f)
    tau = model.temperature
    target = torch.arange(x_h.shape[0], device=x_h.device)
    loss_intrinsic = F.cross_entropy(I_h @ I_f.T / tau, target)
    loss_extrinsic = 0.5 * (
        F.cross_entropy(E_h @ T_h.T / tau, target)
        + F.cross_entropy(E_f @ T_f.T / tau, target)
    )
    return loss_intrinsic, loss_extrinsic


def dttc_scores(
    model: DttcModel,
    histories: torch.Tensor,
    forecasts: torch.Tensor,
    condition_ids: torch.Tensor,
) -> tuple[torch.Tensor, torch.Tensor]:
    """Per-sample raw inner-product scores (intrinsic, extrinsic)."""
    with torch.no_grad():
        I_h, _ = model.encode_series(histories)
        I_f, E_f = model.encode_series(forecasts)
        T_f = model.encode_condition(condition_ids)
    return (I_f * I_h).sum(dim=1), (E_f * T_f).sum(dim=1)


@dataclass
class DttcBundle:
    """A consistency model plus its vocabulary and data normalizer."""

    model: DttcModel
    vocab: Vocab
    normalizer: Normalizer | None = None
    training_state: dict = field(default_factory=dict)

    def save(self, path: str | Path) -> str:
        meta = {
            "kind": "dttc",
            "config": self.model.config.to_json(),
            "vocab": self.vocab.to_json(),
            "normalizer": _normalizer_meta(self.normalizer),
            "training_state": self.training_state,
        }
        return save_archive(path, meta, state_to_tensors(self.model))

    @classmethod
    def load(cls, path: str | Path) -> "DttcBundle":
        meta, tensors = load_archive(path)
        if meta.get("kind") != "dttc":
            raise CheckpointError(f"expected a dttc checkpoint, got kind {meta.get('kind')!r}")
        try:
            model = DttcModel(DttcConfig.from_json(meta["config"]))
            tensors_to_state(model, tensors)
            bundle = cls(
                model=model,
                vocab=Vocab.from_json(meta["vocab"]),
                normalizer=_normalizer_from_meta(meta.get("normalizer")),
                training_state=meta.get("training_state", {}),
            )
        except (KeyError, RuntimeError, TypeError) as exc:
            raise CheckpointError(f"incompatible dttc checkpoint: {exc}") from exc
        bundle.model.eval()
        return bundle

    def score_texts(
        self, histories: torch.Tensor, forecasts: torch.Tensor, texts: list[str]
    ) -> tuple[torch.Tensor, torch.Tensor]:
        ids = tokenize_batch(texts, self.vocab, self.model.config.text_width)
        return dttc_scores(self.model, histories, forecasts, ids)


@dataclass(frozen=True)
class DttcTrainConfig:
    epochs: int = 100
    batch_size: int = 128
    lr: float = 1e-3
    seed: int = 0
    patch_len: int = 8
    d_model: int = 64
    out_dim: int = 64
    n_layers: int = 2
    n_heads: int = 4
    text_width: int = 64
    text_layers: int = 2
    min_freq: int = 1
    temperature_init: float = 0.07

    def to_json(self) -> dict:
        return {k: getattr(self, k) for k in self.__dataclass_fields__}

    @classmethod
    def from_json(cls, obj: dict) -> "DttcTrainConfig":
        unknown = set(obj) - set(cls.__dataclass_fields__)
        if unknown:
            raise ValueError(f"unknown config fields {sorted(unknown)}")
        return cls(**obj)

    def with_overrides(self, **kwargs) -> "DttcTrainConfig":
        kwargs = {k: v for k, v in kwargs.items() if v is not None}
        return replace(self, **kwargs)


def train_dttc(
    dataset: Dataset,
    config: DttcTrainConfig,
    out_dir: str | Path,
) -> tuple[DttcBundle, Path]:
    """Contrastive training on a factual dataset; writes a log and checkpoint."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    torch.manual_seed(config.seed)

    corpus = [s.history_text for s in dataset.split("train")]
    corpus += [s.future_text for s in dataset.split("train")]
    vocab = build_vocab(corpus, min_freq=config.min_freq)
    normalizer = fit_normalizer(dataset, "train")
    model_config = DttcConfig(
        vocab_size=len(vocab),
        patch_len=config.patch_len,
        d_model=config.d_model,
        out_dim=config.out_dim,
        n_layers=config.n_layers,
        n_heads=config.n_heads,
        text_width=config.text_width,
        text_layers=config.text_layers,
        max_len=max(dataset.L_h, dataset.L_f),
        temperature_init=config.temperature_init,
    )
    model = DttcModel(model_config)
    histories, futures, hist_ids, fut_ids = prepare_split(
        dataset, "train", vocab, config.text_width, normalizer
    )

    optimizer = torch.optim.Adam(model.parameters(), lr=config.lr)
    generator = torch.Generator().manual_seed(config.seed)
    N = histories.shape[0]
    last = {"L_I": float("nan"), "L_E": float("nan")}
    with (out_dir / "dttc.log.jsonl").open("w") as log:
        for epoch in range(1, config.epochs + 1):
            tic = time.perf_counter()
            model.train()
            order = torch.randperm(N, generator=generator)
            sum_i, sum_e, n_batches = 0.0, 0.0, 0
            for start in range(0, N, config.batch_size):
                idx = order[start : start + config.batch_size]
                if len(idx) < 2:
                    continue  # a contrastive batch needs at least one negative
                loss_i, loss_e = contrastive_losses(
                    model, histories[idx], futures[idx], hist_ids[idx], fut_ids[idx]
                )
                loss = loss_i + loss_e
                optimizer.zero_grad()
                loss.backward()
                optimizer.step()
                sum_i += float(loss_i.detach())
                sum_e += float(loss_e.detach())
                n_batches += 1
            last = {"L_I": sum_i / n_batches, "L_E": sum_e / n_batches}
            log.write(
                json.dumps(
                    {
                        "epoch": epoch,
                        "L_I": last["L_I"],
                        "L_E": last["L_E"],
                        "total": last["L_I"] + last["L_E"],
                        "wall_ms": round((time.perf_counter() - tic) * 1000.0, 3),
                    }
                )
                + "\n"
            )
            log.flush()

    model.eval()
    bundle = DttcBundle(
        model=model,
        vocab=vocab,
        normalizer=normalizer,
        training_state={"epoch": config.epochs, **last, "config": config.to_json()},
    )
    path = out_dir / "dttc-final.ckpt"
    bundle.save(path)
    return bundle, path


def _retrieval_accuracy(
    queries: torch.Tensor, keys: torch.Tensor, k: int, rng: np.random.Generator
) -> float:
    """k-way retrieval: each query must pick its own key from k candidates.
    A tie with any distractor counts as an error."""
    N = queries.shape[0]
    if N < k:
        raise DataError(f"need at least {k} samples for {k}-way retrieval, got {N}")
    scores_all = (queries @ keys.T).numpy()
    correct = 0
    for i in range(N):
        others = [j for j in range(N) if j != i]
        distract = rng.choice(len(others), size=k - 1, replace=False)
        candidates = [i] + [others[d] for d in distract]
        scores = scores_all[i, candidates]
        best = scores.max()
        winners = np.flatnonzero(scores == best)
        if len(winners) == 1 and winners[0] == 0:
            correct += 1
    return 100.0 * correct / N


def retrieval_eval(
    bundle: DttcBundle,
    dataset: Dataset,
    split: str = "test",
    k: int = 3,
    seed: int = 0,
) -> dict:
    """k-way retrieval accuracies: history from future (intrinsic) and
    condition from future (extrinsic). Percent in [0, 100]."""
    model = bundle.model
    histories, futures, _, fut_ids = prepare_split(
        dataset, split, bundle.vocab, model.config.text_width, bundle.normalizer
    )
    with torch.no_grad():
        I_h, _ = model.encode_series(histories)
        I_f, E_f = model.encode_series(futures)
        T_f = model.encode_condition(fut_ids)
    rng = np.random.default_rng(seed)
    acc_i = _retrieval_accuracy(I_f, I_h, k, rng)
    acc_e = _retrieval_accuracy(E_f, T_f, k, rng)
    return {"intrinsic_acc": acc_i, "extrinsic_acc": acc_e, "k": k, "n": len(histories)}


class _ProbeModel(nn.Module):
    """Small two-tower aligner used by the independence probe."""

    def __init__(self, config: DttcConfig):
        super().__init__()
        self.series = SeriesEncoder(config)
        self.text = TextEncoder(
            vocab_size=config.vocab_size,
            width=config.text_width,
            d_model=config.d_model,
            out_dim=config.out_dim,
            n_layers=config.text_layers,
            n_heads=config.n_heads,
        )
        self.log_temperature = nn.Parameter(torch.tensor(math.log(0.07)))

    def embed(self, x: torch.Tensor, ids: torch.Tensor):
        s, _ = self.series(x)
        return s, self.text(ids)


def independence_probe(
    series: np.ndarray,
    texts: list[str],
    k: int = 3,
    seed: int = 0,
    epochs: int = 50,
    batch_size: int = 128,
    d_model: int = 32,
    patch_len: int = 8,
) -> float:
    """Train a fresh aligner between windows and texts, then report k-way
    text-retrieval accuracy (percent) on a held-out 20% portion.

    Chance level is 100 / k. Series are standardized internally so the probe
    only measures recoverable structure, not scale.
    """
    series = np.asarray(series, dtype=np.float64)
    N, L = series.shape
    if N < 25:
        raise DataError(f"probe needs at least 25 pairs, got {N}")
    torch.manual_seed(seed)
    rng = np.random.default_rng(seed)
    order = rng.permutation(N)
    n_train = int(round(0.8 * N))
    train_idx, held_idx = order[:n_train], order[n_train:]

    mean = series[train_idx].mean()
    std = max(series[train_idx].std(), 1e-6)
    x = torch.from_numpy((series - mean) / std).float()

    width = max(len(t.split()) for t in texts) + 8
    vocab = build_vocab([texts[i] for i in train_idx])
    ids = tokenize_batch(texts, vocab, width)

    pad = (-L) % patch_len  # right-pad so any window length patchifies
    if pad:
        x = torch.cat([x, torch.zeros(N, pad)], dim=1)
    config = DttcConfig(
        vocab_size=len(vocab),
        patch_len=patch_len,
        d_model=d_model,
        out_dim=d_model,
        n_layers=2,
        n_heads=4,
        text_width=width,
        text_layers=2,
        max_len=L + pad,
    )
    probe = _ProbeModel(config)
    optimizer = torch.optim.Adam(probe.parameters(), lr=1e-3)
    generator = torch.Generator().manual_seed(seed)
    target_of = lambda n: torch.arange(n)

    probe.train()
    for _ in range(epochs):
        order_t = torch.randperm(len(train_idx), generator=generator)
        for start in range(0, len(train_idx), batch_size):
            idx = torch.from_numpy(train_idx[order_t[start : start + batch_size].numpy()])
            if len(idx) < 2:
                continue
            s_emb, t_emb = probe.embed(x[idx], ids[idx])
            logits = s_emb @ t_emb.T / probe.log_temperature.exp()
            target = target_of(len(idx))
            loss = 0.5 * (F.cross_entropy(logits, target) + F.cross_entropy(logits.T, target))
            optimizer.zero_grad()
            loss.backward()
            optimizer.step()

    probe.eval()
    held = torch.from_numpy(held_idx)
    with torch.no_grad():
        s_emb, t_emb = probe.embed(x[held], ids[held])
    return _retrieval_accuracy(s_emb, t_emb, k, np.random.default_rng(seed + 1))
