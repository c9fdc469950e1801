"""Losses, masked batches, and the training loop."""

import json
from types import SimpleNamespace

import numpy as np
import pytest
import torch
import torch.nn as nn

from whatifts.data_model import fit_normalizer
from whatifts.errors import DataError
from whatifts.schedule import make_schedule
from whatifts.synthgen import generate_dataset
from whatifts.training import (
    TrainConfig,
    attribution_loss,
    forecast_loss,
    make_masked_batch,
    prepare_split,
    train,
)

SCHED = make_schedule(T=10, steps=10)


class StubModel(nn.Module):
    def __init__(self, fn):
        super().__init__()
        self.fn = fn
        self._anchor = nn.Parameter(torch.zeros(1))

    def forward(self, x, ids, t):
        return self.fn(x, ids, t)


def fixed_batch(B=3, L_h=8, L_f=8, t_value=4):
    gen = torch.Generator().manual_seed(0)
    histories = torch.randn(B, L_h, generator=gen)
    futures = torch.randn(B, L_f, generator=gen)
    ids = torch.zeros(B, 4, dtype=torch.long)
    t = torch.full((B,), t_value, dtype=torch.long)
    eps = torch.randn(B, L_f, generator=gen)
    return make_masked_batch(histories, futures, ids, SCHED, t=t, eps_future=eps), histories, futures


def test_masked_batch_layout():
    batch, histories, futures = fixed_batch()
    assert torch.equal(batch.x[:, :8], histories)  # history span stays clean
    assert torch.equal(batch.eps[:, :8], torch.zeros(3, 8))
    assert batch.mask.tolist() == [False] * 8 + [True] * 8
    a = SCHED.alpha_bar(4)
    expected = np.sqrt(a) * futures.numpy() + np.sqrt(1 - a) * batch.eps[:, 8:].numpy()
    assert np.allclose(batch.x[:, 8:].numpy(), expected, atol=1e-6)


def test_forecast_loss_ignores_history_errors():
    """Wrong by 1.0 on every history position, exact on the future: loss 0."""
    batch, *_ = fixed_batch()

    def wrong_on_history(x, ids, t):
        out = batch.eps.clone()
        out[:, :8] += 1.0
        return out

    loss = forecast_loss(StubModel(wrong_on_history), batch)
    assert float(loss) == pytest.approx(0.0, abs=1e-12)


def test_forecast_loss_uniform_error():
    """Uniform error of 0.1 on supervised positions gives exactly 0.01."""
    batch, *_ = fixed_batch()
    model = StubModel(lambda x, ids, t: batch.eps + 0.1)
    assert float(forecast_loss(model, batch)) == pytest.approx(0.01, abs=1e-6)


def test_forecast_loss_history_gradient_is_exactly_zero():
    """No gradient can flow from history positions of the estimate."""
    batch, *_ = fixed_batch()
    delta = torch.zeros(3, 16, requires_grad=True)
    model = StubModel(lambda x, ids, t: batch.eps + delta)
    loss = forecast_loss(model, batch)
    loss.backward()
    assert torch.equal(delta.grad[:, :8], torch.zeros(3, 8))
    assert delta.grad[:, 8:].abs().sum() == 0  # estimate was exact


def test_attribution_loss_perfect_estimator_is_zero():
    gen = torch.Generator().manual_seed(1)
    histories = torch.randn(4, 8, generator=gen)
    ids = torch.zeros(4, 4, dtype=torch.long)
    t = torch.full((4,), 6, dtype=torch.long)
    eps = torch.randn(4, 8, generator=gen)
    model = StubModel(lambda x, i, tt: eps)
    loss = attribution_loss(model, histories, ids, SCHED, t=t, eps=eps)
    assert float(loss) == pytest.approx(0.0, abs=1e-12)
    off = StubModel(lambda x, i, tt: eps + 0.2)
    loss_off = attribution_loss(off, histories, ids, SCHED, t=t, eps=eps)
    assert float(loss_off) == pytest.approx(0.04, abs=1e-6)


def toy_config(**kwargs) -> TrainConfig:
    # beta_end 0.2 keeps alpha_bar_T near zero at T=100 (same cumulative
    # noise as the classic 1000-step schedule), so every noise level occurs
    base = dict(
        epochs=3, batch_size=16, lr=1e-3, seed=0,
        T=100, beta_end=0.2, steps=10, patch_len=4, d_model=16, n_blocks=1,
        n_heads=2, text_width=16, text_layers=1,
    )
    base.update(kwargs)
    return TrainConfig(**base)


def test_train_writes_log_and_checkpoints(tmp_path):
    dataset = generate_dataset(n=24, L_h=16, L_f=16, seed=0)
    bundle, path = train(dataset, toy_config(), tmp_path)
    assert path.is_file()
    assert (tmp_path / "model-best.ckpt").is_file()
    lines = [json.loads(l) for l in (tmp_path / "train.log.jsonl").read_text().splitlines()]
    assert len(lines) == 3
    for row in lines:
        assert set(row) == {"epoch", "L_F", "L_A", "total", "wall_ms"}
        assert np.isfinite(row["total"])
    assert bundle.normalizer is not None
    assert bundle.training_state["epoch"] == 3


def test_train_deterministic_under_seed(tmp_path):
    dataset = generate_dataset(n=24, L_h=16, L_f=16, seed=1)
    train(dataset, toy_config(), tmp_path / "a")
    train(dataset, toy_config(), tmp_path / "b")
    last_a = json.loads((tmp_path / "a" / "train.log.jsonl").read_text().splitlines()[-1])
    last_b = json.loads((tmp_path / "b" / "train.log.jsonl").read_text().splitlines()[-1])
    assert last_a["total"] == pytest.approx(last_b["total"], rel=1e-4)
    different = toy_config(seed=9)
    train(dataset, different, tmp_path / "c")
    last_c = json.loads((tmp_path / "c" / "train.log.jsonl").read_text().splitlines()[-1])
    assert last_a["total"] != last_c["total"]


def test_train_loss_halves_on_toy_run(tmp_path):
    """200 samples, 30 epochs: final total under half the initial total."""
    dataset = generate_dataset(n=200, L_h=16, L_f=16, seed=2)
    config = toy_config(epochs=30, batch_size=64, d_model=32, n_blocks=2)
    train(dataset, config, tmp_path)
    rows = [json.loads(l) for l in (tmp_path / "train.log.jsonl").read_text().splitlines()]
    assert rows[-1]["total"] < 0.5 * rows[0]["total"]


def test_train_rejects_indivisible_lengths(tmp_path):
    dataset = generate_dataset(n=24, L_h=18, L_f=18, seed=0)
    with pytest.raises(DataError, match="divisible"):
        train(dataset, toy_config(), tmp_path)


def test_prepare_split_counterfactual_guard():
    dataset = generate_dataset(n=24, L_h=16, L_f=16, seed=0)
    vocab_norm = fit_normalizer(dataset, "train")
    from whatifts.textproc import build_vocab

    vocab = build_vocab([s.history_text for s in dataset.split("train")])
    h, f, hi, fi = prepare_split(dataset, "train", vocab, 16, vocab_norm)
    assert h.shape[1] == 16 and f.shape[1] == 16
    assert hi.shape == (h.shape[0], 16)
    # normalized train data has near-zero mean
    both = torch.cat([h, f], dim=1)
    assert abs(float(both.mean())) < 1e-5
