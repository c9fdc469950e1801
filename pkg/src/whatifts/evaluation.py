"""Test-split evaluation and report generation.

Factual evaluation forecasts every test sample under its recorded future
condition and reports pointwise errors of the median forecast (normalized
and raw units) plus mean consistency scores. Counterfactual evaluation has
no ground-truth futures, so error keys are omitted entirely and only the
consistency scores remain.
"""

from __future__ import annotations

import json
import time
from pathlib import Path
from typing import Callable

import numpy as np
import torch

from .checkpoint import ForecasterBundle
from .data_model import Dataset, apply_normalizer, fit_normalizer
from .dttc import DttcBundle, dttc_scores
from .errors import DataError
from .inference import attribute, forecast_batch
from .textproc import tokenize_batch

__all__ = [
    "mae_mse",
    "persistence_forecast",
    "evaluate",
    "write_report",
    "export_initial_noise",
]


def mae_mse(pred: np.ndarray, truth: np.ndarray) -> tuple[float, float]:
    """Mean absolute and mean squared error over all elements."""
    pred = np.asarray(pred, dtype=np.float64)
    truth = np.asarray(truth, dtype=np.float64)
    if pred.shape != truth.shape:
        raise ValueError(f"shape mismatch {pred.shape} vs {truth.shape}")
    diff = pred - truth
    return float(np.abs(diff).mean()), float((diff**2).mean())


def persistence_forecast(histories: np.ndarray, horizon: int) -> np.ndarray:
    """Baseline: repeat the most recent history values out to the horizon."""
    histories = np.asarray(histories, dtype=np.float64)
    L_h = histories.shape[1]
    if horizon <= L_h:
        return histories[:, L_h - horizon :]
    reps = int(np.ceil(horizon / L_h))
    return np.tile(histories, (1, reps))[:, :horizon]


def evaluate(
    bundle: ForecasterBundle,
    dttc: DttcBundle,
    dataset: Dataset,
    setting: str = "factual",
    num_samples: int = 1,
    seed: int = 0,
    use_attribution: bool = True,
    steps: int | None = None,
    model_checkpoint: str | None = None,
    dttc_checkpoint: str | None = None,
    forecast_fn: Callable | None = None,
) -> dict:
    """Evaluate on the test split and return the report as a dict.

    ``forecast_fn(histories, history_texts, future_texts, num_samples, seed)``
    may replace the engine; it must return normalized forecasts shaped
    (num_samples, N, L_f). Used by tests to plug in oracle forecasters.
    """
    if setting not in ("factual", "counterfactual"):
        raise ValueError(f"unknown setting {setting!r}")
    samples = dataset.split("test")
    if not samples:
        raise DataError("test split is empty")
    if setting == "factual" and any(s.future is None for s in samples):
        raise DataError("factual evaluation needs ground-truth futures")
    if setting == "counterfactual" and dataset.kind != "counterfactual":
        raise DataError("counterfactual evaluation needs a counterfactual dataset")

    normalizer = bundle.normalizer or fit_normalizer(dataset, "train")
    tic = time.perf_counter()
    histories_raw = np.stack([s.history for s in samples])
    histories = torch.from_numpy(apply_normalizer(normalizer, histories_raw)).float()
    history_texts = [s.history_text for s in samples]
    future_texts = [s.future_text for s in samples]

    if forecast_fn is not None:
        forecasts = torch.as_tensor(
            forecast_fn(histories, history_texts, future_texts, num_samples, seed)
        ).float()
    else:
        _, forecasts, _ = forecast_batch(
            bundle.model,
            bundle.sched,
            bundle.vocab,
            histories,
            history_texts,
            future_texts,
            horizon=dataset.L_f,
            num_samples=num_samples,
            use_attribution=use_attribution,
            seed=seed,
            steps=steps,
        )

    dttc_ids = tokenize_batch(future_texts, dttc.vocab, dttc.model.config.text_width)
    score_i, score_e = [], []
    for k in range(forecasts.shape[0]):
        si, se = dttc_scores(dttc.model, histories, forecasts[k], dttc_ids)
        score_i.append(si)
        score_e.append(se)
    dttc_i = float(torch.stack(score_i).mean())
    dttc_e = float(torch.stack(score_e).mean())

    report = {
        "dataset": dataset.name,
        "split": "test",
        "setting": setting,
        "n": len(samples),
        "num_samples": num_samples,
        "use_attribution": use_attribution,
        "seed": seed,
        "dttc_i": dttc_i,
        "dttc_e": dttc_e,
        "model_checkpoint": model_checkpoint,
        "dttc_checkpoint": dttc_checkpoint,
    }
    if setting == "factual":
        point = forecasts.median(dim=0).values.numpy().astype(np.float64)
        truth = apply_normalizer(normalizer, np.stack([s.future for s in samples]))
        mae_n, mse_n = mae_mse(point, truth)
        point_raw = apply_normalizer(normalizer, point, inverse=True)
        truth_raw = np.stack([s.future for s in samples])
        mae_r, mse_r = mae_mse(point_raw, truth_raw)
        report["mae"] = {"normalized": mae_n, "raw": mae_r}
        report["mse"] = {"normalized": mse_n, "raw": mse_r}
    report["wall_ms"] = round((time.perf_counter() - tic) * 1000.0, 3)
    return report


def write_report(report: dict, path: str | Path) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(report, indent=2) + "\n")
    return path


def export_initial_noise(
    bundle: ForecasterBundle,
    dataset: Dataset,
    split: str,
    out_path: str | Path,
    seed: int = 0,
) -> Path:
    """Write per-sample attributed terminal states next to a fresh Gaussian
    control of the same shape, one JSON object per line."""
    samples = dataset.split(split)
    if not samples:
        raise DataError(f"split {split!r} is empty")
    normalizer = bundle.normalizer or fit_normalizer(dataset, "train")
    histories_raw = np.stack([s.history for s in samples])
    histories = torch.from_numpy(apply_normalizer(normalizer, histories_raw)).float()
    hist_ids = tokenize_batch(
        [s.history_text for s in samples], bundle.vocab, bundle.model.config.text_width
    )
    bundle.model.eval()
    attributed = attribute(bundle.model, bundle.sched, histories, hist_ids).numpy()
    control = torch.randn(
        histories.shape, generator=torch.Generator().manual_seed(seed)
    ).numpy()

    out_path = Path(out_path)
    out_path.parent.mkdir(parents=True, exist_ok=True)
    with out_path.open("w") as fh:
        for i, sample in enumerate(samples):
            fh.write(
                json.dumps(
                    {
                        "sample_id": sample.sample_id,
                        "attributed": [float(v) for v in attributed[i]],
                        "control": [float(v) for v in control[i]],
                    }
                )
                + "\n"
            )
    return out_path
