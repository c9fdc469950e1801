"""HTTP forecasting service.

Stateless JSON API over a loaded forecaster (and optionally a consistency
model plus a dataset of browsable windows):

* GET  /api/health    -> 503 until checkpoints finish loading, then status
* GET  /api/windows   -> test-split windows to pick from
* POST /api/forecast  -> what-if forecasts for a window or a raw history

Responses are deterministic per request body: the effective seed is a hash
of the canonical body, which already covers the optional client seed field.
Floats are serialized at float32 precision to bound payload size.
"""

from __future__ import annotations

import hashlib
import json
import threading
import time
import uuid
from contextlib import asynccontextmanager

import numpy as np
import torch
from fastapi import FastAPI, Request
from fastapi.middleware.cors import CORSMiddleware
from fastapi.responses import JSONResponse

from .checkpoint import ForecasterBundle, checkpoint_id
from .data_model import apply_normalizer, load_dataset
from .dttc import DttcBundle
from .inference import forecast_batch
from .textproc import tokenize_batch

__all__ = ["create_app"]

MAX_SAMPLES = 16


def _f32(value: float) -> float:
    """Shortest decimal that round-trips through float32."""
    return float(repr(np.float32(value)))


def _f32_list(values) -> list[float]:
    return [_f32(v) for v in np.asarray(values).ravel()]


def _request_seed(body: dict) -> int:
    canonical = json.dumps(body, sort_keys=True, separators=(",", ":"))
    digest = hashlib.sha256(canonical.encode()).digest()
    return int.from_bytes(digest[:8], "big") % (2**31)


def _bad_request(field: str, reason: str, status: int = 400) -> JSONResponse:
    return JSONResponse({"error": {"field": field, "reason": reason}}, status_code=status)


def create_app(
    ckpt_path: str,
    dttc_path: str | None = None,
    data_dir: str | None = None,
) -> FastAPI:
    state: dict = {"ready": False, "started": None}
    lock = threading.Lock()  # one forecast at a time; the model is shared

    @asynccontextmanager
    async def lifespan(app: FastAPI):
        state["bundle"] = ForecasterBundle.load(ckpt_path)
        state["checkpoint_id"] = checkpoint_id(ckpt_path)
        state["dttc"] = DttcBundle.load(dttc_path) if dttc_path else None
        state["dataset"] = load_dataset(data_dir) if data_dir else None
        state["started"] = time.monotonic()
        state["ready"] = True
        yield
        state["ready"] = False

    app = FastAPI(lifespan=lifespan)
    app.add_middleware(
        CORSMiddleware,
        allow_origins=["*"],
        allow_methods=["*"],
        allow_headers=["*"],
    )

    @app.exception_handler(Exception)
    async def unhandled(request: Request, exc: Exception) -> JSONResponse:
        error_id = uuid.uuid4().hex
        print(f"internal error {error_id}: {exc!r}")
        return JSONResponse({"error": {"id": error_id}}, status_code=500)

    @app.get("/api/health")
    async def health():
        if not state["ready"]:
            return JSONResponse({"status": "loading"}, status_code=503)
        dataset = state["dataset"]
        return {
            "status": "ok",
            "checkpoint_id": state["checkpoint_id"],
            "dataset": dataset.name if dataset else None,
            "uptime_s": round(time.monotonic() - state["started"], 3),
        }

    @app.get("/api/windows")
    async def windows(split: str = "test", limit: int = 50):
        if not state["ready"]:
            return JSONResponse({"status": "loading"}, status_code=503)
        dataset = state["dataset"]
        if dataset is None:
            return _bad_request("split", "no dataset is loaded")
        if split not in dataset.splits:
            return _bad_request("split", f"unknown split {split!r}")
        if limit < 1:
            return _bad_request("limit", "limit must be positive")
        out = []
        for sample in dataset.split(split)[:limit]:
            out.append(
                {
                    "sample_id": sample.sample_id,
                    "history": _f32_list(sample.history),
                    "history_text": sample.history_text,
                    "future_text": sample.future_text,
                }
            )
        return out

    @app.post("/api/forecast")
    async def forecast_endpoint(request: Request):
        if not state["ready"]:
            return JSONResponse({"status": "loading"}, status_code=503)
        try:
            body = await request.json()
        except json.JSONDecodeError:
            return _bad_request("body", "request body must be JSON")
        if not isinstance(body, dict):
            return _bad_request("body", "request body must be a JSON object")

        bundle: ForecasterBundle = state["bundle"]
        dataset = state["dataset"]

        future_text = body.get("future_text")
        if not isinstance(future_text, str) or not future_text.strip():
            return _bad_request("future_text", "a non-empty condition is required")
        num_samples = body.get("num_samples", 1)
        if not isinstance(num_samples, int) or isinstance(num_samples, bool) or num_samples < 1:
            return _bad_request("num_samples", "must be a positive integer")
        if num_samples > MAX_SAMPLES:
            return _bad_request("num_samples", f"at most {MAX_SAMPLES}")
        use_attribution = body.get("use_attribution", True)
        if not isinstance(use_attribution, bool):
            return _bad_request("use_attribution", "must be a boolean")
        client_seed = body.get("seed", 0)
        if not isinstance(client_seed, int) or isinstance(client_seed, bool):
            return _bad_request("seed", "must be an integer")

        sample_id = body.get("sample_id")
        raw_history = body.get("history")
        if (sample_id is None) == (raw_history is None):
            return _bad_request("sample_id", "provide exactly one of sample_id or history")

        horizon = dataset.L_f if dataset is not None else None
        if sample_id is not None:
            if dataset is None:
                return _bad_request("sample_id", "no dataset is loaded")
            found = None
            for samples in dataset.splits.values():
                found = next((s for s in samples if s.sample_id == sample_id), None)
                if found:
                    break
            if found is None:
                return JSONResponse(
                    {"error": {"field": "sample_id", "reason": f"unknown id {sample_id!r}"}},
                    status_code=404,
                )
            history = np.asarray(found.history, dtype=np.float64)
            history_text = found.history_text
        else:
            if (
                not isinstance(raw_history, list)
                or not raw_history
                or not all(isinstance(v, (int, float)) and not isinstance(v, bool) for v in raw_history)
            ):
                return _bad_request("history", "must be a non-empty list of numbers")
            history = np.asarray(raw_history, dtype=np.float64)
            if not np.isfinite(history).all():
                return _bad_request("history", "values must be finite")
            history_text = body.get("history_text", "")
            if not isinstance(history_text, str):
                return _bad_request("history_text", "must be a string")
            if horizon is None:
                horizon = len(history)

        if use_attribution and horizon != len(history):
            return JSONResponse(
                {
                    "error": {
                        "field": "use_attribution",
                        "reason": (
                            f"attribution requires matching window lengths, "
                            f"history={len(history)} horizon={horizon}"
                        ),
                    }
                },
                status_code=422,
            )

        seed = _request_seed(body)
        tic = time.perf_counter()
        histories = torch.from_numpy(
            apply_normalizer(bundle.normalizer, history)
        ).float().reshape(1, -1)
        with lock:
            _, forecasts, _ = forecast_batch(
                bundle.model,
                bundle.sched,
                bundle.vocab,
                histories,
                [history_text],
                [future_text],
                horizon=horizon,
                num_samples=num_samples,
                use_attribution=use_attribution,
                seed=seed,
            )
        dttc_i = dttc_e = None
        dttc: DttcBundle | None = state["dttc"]
        if dttc is not None:
            ids = tokenize_batch([future_text], dttc.vocab, dttc.model.config.text_width)
            score_i, score_e = [], []
            for k in range(forecasts.shape[0]):
                from .dttc import dttc_scores

                si, se = dttc_scores(dttc.model, histories, forecasts[k], ids)
                score_i.append(float(si.mean()))
                score_e.append(float(se.mean()))
            dttc_i = _f32(float(np.mean(score_i)))
            dttc_e = _f32(float(np.mean(score_e)))

        raw = apply_normalizer(bundle.normalizer, forecasts[:, 0, :].numpy(), inverse=True)
        return {
            "forecasts": [_f32_list(row) for row in raw],
            "dttc_i": dttc_i,
            "dttc_e": dttc_e,
            "attribution_used": use_attribution,
            "elapsed_ms": round((time.perf_counter() - tic) * 1000.0, 3),
        }

    return app
