"""Checkpoint archives: one metadata JSON plus raw float32 tensors.

An archive is a zip file holding ``meta.json`` and ``tensors/<name>.bin``
(little-endian float32, C order), one entry per named parameter tensor.
Entries are written in sorted order with a fixed timestamp so identical
state serializes to identical bytes. A checkpoint's identity is the SHA-256
of the file.

Forecaster archives embed everything inference needs: estimator config,
noise schedule, vocabulary, and the data normalizer.
"""

from __future__ import annotations

import hashlib
import io
import json
import zipfile
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch

from .data_model import Normalizer
from .errors import CheckpointError
from .estimator import EstimatorConfig, NoiseEstimator
from .schedule import NoiseSchedule
from .textproc import Vocab

FORMAT_VERSION = 1
_STAMP = (1980, 1, 1, 0, 0, 0)

__all__ = [
    "save_archive",
    "load_archive",
    "checkpoint_id",
    "ForecasterBundle",
]


def save_archive(path: str | Path, meta: dict, tensors: dict[str, np.ndarray]) -> str:
    """Write the archive and return its content hash."""
    meta = dict(meta)
    meta["format_version"] = FORMAT_VERSION
    meta["tensors"] = [
        {"name": name, "shape": list(tensors[name].shape)} for name in sorted(tensors)
    ]
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    buf = io.BytesIO()
    with zipfile.ZipFile(buf, "w", compression=zipfile.ZIP_DEFLATED) as zf:
        info = zipfile.ZipInfo("meta.json", date_time=_STAMP)
        zf.writestr(info, json.dumps(meta, sort_keys=True))
        for name in sorted(tensors):
            arr = np.ascontiguousarray(tensors[name], dtype="<f4")
            info = zipfile.ZipInfo(f"tensors/{name}.bin", date_time=_STAMP)
            zf.writestr(info, arr.tobytes())
    data = buf.getvalue()
    path.write_bytes(data)
    return hashlib.sha256(data).hexdigest()


def load_archive(path: str | Path) -> tuple[dict, dict[str, np.ndarray]]:
    path = Path(path)
    if not path.is_file():
        raise CheckpointError(f"missing checkpoint {path}")
    try:
        with zipfile.ZipFile(path) as zf:
            meta = json.loads(zf.read("meta.json"))
            tensors = {}
            for entry in meta.get("tensors", []):
                raw = zf.read(f"tensors/{entry['name']}.bin")
                arr = np.frombuffer(raw, dtype="<f4").reshape(entry["shape"])
                tensors[entry["name"]] = arr
    except (zipfile.BadZipFile, KeyError, json.JSONDecodeError, ValueError) as exc:
        raise CheckpointError(f"corrupt checkpoint {path}: {exc}") from exc
    if meta.get("format_version") != FORMAT_VERSION:
        raise CheckpointError(
            f"unsupported checkpoint format {meta.get('format_version')!r}"
        )
    return meta, tensors


def checkpoint_id(path: str | Path) -> str:
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()


def state_to_tensors(module: torch.nn.Module) -> dict[str, np.ndarray]:
    out = {}
    for name, value in module.state_dict().items():
        if not value.dtype.is_floating_point:
            raise CheckpointError(f"non-float tensor {name} cannot be archived")
        out[name] = value.detach().cpu().numpy()
    return out


def tensors_to_state(module: torch.nn.Module, tensors: dict[str, np.ndarray]) -> None:
    dtype = next(module.parameters()).dtype
    state = {k: torch.from_numpy(np.array(v)).to(dtype) for k, v in tensors.items()}
    module.load_state_dict(state, strict=True)


def _schedule_meta(sched: NoiseSchedule) -> dict:
    return {"betas": [float(b) for b in sched.betas], "grid": list(sched.inference_grid)}


def _schedule_from_meta(obj: dict) -> NoiseSchedule:
    return NoiseSchedule(
        betas=np.asarray(obj["betas"], dtype=np.float64),
        inference_grid=tuple(int(t) for t in obj["grid"]),
    )


def _normalizer_meta(norm: Normalizer | None) -> dict | None:
    if norm is None:
        return None
    return {"mean": norm.mean, "std": norm.std, "fitted_on": norm.fitted_on}


def _normalizer_from_meta(obj: dict | None) -> Normalizer | None:
    if obj is None:
        return None
    return Normalizer(
        mean=float(obj["mean"]), std=float(obj["std"]), fitted_on=str(obj.get("fitted_on", "train"))
    )


@dataclass
class ForecasterBundle:
    """A noise estimator together with everything inference needs."""

    model: NoiseEstimator
    vocab: Vocab
    sched: NoiseSchedule
    normalizer: Normalizer | None = None
    training_state: dict = field(default_factory=dict)
    parent: str | None = None

    def save(self, path: str | Path) -> str:
        meta = {
            "kind": "forecaster",
            "config": self.model.config.to_json(),
            "schedule": _schedule_meta(self.sched),
            "vocab": self.vocab.to_json(),
            "normalizer": _normalizer_meta(self.normalizer),
            "training_state": self.training_state,
            "parent": self.parent,
        }
        return save_archive(path, meta, state_to_tensors(self.model))

    @classmethod
    def load(cls, path: str | Path) -> "ForecasterBundle":
        meta, tensors = load_archive(path)
        if meta.get("kind") != "forecaster":
            raise CheckpointError(
                f"expected a forecaster checkpoint, got kind {meta.get('kind')!r}"
            )
        try:
            config = EstimatorConfig.from_json(meta["config"])
            model = NoiseEstimator(config)
            tensors_to_state(model, tensors)
            bundle = cls(
                model=model,
                vocab=Vocab.from_json(meta["vocab"]),
                sched=_schedule_from_meta(meta["schedule"]),
                normalizer=_normalizer_from_meta(meta.get("normalizer")),
                training_state=meta.get("training_state", {}),
                parent=meta.get("parent"),
            )
        except (KeyError, RuntimeError, TypeError) as exc:
            raise CheckpointError(f"incompatible forecaster checkpoint: {exc}") from exc
        bundle.model.eval()
        return bundle
