"""Dataset containers and on-disk format.

A dataset directory holds ``meta.json`` plus one JSONL file per split
(``train.jsonl``, ``val.jsonl``, ``test.jsonl``). Each line is one sample:

    {"sample_id": str, "channel_id": int, "history": [float],
     "history_text": str, "future": [float] | null, "future_text": str}

``future`` is null exactly for counterfactual samples: their conditions are
hypothetical, so no ground-truth continuation exists.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Iterable

import numpy as np

from .errors import DataError, SchemaError

SPLIT_NAMES = ("train", "val", "test")
KINDS = ("factual", "counterfactual", "mixed")

__all__ = [
    "SPLIT_NAMES",
    "KINDS",
    "SampleTuple",
    "Normalizer",
    "Dataset",
    "fit_normalizer",
    "apply_normalizer",
    "load_dataset",
    "save_dataset",
]


def _frozen(values: Iterable[float]) -> np.ndarray:
    arr = np.asarray(values, dtype=np.float64)
    arr.flags.writeable = False
    return arr


@dataclass(frozen=True)
class SampleTuple:
    """One aligned (history, history_text, future, future_text) record."""

    sample_id: str
    channel_id: int
    history: np.ndarray
    history_text: str
    future: np.ndarray | None
    future_text: str

    def __post_init__(self) -> None:
        object.__setattr__(self, "history", _frozen(self.history))
        if self.future is not None:
            object.__setattr__(self, "future", _frozen(self.future))

    @property
    def is_counterfactual(self) -> bool:
        return self.future is None


@dataclass(frozen=True)
class Normalizer:
    """Global z-score parameters fitted on one split."""

    mean: float
    std: float
    fitted_on: str = "train"

    def __post_init__(self) -> None:
        # std is floored at fit time; reject degenerate hand-built values
        if not math.isfinite(self.mean) or not math.isfinite(self.std):
            raise DataError("normalizer parameters must be finite")
        if self.std <= 0:
            raise DataError(f"normalizer std must be positive, got {self.std}")


@dataclass
class Dataset:
    """All splits of one named dataset plus shared geometry."""

    name: str
    L_h: int
    L_f: int
    kind: str
    splits: dict[str, list[SampleTuple]] = field(default_factory=dict)
    normalizer: Normalizer | None = None

    def __post_init__(self) -> None:
        self.validate()

    def validate(self) -> None:
        if self.kind not in KINDS:
            raise SchemaError(f"unknown dataset kind {self.kind!r}")
        if self.L_h <= 0 or self.L_f <= 0:
            raise SchemaError("window lengths must be positive")
        seen: set[str] = set()
        for split, samples in self.splits.items():
            if split not in SPLIT_NAMES:
                raise SchemaError(f"unknown split name {split!r}")
            for s in samples:
                if s.sample_id in seen:
                    raise SchemaError(f"duplicate sample_id {s.sample_id!r}")
                seen.add(s.sample_id)
                if len(s.history) != self.L_h:
                    raise SchemaError(
                        f"{s.sample_id}: history length {len(s.history)} != L_h {self.L_h}"
                    )
                if s.future is not None and len(s.future) != self.L_f:
                    raise SchemaError(
                        f"{s.sample_id}: future length {len(s.future)} != L_f {self.L_f}"
                    )
                if self.kind == "factual" and s.future is None:
                    raise SchemaError(f"{s.sample_id}: factual sample lacks future")
                if self.kind == "counterfactual" and s.future is not None:
                    raise SchemaError(
                        f"{s.sample_id}: counterfactual sample carries a future"
                    )
                if not np.isfinite(s.history).all():
                    raise SchemaError(f"{s.sample_id}: non-finite history values")
                if s.future is not None and not np.isfinite(s.future).all():
                    raise SchemaError(f"{s.sample_id}: non-finite future values")

    def split(self, name: str) -> list[SampleTuple]:
        try:
            return self.splits[name]
        except KeyError:
            raise DataError(f"dataset {self.name!r} has no split {name!r}") from None

    def with_normalizer(self, normalizer: Normalizer) -> "Dataset":
        return replace(self, normalizer=normalizer)


def fit_normalizer(dataset: Dataset, split: str = "train") -> Normalizer:
    """Fit global z-score parameters over every history and future value.

    Population std, floored at 1e-6 so constant datasets stay invertible.
    """
    samples = dataset.split(split)
    if not samples:
        raise DataError(f"cannot fit normalizer on empty split {split!r}")
    chunks = [s.history for s in samples]
    chunks += [s.future for s in samples if s.future is not None]
    values = np.concatenate(chunks)
    mean = float(values.mean())
    std = float(max(values.std(), 1e-6))
    return Normalizer(mean=mean, std=std, fitted_on=split)


def apply_normalizer(normalizer: Normalizer, x, inverse: bool = False):
    """Map raw values to z-scores, or back when ``inverse`` is set.

    Works elementwise on numpy arrays and torch tensors alike.
    """
    if inverse:
        return x * normalizer.std + normalizer.mean
    return (x - normalizer.mean) / normalizer.std


def _require(condition: bool, path: Path, lineno: int, message: str) -> None:
    if not condition:
        raise SchemaError(f"{path.name}:{lineno}: {message}")


def _parse_sample(obj: dict, path: Path, lineno: int) -> SampleTuple:
    _require(isinstance(obj, dict), path, lineno, "record is not an object")
    required = {
        "sample_id",
        "channel_id",
        "history",
        "history_text",
        "future",
        "future_text",
    }
    missing = required - obj.keys()
    _require(not missing, path, lineno, f"missing fields {sorted(missing)}")
    _require(isinstance(obj["sample_id"], str), path, lineno, "sample_id must be str")
    _require(
        isinstance(obj["channel_id"], int) and not isinstance(obj["channel_id"], bool),
        path,
        lineno,
        "channel_id must be int",
    )
    for key in ("history_text", "future_text"):
        _require(isinstance(obj[key], str), path, lineno, f"{key} must be str")
    _require(isinstance(obj["history"], list), path, lineno, "history must be a list")
    future = obj["future"]
    _require(
        future is None or isinstance(future, list),
        path,
        lineno,
        "future must be a list or null",
    )

    def as_floats(values: list, name: str) -> np.ndarray:
        for v in values:
            _require(
                isinstance(v, (int, float)) and not isinstance(v, bool),
                path,
                lineno,
                f"{name} holds a non-numeric value",
            )
        arr = np.asarray(values, dtype=np.float64)
        _require(bool(np.isfinite(arr).all()), path, lineno, f"{name} has non-finite values")
        return arr

    return SampleTuple(
        sample_id=obj["sample_id"],
        channel_id=obj["channel_id"],
        history=as_floats(obj["history"], "history"),
        history_text=obj["history_text"],
        future=None if future is None else as_floats(future, "future"),
        future_text=obj["future_text"],
    )


def load_dataset(path: str | Path) -> Dataset:
    """Read a dataset directory, validating schema and invariants."""
    root = Path(path)
    meta_path = root / "meta.json"
    if not meta_path.is_file():
        raise DataError(f"missing {meta_path}")
    try:
        meta = json.loads(meta_path.read_text())
    except json.JSONDecodeError as exc:
        raise SchemaError(f"{meta_path.name}: invalid JSON ({exc})") from exc
    for key in ("name", "L_h", "L_f", "kind"):
        if key not in meta:
            raise SchemaError(f"{meta_path.name}: missing field {key!r}")

    normalizer = None
    if meta.get("normalizer") is not None:
        norm = meta["normalizer"]
        if not isinstance(norm, dict) or "mean" not in norm or "std" not in norm:
            raise SchemaError(f"{meta_path.name}: normalizer must carry mean and std")
        normalizer = Normalizer(
            mean=float(norm["mean"]),
            std=float(norm["std"]),
            fitted_on=str(norm.get("fitted_on", "train")),
        )

    splits: dict[str, list[SampleTuple]] = {}
    for split in SPLIT_NAMES:
        split_path = root / f"{split}.jsonl"
        if not split_path.is_file():
            raise DataError(f"missing {split_path}")
        samples = []
        with split_path.open() as fh:
            for lineno, line in enumerate(fh, start=1):
                if not line.strip():
                    continue
                try:
                    obj = json.loads(line)
                except json.JSONDecodeError as exc:
                    raise SchemaError(
                        f"{split_path.name}:{lineno}: invalid JSON ({exc})"
                    ) from exc
                samples.append(_parse_sample(obj, split_path, lineno))
        splits[split] = samples

    return Dataset(
        name=str(meta["name"]),
        L_h=int(meta["L_h"]),
        L_f=int(meta["L_f"]),
        kind=str(meta["kind"]),
        splits=splits,
        normalizer=normalizer,
    )


def _sample_to_json(sample: SampleTuple) -> str:
    return json.dumps(
        {
            "sample_id": sample.sample_id,
            "channel_id": sample.channel_id,
            "history": [float(v) for v in sample.history],
            "history_text": sample.history_text,
            "future": None if sample.future is None else [float(v) for v in sample.future],
            "future_text": sample.future_text,
        }
    )


def save_dataset(dataset: Dataset, path: str | Path) -> Path:
    """Write a dataset directory; returns its root path."""
    dataset.validate()
    root = Path(path)
    root.mkdir(parents=True, exist_ok=True)
    meta: dict = {
        "name": dataset.name,
        "L_h": dataset.L_h,
        "L_f": dataset.L_f,
        "kind": dataset.kind,
    }
    if dataset.normalizer is not None:
        meta["normalizer"] = {
            "mean": dataset.normalizer.mean,
            "std": dataset.normalizer.std,
            "fitted_on": dataset.normalizer.fitted_on,
        }
    (root / "meta.json").write_text(json.dumps(meta, indent=2) + "\n")
    for split in SPLIT_NAMES:
        samples = dataset.splits.get(split, [])
        lines = [_sample_to_json(s) for s in samples]
        (root / f"{split}.jsonl").write_text("\n".join(lines) + ("\n" if lines else ""))
    return root
