"""Dataset containers, normalizer, and the on-disk JSONL format."""

import json

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from whatifts.data_model import (
    Dataset,
    Normalizer,
    SampleTuple,
    apply_normalizer,
    fit_normalizer,
    load_dataset,
    save_dataset,
)
from whatifts.errors import DataError, SchemaError


def make_sample(i: int, L_h: int = 12, L_f: int = 12, future: bool = True) -> SampleTuple:
    rng = np.random.default_rng(i)
    return SampleTuple(
        sample_id=f"s-{i:03d}",
        channel_id=0,
        history=rng.normal(size=L_h),
        history_text="The trend goes up. There are 0 seasons.",
        future=rng.normal(size=L_f) if future else None,
        future_text="The trend goes down. There is 1 season.",
    )


def make_dataset(n: int = 6, kind: str = "factual") -> Dataset:
    future = kind != "counterfactual"
    samples = [make_sample(i, future=future) for i in range(n)]
    third = max(1, n // 3)
    return Dataset(
        name="toy",
        L_h=12,
        L_f=12,
        kind=kind,
        splits={
            "train": samples[: n - 2 * third],
            "val": samples[n - 2 * third : n - third],
            "test": samples[n - third :],
        },
    )


def test_normalizer_hand_values():
    # values {0, 2}: mean 1, population std 1
    ds = Dataset(
        name="tiny",
        L_h=12,
        L_f=12,
        kind="factual",
        splits={
            "train": [
                SampleTuple("a", 0, np.zeros(12), "t", np.full(12, 2.0), "t"),
            ]
        },
    )
    norm = fit_normalizer(ds, "train")
    assert norm.mean == pytest.approx(1.0)
    assert norm.std == pytest.approx(1.0)


def test_normalizer_std_floor():
    ds = Dataset(
        name="flat",
        L_h=12,
        L_f=12,
        kind="factual",
        splits={"train": [SampleTuple("a", 0, np.ones(12), "t", np.ones(12), "t")]},
    )
    norm = fit_normalizer(ds, "train")
    assert norm.std == pytest.approx(1e-6)


def test_apply_normalizer_round_trip():
    norm = Normalizer(mean=2.5, std=3.0)
    x = np.array([-1.0, 0.0, 4.0])
    z = apply_normalizer(norm, x)
    assert np.allclose(apply_normalizer(norm, z, inverse=True), x)
    assert z[1] == pytest.approx(-2.5 / 3.0)


def test_fit_normalizer_empty_split():
    ds = make_dataset()
    ds.splits["train"] = []
    with pytest.raises(DataError):
        fit_normalizer(ds, "train")


def test_samples_are_immutable():
    s = make_sample(0)
    with pytest.raises(ValueError):
        s.history[0] = 99.0


def test_save_load_round_trip(tmp_path):
    ds = make_dataset()
    ds = ds.with_normalizer(fit_normalizer(ds, "train"))
    root = save_dataset(ds, tmp_path / "toy")
    loaded = load_dataset(root)
    assert loaded.name == ds.name
    assert loaded.kind == "factual"
    assert loaded.normalizer.mean == pytest.approx(ds.normalizer.mean)
    for split in ("train", "val", "test"):
        assert [s.sample_id for s in loaded.split(split)] == [
            s.sample_id for s in ds.split(split)
        ]
        for a, b in zip(loaded.split(split), ds.split(split)):
            assert np.allclose(a.history, b.history)
            assert a.history_text == b.history_text


def test_save_is_byte_stable(tmp_path):
    ds = make_dataset()
    save_dataset(ds, tmp_path / "a")
    save_dataset(ds, tmp_path / "b")
    for name in ("meta.json", "train.jsonl", "val.jsonl", "test.jsonl"):
        assert (tmp_path / "a" / name).read_bytes() == (tmp_path / "b" / name).read_bytes()


def test_load_missing_directory(tmp_path):
    with pytest.raises(DataError):
        load_dataset(tmp_path / "nope")


def test_schema_error_carries_line_number(tmp_path):
    ds = make_dataset()
    root = save_dataset(ds, tmp_path / "toy")
    lines = (root / "train.jsonl").read_text().splitlines()
    bad = json.loads(lines[1])
    del bad["future_text"]
    lines[1] = json.dumps(bad)
    (root / "train.jsonl").write_text("\n".join(lines) + "\n")
    with pytest.raises(SchemaError, match="train.jsonl:2"):
        load_dataset(root)


def test_schema_rejects_wrong_length(tmp_path):
    ds = make_dataset()
    root = save_dataset(ds, tmp_path / "toy")
    lines = (root / "val.jsonl").read_text().splitlines()
    bad = json.loads(lines[0])
    bad["history"] = bad["history"][:-1]
    lines[0] = json.dumps(bad)
    (root / "val.jsonl").write_text("\n".join(lines) + "\n")
    with pytest.raises(SchemaError, match="length"):
        load_dataset(root)


def test_schema_rejects_non_finite(tmp_path):
    ds = make_dataset()
    root = save_dataset(ds, tmp_path / "toy")
    text = (root / "test.jsonl").read_text().replace(
        '"history": [', '"history": ["nope", ', 1
    )
    (root / "test.jsonl").write_text(text)
    with pytest.raises(SchemaError):
        load_dataset(root)


def test_duplicate_ids_rejected():
    samples = [make_sample(1), make_sample(1)]
    with pytest.raises(SchemaError, match="duplicate"):
        Dataset(name="dup", L_h=12, L_f=12, kind="factual", splits={"train": samples})


def test_kind_future_consistency():
    with pytest.raises(SchemaError):
        Dataset(
            name="bad",
            L_h=12,
            L_f=12,
            kind="factual",
            splits={"train": [make_sample(0, future=False)]},
        )
    with pytest.raises(SchemaError):
        Dataset(
            name="bad",
            L_h=12,
            L_f=12,
            kind="counterfactual",
            splits={"train": [make_sample(0, future=True)]},
        )
    # mixed allows both
    Dataset(
        name="ok",
        L_h=12,
        L_f=12,
        kind="mixed",
        splits={"train": [make_sample(0), make_sample(1, future=False)]},
    )


def test_unknown_kind_rejected():
    with pytest.raises(SchemaError):
        Dataset(name="bad", L_h=12, L_f=12, kind="imagined", splits={})


@settings(max_examples=50, deadline=None)
@given(
    mean=st.floats(-1e3, 1e3),
    std=st.floats(1e-6, 1e3),
    values=st.lists(st.floats(-1e6, 1e6), min_size=1, max_size=16),
)
def test_normalizer_inverse_property(mean, std, values):
    norm = Normalizer(mean=mean, std=std)
    x = np.asarray(values)
    back = apply_normalizer(norm, apply_normalizer(norm, x), inverse=True)
    assert np.allclose(back, x, rtol=1e-9, atol=1e-6)
