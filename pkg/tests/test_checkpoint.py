"""Checkpoint archive format and bundle round trips."""

import json
import zipfile

import numpy as np
import pytest
import torch

from whatifts.checkpoint import (
    ForecasterBundle,
    checkpoint_id,
    load_archive,
    save_archive,
)
from whatifts.data_model import Normalizer
from whatifts.errors import CheckpointError
from whatifts.estimator import EstimatorConfig, NoiseEstimator
from whatifts.schedule import make_schedule
from whatifts.textproc import Vocab


def test_archive_round_trip(tmp_path):
    tensors = {
        "layer.weight": np.arange(6, dtype=np.float32).reshape(2, 3),
        "layer.bias": np.array([1.5, -2.5], dtype=np.float32),
    }
    path = tmp_path / "model.ckpt"
    digest = save_archive(path, {"kind": "test"}, tensors)
    assert digest == checkpoint_id(path)
    meta, loaded = load_archive(path)
    assert meta["kind"] == "test"
    assert meta["format_version"] == 1
    for name, arr in tensors.items():
        assert np.array_equal(loaded[name], arr)


def test_archive_layout_is_raw_little_endian_float32(tmp_path):
    path = tmp_path / "model.ckpt"
    arr = np.array([[1.0, -0.5]], dtype=np.float32)
    save_archive(path, {"kind": "test"}, {"w": arr})
    with zipfile.ZipFile(path) as zf:
        names = set(zf.namelist())
        assert names == {"meta.json", "tensors/w.bin"}
        raw = zf.read("tensors/w.bin")
        assert raw == arr.astype("<f4").tobytes()
        meta = json.loads(zf.read("meta.json"))
        assert meta["tensors"] == [{"name": "w", "shape": [1, 2]}]


def test_archive_byte_stable(tmp_path):
    tensors = {"w": np.ones((3, 3), dtype=np.float32)}
    save_archive(tmp_path / "a.ckpt", {"kind": "test"}, tensors)
    save_archive(tmp_path / "b.ckpt", {"kind": "test"}, tensors)
    assert (tmp_path / "a.ckpt").read_bytes() == (tmp_path / "b.ckpt").read_bytes()


def test_archive_errors(tmp_path):
    with pytest.raises(CheckpointError, match="missing"):
        load_archive(tmp_path / "none.ckpt")
    bad = tmp_path / "bad.ckpt"
    bad.write_bytes(b"not a zip")
    with pytest.raises(CheckpointError, match="corrupt"):
        load_archive(bad)


def make_bundle(seed=0) -> ForecasterBundle:
    torch.manual_seed(seed)
    config = EstimatorConfig(
        vocab_size=8, patch_len=4, d_model=16, n_blocks=1, n_heads=2,
        text_width=4, text_layers=1, max_len=16,
    )
    return ForecasterBundle(
        model=NoiseEstimator(config),
        vocab=Vocab(token_to_id={"up": 2, "down": 3}),
        sched=make_schedule(T=10, steps=5),
        normalizer=Normalizer(mean=1.25, std=0.5),
        training_state={"epoch": 7},
    )


def test_forecaster_bundle_round_trip(tmp_path):
    bundle = make_bundle()
    path = tmp_path / "fc.ckpt"
    bundle.save(path)
    loaded = ForecasterBundle.load(path)
    assert loaded.vocab.token_to_id == bundle.vocab.token_to_id
    assert loaded.normalizer.mean == pytest.approx(1.25)
    assert loaded.training_state == {"epoch": 7}
    assert np.allclose(loaded.sched.betas, bundle.sched.betas)
    assert loaded.sched.inference_grid == bundle.sched.inference_grid
    x = torch.randn(2, 16)
    ids = torch.randint(0, 8, (2, 4))
    assert torch.equal(loaded.model(x, ids, 3), bundle.model(x, ids, 3))


def test_forecaster_bundle_kind_check(tmp_path):
    path = tmp_path / "wrong.ckpt"
    save_archive(path, {"kind": "dttc"}, {})
    with pytest.raises(CheckpointError, match="forecaster"):
        ForecasterBundle.load(path)


def test_checkpoint_id_tracks_content(tmp_path):
    bundle = make_bundle()
    id_a = bundle.save(tmp_path / "a.ckpt")
    with torch.no_grad():
        bundle.model.head.bias += 1.0
    id_b = bundle.save(tmp_path / "b.ckpt")
    assert id_a != id_b
