"""Conditional noise estimator: shapes, init behaviour, conditioning."""

import pytest
import torch

from whatifts.estimator import EstimatorConfig, NoiseEstimator, sinusoidal_embedding


def make_model(seed=0, **kwargs) -> NoiseEstimator:
    torch.manual_seed(seed)
    config = EstimatorConfig(
        vocab_size=32,
        patch_len=4,
        d_model=16,
        n_blocks=2,
        n_heads=2,
        text_width=8,
        text_layers=1,
        max_len=64,
        **kwargs,
    )
    return NoiseEstimator(config)


def randomize(model: NoiseEstimator, seed=1) -> NoiseEstimator:
    gen = torch.Generator().manual_seed(seed)
    with torch.no_grad():
        for p in model.parameters():
            p.copy_(torch.randn(p.shape, generator=gen) * 0.2)
    return model


def test_config_validation():
    with pytest.raises(ValueError):
        EstimatorConfig(vocab_size=32, patch_len=5, max_len=64)  # 64 % 5 != 0
    with pytest.raises(ValueError):
        EstimatorConfig(vocab_size=32, d_model=30, n_heads=4)
    with pytest.raises(ValueError):
        EstimatorConfig(vocab_size=1)


def test_output_shape_over_lengths():
    model = make_model()
    ids = torch.zeros(3, 8, dtype=torch.long)
    for L in (16, 32, 64):
        out = model(torch.randn(3, L), ids, 5)
        assert out.shape == (3, L)
    with pytest.raises(ValueError):
        model(torch.randn(3, 18), ids, 5)  # not divisible by patch length
    with pytest.raises(ValueError):
        model(torch.randn(3, 128), ids, 5)  # beyond max_len


def test_initial_output_is_identically_zero():
    model = make_model()
    out = model(torch.randn(2, 32), torch.randint(0, 32, (2, 8)), 7)
    assert torch.equal(out, torch.zeros(2, 32))


def test_zero_gates_make_output_condition_independent():
    """With gates at their zero init, the condition pathway cannot reach
    the output even when the head is non-trivial."""
    model = make_model()
    with torch.no_grad():
        torch.manual_seed(5)
        model.head.weight.normal_()
        model.head.bias.normal_()
    x = torch.randn(2, 32)
    out_a = model(x, torch.randint(2, 32, (2, 8)), 3)
    out_b = model(x, torch.randint(2, 32, (2, 8)), 90)
    assert torch.allclose(out_a, out_b, atol=1e-6)
    assert out_a.abs().max() > 0  # head is doing something


def test_zero_gates_keep_patches_local():
    """At init blocks are the identity, so each output patch depends only
    on its own input patch; validates patchify/unpatchify alignment."""
    model = make_model()
    with torch.no_grad():
        torch.manual_seed(6)
        model.head.weight.normal_()
    ids = torch.zeros(1, 8, dtype=torch.long)
    x = torch.randn(1, 32)
    base = model(x, ids, 1)
    x2 = x.clone()
    x2[0, :4] += 1.0  # perturb the first patch only
    out = model(x2, ids, 1)
    assert not torch.allclose(out[0, :4], base[0, :4])
    assert torch.allclose(out[0, 4:], base[0, 4:], atol=1e-6)


def test_trained_scale_conditioning_sensitivity():
    model = randomize(make_model())
    x = torch.randn(2, 32)
    ids_a = torch.randint(2, 32, (2, 8))
    ids_b = ids_a.clone()
    ids_b[:, 1] = (ids_b[:, 1] + 1) % 30 + 2
    assert (model(x, ids_a, 5) - model(x, ids_b, 5)).abs().max() > 1e-6
    assert (model(x, ids_a, 5) - model(x, ids_a, 50)).abs().max() > 1e-6


def test_forward_deterministic():
    model = randomize(make_model())
    x = torch.randn(2, 32)
    ids = torch.randint(0, 32, (2, 8))
    assert torch.equal(model(x, ids, 9), model(x, ids, 9))


def test_per_sample_step_indices():
    model = randomize(make_model())
    x = torch.randn(3, 32)
    ids = torch.randint(0, 32, (3, 8))
    batched = model(x, ids, torch.tensor([1, 50, 100]))
    for i, t in enumerate((1, 50, 100)):
        row = model(x[i : i + 1], ids[i : i + 1], t)
        assert torch.allclose(batched[i], row[0], atol=1e-5)


def test_double_precision_autograd():
    model = randomize(make_model()).double()
    x = torch.randn(2, 32, dtype=torch.float64)
    ids = torch.randint(0, 32, (2, 8))
    loss = model(x, ids, 3).pow(2).sum()
    loss.backward()
    for name, p in model.named_parameters():
        assert p.grad is not None, name
        assert torch.isfinite(p.grad).all(), name


def test_sinusoidal_embedding_basic():
    t = torch.tensor([0, 1, 50])
    emb = sinusoidal_embedding(t, 16)
    assert emb.shape == (3, 16)
    assert torch.allclose(emb[0, :8], torch.ones(8, dtype=emb.dtype))  # cos(0)
    assert (emb[1] - emb[2]).abs().max() > 1e-3
