"""Synthetic generator: series composition, captions, and determinism."""

import numpy as np
import pytest

from whatifts.data_model import save_dataset
from whatifts.errors import DataError
from whatifts.synthgen import (
    SEASON_CYCLES,
    SEGMENTS,
    SHAPES,
    TREND_TYPES,
    AttributeSet,
    extrinsic_key,
    generate_dataset,
    load_templates,
    parse_caption,
    render_caption,
    render_series,
    sample_attributes,
)


def attrs(**kwargs) -> AttributeSet:
    base = dict(
        trend_type="linear",
        direction="up",
        season_cycles=0,
        shapelets=("nothing", "nothing", "nothing"),
        noise_std=0.0,
        bias=0.0,
    )
    base.update(kwargs)
    return AttributeSet(**base)


def test_linear_up_clean_is_monotone_and_spans_unit_range():
    x = render_series(attrs(), 128, np.random.default_rng(0))
    assert np.all(np.diff(x) >= 0)
    assert x[0] == pytest.approx(-1.0)
    assert x[-1] == pytest.approx(1.0)


def test_all_trends_span_unit_range_and_direction_flips():
    for trend in TREND_TYPES:
        up = render_series(attrs(trend_type=trend), 96, np.random.default_rng(1))
        down = render_series(
            attrs(trend_type=trend, direction="down"), 96, np.random.default_rng(1)
        )
        assert up.min() == pytest.approx(-1.0)
        assert up.max() == pytest.approx(1.0)
        assert np.allclose(up, -down)


def test_bias_shifts_pointwise():
    a = render_series(attrs(bias=0.0), 128, np.random.default_rng(7))
    b = render_series(attrs(bias=0.8), 128, np.random.default_rng(7))
    diff = b - a
    assert np.allclose(diff, 0.8)


def test_season_cycles_dominant_fft_bin():
    """Spectral oracle: the seasonal term with c cycles peaks at rfft bin c."""
    for cycles in (1, 2, 4):
        base = render_series(attrs(season_cycles=0), 128, np.random.default_rng(11))
        with_season = render_series(
            attrs(season_cycles=cycles), 128, np.random.default_rng(11)
        )
        seasonal = with_season - base
        spectrum = np.abs(np.fft.rfft(seasonal))
        spectrum[0] = 0.0  # ignore DC
        assert int(np.argmax(spectrum)) == cycles
        # amplitude a in U(0.4, 0.6) gives |X[c]| = a * L / 2
        assert 0.4 * 64 <= spectrum[cycles] <= 0.6 * 64


def test_zero_cycles_has_no_seasonal_energy():
    x = render_series(attrs(), 128, np.random.default_rng(3))
    trend_only = 2.0 * np.linspace(0, 1, 128) - 1.0
    assert np.allclose(x, trend_only)


def test_shapelet_shapes_localized():
    for i, segment in enumerate(SEGMENTS):
        shapelets = ["nothing"] * 3
        shapelets[i] = "peak"
        x = render_series(attrs(shapelets=tuple(shapelets)), 129, np.random.default_rng(5))
        base = render_series(attrs(), 129, np.random.default_rng(5))
        bump = x - base
        seg = slice(43 * i, 43 * (i + 1))
        assert bump[seg].max() >= 0.5 * np.exp(-0.5)
        outside = np.concatenate([bump[: 43 * i], bump[43 * (i + 1) :]])
        assert np.abs(outside).max() < 0.05  # tails decay fast


def test_sag_is_negative_platform_is_flat():
    sag = render_series(
        attrs(shapelets=("nothing", "sag", "nothing")), 129, np.random.default_rng(5)
    ) - render_series(attrs(), 129, np.random.default_rng(5))
    assert sag.min() <= -0.5
    assert sag.max() <= 1e-9

    plat = render_series(
        attrs(shapelets=("nothing", "platform", "nothing")), 129, np.random.default_rng(5)
    ) - render_series(attrs(), 129, np.random.default_rng(5))
    middle = plat[43:86]
    level = middle[middle > 0]
    assert len(level) >= 20
    assert np.ptp(level) < 1e-9  # constant offset


def test_double_peaks_has_two_maxima():
    bump = render_series(
        attrs(shapelets=("nothing", "nothing", "double_peaks")), 129, np.random.default_rng(9)
    ) - render_series(attrs(), 129, np.random.default_rng(9))
    seg = bump[86:]
    peaks = [
        i
        for i in range(1, len(seg) - 1)
        if seg[i] > seg[i - 1] and seg[i] > seg[i + 1] and seg[i] > 0.2
    ]
    assert len(peaks) == 2


def test_render_rejects_short_windows():
    with pytest.raises(ValueError):
        render_series(attrs(), 11, np.random.default_rng(0))
    render_series(attrs(), 12, np.random.default_rng(0))


def test_amplitude_bound_budget():
    """99.9% of points stay within the per-component amplitude budget."""
    rng = np.random.default_rng(21)
    total, outside = 0, 0
    for _ in range(300):
        pair = sample_attributes(rng)
        x = render_series(pair.history, 128, rng)
        a = pair.history
        budget = 1.0 + 0.6 + 1.0 + 3.0 * a.noise_std + abs(a.bias)
        outside += int((np.abs(x) > budget).sum())
        total += x.size
    assert outside / total < 1e-3


def test_attribute_marginals_uniform():
    rng = np.random.default_rng(17)
    pairs = [sample_attributes(rng) for _ in range(10_000)]
    for trend in TREND_TYPES:
        freq = sum(p.history.trend_type == trend for p in pairs) / len(pairs)
        assert 0.23 <= freq <= 0.27
    for cycles in SEASON_CYCLES:
        freq = sum(p.future.season_cycles == cycles for p in pairs) / len(pairs)
        assert 0.23 <= freq <= 0.27
    stds = np.array([p.history.noise_std for p in pairs])
    assert 0.02 <= stds.min() and stds.max() <= 0.08
    biases = np.array([p.history.bias for p in pairs])
    assert np.all((np.abs(biases) == 0.0) | ((0.2 <= np.abs(biases)) & (np.abs(biases) <= 0.5)))
    # per-segment shapelet injection probability 0.5
    inject = np.mean(
        [s != "nothing" for p in pairs for s in p.history.shapelets]
    )
    assert 0.47 <= inject <= 0.53


def test_intrinsics_shared_within_pair():
    rng = np.random.default_rng(23)
    for _ in range(200):
        pair = sample_attributes(rng)
        assert pair.history.trend_type == pair.future.trend_type
        assert pair.history.noise_std == pair.future.noise_std
        assert pair.history.bias == pair.future.bias


def test_caption_parse_back_exact():
    rng = np.random.default_rng(29)
    for _ in range(500):
        pair = sample_attributes(rng)
        for side in (pair.history, pair.future):
            caption = render_caption(side, rng)
            assert parse_caption(caption) == extrinsic_key(side)


def test_caption_never_mentions_intrinsics():
    rng = np.random.default_rng(31)
    for _ in range(200):
        pair = sample_attributes(rng)
        caption = render_caption(pair.history, rng).lower()
        for word in ("linear", "quadratic", "exponential", "logistic", "noise", "bias"):
            assert word not in caption


def test_template_bank_has_three_variants_per_attribute():
    bank = load_templates()
    assert bank["version"] == 1
    for key in ("direction", "season", "shapelet"):
        assert len(bank[key]) >= 3


def test_split_sizes_and_ids():
    ds = generate_dataset(n=10, L_h=16, L_f=16, seed=0)
    assert len(ds.split("train")) == 8
    assert len(ds.split("val")) == 1
    assert len(ds.split("test")) == 1
    ids = [s.sample_id for split in ds.splits.values() for s in split]
    assert len(set(ids)) == 10


def test_generation_is_deterministic_and_byte_stable(tmp_path):
    a = generate_dataset(n=20, L_h=16, L_f=16, seed=123)
    b = generate_dataset(n=20, L_h=16, L_f=16, seed=123)
    save_dataset(a, tmp_path / "a")
    save_dataset(b, tmp_path / "b")
    for name in ("train.jsonl", "val.jsonl", "test.jsonl", "meta.json"):
        assert (tmp_path / "a" / name).read_bytes() == (tmp_path / "b" / name).read_bytes()
    c = generate_dataset(n=20, L_h=16, L_f=16, seed=124)
    assert not np.allclose(a.split("train")[0].history, c.split("train")[0].history)


def test_generate_rejects_tiny_n():
    with pytest.raises(DataError):
        generate_dataset(n=9, L_h=16, L_f=16)
