"""Synthetic series generator with attribute-derived captions.

Each sample is a sum of five parts: a trend shape scaled to [-1, 1], an
optional seasonal sine, per-segment local shapelets, Gaussian noise, and a
constant bias. Attributes split into two groups:

* intrinsic (shared by a sample's history and future, never captioned):
  trend_type, noise_std, bias
* extrinsic (captioned): direction, season_cycles, shapelets

Captions are rendered from a versioned template bank (``templates.json``)
and must parse back to exactly the extrinsic attributes; ``parse_caption``
is that inverse and stays in lock-step with the bank.
"""

from __future__ import annotations

import json
import re
from dataclasses import dataclass
from importlib import resources

import numpy as np

from .data_model import Dataset, SampleTuple
from .errors import DataError

TREND_TYPES = ("linear", "quadratic", "exponential", "logistic")
DIRECTIONS = ("up", "down")
SEASON_CYCLES = (0, 1, 2, 4)
SEGMENTS = ("beginning", "middle", "end")
SHAPES = ("nothing", "peak", "sag", "double_peaks", "platform")

# surface form used in captions; parse_caption matches these
_SHAPE_WORDS = {
    "peak": "peak",
    "sag": "sag",
    "double_peaks": "double peaks",
    "platform": "platform",
}
_MIN_LENGTH = 12

__all__ = [
    "TREND_TYPES",
    "DIRECTIONS",
    "SEASON_CYCLES",
    "SEGMENTS",
    "SHAPES",
    "AttributeSet",
    "AttributePair",
    "sample_attributes",
    "render_series",
    "render_caption",
    "parse_caption",
    "extrinsic_key",
    "generate_dataset",
    "load_templates",
]


@dataclass(frozen=True)
class AttributeSet:
    """Full attribute assignment for one window."""

    trend_type: str
    direction: str
    season_cycles: int
    shapelets: tuple[str, str, str]  # one entry per segment, "nothing" allowed
    noise_std: float
    bias: float

    def __post_init__(self) -> None:
        if self.trend_type not in TREND_TYPES:
            raise ValueError(f"unknown trend_type {self.trend_type!r}")
        if self.direction not in DIRECTIONS:
            raise ValueError(f"unknown direction {self.direction!r}")
        if self.season_cycles not in SEASON_CYCLES:
            raise ValueError(f"season_cycles must be one of {SEASON_CYCLES}")
        if len(self.shapelets) != len(SEGMENTS):
            raise ValueError("shapelets needs one entry per segment")
        for shape in self.shapelets:
            if shape not in SHAPES:
                raise ValueError(f"unknown shapelet {shape!r}")
        if self.noise_std < 0:
            raise ValueError("noise_std must be non-negative")


@dataclass(frozen=True)
class AttributePair:
    """History and future attribute sets sharing the intrinsic group."""

    history: AttributeSet
    future: AttributeSet

    def __post_init__(self) -> None:
        h, f = self.history, self.future
        if (h.trend_type, h.noise_std, h.bias) != (f.trend_type, f.noise_std, f.bias):
            raise ValueError("history and future must share intrinsic attributes")


def load_templates() -> dict:
    bank = json.loads(resources.files(__package__).joinpath("templates.json").read_text())
    if bank.get("version") != 1:
        raise DataError(f"unsupported template bank version {bank.get('version')!r}")
    return bank


_TEMPLATES = load_templates()


def _sample_extrinsic(rng: np.random.Generator) -> tuple[str, int, tuple[str, str, str]]:
    direction = DIRECTIONS[rng.integers(len(DIRECTIONS))]
    cycles = SEASON_CYCLES[rng.integers(len(SEASON_CYCLES))]
    shapelets = []
    for _ in SEGMENTS:
        # each segment carries a shapelet with probability 0.5
        if rng.random() < 0.5:
            shapelets.append(SHAPES[1 + rng.integers(len(SHAPES) - 1)])
        else:
            shapelets.append("nothing")
    return direction, cycles, (shapelets[0], shapelets[1], shapelets[2])


def sample_attributes(rng: np.random.Generator) -> AttributePair:
    """Draw a history/future attribute pair with shared intrinsics."""
    trend_type = TREND_TYPES[rng.integers(len(TREND_TYPES))]
    noise_std = float(rng.uniform(0.02, 0.08))
    bias_kind = rng.integers(3)
    if bias_kind == 0:
        bias = float(rng.uniform(-0.5, -0.2))
    elif bias_kind == 1:
        bias = 0.0
    else:
        bias = float(rng.uniform(0.2, 0.5))

    def side() -> AttributeSet:
        direction, cycles, shapelets = _sample_extrinsic(rng)
        return AttributeSet(
            trend_type=trend_type,
            direction=direction,
            season_cycles=cycles,
            shapelets=shapelets,
            noise_std=noise_std,
            bias=bias,
        )

    return AttributePair(history=side(), future=side())


def _trend(trend_type: str, length: int) -> np.ndarray:
    t = np.linspace(0.0, 1.0, length)
    if trend_type == "linear":
        raw = t
    elif trend_type == "quadratic":
        raw = t**2
    elif trend_type == "exponential":
        raw = np.expm1(3.0 * t)
    else:  # logistic
        raw = 1.0 / (1.0 + np.exp(-10.0 * (t - 0.5)))
    # min-max map onto exactly [-1, 1] over the window
    return 2.0 * (raw - raw[0]) / (raw[-1] - raw[0]) - 1.0


def _segment_bounds(length: int) -> list[tuple[int, int]]:
    chunks = np.array_split(np.arange(length), len(SEGMENTS))
    return [(int(c[0]), int(c[-1]) + 1) for c in chunks]


def _shapelet_term(shape: str, start: int, stop: int, amp: float) -> np.ndarray:
    width = stop - start
    k = np.arange(start, stop)
    if shape == "platform":
        term = np.zeros(width)
        pad = width // 4
        term[pad : width - pad] = amp
        return term
    if shape == "double_peaks":
        sigma = width / 8.0
        centers = (start + width / 3.0, start + 2.0 * width / 3.0)
        return sum(amp * np.exp(-((k - c) ** 2) / (2.0 * sigma**2)) for c in centers)
    sigma = width / 6.0
    center = start + (width - 1) / 2.0
    bump = amp * np.exp(-((k - center) ** 2) / (2.0 * sigma**2))
    return -bump if shape == "sag" else bump


def render_series(attrs: AttributeSet, length: int, rng: np.random.Generator) -> np.ndarray:
    """Render one window. Transient draws (season amplitude/phase, shapelet
    amplitudes, noise) come from ``rng`` in a fixed order so paired variants
    that differ in one attribute stay aligned on the remaining draws."""
    if length < _MIN_LENGTH:
        raise ValueError(f"length must be >= {_MIN_LENGTH}, got {length}")
    x = _trend(attrs.trend_type, length)
    if attrs.direction == "down":
        x = -x

    amp = rng.uniform(0.4, 0.6)
    phase = rng.uniform(0.0, 2.0 * np.pi)
    if attrs.season_cycles > 0:
        k = np.arange(length) / length
        x = x + amp * np.sin(2.0 * np.pi * attrs.season_cycles * k + phase)

    for (start, stop), shape in zip(_segment_bounds(length), attrs.shapelets):
        if shape == "nothing":
            continue
        shape_amp = rng.uniform(0.5, 1.0)
        x[start:stop] += _shapelet_term(shape, start, stop, shape_amp)

    x = x + rng.normal(0.0, attrs.noise_std, size=length)
    return x + attrs.bias


def _season_sentence(template: str, cycles: int) -> str:
    return template.format(
        n=cycles,
        be="is" if cycles == 1 else "are",
        season_word="season" if cycles == 1 else "seasons",
        cycle_word="cycle" if cycles == 1 else "cycles",
    )


def render_caption(attrs: AttributeSet, rng: np.random.Generator) -> str:
    """Describe the extrinsic attributes in templated natural language."""
    bank = _TEMPLATES
    sentences = [
        bank["direction"][rng.integers(len(bank["direction"]))].format(
            direction=attrs.direction
        ),
        _season_sentence(bank["season"][rng.integers(len(bank["season"]))], attrs.season_cycles),
    ]
    for segment, shape in zip(SEGMENTS, attrs.shapelets):
        if shape == "nothing":
            continue
        template = bank["shapelet"][rng.integers(len(bank["shapelet"]))]
        sentences.append(template.format(shape=_SHAPE_WORDS[shape], segment=segment))
    order = rng.permutation(len(sentences))
    return " ".join(sentences[i] for i in order)


def extrinsic_key(attrs: AttributeSet) -> tuple[str, int, frozenset]:
    """Canonical comparable form of the captioned attributes."""
    present = frozenset(
        (segment, shape)
        for segment, shape in zip(SEGMENTS, attrs.shapelets)
        if shape != "nothing"
    )
    return (attrs.direction, attrs.season_cycles, present)


def parse_caption(caption: str) -> tuple[str, int, frozenset]:
    """Recover extrinsic attributes from a caption; inverse of render_caption."""
    text = caption.lower()
    directions = set(re.findall(r"\b(up|down)\b", text))
    if len(directions) != 1:
        raise ValueError(f"caption lacks a unique direction: {caption!r}")
    numbers = re.findall(r"\b(\d+)\b", text)
    if len(numbers) != 1:
        raise ValueError(f"caption lacks a unique season count: {caption!r}")
    shapelets = set()
    for sentence in text.split("."):
        segment = next((s for s in SEGMENTS if re.search(rf"\b{s}\b", sentence)), None)
        if segment is None:
            continue
        if "double peaks" in sentence:
            shape = "double_peaks"
        else:
            shape = next(
                (s for s in ("peak", "sag", "platform") if re.search(rf"\b{s}\b", sentence)),
                None,
            )
        if shape is None:
            raise ValueError(f"shapelet sentence lacks a shape: {sentence!r}")
        shapelets.add((segment, shape))
    return (directions.pop(), int(numbers[0]), frozenset(shapelets))


def generate_dataset(
    n: int,
    L_h: int = 128,
    L_f: int = 128,
    seed: int = 0,
    name: str = "synth",
) -> Dataset:
    """Generate ``n`` samples split 8:1:1 (floor on val/test, rest to train).

    Deterministic for a given seed; sample ``i`` uses its own generator
    seeded with ``seed ^ i`` so generation order never matters.
    """
    if n < 10:
        raise DataError(f"need at least 10 samples for an 8:1:1 split, got {n}")
    n_val = n // 10
    n_test = n // 10
    n_train = n - n_val - n_test

    splits: dict[str, list[SampleTuple]] = {"train": [], "val": [], "test": []}
    for i in range(n):
        rng = np.random.default_rng(seed ^ i)
        pair = sample_attributes(rng)
        history = render_series(pair.history, L_h, rng)
        history_text = render_caption(pair.history, rng)
        future = render_series(pair.future, L_f, rng)
        future_text = render_caption(pair.future, rng)
        sample = SampleTuple(
            sample_id=f"{name}-{i:06d}",
            channel_id=0,
            history=history,
            history_text=history_text,
            future=future,
            future_text=future_text,
        )
        if i < n_train:
            splits["train"].append(sample)
        elif i < n_train + n_val:
            splits["val"].append(sample)
        else:
            splits["test"].append(sample)

    return Dataset(name=name, L_h=L_h, L_f=L_f, kind="factual", splits=splits)
