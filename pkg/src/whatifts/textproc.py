"""Word-level text conditions: corpus vocabulary and transformer encoder.

The vocabulary is built from the training corpus only. Token ids 0 and 1
are reserved for PAD and UNK; remaining tokens are numbered by descending
frequency with lexicographic tie-break so builds are reproducible.
"""

from __future__ import annotations

import json
import re
from collections import Counter
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

import torch
import torch.nn as nn

from .errors import DataError

PAD_ID = 0
UNK_ID = 1

_TOKEN_RE = re.compile(r"\w+|[^\w\s]")

__all__ = ["PAD_ID", "UNK_ID", "Vocab", "split_tokens", "build_vocab", "tokenize", "TextEncoder"]


def split_tokens(text: str) -> list[str]:
    """Lowercase and split into word tokens; punctuation marks stand alone."""
    return _TOKEN_RE.findall(text.lower())


@dataclass(frozen=True)
class Vocab:
    token_to_id: dict[str, int] = field(default_factory=dict)

    def __len__(self) -> int:
        return len(self.token_to_id) + 2  # PAD and UNK sit outside the mapping

    def id_of(self, token: str) -> int:
        return self.token_to_id.get(token, UNK_ID)

    def to_json(self) -> dict[str, int]:
        return dict(self.token_to_id)

    @classmethod
    def from_json(cls, mapping: dict[str, int]) -> "Vocab":
        ids = sorted(mapping.values())
        if ids and (min(ids) < 2 or len(set(ids)) != len(ids)):
            raise DataError("vocab ids must be unique and start at 2")
        return cls(token_to_id={str(k): int(v) for k, v in mapping.items()})

    def save(self, path: str | Path) -> None:
        Path(path).write_text(json.dumps(self.to_json(), indent=2, sort_keys=True) + "\n")

    @classmethod
    def load(cls, path: str | Path) -> "Vocab":
        p = Path(path)
        if not p.is_file():
            raise DataError(f"missing vocab file {p}")
        return cls.from_json(json.loads(p.read_text()))


def build_vocab(corpus: Iterable[str], min_freq: int = 1) -> Vocab:
    """Count tokens over the corpus and assign ids by frequency then spelling."""
    counts = Counter()
    n_docs = 0
    for text in corpus:
        n_docs += 1
        counts.update(split_tokens(text))
    if n_docs == 0 or not counts:
        raise DataError("cannot build a vocabulary from an empty corpus")
    kept = [(tok, c) for tok, c in counts.items() if c >= min_freq]
    kept.sort(key=lambda item: (-item[1], item[0]))
    return Vocab(token_to_id={tok: i + 2 for i, (tok, _) in enumerate(kept)})


def tokenize(text: str, vocab: Vocab, width: int) -> list[int]:
    """Map text to exactly ``width`` ids: UNK for unknown words, PAD to fill,
    truncation beyond ``width``."""
    ids = [vocab.id_of(tok) for tok in split_tokens(text)][:width]
    return ids + [PAD_ID] * (width - len(ids))


def tokenize_batch(texts: Sequence[str], vocab: Vocab, width: int) -> torch.Tensor:
    return torch.tensor([tokenize(t, vocab, width) for t in texts], dtype=torch.long)


class TextEncoder(nn.Module):
    """Token embedding + learned positions + pre-norm transformer + masked
    mean-pool + linear projection. PAD positions are masked out of attention
    and pooling; an all-PAD row falls back to uniform pooling."""

    def __init__(
        self,
        vocab_size: int,
        width: int,
        d_model: int = 64,
        out_dim: int = 64,
        n_layers: int = 2,
        n_heads: int = 4,
    ):
        super().__init__()
        self.width = width
        self.tok_emb = nn.Embedding(vocab_size, d_model, padding_idx=PAD_ID)
        self.pos_emb = nn.Parameter(torch.zeros(width, d_model))
        nn.init.normal_(self.pos_emb, std=0.02)
        self.layers = nn.ModuleList(
            nn.TransformerEncoderLayer(
                d_model,
                n_heads,
                dim_feedforward=4 * d_model,
                dropout=0.0,
                activation="gelu",
                batch_first=True,
                norm_first=True,
            )
            for _ in range(n_layers)
        )
        self.norm = nn.LayerNorm(d_model)
        self.proj = nn.Linear(d_model, out_dim)

    def forward(self, ids: torch.Tensor) -> torch.Tensor:
        if ids.ndim != 2 or ids.shape[1] != self.width:
            raise ValueError(f"expected ids of shape (B, {self.width}), got {tuple(ids.shape)}")
        pad = ids == PAD_ID  # (B, W), True where masked
        all_pad = pad.all(dim=1)
        if all_pad.any():
            # leave attention unmasked for empty rows; pooling goes uniform
            pad = pad & ~all_pad.unsqueeze(1)
        h = self.tok_emb(ids) + self.pos_emb
        for layer in self.layers:
            h = layer(h, src_key_padding_mask=pad)
        h = self.norm(h)
        weights = (~pad).to(h.dtype)
        weights = weights / weights.sum(dim=1, keepdim=True)
        pooled = (h * weights.unsqueeze(-1)).sum(dim=1)  # (B, D)
        return self.proj(pooled)
