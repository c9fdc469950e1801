"""Transformer noise estimator conditioned on step index and text.

The series is cut into non-overlapping patches that become tokens. Each
block is pre-norm self-attention + MLP, modulated by the condition through
per-block shift/scale/gate projections. The condition vector is the sum of
a sinusoidal step embedding (through an MLP) and the text encoder output.

Gates and the output head start at zero: the initial network output is
identically zero and independent of the condition pathway, which keeps
early training stable.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import torch
import torch.nn as nn

from .textproc import TextEncoder

__all__ = ["EstimatorConfig", "NoiseEstimator", "sinusoidal_embedding"]


@dataclass(frozen=True)
class EstimatorConfig:
    vocab_size: int
    patch_len: int = 8
    d_model: int = 64
    n_blocks: int = 4
    n_heads: int = 4
    text_width: int = 64
    text_layers: int = 2
    max_len: int = 256  # longest concatenated series the model will see

    def __post_init__(self) -> None:
        if self.vocab_size < 2:
            raise ValueError("vocab_size must cover PAD and UNK")
        if self.patch_len < 1 or self.d_model < 1 or self.n_blocks < 1:
            raise ValueError("model dimensions must be positive")
        if self.max_len % self.patch_len != 0:
            raise ValueError("max_len must be divisible by patch_len")
        if self.d_model % self.n_heads != 0:
            raise ValueError("d_model must be divisible by n_heads")

    @property
    def max_patches(self) -> int:
        return self.max_len // self.patch_len

    def to_json(self) -> dict:
        return {
            "vocab_size": self.vocab_size,
            "patch_len": self.patch_len,
            "d_model": self.d_model,
            "n_blocks": self.n_blocks,
            "n_heads": self.n_heads,
            "text_width": self.text_width,
            "text_layers": self.text_layers,
            "max_len": self.max_len,
        }

    @classmethod
    def from_json(cls, obj: dict) -> "EstimatorConfig":
        return cls(**{k: int(v) for k, v in obj.items()})


def sinusoidal_embedding(t: torch.Tensor, dim: int, max_period: float = 10000.0) -> torch.Tensor:
    """Classic sin/cos features of the step index. t: (B,) -> (B, dim)."""
    half = dim // 2
    freqs = torch.exp(
        -math.log(max_period) * torch.arange(half, dtype=torch.float64) / half
    ).to(device=t.device)
    args = t.double().unsqueeze(1) * freqs.unsqueeze(0)
    emb = torch.cat([torch.cos(args), torch.sin(args)], dim=1)
    if dim % 2 == 1:
        emb = torch.cat([emb, torch.zeros(emb.shape[0], 1, dtype=emb.dtype)], dim=1)
    return emb


def _modulate(x: torch.Tensor, shift: torch.Tensor, scale: torch.Tensor) -> torch.Tensor:
    return x * (1.0 + scale.unsqueeze(1)) + shift.unsqueeze(1)


class ConditionalBlock(nn.Module):
    """Pre-norm attention/MLP block with conditioned shift/scale/gate."""

    def __init__(self, d_model: int, n_heads: int, mlp_ratio: float = 4.0):
        super().__init__()
        self.norm1 = nn.LayerNorm(d_model, elementwise_affine=False)
        self.attn = nn.MultiheadAttention(d_model, n_heads, batch_first=True)
        self.norm2 = nn.LayerNorm(d_model, elementwise_affine=False)
        hidden = int(d_model * mlp_ratio)
        self.mlp = nn.Sequential(
            nn.Linear(d_model, hidden), nn.GELU(), nn.Linear(hidden, d_model)
        )
        self.cond_proj = nn.Sequential(nn.SiLU(), nn.Linear(d_model, 6 * d_model))
        # zero-init: block starts as the identity regardless of condition
        nn.init.zeros_(self.cond_proj[1].weight)
        nn.init.zeros_(self.cond_proj[1].bias)

    def forward(self, x: torch.Tensor, cond: torch.Tensor) -> torch.Tensor:
        shift1, scale1, gate1, shift2, scale2, gate2 = self.cond_proj(cond).chunk(6, dim=1)
        h = _modulate(self.norm1(x), shift1, scale1)
        attn_out, _ = self.attn(h, h, h, need_weights=False)
        x = x + gate1.unsqueeze(1) * attn_out
        h = _modulate(self.norm2(x), shift2, scale2)
        return x + gate2.unsqueeze(1) * self.mlp(h)


class NoiseEstimator(nn.Module):
    """eps(x_t, condition text, t) over the full input length."""

    def __init__(self, config: EstimatorConfig):
        super().__init__()
        self.config = config
        d = config.d_model
        self.patch_embed = nn.Linear(config.patch_len, d)
        self.pos_emb = nn.Parameter(torch.zeros(config.max_patches, d))
        nn.init.normal_(self.pos_emb, std=0.02)
        self.text_encoder = TextEncoder(
            vocab_size=config.vocab_size,
            width=config.text_width,
            d_model=d,
            out_dim=d,
            n_layers=config.text_layers,
            n_heads=config.n_heads,
        )
        self.time_mlp = nn.Sequential(nn.Linear(d, d), nn.SiLU(), nn.Linear(d, d))
        self.blocks = nn.ModuleList(
            ConditionalBlock(d, config.n_heads) for _ in range(config.n_blocks)
        )
        self.final_norm = nn.LayerNorm(d)
        self.head = nn.Linear(d, config.patch_len)
        # zero-init head: initial estimate is identically zero
        nn.init.zeros_(self.head.weight)
        nn.init.zeros_(self.head.bias)

    def condition(self, cond_ids: torch.Tensor, t: torch.Tensor) -> torch.Tensor:
        """Combined condition vector: step embedding + text embedding."""
        dtype = self.patch_embed.weight.dtype
        e_time = self.time_mlp(sinusoidal_embedding(t, self.config.d_model).to(dtype))
        e_text = self.text_encoder(cond_ids)
        return e_time + e_text

    def forward(self, x: torch.Tensor, cond_ids: torch.Tensor, t) -> torch.Tensor:
        if x.ndim != 2:
            raise ValueError(f"expected series of shape (B, L), got {tuple(x.shape)}")
        B, L = x.shape
        P = self.config.patch_len
        if L % P != 0:
            raise ValueError(f"series length {L} not divisible by patch length {P}")
        n = L // P
        if n > self.config.max_patches:
            raise ValueError(f"length {L} exceeds configured max_len {self.config.max_len}")
        if isinstance(t, int):
            t = torch.full((B,), t, dtype=torch.long, device=x.device)

        tokens = self.patch_embed(x.reshape(B, n, P)) + self.pos_emb[:n]  # (B, n, D)
        cond = self.condition(cond_ids, t)  # (B, D)
        h = tokens
        for block in self.blocks:
            h = block(h, cond)
        out = self.head(self.final_norm(h))  # (B, n, P)
        return out.reshape(B, L)
