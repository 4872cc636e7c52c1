"""Tiny causal decoder with rotary positions and low-rank adapters, plus the vision projector."""
from __future__ import annotations

import math
from dataclasses import asdict, dataclass
from typing import Optional

import torch
import torch.nn.functional as F
from torch import nn


class GeneratorShapeError(ValueError):
    pass


@dataclass
class DecoderConfig:
    vocab_size: int
    d_model: int = 128
    n_blocks: int = 4
    n_heads: int = 4
    ffn_mult: int = 4
    rope_base: float = 10000.0
    seed: int = 0

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass
class ProjectorConfig:
    c_in: int = 48
    d_model: int = 128
    n_queries: int = 8
    n_heads: int = 4
    hidden: int = 256
    seed: int = 0

    def to_dict(self) -> dict:
        return asdict(self)


class LoRALinear(nn.Module):
    """``y = x W^T + b + (alpha / r) x A B`` with ``A: [d_in, r]`` and ``B: [r, d_out]``.

    ``B`` starts at zero so the adapted layer reproduces the base layer exactly.
    """

    def __init__(self, base: nn.Linear, rank: int, alpha: float, generator: Optional[torch.Generator] = None):
        super().__init__()
        if rank < 1:
            raise ValueError("adapter rank must be >= 1")
        self.base = base
        self.rank = rank
        self.alpha = alpha
        self.scale = alpha / rank
        d_in, d_out = base.in_features, base.out_features
        self.A = nn.Parameter(torch.randn(d_in, rank, generator=generator) / math.sqrt(d_in))
        self.B = nn.Parameter(torch.zeros(rank, d_out))

    def forward(self, x):
        return self.base(x) + self.scale * ((x @ self.A) @ self.B)

    def merged_weight(self) -> torch.Tensor:
        return self.base.weight + self.scale * (self.A @ self.B).T


def rope_tables(positions: torch.Tensor, head_dim: int, base: float) -> tuple[torch.Tensor, torch.Tensor]:
    """cos/sin tables ``[B, T, head_dim/2]`` for integer positions ``[B, T]``."""
    inv = base ** (-torch.arange(0, head_dim, 2, dtype=torch.float64) / head_dim)
    ang = positions.to(torch.float64)[..., None] * inv
    return ang.cos(), ang.sin()


def apply_rope(x: torch.Tensor, cos: torch.Tensor, sin: torch.Tensor) -> torch.Tensor:
    # x: [B, H, T, Dh]; rotate interleaved halves
    x1, x2 = x[..., 0::2], x[..., 1::2]
    cos = cos[:, None].to(x.dtype)
    sin = sin[:, None].to(x.dtype)
    out = torch.stack([x1 * cos - x2 * sin, x1 * sin + x2 * cos], dim=-1)
    return out.flatten(-2)


class DecoderBlock(nn.Module):
    def __init__(self, d_model: int, n_heads: int, ffn_mult: int):
        super().__init__()
        if d_model % n_heads or (d_model // n_heads) % 2:
            raise GeneratorShapeError("d_model / n_heads must be an even integer")
        self.n_heads = n_heads
        self.norm1 = nn.LayerNorm(d_model)
        self.q = nn.Linear(d_model, d_model)
        self.k = nn.Linear(d_model, d_model)
        self.v = nn.Linear(d_model, d_model)
        self.o = nn.Linear(d_model, d_model)
        self.norm2 = nn.LayerNorm(d_model)
        self.ffn_in = nn.Linear(d_model, ffn_mult * d_model)
        self.ffn_out = nn.Linear(ffn_mult * d_model, d_model)

    def forward(self, x, cos, sin, mask, return_attn: bool = False):
        B, T, D = x.shape
        H = self.n_heads
        h = self.norm1(x)
        q = self.q(h).view(B, T, H, D // H).transpose(1, 2)
        k = self.k(h).view(B, T, H, D // H).transpose(1, 2)
        v = self.v(h).view(B, T, H, D // H).transpose(1, 2)
        q, k = apply_rope(q, cos, sin), apply_rope(k, cos, sin)
        scores = q @ k.transpose(-1, -2) / math.sqrt(D // H)
        scores = scores.masked_fill(~mask[:, None], float("-inf"))
        att = torch.softmax(scores, dim=-1)
        x = x + self.o((att @ v).transpose(1, 2).reshape(B, T, D))
        x = x + self.ffn_out(F.gelu(self.ffn_in(self.norm2(x))))
        return (x, att) if return_attn else (x, None)


ADAPTER_TARGETS = ("q", "k", "v", "o")


class Decoder(nn.Module):
    def __init__(self, config: DecoderConfig):
        super().__init__()
        self.config = config
        state = torch.random.get_rng_state()
        torch.manual_seed(config.seed)
        try:
            self.embed = nn.Embedding(config.vocab_size, config.d_model)
            nn.init.normal_(self.embed.weight, std=0.02)
            self.blocks = nn.ModuleList(
                DecoderBlock(config.d_model, config.n_heads, config.ffn_mult) for _ in range(config.n_blocks)
            )
            self.norm = nn.LayerNorm(config.d_model)
            self.head = nn.Linear(config.d_model, config.vocab_size)
        finally:
            torch.random.set_rng_state(state)
        self.adapter_rank = 0
        self.adapter_alpha = 0.0

    # -- adapters ------------------------------------------------------------------

    def attach_adapters(self, rank: int, alpha: float, seed: int = 0) -> None:
        if self.adapter_rank:
            raise RuntimeError("adapters already attached")
        gen = torch.Generator().manual_seed(seed)
        for block in self.blocks:
            for name in ADAPTER_TARGETS:
                setattr(block, name, LoRALinear(getattr(block, name), rank, alpha, gen))
        self.adapter_rank = rank
        self.adapter_alpha = alpha

    def adapter_parameters(self) -> list[nn.Parameter]:
        return [p for n, p in self.named_parameters() if n.endswith(".A") or n.endswith(".B")]

    def base_state(self) -> dict:
        """Non-adapter parameters under their base names."""
        return {n.replace(".base.", "."): p for n, p in self.named_parameters()
                if not (n.endswith(".A") or n.endswith(".B"))}

    # -- forward ---------------------------------------------------------------------

    def forward(self, tokens: Optional[torch.Tensor] = None, embeds: Optional[torch.Tensor] = None,
                key_mask: Optional[torch.Tensor] = None, positions: Optional[torch.Tensor] = None,
                return_attn: bool = False):
        """Logits ``[B, T, V]`` for token ids or precomputed input embeddings.

        ``key_mask`` marks real (non-pad) positions; pads are never attended
        to except by themselves. ``positions`` default to ``cumsum(key_mask) - 1``
        so left padding does not shift rotary phases.
        """
        x = self.embed(tokens) if embeds is None else embeds
        B, T, _ = x.shape
        if key_mask is None:
            key_mask = torch.ones(B, T, dtype=torch.bool, device=x.device)
        if positions is None:
            positions = (key_mask.long().cumsum(1) - 1).clamp(min=0)
        cos, sin = rope_tables(positions, self.config.d_model // self.config.n_heads, self.config.rope_base)
        causal = torch.ones(T, T, dtype=torch.bool, device=x.device).tril()
        eye = torch.eye(T, dtype=torch.bool, device=x.device)
        mask = (causal[None] & key_mask[:, None, :]) | eye[None]
        attns = []
        for block in self.blocks:
            x, att = block(x, cos, sin, mask, return_attn)
            if return_attn:
                attns.append(att)
        logits = self.head(self.norm(x))
        if return_attn:
            # mean over layers and heads: [B, T, T]
            return logits, torch.stack(attns).mean(dim=(0, 2))
        return logits


class VisionProjector(nn.Module):
    """Learnable queries cross-attend over visual tokens; a 2-layer GELU MLP maps to decoder width."""

    def __init__(self, config: ProjectorConfig):
        super().__init__()
        if config.c_in % config.n_heads:
            raise GeneratorShapeError("c_in must be divisible by the projector head count")
        self.config = config
        state = torch.random.get_rng_state()
        torch.manual_seed(config.seed)
        try:
            self.queries = nn.Parameter(torch.randn(config.n_queries, config.c_in) / math.sqrt(config.c_in))
            self.norm_kv = nn.LayerNorm(config.c_in)
            self.attn = nn.MultiheadAttention(config.c_in, config.n_heads, batch_first=True)
            self.mlp_in = nn.Linear(config.c_in, config.hidden)
            self.mlp_out = nn.Linear(config.hidden, config.d_model)
        finally:
            torch.random.set_rng_state(state)

    def forward(self, visual: torch.Tensor) -> torch.Tensor:
        """``[B, N, C_in]`` -> ``[B, M, d_model]`` for any token count ``N``."""
        if visual.dim() == 2:
            visual = visual.unsqueeze(0)
        if visual.shape[-1] != self.config.c_in:
            raise GeneratorShapeError(f"visual token dim {visual.shape[-1]} != projector c_in {self.config.c_in}")
        kv = self.norm_kv(visual)
        q = self.queries.unsqueeze(0).expand(visual.shape[0], -1, -1)
        pooled, _ = self.attn(q, kv, kv, need_weights=False)
        return self.mlp_out(F.gelu(self.mlp_in(pooled)))


def project(visual: torch.Tensor, proj: VisionProjector) -> torch.Tensor:
    return proj(visual)
