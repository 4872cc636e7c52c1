"""Toy multi-scale visual encoder.

A 3-D patchification stem produces the fine token grid, iterative
non-overlapping mean pooling builds the scale hierarchy, and a stack of
encoder stages updates every scale with self-attention, a cross-scale
mean-broadcast exchange and a feed-forward block. Grids keep a leading batch
axis: ``[B, C_in, X, Y, Z]``.
"""
from __future__ import annotations

import math
from dataclasses import asdict, dataclass, field
from typing import Optional, Sequence

import torch
import torch.nn.functional as F
from torch import nn


class ShapeError(ValueError):
    pass


class BackboneConfigError(ValueError):
    pass


Triple = tuple[int, int, int]


@dataclass
class BackboneConfig:
    in_channels: int = 3
    patch: Triple = (4, 4, 4)
    c_in: int = 48
    # One stride triple for every level, or a list of L-1 per-level triples.
    strides: object = (2, 2, 2)
    n_scales: int = 3
    n_stages: int = 3
    n_heads: int = 4
    ffn_mult: int = 4
    pool: str = "mean"
    pos_scale: float = 1.0
    # "histogram": deterministic intensity-threshold features; "random": default torch init.
    init: str = "histogram"
    threshold_range: tuple = (0.02, 0.95)
    threshold_gain: float = 30.0
    seed: int = 0

    def level_strides(self) -> list[Triple]:
        return normalize_strides(self.strides, self.n_scales)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["patch"] = list(self.patch)
        d["strides"] = [list(s) for s in self.level_strides()]
        d["threshold_range"] = list(self.threshold_range)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "BackboneConfig":
        d = dict(d)
        d["patch"] = tuple(d["patch"])
        d["strides"] = [tuple(s) for s in d["strides"]]
        if "threshold_range" in d:
            d["threshold_range"] = tuple(d["threshold_range"])
        return cls(**d)


def normalize_strides(strides, n_scales: int) -> list[Triple]:
    if n_scales < 1:
        raise BackboneConfigError("the hierarchy needs at least one scale")
    if len(strides) == 3 and all(isinstance(s, int) for s in strides):
        return [tuple(strides)] * (n_scales - 1)
    strides = [tuple(s) for s in strides]
    if len(strides) != n_scales - 1:
        raise BackboneConfigError(f"need {n_scales - 1} per-level strides, got {len(strides)}")
    return strides


def large_preset() -> BackboneConfig:
    """Production geometry: 11-channel 256^3 input, 384-dim tokens, three scales."""
    return BackboneConfig(
        in_channels=11, patch=(8, 8, 4), c_in=384, strides=[(8, 8, 1), (4, 4, 4)],
        n_scales=3, n_stages=3, n_heads=6,
    )


def hierarchy_shapes(volume_shape: Sequence[int], patch: Triple, strides, n_scales: int) -> list[Triple]:
    """Spatial grid shape per scale; raises :class:`ShapeError` on inexact division."""
    level_strides = normalize_strides(strides, n_scales)
    shape = []
    for axis, (n, p) in enumerate(zip(volume_shape, patch)):
        if n % p:
            raise ShapeError(f"axis {'HWD'[axis]}: size {n} not divisible by patch {p}")
        shape.append(n // p)
    shapes = [tuple(shape)]
    for level, s in enumerate(level_strides, start=2):
        nxt = []
        for axis, (n, st) in enumerate(zip(shapes[-1], s)):
            if n % st:
                raise ShapeError(
                    f"scale {level}: axis {'HWD'[axis]} size {n} not divisible by stride {st}"
                )
            nxt.append(n // st)
        shapes.append(tuple(nxt))
    return shapes


@dataclass
class TokenGrid:
    tokens: torch.Tensor  # [B, C_in, X, Y, Z]
    scale_index: int
    stage_index: int = 0

    @property
    def spatial(self) -> Triple:
        return tuple(self.tokens.shape[-3:])


@dataclass
class TokenHierarchy:
    grids: list[TokenGrid]
    patch: Triple
    strides: list[Triple]

    @property
    def n_scales(self) -> int:
        return len(self.grids)


@dataclass
class StagedHierarchy:
    """``grids[(scale, stage)]`` is the token grid at a scale after a stage (stage 0 = input)."""

    grids: dict = field(default_factory=dict)
    n_scales: int = 0
    n_stages: int = 0

    def get(self, scale: int, stage: int) -> torch.Tensor:
        try:
            return self.grids[(scale, stage)]
        except KeyError:
            raise KeyError(
                f"no token grid for scale {scale}, stage {stage} "
                f"(have scales 1..{self.n_scales}, stages 0..{self.n_stages})"
            ) from None


@dataclass
class MultiScaleEmbedding:
    vector: torch.Tensor  # [B, L * C_in]
    provenance: list[tuple[int, int]]


def strided_mean_pool(x: torch.Tensor, stride: Triple) -> torch.Tensor:
    return F.avg_pool3d(x, kernel_size=stride, stride=stride)


def broadcast_up(x: torch.Tensor, stride: Triple) -> torch.Tensor:
    for axis, s in enumerate(stride):
        x = x.repeat_interleave(s, dim=2 + axis)
    return x


def sinusoidal_positions(spatial: Triple, cell: Triple, extent: Triple, dim: int) -> torch.Tensor:
    """Fixed 3-D sinusoidal code of each token's center in normalized volume coordinates.

    Returns ``[dim, X, Y, Z]``. Tokens at different scales covering the same
    region get nearby codes because coordinates are normalized.
    """
    per_axis = max(2, (dim // 3) // 2 * 2)
    freqs = torch.exp(torch.arange(per_axis // 2, dtype=torch.float64) * math.log(8.0) / max(1, per_axis // 2 - 1))
    codes = []
    for axis in range(3):
        centers = (torch.arange(spatial[axis], dtype=torch.float64) + 0.5) * cell[axis] / extent[axis]
        ang = math.pi * centers[:, None] * freqs[None, :]
        codes.append(torch.cat([torch.sin(ang), torch.cos(ang)], dim=1))  # [n_axis, per_axis]
    X, Y, Z = spatial
    full = torch.cat([
        codes[0].T[:, :, None, None].expand(-1, X, Y, Z),
        codes[1].T[:, None, :, None].expand(-1, X, Y, Z),
        codes[2].T[:, None, None, :].expand(-1, X, Y, Z),
    ])
    pe = torch.zeros(dim, X, Y, Z, dtype=torch.float64)
    k = min(dim, full.shape[0])  # narrow tokens keep a truncated code
    pe[:k] = full[:k]
    return pe


class EncoderStage(nn.Module):
    """One stage: per-scale attention + cross-scale exchange, then feed-forward."""

    def __init__(self, c_in: int, n_heads: int, ffn_mult: int, ffn_norm: bool = True):
        super().__init__()
        self.n_heads = n_heads
        self.norm_attn = nn.LayerNorm(c_in)
        self.qkv = nn.Linear(c_in, 3 * c_in)
        self.attn_out = nn.Linear(c_in, c_in)
        self.norm_x = nn.LayerNorm(c_in)
        self.exchange_out = nn.Linear(c_in, c_in)
        self.norm_ffn = nn.LayerNorm(c_in) if ffn_norm else nn.Identity()
        self.ffn_in = nn.Linear(c_in, ffn_mult * c_in)
        self.ffn_out = nn.Linear(ffn_mult * c_in, c_in)

    def zero_residuals_(self) -> None:
        for lin in (self.attn_out, self.exchange_out, self.ffn_out):
            nn.init.zeros_(lin.weight)
            nn.init.zeros_(lin.bias)

    def _attend(self, seq: torch.Tensor) -> torch.Tensor:
        B, N, C = seq.shape
        q, k, v = self.qkv(seq).view(B, N, 3, self.n_heads, C // self.n_heads).permute(2, 0, 3, 1, 4)
        att = torch.softmax(q @ k.transpose(-1, -2) / math.sqrt(C // self.n_heads), dim=-1)
        return (att @ v).transpose(1, 2).reshape(B, N, C)

    def forward(self, grids: list[torch.Tensor], pos: list[torch.Tensor], strides: list[Triple]) -> list[torch.Tensor]:
        out = []
        L = len(grids)
        for i, x in enumerate(grids):
            B, C = x.shape[:2]
            spatial = x.shape[2:]
            seq = (x + pos[i]).flatten(2).transpose(1, 2)  # [B, N, C]
            h = x.flatten(2).transpose(1, 2) + self.attn_out(self._attend(self.norm_attn(seq)))
            neighbours = []
            if i + 1 < L:
                neighbours.append(broadcast_up(grids[i + 1], strides[i]))
            if i > 0:
                neighbours.append(strided_mean_pool(grids[i - 1], strides[i - 1]))
            if neighbours:
                mix = sum(neighbours) / len(neighbours)
                h = h + self.exchange_out(self.norm_x(mix.flatten(2).transpose(1, 2)))
            h = h + self.ffn_out(F.gelu(self.ffn_in(self.norm_ffn(h))))
            out.append(h.transpose(1, 2).reshape(B, C, *spatial))
        return out


class Backbone(nn.Module):
    def __init__(self, config: Optional[BackboneConfig] = None):
        super().__init__()
        self.config = config = config or BackboneConfig()
        if config.c_in % config.n_heads:
            raise BackboneConfigError("c_in must be divisible by n_heads")
        self.strides = config.level_strides()
        if config.init not in ("histogram", "random"):
            raise BackboneConfigError(f"unknown init {config.init!r}")
        hist = config.init == "histogram"
        gen_state = torch.random.get_rng_state()
        torch.manual_seed(config.seed)
        try:
            self.stem = nn.Conv3d(config.in_channels, config.c_in, kernel_size=config.patch, stride=config.patch)
            self.stages = nn.ModuleList(
                EncoderStage(config.c_in, config.n_heads, config.ffn_mult, ffn_norm=not hist) for _ in range(config.n_stages)
            )
            if hist:
                self._histogram_init()
        finally:
            torch.random.set_rng_state(gen_state)
        self._pos_cache: dict = {}

    @torch.no_grad()
    def _histogram_init(self) -> None:
        """Deterministic stand-in for pretrained weights.

        Stem channel ``k`` averages input channel ``k // T`` over the patch.
        Each feed-forward block turns channel ``k`` into a soft step at
        threshold ``t_{k mod T}`` (difference of two GELU ramps of slope
        ``threshold_gain``), so mean-pooled tokens read out a per-channel
        intensity histogram. Attention and exchange outputs start at zero;
        query/key/value projections keep their seeded random init.
        """
        cfg = self.config
        C, K = cfg.c_in, cfg.in_channels
        T = C // K
        if T < 1:
            raise BackboneConfigError("histogram init needs c_in >= in_channels")
        if cfg.ffn_mult < 2:
            raise BackboneConfigError("histogram init needs ffn_mult >= 2")
        lo, hi = cfg.threshold_range
        thresholds = torch.linspace(lo, hi, T)
        self.stem.weight.zero_()
        self.stem.bias.zero_()
        vol = math.prod(cfg.patch)
        for k in range(T * K):
            self.stem.weight[k, k // T] = 1.0 / vol
        g = cfg.threshold_gain
        for stage in self.stages:
            stage.zero_residuals_()
            stage.ffn_in.weight.zero_()
            stage.ffn_in.bias.zero_()
            for k in range(T * K):
                t = float(thresholds[k % T])
                # ramp pair: GELU(g(x - t)) - GELU(g(x - t) - 1) ~ clamp(g(x - t), 0, 1)
                stage.ffn_in.weight[2 * k, k] = g
                stage.ffn_in.bias[2 * k] = -g * t
                stage.ffn_in.weight[2 * k + 1, k] = g
                stage.ffn_in.bias[2 * k + 1] = -g * t - 1.0
                stage.ffn_out.weight[k, 2 * k] = 1.0
                stage.ffn_out.weight[k, 2 * k + 1] = -1.0

    # -- the five pipeline operations -------------------------------------------------

    def patchify(self, volume: torch.Tensor) -> TokenGrid:
        """``[B, C, H, W, D]`` -> fine grid ``[B, C_in, H/pH, W/pW, D/pD]``."""
        if volume.dim() == 4:
            volume = volume.unsqueeze(0)
        if volume.shape[1] != self.config.in_channels:
            raise ShapeError(f"expected {self.config.in_channels} channels, got {volume.shape[1]}")
        for axis, (n, p) in enumerate(zip(volume.shape[2:], self.config.patch)):
            if n % p:
                raise ShapeError(f"axis {'HWD'[axis]}: size {n} not divisible by patch {p}")
        return TokenGrid(self.stem(volume), 1, 0)

    def build_hierarchy(self, fine: TokenGrid) -> TokenHierarchy:
        return build_hierarchy(fine, self.strides, self.config.n_scales, self.config.patch)

    def encode(self, hier: TokenHierarchy) -> StagedHierarchy:
        """Run all stages; result holds every ``(scale, stage)`` grid, stage 0 included."""
        cfg = self.config
        L = hier.n_scales
        if cfg.n_stages < L:
            raise BackboneConfigError(f"need at least {L} stages for {L} scales, got {cfg.n_stages}")
        grids = [g.tokens for g in hier.grids]
        pos = self._positions(grids, hier)
        staged = StagedHierarchy({}, L, cfg.n_stages)
        for ell, g in enumerate(grids, start=1):
            staged.grids[(ell, 0)] = g
        for u, stage in enumerate(self.stages, start=1):
            grids = stage(grids, pos, hier.strides)
            for ell, g in enumerate(grids, start=1):
                staged.grids[(ell, u)] = g
        return staged

    def forward(self, volume: torch.Tensor) -> StagedHierarchy:
        return self.encode(self.build_hierarchy(self.patchify(volume)))

    def _positions(self, grids, hier: TokenHierarchy) -> list[torch.Tensor]:
        dtype, device = grids[0].dtype, grids[0].device
        key = (tuple(tuple(g.shape[2:]) for g in grids), dtype, device)
        if key not in self._pos_cache:
            extent = tuple(n * p for n, p in zip(grids[0].shape[2:], hier.patch))
            cell = list(hier.patch)
            out = []
            for i, g in enumerate(grids):
                if i > 0:
                    cell = [c * s for c, s in zip(cell, hier.strides[i - 1])]
                pe = sinusoidal_positions(tuple(g.shape[2:]), tuple(cell), extent, g.shape[1])
                out.append((self.config.pos_scale * pe).to(dtype=dtype, device=device).unsqueeze(0))
            self._pos_cache[key] = out
        return self._pos_cache[key]

    def zero_residuals_(self) -> None:
        for stage in self.stages:
            stage.zero_residuals_()

    def visual_tokens(self, staged: StagedHierarchy, scale: int = 1) -> torch.Tensor:
        """Final-stage tokens of one scale plus their positional code, ``[B, N, C_in]``.

        The projector is content-based, so location reaches the generator
        only through these backbone-side positions.
        """
        fine = staged.get(1, 0)
        extent = tuple(n * p for n, p in zip(fine.shape[2:], self.config.patch))
        cell = list(self.config.patch)
        for s in self.strides[:scale - 1]:
            cell = [c * t for c, t in zip(cell, s)]
        grid = staged.get(scale, staged.n_stages)
        pe = sinusoidal_positions(tuple(grid.shape[2:]), tuple(cell), extent, grid.shape[1])
        pe = (self.config.pos_scale * pe).to(grid.dtype).unsqueeze(0)
        return (grid + pe).flatten(2).transpose(1, 2)


def build_hierarchy(fine: TokenGrid, strides, n_scales: int, patch: Triple = (1, 1, 1)) -> TokenHierarchy:
    """``grids[0]`` is ``fine``; each next scale is a non-overlapping mean pool of the previous."""
    level_strides = normalize_strides(strides, n_scales)
    grids = [TokenGrid(fine.tokens, 1, 0)]
    for ell, s in enumerate(level_strides, start=2):
        prev = grids[-1].tokens
        for axis, (n, st) in enumerate(zip(prev.shape[2:], s)):
            if n % st:
                raise ShapeError(f"scale {ell}: axis {'HWD'[axis]} size {n} not divisible by stride {st}")
        grids.append(TokenGrid(strided_mean_pool(prev, s), ell, 0))
    return TokenHierarchy(grids, tuple(patch), level_strides)


def select_tokens(staged: StagedHierarchy, scale: int, stage: int) -> torch.Tensor:
    """Flatten ``h[scale, stage]`` row-major to ``[B, N, C_in]``.

    Token order is x-major, then y, then z: token ``(x, y, z)`` sits at
    index ``(x * Y + y) * Z + z``.
    """
    grid = staged.get(scale, stage)
    return grid.flatten(2).transpose(1, 2)


def unflatten_tokens(seq: torch.Tensor, spatial: Triple) -> torch.Tensor:
    """Inverse of :func:`select_tokens`."""
    B, N, C = seq.shape
    return seq.transpose(1, 2).reshape(B, C, *spatial)


def pool_embedding(staged: StagedHierarchy, pool: str = "mean") -> MultiScaleEmbedding:
    """Concatenate ``Pool(h[l, l])`` for ``l = 1..L`` in scale order."""
    parts, provenance = [], []
    for ell in range(1, staged.n_scales + 1):
        g = staged.get(ell, ell)
        flat = g.flatten(2)
        parts.append(flat.mean(-1) if pool == "mean" else flat.amax(-1))
        provenance.append((ell, ell))
    return MultiScaleEmbedding(torch.cat(parts, dim=1), provenance)
