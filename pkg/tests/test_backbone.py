import numpy as np
import pytest
import torch
from hypothesis import given, settings
from hypothesis import strategies as st

from dcppd.backbone import (
    Backbone,
    BackboneConfig,
    BackboneConfigError,
    EncoderStage,
    ShapeError,
    hierarchy_shapes,
    large_preset,
    pool_embedding,
    select_tokens,
    unflatten_tokens,
)
from dcppd.synthdata import generate_phantom

from oracles import gradcheck_module


@st.composite
def valid_geometry(draw):
    """A backbone config together with a volume shape that divides exactly."""
    n_scales = draw(st.integers(1, 3))
    patch = tuple(draw(st.sampled_from([1, 2, 4])) for _ in range(3))
    strides = [tuple(draw(st.sampled_from([1, 2])) for _ in range(3)) for _ in range(n_scales - 1)]
    coarse = tuple(draw(st.integers(1, 2)) for _ in range(3))
    shape = list(coarse)
    for s in reversed(strides):
        shape = [n * t for n, t in zip(shape, s)]
    volume = tuple(n * p for n, p in zip(shape, patch))
    heads = draw(st.sampled_from([1, 2, 4]))
    c_in = heads * draw(st.integers(1, 3)) * 3
    cfg = BackboneConfig(in_channels=draw(st.integers(1, 3)), patch=patch, c_in=c_in, strides=strides or [],
                         n_scales=n_scales, n_stages=n_scales + draw(st.integers(0, 1)), n_heads=heads,
                         init=draw(st.sampled_from(["random", "histogram"])))
    return cfg, volume


@given(valid_geometry())
@settings(max_examples=120, deadline=None)
def test_shape_laws_hold_for_random_configs(geom):
    cfg, volume = geom
    if cfg.init == "histogram" and cfg.c_in < cfg.in_channels:
        return
    bb = Backbone(cfg)
    x = torch.rand(2, cfg.in_channels, *volume)
    staged = bb(x)
    expected = hierarchy_shapes(volume, cfg.patch, cfg.strides, cfg.n_scales)
    for ell in range(1, cfg.n_scales + 1):
        for u in range(cfg.n_stages + 1):
            assert tuple(staged.get(ell, u).shape) == (2, cfg.c_in, *expected[ell - 1])
    emb = pool_embedding(staged)
    assert emb.vector.shape == (2, cfg.n_scales * cfg.c_in)
    assert emb.provenance == [(ell, ell) for ell in range(1, cfg.n_scales + 1)]


def test_large_preset_shapes():
    cfg = large_preset()
    shapes = hierarchy_shapes((256, 256, 256), cfg.patch, cfg.strides, cfg.n_scales)
    assert shapes == [(32, 32, 64), (4, 4, 64), (1, 1, 16)]
    assert cfg.n_scales * cfg.c_in == 1152


def test_inexact_division_names_axis():
    with pytest.raises(ShapeError, match="axis W"):
        hierarchy_shapes((8, 9, 8), (2, 2, 2), (2, 2, 2), 2)
    with pytest.raises(ShapeError, match="scale 2"):
        hierarchy_shapes((8, 6, 8), (2, 2, 2), (2, 2, 2), 2)


def test_too_few_stages_rejected():
    bb = Backbone(BackboneConfig(n_stages=2, n_scales=3, init="random"))
    with pytest.raises(BackboneConfigError):
        bb(torch.rand(1, 3, 32, 32, 32))


def test_token_flattening_is_row_major_and_invertible():
    bb = Backbone()
    staged = bb(torch.rand(1, 3, 32, 32, 32))
    grid = staged.get(1, 1)
    seq = select_tokens(staged, 1, 1)
    X, Y, Z = grid.shape[2:]
    x, y, z = 3, 5, 2
    assert torch.equal(seq[0, (x * Y + y) * Z + z], grid[0, :, x, y, z])
    assert torch.equal(unflatten_tokens(seq, (X, Y, Z)), grid)


def test_histogram_init_is_deterministic_and_monotone_in_intensity():
    a, b = Backbone(), Backbone()
    for (n, p), (_, q) in zip(a.named_parameters(), b.named_parameters()):
        assert torch.equal(p, q), n
    dim = torch.full((1, 3, 32, 32, 32), 0.2)
    bright = torch.full((1, 3, 32, 32, 32), 0.6)
    e_dim = pool_embedding(a(dim)).vector
    e_bright = pool_embedding(a(bright)).vector
    assert (e_bright >= e_dim - 1e-6).all()
    assert (e_bright > e_dim + 1e-3).any()


def test_histogram_init_needs_enough_channels():
    with pytest.raises(BackboneConfigError):
        Backbone(BackboneConfig(in_channels=4, c_in=2, n_heads=1))


def test_visual_tokens_shape_and_positions():
    bb = Backbone()
    staged = bb(torch.rand(2, 3, 32, 32, 32))
    fine = bb.visual_tokens(staged, 1)
    mid = bb.visual_tokens(staged, 2)
    assert fine.shape == (2, 512, 48)
    assert mid.shape == (2, 64, 48)
    # identical content at every token: only the positional code differs
    flat = bb(torch.full((1, 3, 32, 32, 32), 0.3))
    toks = bb.visual_tokens(flat, 2)[0]
    assert not torch.allclose(toks[0], toks[-1])


def test_phantom_embeddings_differ_with_findings():
    bb = Backbone()
    v1, _ = generate_phantom(1)
    v2, _ = generate_phantom(2)
    x = torch.from_numpy(np.stack([v1.data, v2.data]))
    e = pool_embedding(bb(x)).vector
    assert not torch.allclose(e[0], e[1])


# -- gradients ------------------------------------------------------------------------------------


def test_stem_gradients():
    torch.manual_seed(0)
    bb = Backbone(BackboneConfig(in_channels=2, patch=(2, 2, 2), c_in=4, n_heads=2, n_scales=1, n_stages=1,
                                 init="random"))
    assert gradcheck_module(bb.stem, [torch.rand(1, 2, 4, 4, 4)])


def test_encoder_stage_gradients():
    torch.manual_seed(1)
    stage = EncoderStage(4, 2, 2)
    for p in stage.parameters():  # random residual paths so every branch carries gradient
        torch.nn.init.normal_(p, std=0.3)

    class Wrapped(torch.nn.Module):
        def __init__(self):
            super().__init__()
            self.stage = stage

        def forward(self, fine, coarse):
            pos = [torch.zeros_like(fine[:1]), torch.zeros_like(coarse[:1])]
            return tuple(self.stage([fine, coarse], pos, [(2, 2, 2)]))

    assert gradcheck_module(Wrapped(), [torch.rand(1, 4, 4, 4, 4), torch.rand(1, 4, 2, 2, 2)])
