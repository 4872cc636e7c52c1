import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from dcppd.reliance import (
    AttentionTrace,
    RelianceError,
    load_trace,
    region_mass,
    reliance_report,
    reliance_scores,
    save_trace,
    summary_csv,
    trace_reliance,
)

import oracles


def test_uniform_attention_gives_one_over_s():
    S = 10
    tr = AttentionTrace(np.full((4, S), 1 / S), r_text=(4, 5, 6), r_image=(0, 1, 2, 3))
    assert region_mass(tr, tr.r_text) == pytest.approx(1 / S, abs=1e-15)
    res = trace_reliance(tr)
    assert res.s_text == pytest.approx(0.5)


def test_point_mass_on_region():
    attn = np.zeros((3, 6))
    attn[:, 4] = 1.0
    tr = AttentionTrace(attn, r_text=(3, 4), r_image=(0, 1, 2))
    assert region_mass(tr, tr.r_text) == pytest.approx(1 / 2)
    assert trace_reliance(tr).s_text == 1.0


def test_normalization_example():
    res = reliance_scores(0.2, 0.3)
    assert res.s_text == pytest.approx(0.4, abs=1e-12)
    assert res.s_text + res.s_image == 1.0


def test_summary_example():
    summ = reliance_report([0.3, 0.5], "x")
    assert summ.mean_s_text == pytest.approx(0.4, abs=1e-12)
    assert summ.std_s_text == pytest.approx(0.14142135623730953, abs=1e-12)
    assert summary_csv([summ]) == "setting,mean_S_text,std_S_text\nx,0.400000,0.141421\n"


@given(st.integers(1, 6), st.integers(4, 12), st.integers(0, 10_000))
@settings(max_examples=60, deadline=None)
def test_region_mass_matches_loop_and_scores_sum_to_one(T, S, seed):
    rng = np.random.default_rng(seed)
    attn = rng.random((T, S))
    attn /= attn.sum(1, keepdims=True)
    split = S // 2
    tr = AttentionTrace(attn, r_text=tuple(range(split, S)), r_image=tuple(range(split)))
    got = region_mass(tr, tr.r_text)
    assert abs(got - oracles.region_mass_loop(attn.tolist(), list(tr.r_text))) < 1e-9
    res = trace_reliance(tr)
    assert res.s_text + res.s_image == 1.0


@given(st.lists(st.floats(0, 1), min_size=2, max_size=30))
@settings(max_examples=60, deadline=None)
def test_mean_std_match_oracle(values):
    summ = reliance_report(values)
    m, s = oracles.mean_std(values)
    assert abs(summ.mean_s_text - m) < 1e-9 and abs(summ.std_s_text - s) < 1e-9


def test_errors():
    with pytest.raises(RelianceError):
        AttentionTrace(np.ones((2, 3)), r_text=(1,), r_image=(1, 2))
    with pytest.raises(RelianceError):
        reliance_scores(0.0, 0.0)
    with pytest.raises(RelianceError):
        reliance_report([0.4])
    tr = AttentionTrace(np.ones((2, 3)) / 3, r_text=(1, 2), r_image=())
    with pytest.raises(RelianceError):
        trace_reliance(tr)


def test_trace_file_round_trip(tmp_path):
    tr = AttentionTrace(np.full((2, 5), 0.2), r_text=(2, 3), r_image=(0, 1), r_query=(4,))
    save_trace(tr, tmp_path / "t.safetensors")
    back = load_trace(tmp_path / "t.safetensors")
    assert back.r_text == tr.r_text and back.r_image == tr.r_image and back.r_query == tr.r_query
    np.testing.assert_allclose(back.attn, tr.attn, rtol=1e-7)
