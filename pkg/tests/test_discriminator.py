import numpy as np
import pytest
import torch
from hypothesis import given, settings
from hypothesis import strategies as st

from dcppd.discriminator import (
    CueConfigError,
    OptimConfig,
    ProbeShapeError,
    auroc,
    compute_pos_weights,
    metrics_from_predictions,
    predict,
    simulate_cue_source,
    train_probe,
    weighted_bce,
)
from dcppd.questions import QuestionSet

import oracles

QS = QuestionSet("T", ("a?", "b?"))


def test_pos_weight_effusion_example():
    labels = np.zeros((367 + 2672, 1), np.int8)
    labels[:367] = 1
    w, excluded = compute_pos_weights(labels)
    assert w[0] == pytest.approx(2672 / 367)
    assert w[0] == pytest.approx(7.281, abs=1e-3)
    assert not excluded[0]


def test_class_without_positives_is_excluded():
    w, excluded = compute_pos_weights(np.array([[0, 1], [0, 0]]))
    assert excluded.tolist() == [True, False]
    assert w[0] == 1.0


def test_weighted_bce_matches_formula():
    z = torch.tensor([[0.3, -1.2], [2.0, 0.1]], dtype=torch.float64)
    y = torch.tensor([[1.0, 0.0], [0.0, 1.0]], dtype=torch.float64)
    w = torch.tensor([3.0, 0.5], dtype=torch.float64)
    s = torch.sigmoid(z)
    manual = -(w * y * torch.log(s) + (1 - y) * torch.log(1 - s)).mean()
    assert torch.allclose(weighted_bce(z, y, w), manual, rtol=1e-12)


def test_weighted_bce_gradients():
    z = torch.randn(4, 3, dtype=torch.float64, requires_grad=True)
    y = (torch.rand(4, 3) > 0.5).double()
    w = torch.tensor([2.0, 1.0, 0.3], dtype=torch.float64)
    assert torch.autograd.gradcheck(lambda t: weighted_bce(t, y, w), (z,), eps=1e-6, atol=1e-7, rtol=1e-3)


def test_probe_learns_separable_labels():
    rng = np.random.default_rng(0)
    x = rng.normal(size=(400, 5))
    y = np.stack([x[:, 0] > 0.5, x[:, 1] + x[:, 2] > 0], axis=1).astype(np.int8)
    probe = train_probe(x[:300], y[:300], QS, OptimConfig(epochs=200, batch_size=64))
    values, scores = predict(probe, x[300:])
    rep = metrics_from_predictions(QS, values, y[300:], scores)
    # balanced weighting trades precision for recall at threshold 0.5; ranking is what it learns
    assert rep.macro_auroc > 0.97
    assert rep.macro_recall > 0.9
    assert probe.embedding_dim == 5
    # a single embedding works too
    v1, _ = predict(probe, x[300])
    assert v1.tolist() == values[0].tolist()


def test_probe_rejects_misaligned_inputs():
    with pytest.raises(ProbeShapeError):
        train_probe(np.zeros((3, 4)), np.zeros((2, 2)), QS)
    with pytest.raises(ProbeShapeError):
        train_probe(np.zeros((3, 4)), np.zeros((3, 3)), QS)


def test_threshold_ties_go_positive():
    from dcppd.discriminator import LinearProbe

    probe = LinearProbe(np.zeros((2, 1)), np.zeros(2), np.full(2, 0.5), QS)
    values, scores = predict(probe, np.zeros((1, 1)))
    assert scores.tolist() == [[0.5, 0.5]]
    assert values.tolist() == [[1, 1]]


def test_hand_confusion_four_samples():
    truth = np.array([[1, 0], [1, 1], [0, 1], [0, 0]])
    pred = np.array([[1, 1], [0, 1], [0, 1], [1, 0]])
    rep = metrics_from_predictions(QS, pred, truth)
    # question a: tp 1, fp 1, fn 1 -> P = R = F1 = 0.5
    a = rep.rows[0]
    assert (a.tp, a.fp, a.fn, a.tn) == (1, 1, 1, 1)
    assert a.precision == a.recall == a.f1 == 0.5
    # question b: tp 2, fp 1, fn 0 -> P 2/3, R 1, F1 0.8
    b = rep.rows[1]
    assert b.precision == pytest.approx(2 / 3, abs=1e-12)
    assert b.recall == 1.0
    assert b.f1 == pytest.approx(0.8, abs=1e-12)
    assert rep.macro_f1 == pytest.approx(0.65, abs=1e-12)


@given(st.lists(st.tuples(st.integers(0, 1), st.integers(0, 1)), min_size=1, max_size=40))
@settings(max_examples=60, deadline=None)
def test_prf_matches_oracle(pairs):
    pred = np.array([[p] for p, _ in pairs])
    truth = np.array([[t] for _, t in pairs])
    row = metrics_from_predictions(QuestionSet("x", ("q",)), pred, truth).rows[0]
    p, r, f = oracles.prf(pred[:, 0], truth[:, 0])
    assert abs(row.precision - p) < 1e-9 and abs(row.recall - r) < 1e-9 and abs(row.f1 - f) < 1e-9


@given(st.lists(st.tuples(st.sampled_from([0.0, 0.25, 0.5, 0.75, 1.0]), st.integers(0, 1)), min_size=2,
                max_size=30))
@settings(max_examples=80, deadline=None)
def test_auroc_matches_pairwise_oracle_with_ties(pairs):
    scores = [s for s, _ in pairs]
    truth = [t for _, t in pairs]
    got = auroc(scores, truth)
    if 0 < sum(truth) < len(truth):
        assert abs(got - oracles.auroc_pairs(scores, truth)) < 1e-6
    else:
        assert got is None


def test_macro_skips_questions_without_positives():
    truth = np.array([[1, 0], [0, 0]])
    pred = np.array([[1, 1], [0, 0]])
    rep = metrics_from_predictions(QS, pred, truth)
    assert rep.macro_f1 == 1.0


def test_simulated_cue_source():
    gt = np.zeros((20000, 2), np.int8)
    noisy = simulate_cue_source(gt, [0.1, 0.3], seed=3)
    assert abs(noisy[:, 0].mean() - 0.1) < 0.01
    assert abs(noisy[:, 1].mean() - 0.3) < 0.01
    assert np.array_equal(simulate_cue_source(gt, 0.2, 5), simulate_cue_source(gt, 0.2, 5))
    assert np.array_equal(simulate_cue_source(gt, 0.0, 5), gt)
    with pytest.raises(CueConfigError):
        simulate_cue_source(gt, 1.5, 0)
