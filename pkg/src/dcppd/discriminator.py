"""Linear multi-label probes on frozen multi-scale embeddings, plus a noisy cue source."""
from __future__ import annotations

import json
import warnings
from dataclasses import dataclass, field
from typing import Optional

import numpy as np
import torch
from scipy.special import expit
from scipy.stats import rankdata

from .questions import QuestionSet


class ProbeShapeError(ValueError):
    pass


class ProbeDivergenceError(RuntimeError):
    def __init__(self, step: int, loss: float):
        self.step = step
        super().__init__(f"probe loss became non-finite ({loss}) at step {step}")


class CueConfigError(ValueError):
    pass


@dataclass
class OptimConfig:
    lr: float = 1e-3
    epochs: int = 1000
    batch_size: int = 256
    seed: int = 0
    standardize: bool = True

    @classmethod
    def full_scale(cls) -> "OptimConfig":
        """Schedule for large training sets; the batch exceeds toy-scale datasets."""
        return cls(lr=1e-3, epochs=1000, batch_size=8192)


def compute_pos_weights(labels) -> tuple[np.ndarray, np.ndarray]:
    """Per-class ``N_neg / N_pos`` on a ``[N, C]`` 0/1 matrix.

    Returns ``(weights, excluded)``. A class with no positives gets weight 1
    and ``excluded=True``; callers drop it from the loss.
    """
    y = np.asarray(labels)
    if y.ndim == 1:
        y = y[:, None]
    pos = y.astype(np.int64).sum(axis=0)
    neg = y.shape[0] - pos
    excluded = pos == 0
    weights = np.ones(y.shape[1], dtype=np.float64)
    ok = ~excluded
    weights[ok] = neg[ok] / pos[ok]
    return weights, excluded


def weighted_bce(logits: torch.Tensor, targets: torch.Tensor, pos_weight: torch.Tensor,
                 class_mask: Optional[torch.Tensor] = None) -> torch.Tensor:
    """Mean over samples and included classes of ``w*y*(-log s(z)) + (1-y)*(-log(1-s(z)))``."""
    per = torch.nn.functional.binary_cross_entropy_with_logits(
        logits, targets, pos_weight=pos_weight, reduction="none"
    )
    if class_mask is not None:
        per = per[:, class_mask]
    return per.mean()


@dataclass
class LinearProbe:
    weights: np.ndarray  # [C, E]
    bias: np.ndarray  # [C]
    thresholds: np.ndarray  # [C]
    qs: QuestionSet
    excluded: np.ndarray = field(default=None)
    loss_trace: list = field(default_factory=list)

    def __post_init__(self):
        if self.excluded is None:
            self.excluded = np.zeros(len(self.bias), dtype=bool)

    @property
    def embedding_dim(self) -> int:
        return self.weights.shape[1]

    def to_tensors(self) -> tuple[dict, dict]:
        tensors = {
            "weights": self.weights.astype(np.float32),
            "bias": self.bias.astype(np.float32),
            "thresholds": self.thresholds.astype(np.float32),
        }
        header = {
            "qs": self.qs.id,
            "questions": list(self.qs.questions),
            "thresholds": [float(t) for t in self.thresholds],
            "excluded": [bool(e) for e in self.excluded],
        }
        return tensors, header


def train_probe(embeddings, labels, qs: QuestionSet, opt: Optional[OptimConfig] = None) -> LinearProbe:
    """Fit a linear multi-label probe with class-balanced BCE and Adam.

    Inputs are z-scored with training statistics during optimization; the
    scaling is folded back so the returned probe acts on raw embeddings.
    """
    opt = opt or OptimConfig()
    x = np.asarray(embeddings, dtype=np.float64)
    y = np.asarray(labels, dtype=np.float64)
    if x.ndim != 2 or y.ndim != 2 or x.shape[0] != y.shape[0]:
        raise ProbeShapeError(f"embeddings {x.shape} and labels {y.shape} are not aligned [N, E] / [N, C]")
    if y.shape[1] != qs.arity:
        raise ProbeShapeError(f"{qs.id} has {qs.arity} questions but labels have {y.shape[1]} columns")
    weights, excluded = compute_pos_weights(y)
    if excluded.any():
        warnings.warn(f"{qs.id}: {int(excluded.sum())} class(es) without positives excluded from the loss")
    if opt.standardize:
        mu, sd = x.mean(0), x.std(0)
        sd = np.where(sd > 0, sd, 1.0)
    else:
        mu, sd = np.zeros(x.shape[1]), np.ones(x.shape[1])
    xt = torch.from_numpy((x - mu) / sd).float()
    yt = torch.from_numpy(y).float()
    gen = torch.Generator().manual_seed(opt.seed)
    lin = torch.nn.Linear(x.shape[1], y.shape[1])
    with torch.no_grad():
        bound = 1.0 / np.sqrt(x.shape[1])
        lin.weight.uniform_(-bound, bound, generator=gen)
        lin.bias.zero_()
    optim = torch.optim.Adam(lin.parameters(), lr=opt.lr)
    pw = torch.from_numpy(weights).float()
    mask = torch.from_numpy(~excluded)
    n = x.shape[0]
    trace, step = [], 0
    for _ in range(opt.epochs):
        order = torch.randperm(n, generator=gen)
        for start in range(0, n, opt.batch_size):
            idx = order[start:start + opt.batch_size]
            loss = weighted_bce(lin(xt[idx]), yt[idx], pw, mask if mask.any() else None)
            if not torch.isfinite(loss):
                raise ProbeDivergenceError(step, float(loss))
            optim.zero_grad()
            loss.backward()
            optim.step()
            step += 1
        trace.append(loss.item())
    W = lin.weight.detach().double().numpy() / sd[None, :]
    b = lin.bias.detach().double().numpy() - W @ mu
    return LinearProbe(W, b, np.full(y.shape[1], 0.5), qs, excluded, trace)


def predict(probe: LinearProbe, emb) -> tuple[np.ndarray, np.ndarray]:
    """Return ``(values, scores)``; ``values = scores >= thresholds`` (ties go positive).

    ``emb`` may be one embedding ``[E]`` or a batch ``[N, E]``.
    """
    x = np.asarray(emb, dtype=np.float64)
    if x.shape[-1] != probe.embedding_dim:
        raise ProbeShapeError(f"embedding length {x.shape[-1]} != probe input {probe.embedding_dim}")
    scores = expit(x @ probe.weights.T + probe.bias)
    return (scores >= probe.thresholds).astype(np.int8), scores


@dataclass
class QuestionMetrics:
    question: str
    precision: float
    recall: float
    f1: float
    auroc: Optional[float]
    tp: int
    fp: int
    fn: int
    tn: int

    @property
    def n_pos(self) -> int:
        return self.tp + self.fn

    def row(self) -> dict:
        return {"question": self.question, "precision": self.precision, "recall": self.recall,
                "f1": self.f1, "auroc": self.auroc}


@dataclass
class MetricsReport:
    """Per-question agreement metrics for one question set.

    Macro averages run over questions with at least one reference positive;
    questions without positives stay in ``rows`` but carry no AUROC.
    """

    qs: str
    rows: list[QuestionMetrics]
    extra: dict = field(default_factory=dict)
    # Filled in from external tools when available; never computed here.
    meteor: Optional[float] = None
    crg: Optional[float] = None

    def _evaluable(self):
        return [r for r in self.rows if r.n_pos > 0]

    def _macro(self, attr):
        rows = self._evaluable()
        vals = [getattr(r, attr) for r in rows if getattr(r, attr) is not None]
        return float(np.mean(vals)) if vals else 0.0

    @property
    def macro_precision(self) -> float:
        return self._macro("precision")

    @property
    def macro_recall(self) -> float:
        return self._macro("recall")

    @property
    def macro_f1(self) -> float:
        return self._macro("f1")

    @property
    def macro_auroc(self) -> Optional[float]:
        vals = [r.auroc for r in self._evaluable() if r.auroc is not None]
        return float(np.mean(vals)) if vals else None

    def f1_of(self, question: str) -> float:
        for r in self.rows:
            if r.question == question:
                return r.f1
        raise KeyError(question)

    def jsonl(self) -> str:
        return "".join(json.dumps(r.row()) + "\n" for r in self.rows)

    def summary(self) -> dict:
        return {"qs": self.qs, "macro_precision": self.macro_precision, "macro_recall": self.macro_recall,
                "macro_f1": self.macro_f1, "macro_auroc": self.macro_auroc, "meteor": self.meteor,
                "crg": self.crg}


def confusion_metrics(pred, truth) -> tuple[float, float, float, int, int, int, int]:
    pred = np.asarray(pred).astype(bool)
    truth = np.asarray(truth).astype(bool)
    tp = int((pred & truth).sum())
    fp = int((pred & ~truth).sum())
    fn = int((~pred & truth).sum())
    tn = int((~pred & ~truth).sum())
    p = tp / (tp + fp) if tp + fp else 0.0
    r = tp / (tp + fn) if tp + fn else 0.0
    f1 = 2 * p * r / (p + r) if p + r else 0.0
    return p, r, f1, tp, fp, fn, tn


def auroc(scores, truth) -> Optional[float]:
    """Mann-Whitney rank statistic with mid-ranks for ties; None without both classes."""
    truth = np.asarray(truth).astype(bool)
    n_pos = int(truth.sum())
    n_neg = truth.size - n_pos
    if n_pos == 0 or n_neg == 0:
        return None
    ranks = rankdata(np.asarray(scores, dtype=np.float64))
    return float((ranks[truth].sum() - n_pos * (n_pos + 1) / 2) / (n_pos * n_neg))


def metrics_from_predictions(qs: QuestionSet, pred, truth, scores=None) -> MetricsReport:
    pred = np.asarray(pred)
    truth = np.asarray(truth)
    rows = []
    for c, question in enumerate(qs.questions):
        p, r, f1, tp, fp, fn, tn = confusion_metrics(pred[:, c], truth[:, c])
        auc = auroc(scores[:, c], truth[:, c]) if scores is not None else None
        rows.append(QuestionMetrics(question, p, r, f1, auc, tp, fp, fn, tn))
    return MetricsReport(qs.id, rows)


def evaluate_probe(probe: LinearProbe, embeddings, labels) -> MetricsReport:
    values, scores = predict(probe, embeddings)
    return metrics_from_predictions(probe.qs, values, labels, scores)


def simulate_cue_source(gt, flip_rates, seed) -> np.ndarray:
    """Flip each label entry independently with its class rate.

    ``gt`` is ``[C]`` or ``[N, C]``; ``flip_rates`` is a scalar or ``[C]``.
    """
    gt = np.asarray(gt).astype(np.int8)
    rates = np.broadcast_to(np.asarray(flip_rates, dtype=np.float64), gt.shape[-1:])
    if ((rates < 0) | (rates > 1)).any():
        raise CueConfigError(f"flip rates must lie in [0, 1], got {rates}")
    rng = np.random.default_rng(seed)
    flips = rng.random(gt.shape) < rates
    return np.where(flips, 1 - gt, gt).astype(np.int8)
