"""Agreement metrics on extracted answers, hierarchy analysis and BLEU."""
from __future__ import annotations

import csv
import io
import math
import warnings
from collections import Counter
from dataclasses import dataclass
from typing import Optional, Sequence

import numpy as np

from ..discriminator import MetricsReport, metrics_from_predictions
from ..questions import (
    KIND_QS1,
    KINDS,
    LOBE_SIDE,
    QS2_FULL,
    QS2_KEYS,
    QS3_FULL,
    QS3_KEYS,
    QS_ORDER,
    QuestionSet,
)
from .extract import AnswerCache, extract_generated


class AlignmentError(ValueError):
    pass


def _matrix(labels: Sequence[dict], qs_id: str) -> np.ndarray:
    return np.stack([lab[qs_id].values for lab in labels]).astype(np.int8)


def agreement_from_labels(pred: Sequence[dict], ref: Sequence[dict], qs: QuestionSet) -> MetricsReport:
    if len(pred) != len(ref):
        raise AlignmentError(f"{len(pred)} predictions for {len(ref)} references")
    if not pred:
        raise AlignmentError("no samples to score")
    return metrics_from_predictions(qs, _matrix(pred, qs.id), _matrix(ref, qs.id))


def agreement_metrics(pred_reports: dict, ref_reports: dict, qs: QuestionSet,
                      cache: Optional[AnswerCache] = None) -> MetricsReport:
    """Per-question P/R/F1 of generated-report answers against reference-report answers.

    Both arguments map report id -> text and must share ids. Reference
    answers come from ``cache`` (parsed at most once per id); generated
    text is extracted leniently and unparseable sentences are counted in
    ``extra["unparsed_sentences"]``.
    """
    if set(pred_reports) != set(ref_reports):
        missing = sorted(set(ref_reports) ^ set(pred_reports))[:5]
        raise AlignmentError(f"report ids differ between generated and reference sets, e.g. {missing}")
    cache = cache or AnswerCache()
    ids = sorted(ref_reports)
    ref = [cache.get(i, ref_reports[i]) for i in ids]
    sets = dict(cache.sets)
    sets[qs.id] = qs
    pred, n_failed = extract_generated([pred_reports[i] for i in ids], sets)
    report = agreement_from_labels(pred, ref, qs)
    report.extra["unparsed_sentences"] = n_failed
    report.extra["n"] = len(ids)
    return report


def counts_table(labels: Sequence[dict], qs: QuestionSet) -> str:
    """Positive/negative counts per question as CSV."""
    m = _matrix(labels, qs.id)
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["question", "pos", "neg"])
    for c, q in enumerate(qs.questions):
        pos = int(m[:, c].sum())
        w.writerow([q, pos, len(m) - pos])
    return buf.getvalue()


# -- hierarchy ----------------------------------------------------------------------------


def is_consistent(labels: dict) -> bool:
    """True when every lobe answer implies its laterality answer, which implies presence."""
    qs1, qs2, qs3 = labels["QS1"], labels["QS2"], labels["QS3"]
    for i, v in enumerate(qs3.values):
        if v:
            kind, lobe = QS3_KEYS[QS3_FULL.index(qs3.qs.questions[i])]
            q2 = QS2_FULL[QS2_KEYS.index((kind, LOBE_SIDE[lobe]))]
            if not qs2.values[qs2.qs.index(q2)]:
                return False
    for i, v in enumerate(qs2.values):
        if v:
            kind, _ = QS2_KEYS[QS2_FULL.index(qs2.qs.questions[i])]
            q1 = KIND_QS1[kind]
            if q1 in qs1.qs.questions and not qs1.values[qs1.qs.index(q1)]:
                return False
    return True


@dataclass
class HierarchyReport:
    # finding kind -> {"QS1": f1, "QS2": f1, "QS3": f1}; a level is absent if it has no scored question
    per_finding: dict
    deltas: dict  # finding kind -> {"QS1->QS2": d, "QS2->QS3": d}
    consistency: Optional[float]
    n_inconsistent: int = 0

    def csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["finding"] + list(QS_ORDER) + ["QS1->QS2", "QS2->QS3"])
        for kind in KINDS:
            if kind not in self.per_finding:
                continue
            row = self.per_finding[kind]
            d = self.deltas[kind]
            w.writerow([kind] + [_fmt(row.get(q)) for q in QS_ORDER] + [_fmt(d.get("QS1->QS2")), _fmt(d.get("QS2->QS3"))])
        return buf.getvalue()


def _fmt(x) -> str:
    return "" if x is None else f"{x:.6f}"


def _kind_of(qs_id: str, question: str) -> Optional[str]:
    if qs_id == "QS1":
        for kind, q in KIND_QS1.items():
            if q == question:
                return kind
        return None
    if qs_id == "QS2":
        return QS2_KEYS[QS2_FULL.index(question)][0]
    return QS3_KEYS[QS3_FULL.index(question)][0]


def hierarchy_analysis(metrics_qs1: MetricsReport, metrics_qs2: MetricsReport, metrics_qs3: MetricsReport,
                       generated: Optional[Sequence[dict]] = None) -> HierarchyReport:
    """Per-finding F1 at presence, laterality and lobe level, level deltas and consistency.

    Each level's per-finding F1 averages that finding's questions with at
    least one reference positive. ``generated`` holds extracted label dicts
    of generated reports for the consistency rate.
    """
    per: dict = {}
    for qs_id, rep in zip(QS_ORDER, (metrics_qs1, metrics_qs2, metrics_qs3)):
        groups: dict = {}
        for row in rep.rows:
            kind = _kind_of(qs_id, row.question)
            if kind is None or row.n_pos == 0:
                continue
            groups.setdefault(kind, []).append(row.f1)
        for kind, f1s in groups.items():
            per.setdefault(kind, {})[qs_id] = float(np.mean(f1s))
    deltas = {}
    for kind, row in per.items():
        d = {}
        if "QS1" in row and "QS2" in row:
            d["QS1->QS2"] = row["QS2"] - row["QS1"]
        if "QS2" in row and "QS3" in row:
            d["QS2->QS3"] = row["QS3"] - row["QS2"]
        deltas[kind] = d
    consistency, bad = None, 0
    if generated:
        bad = sum(not is_consistent(g) for g in generated)
        consistency = 1.0 - bad / len(generated)
    return HierarchyReport(per, deltas, consistency, bad)


# -- BLEU -----------------------------------------------------------------------------------


@dataclass(frozen=True)
class BleuResult:
    mean: float
    per_order: tuple
    brevity_penalty: float
    empty_candidate: bool = False


def _ngrams(tokens: Sequence[str], n: int) -> Counter:
    return Counter(tuple(tokens[i:i + n]) for i in range(len(tokens) - n + 1))


def bleu(candidate: Sequence[str], reference: Sequence[str], max_order: int = 4) -> BleuResult:
    """Cumulative BLEU-1..N (uniform weights) with clipped precision and brevity penalty.

    A zero clipped precision at any order makes that and every higher
    cumulative score 0; no smoothing is applied.
    """
    candidate, reference = list(candidate), list(reference)
    if not candidate:
        warnings.warn("empty candidate scores BLEU 0")
        return BleuResult(0.0, (0.0,) * max_order, 0.0, True)
    c, r = len(candidate), len(reference)
    bp = 1.0 if c > r else math.exp(1.0 - r / c)
    log_p = []
    scores = []
    for n in range(1, max_order + 1):
        cand = _ngrams(candidate, n)
        total = sum(cand.values())
        ref = _ngrams(reference, n)
        match = sum(min(k, ref[g]) for g, k in cand.items())
        log_p.append(math.log(match / total) if match and total else -math.inf)
        if any(math.isinf(x) for x in log_p):
            scores.append(0.0)
        else:
            scores.append(bp * math.exp(sum(log_p) / n))
    return BleuResult(sum(scores) / max_order, tuple(scores), bp)


def bleu_mean(candidate, reference) -> float:
    """Mean of BLEU-1..4; strings are split with the report tokenizer."""
    from ..generator.tokenizer import split_words

    if isinstance(candidate, str):
        candidate = split_words(candidate)
    if isinstance(reference, str):
        reference = split_words(reference)
    return bleu(candidate, reference).mean


def corpus_bleu_mean(candidates: Sequence, references: Sequence) -> float:
    """Average sentence-level mean BLEU over aligned pairs."""
    if len(candidates) != len(references):
        raise AlignmentError(f"{len(candidates)} candidates for {len(references)} references")
    with warnings.catch_warnings():
        warnings.simplefilter("ignore")
        return float(np.mean([bleu_mean(c, r) for c, r in zip(candidates, references)])) if candidates else 0.0
