"""Answer extraction: exact rule extractor, remote yes/no client and the reference cache."""
from __future__ import annotations

import json
import os
import urllib.error
import urllib.request
from dataclasses import dataclass, field
from typing import Callable, Optional, Sequence

import numpy as np

from .. import grammar
from ..questions import (
    KIND_QS1,
    QS2_FULL,
    QS2_KEYS,
    QS3_FULL,
    QS3_KEYS,
    QS_ORDER,
    LabelVector,
    QuestionSet,
    default_sets,
)

EXTRACTOR_VERSION = "rule-1"
QA_TEMPLATE_VERSION = "1"
QA_ENDPOINT_ENV = "DCPPD_QA_ENDPOINT"

QA_PROMPT_TEMPLATE = "Based on the following radiology report:\n{report}\n\n{question} Answer Yes or No only."


class ExtractionError(ValueError):
    """Report text outside the closed grammar."""

    def __init__(self, sentences):
        self.sentences = list(sentences)
        super().__init__("cannot extract answers from: " + " | ".join(repr(s) for s in self.sentences))


class QATransportError(RuntimeError):
    pass


class QAResponseError(ValueError):
    """The remote answer was not a recognizable yes/no."""


@dataclass
class Extraction:
    labels: dict  # qs id -> LabelVector
    failed: list = field(default_factory=list)


def rule_extract(report: str, sets: Optional[dict] = None, strict: bool = True) -> Extraction:
    """Deterministic extraction for the closed grammar.

    Positive statements set presence, laterality and lobe answers; an
    explicit negation of a finding forces its presence answer to 0 even if
    a positive statement also appears. Location answers always follow the
    positive statements, so contradictory text surfaces as a hierarchy
    inconsistency instead of being silently repaired.
    """
    sets = sets or default_sets()
    try:
        mentions, failed = grammar.parse_report(report, strict=strict)
    except grammar.GrammarError as exc:
        raise ExtractionError(exc.sentences) from None
    qs1 = np.zeros(sets["QS1"].arity, np.int8)
    qs2 = np.zeros(sets["QS2"].arity, np.int8)
    qs3 = np.zeros(sets["QS3"].arity, np.int8)
    negated = set()
    for m in mentions:
        if not m.positive:
            negated.add(m.kind)
            continue
        q1 = KIND_QS1[m.kind]
        if q1 in sets["QS1"].questions:
            qs1[sets["QS1"].index(q1)] = 1
        qs2[sets["QS2"].index(QS2_FULL[QS2_KEYS.index((m.kind, m.side))])] = 1
        if m.lobe is not None:
            qs3[sets["QS3"].index(QS3_FULL[QS3_KEYS.index((m.kind, m.lobe))])] = 1
    for kind in negated:
        q1 = KIND_QS1[kind]
        if q1 in sets["QS1"].questions:
            qs1[sets["QS1"].index(q1)] = 0
    labels = {"QS1": LabelVector(sets["QS1"], qs1), "QS2": LabelVector(sets["QS2"], qs2),
              "QS3": LabelVector(sets["QS3"], qs3)}
    return Extraction(labels, failed)


# -- remote extractor -------------------------------------------------------------------


def normalize_answer(raw: str) -> int:
    """Map a response to 1/0; anything other than yes/no (case, whitespace, final period) is rejected."""
    if not isinstance(raw, str):
        raise QAResponseError(f"answer must be a string, got {type(raw).__name__}")
    s = raw.strip().lower().rstrip(".").strip()
    if s == "yes":
        return 1
    if s == "no":
        return 0
    raise QAResponseError(f"non-conforming answer {raw!r}")


@dataclass
class QAClient:
    """One POST per question: ``{report, question, template_version}`` -> ``{answer}``."""

    endpoint: Optional[str] = None
    timeout: float = 30.0
    retries: int = 0
    template_version: str = QA_TEMPLATE_VERSION
    # injectable for tests: (url, payload dict, timeout) -> response dict
    transport: Optional[Callable] = None

    def __post_init__(self):
        if self.endpoint is None:
            self.endpoint = os.environ.get(QA_ENDPOINT_ENV)

    def prompt(self, report: str, question: str) -> str:
        return QA_PROMPT_TEMPLATE.format(report=report, question=question)

    def _post(self, payload: dict) -> dict:
        if self.transport is not None:
            return self.transport(self.endpoint, payload, self.timeout)
        if not self.endpoint:
            raise QATransportError(f"no QA endpoint configured (set {QA_ENDPOINT_ENV})")
        req = urllib.request.Request(self.endpoint, data=json.dumps(payload).encode(),
                                     headers={"Content-Type": "application/json"}, method="POST")
        try:
            with urllib.request.urlopen(req, timeout=self.timeout) as resp:
                return json.loads(resp.read().decode())
        except (urllib.error.URLError, TimeoutError, OSError) as exc:
            raise QATransportError(f"QA request to {self.endpoint} failed: {exc}") from exc
        except json.JSONDecodeError as exc:
            raise QAResponseError(f"QA response is not JSON: {exc}") from exc

    def ask(self, report: str, question: str) -> int:
        payload = {"report": report, "question": question, "template_version": self.template_version}
        last: Optional[Exception] = None
        for _ in range(self.retries + 1):
            try:
                resp = self._post(payload)
                break
            except QATransportError as exc:
                last = exc
        else:
            raise last  # type: ignore[misc]
        if not isinstance(resp, dict) or "answer" not in resp:
            raise QAResponseError(f"response lacks an 'answer' field: {resp!r}")
        return normalize_answer(resp["answer"])

    def extract(self, report: str, qs: QuestionSet) -> LabelVector:
        return LabelVector(qs, np.array([self.ask(report, q) for q in qs.questions], dtype=np.int8))


def extract_answers(report: str, qs: QuestionSet, extractor: str = "rule", client: Optional[QAClient] = None,
                    sets: Optional[dict] = None) -> LabelVector:
    if extractor == "rule":
        sets = dict(sets or default_sets())
        sets[qs.id] = qs
        return rule_extract(report, sets).labels[qs.id]
    if extractor == "remote":
        return (client or QAClient()).extract(report, qs)
    raise ValueError(f"unknown extractor {extractor!r}")


# -- reference cache ----------------------------------------------------------------------


def extractor_fingerprint(sets: dict, version: str = EXTRACTOR_VERSION) -> str:
    return version + ":" + "/".join(sets[q].fingerprint() for q in QS_ORDER)


class AnswerCache:
    """Reference answers parsed once per report id, keyed by extractor fingerprint."""

    def __init__(self, sets: Optional[dict] = None, version: str = EXTRACTOR_VERSION):
        self.sets = sets or default_sets()
        self.fingerprint = extractor_fingerprint(self.sets, version)
        self.entries: dict = {}
        self.parses = 0

    def get(self, report_id: str, report: str) -> dict:
        if report_id not in self.entries:
            self.entries[report_id] = rule_extract(report, self.sets).labels
            self.parses += 1
        return self.entries[report_id]

    def to_json(self) -> str:
        return json.dumps({
            "fingerprint": self.fingerprint,
            "entries": {rid: {qs: [int(v) for v in lv.values] for qs, lv in labels.items()}
                        for rid, labels in sorted(self.entries.items())},
        }, sort_keys=True)

    def load_json(self, payload: str) -> int:
        """Merge cached entries; returns how many were accepted (0 on fingerprint mismatch)."""
        d = json.loads(payload)
        if d.get("fingerprint") != self.fingerprint:
            return 0
        for rid, labels in d["entries"].items():
            self.entries[rid] = {qs: LabelVector(self.sets[qs], np.array(v, np.int8)) for qs, v in labels.items()}
        return len(d["entries"])

    def save(self, path: os.PathLike) -> None:
        with open(path, "w") as f:
            f.write(self.to_json())

    def load(self, path: os.PathLike) -> int:
        if not os.path.exists(path):
            return 0
        with open(path) as f:
            return self.load_json(f.read())


def extract_generated(reports: Sequence[str], sets: Optional[dict] = None) -> tuple[list[dict], int]:
    """Non-strict extraction for model output; returns labels and the number of unparsed sentences."""
    sets = sets or default_sets()
    out, n_failed = [], 0
    for r in reports:
        ex = rule_extract(r, sets, strict=False)
        out.append(ex.labels)
        n_failed += len(ex.failed)
    return out, n_failed
