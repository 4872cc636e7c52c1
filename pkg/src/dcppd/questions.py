"""Question sets for the three-level hierarchy (presence, laterality, lobe).

The question strings are canonical: they key label JSON files, order probe
outputs and cue entities, and index metrics tables.
"""
from __future__ import annotations

import hashlib
from dataclasses import dataclass
from typing import Optional

import numpy as np

KINDS = ("nodule", "consolidation", "ggo", "pleural_effusion")
LUNG_KINDS = ("nodule", "consolidation", "ggo")
SIDES = ("left", "right")
LOBES = ("RUL", "RML", "RLL", "LUL", "LLL")
LOBE_SIDE = {"RUL": "right", "RML": "right", "RLL": "right", "LUL": "left", "LLL": "left"}
LOBE_NAMES = {
    "RUL": "right upper lobe",
    "RML": "right middle lobe",
    "RLL": "right lower lobe",
    "LUL": "left upper lobe",
    "LLL": "left lower lobe",
}

QS1_FULL = (
    "Is there any medical material or device present?",
    "Is there arterial wall calcification?",
    "Is cardiomegaly or cardiac enlargement suspected based on the imaging findings?",
    "Is pericardial effusion present?",
    "Is there coronary artery wall calcification?",
    "Is there emphysema?",
    "Is there any atelectasis?",
    "Is there any lung opacity (e.g., ground-glass opacity or other parenchymal opacity)?",
    "Is there pulmonary fibrotic sequela?",
    "Is there any consolidation in the lung?",
    "Is there any lung nodule?",
    "Is bronchiectasis present?",
    "Is there peribronchial thickening?",
    "Is there any mosaic attenuation?",
    "Is there any interlobular septal thickening?",
    "Is there any pleural effusion?",
    "Is there any lymphadenopathy in mediastinum or hila?",
    "Is there any hiatal hernia?",
)

# Short cue phrase per presence question, same order as QS1_FULL.
QS1_PHRASES = (
    "medical material or device",
    "arterial wall calcification",
    "cardiomegaly",
    "pericardial effusion",
    "coronary artery wall calcification",
    "emphysema",
    "atelectasis",
    "lung opacity",
    "pulmonary fibrotic sequela",
    "consolidation",
    "lung nodule",
    "bronchiectasis",
    "peribronchial thickening",
    "mosaic attenuation",
    "interlobular septal thickening",
    "pleural effusion",
    "lymphadenopathy",
    "hiatal hernia",
)

KIND_QS1 = {
    "ggo": QS1_FULL[7],
    "consolidation": QS1_FULL[9],
    "nodule": QS1_FULL[10],
    "pleural_effusion": QS1_FULL[15],
}

QS2_FULL = (
    "Is there pleural effusion in the right pleural space?",
    "Is there pleural effusion in the left pleural space?",
    "Is there consolidation in the right lung?",
    "Is there consolidation in the left lung?",
    "Is there ground-glass opacity in the right lung?",
    "Is there ground-glass opacity in the left lung?",
    "Is there a lung nodule in the right lung?",
    "Is there a lung nodule in the left lung?",
)
QS2_KEYS = tuple(
    (kind, side)
    for kind in ("pleural_effusion", "consolidation", "ggo", "nodule")
    for side in ("right", "left")
)

_QS3_NOUN = {"consolidation": "consolidation", "ggo": "ground-glass opacity", "nodule": "a lung nodule"}
QS3_KEYS = tuple((kind, lobe) for kind in ("consolidation", "ggo", "nodule") for lobe in LOBES)
QS3_FULL = tuple(
    f"Is there {_QS3_NOUN[kind]} in the {LOBE_NAMES[lobe]} ({lobe})?" for kind, lobe in QS3_KEYS
)

_SURFACE_NOUN = {
    "pleural_effusion": "pleural effusion",
    "consolidation": "consolidation",
    "ggo": "ground-glass opacity",
    "nodule": "lung nodule",
}
QS2_PHRASES = tuple(
    f"{side} pleural effusion" if kind == "pleural_effusion" else f"{_SURFACE_NOUN[kind]} in {side} lung"
    for kind, side in QS2_KEYS
)
QS3_PHRASES = tuple(f"{_SURFACE_NOUN[kind]} in {LOBE_NAMES[lobe]}" for kind, lobe in QS3_KEYS)

# Presence questions the phantom generator can actually plant, in QS1 order.
QS1_TOY = tuple(q for q in QS1_FULL if q in KIND_QS1.values())


@dataclass(frozen=True)
class QuestionSet:
    id: str
    questions: tuple[str, ...]

    @property
    def arity(self) -> int:
        return len(self.questions)

    def index(self, question: str) -> int:
        return self.questions.index(question)

    def fingerprint(self) -> str:
        return hashlib.sha256("\n".join((self.id,) + self.questions).encode()).hexdigest()[:16]


FULL_SETS = {"QS1": QS1_FULL, "QS2": QS2_FULL, "QS3": QS3_FULL}
PHRASES = {
    "QS1": dict(zip(QS1_FULL, QS1_PHRASES)),
    "QS2": dict(zip(QS2_FULL, QS2_PHRASES)),
    "QS3": dict(zip(QS3_FULL, QS3_PHRASES)),
}
QS_ORDER = ("QS1", "QS2", "QS3")


def question_set(qs_id: str, subset: str = "toy") -> QuestionSet:
    """Return a question set; ``subset`` is ``"toy"`` or ``"full"``.

    The toy subset only differs for QS1, where it keeps the four presence
    questions the phantom generator can plant. QS2 and QS3 are always full.
    """
    if qs_id not in FULL_SETS:
        raise KeyError(f"unknown question set {qs_id!r}")
    if subset not in ("toy", "full"):
        raise ValueError(f"subset must be 'toy' or 'full', got {subset!r}")
    if qs_id == "QS1" and subset == "toy":
        return QuestionSet("QS1", QS1_TOY)
    return QuestionSet(qs_id, FULL_SETS[qs_id])


def default_sets(subset: str = "toy") -> dict[str, QuestionSet]:
    return {qs: question_set(qs, subset) for qs in QS_ORDER}


def question_key(qs_id: str, question: str) -> tuple[str, Optional[str]]:
    """Map a question to ``(kind, location)``; location is None for QS1.

    Presence questions outside the plantable kinds map to kind ``None``.
    """
    if qs_id == "QS1":
        for kind, q in KIND_QS1.items():
            if q == question:
                return kind, None
        return None, None  # type: ignore[return-value]
    if qs_id == "QS2":
        return QS2_KEYS[QS2_FULL.index(question)]
    return QS3_KEYS[QS3_FULL.index(question)]


@dataclass(frozen=True)
class LabelVector:
    """Binary answers to one question set."""

    qs: QuestionSet
    values: np.ndarray

    def __post_init__(self):
        values = np.asarray(self.values, dtype=np.int8)
        if values.shape != (self.qs.arity,):
            raise ValueError(
                f"{self.qs.id} label vector needs length {self.qs.arity}, got shape {values.shape}"
            )
        if not np.isin(values, (0, 1)).all():
            raise ValueError("label values must be 0 or 1")
        object.__setattr__(self, "values", values)

    def to_dict(self) -> dict[str, int]:
        return {q: int(v) for q, v in zip(self.qs.questions, self.values)}

    @classmethod
    def from_dict(cls, qs: QuestionSet, answers: dict[str, int]) -> "LabelVector":
        return cls(qs, np.array([int(answers[q]) for q in qs.questions], dtype=np.int8))

    def __eq__(self, other):
        if not isinstance(other, LabelVector):
            return NotImplemented
        return self.qs == other.qs and np.array_equal(self.values, other.values)

    def __hash__(self):
        return hash((self.qs, self.values.tobytes()))
