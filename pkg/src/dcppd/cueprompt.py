"""Cue entities, prompt dropout and the templated cue prompt."""
from __future__ import annotations

import json
from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np

from .questions import PHRASES, QS_ORDER, LabelVector

PHRASE_TABLE_VERSION = "1"
PREAMBLE = "Findings summary:"
EMPTY_CUE = "Findings summary: none provided."
CUE_SOURCES = ("GT", "probe", "noisy", "none")


class DropoutConfigError(ValueError):
    pass


@dataclass(frozen=True)
class CueEntity:
    qs: str
    question_index: int
    surface: str


@dataclass
class CuePrompt:
    text: str
    # (entity, start, end) with token offsets into the prompt's own tokens, end exclusive
    entity_spans: list = field(default_factory=list)
    source: str = "GT"

    @property
    def entities(self) -> list[CueEntity]:
        return [e for e, _, _ in self.entity_spans]

    def to_json(self) -> str:
        return json.dumps({
            "text": self.text,
            "source": self.source,
            "entity_spans": [
                {"qs": e.qs, "question_index": e.question_index, "surface": e.surface, "start": s, "end": t}
                for e, s, t in self.entity_spans
            ],
        })

    @classmethod
    def from_json(cls, payload: str) -> "CuePrompt":
        d = json.loads(payload)
        spans = [(CueEntity(s["qs"], s["question_index"], s["surface"]), s["start"], s["end"])
                 for s in d["entity_spans"]]
        return cls(d["text"], spans, d["source"])


def phrase_table() -> dict:
    """Versioned ``question set -> question index -> surface phrase`` mapping."""
    from .questions import FULL_SETS

    return {
        "version": PHRASE_TABLE_VERSION,
        "phrases": {qs: {str(i): PHRASES[qs][q] for i, q in enumerate(FULL_SETS[qs])} for qs in QS_ORDER},
    }


def surface(qs: str, question: str) -> str:
    return PHRASES[qs][question]


def labels_to_entities(*labels: LabelVector) -> list[CueEntity]:
    """One entity per positive entry, ordered by question set then question."""
    ordered = sorted(labels, key=lambda lv: QS_ORDER.index(lv.qs.id))
    out = []
    for lv in ordered:
        for i, v in enumerate(lv.values):
            if v:
                out.append(CueEntity(lv.qs.id, i, surface(lv.qs.id, lv.qs.questions[i])))
    return out


def prompt_dropout(entities: Sequence[CueEntity], p: float, rng_seed) -> list[CueEntity]:
    """Keep each entity independently with probability ``1 - p``; order is preserved."""
    if not 0.0 <= p <= 1.0:
        raise DropoutConfigError(f"dropout probability must lie in [0, 1], got {p}")
    rng = rng_seed if isinstance(rng_seed, np.random.Generator) else np.random.default_rng(rng_seed)
    keep = rng.random(len(entities)) >= p
    return [e for e, k in zip(entities, keep) if k]


def template(entities: Sequence[CueEntity], source: str = "GT") -> CuePrompt:
    """Render ``Findings summary: a, b, c.``; the empty list gives :data:`EMPTY_CUE`.

    Span offsets count word-level tokens (the generator tokenizer's units),
    with the preamble occupying tokens 0-2.
    """
    from .generator.tokenizer import split_words

    if not entities:
        return CuePrompt(EMPTY_CUE, [], source)
    n_tok = len(split_words(PREAMBLE))
    spans = []
    for i, e in enumerate(entities):
        if i:
            n_tok += 1  # the comma
        width = len(split_words(e.surface))
        spans.append((e, n_tok, n_tok + width))
        n_tok += width
    text = PREAMBLE + " " + ", ".join(e.surface for e in entities) + "."
    return CuePrompt(text, spans, source)


def build_cue(labels: Sequence[LabelVector], p: float = 0.0, rng_seed: Optional[int] = None,
              source: str = "GT") -> CuePrompt:
    entities = labels_to_entities(*labels)
    if p > 0:
        entities = prompt_dropout(entities, p, rng_seed)
    return template(entities, source)
