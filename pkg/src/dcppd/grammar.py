"""Closed report grammar shared by the renderer and the rule extractor.

Every sentence the renderer can emit is enumerated up front, so parsing is a
table lookup and the extractor is exact on rendered text by construction.
"""
from __future__ import annotations

import re
from typing import NamedTuple, Optional

from .questions import KINDS, LOBE_NAMES, LOBE_SIDE, LOBES, LUNG_KINDS, SIDES

GRAMMAR_VERSION = "1"

BARE = {
    "nodule": "lung nodule",
    "consolidation": "consolidation",
    "ggo": "ground-glass opacity",
    "pleural_effusion": "pleural effusion",
}
_INDEF = {
    "nodule": "a lung nodule",
    "consolidation": "consolidation",
    "ggo": "ground-glass opacity",
}

LUNG_TEMPLATES = (
    "There is {indef} in the {loc}.",
    "{subj} is seen in the {loc}.",
    "{subj} is noted in the {loc}.",
)
EFFUSION_TEMPLATES = (
    "There is a {side} pleural effusion.",
    "A pleural effusion is seen in the {side} pleural space.",
    "A {side} pleural effusion is noted.",
)
NEGATION_TEMPLATES = (
    "No {bare}.",
    "No {bare} is seen.",
    "There is no {bare}.",
)
N_VARIANTS = 3

SECTION_OF = {"nodule": "Lungs", "consolidation": "Lungs", "ggo": "Lungs", "pleural_effusion": "Pleura"}
SECTIONS = ("Lungs", "Pleura")
UNSTRUCTURED_SECTION = "Findings"
ALL_SECTIONS = SECTIONS + (UNSTRUCTURED_SECTION,)

QUERY_TEXT = "Generate the findings report."


class Mention(NamedTuple):
    """Meaning of one report sentence."""

    kind: str
    positive: bool
    side: Optional[str] = None
    lobe: Optional[str] = None


def _cap(s: str) -> str:
    return s[0].upper() + s[1:]


def positive_sentence(kind: str, side: str, lobe: Optional[str], variant: int) -> str:
    if kind == "pleural_effusion":
        return EFFUSION_TEMPLATES[variant].format(side=side)
    loc = LOBE_NAMES[lobe] if lobe else f"{side} lung"
    indef = _INDEF[kind]
    return LUNG_TEMPLATES[variant].format(indef=indef, subj=_cap(indef), loc=loc)


def negative_sentence(kind: str, variant: int) -> str:
    return NEGATION_TEMPLATES[variant].format(bare=BARE[kind])


def _enumerate() -> dict[str, Mention]:
    table: dict[str, Mention] = {}
    for v in range(N_VARIANTS):
        for kind in LUNG_KINDS:
            for side in SIDES:
                table[positive_sentence(kind, side, None, v)] = Mention(kind, True, side, None)
            for lobe in LOBES:
                table[positive_sentence(kind, LOBE_SIDE[lobe], lobe, v)] = Mention(
                    kind, True, LOBE_SIDE[lobe], lobe
                )
        for side in SIDES:
            table[positive_sentence("pleural_effusion", side, None, v)] = Mention(
                "pleural_effusion", True, side, None
            )
        for kind in KINDS:
            table[negative_sentence(kind, v)] = Mention(kind, False)
    return table


SENTENCE_TABLE = _enumerate()

_HEADER_RE = re.compile(r"\b(?:%s)\s*:" % "|".join(ALL_SECTIONS))
_SENTENCE_RE = re.compile(r"[^.]+\.")


class GrammarError(ValueError):
    """A sentence outside the closed report grammar."""

    def __init__(self, sentences):
        self.sentences = list(sentences)
        super().__init__("unparseable sentence(s): " + " | ".join(repr(s) for s in self.sentences))


def split_sentences(text: str) -> list[str]:
    body = _HEADER_RE.sub(" ", text)
    sentences = [" ".join(s.split()) for s in _SENTENCE_RE.findall(body)]
    tail = body[body.rfind(".") + 1:].strip() if "." in body else body.strip()
    if tail:
        sentences.append(" ".join(tail.split()))
    return [s for s in sentences if s]


def parse_report(text: str, strict: bool = True) -> tuple[list[Mention], list[str]]:
    """Parse a report into mentions; returns ``(mentions, failed_sentences)``.

    With ``strict`` any failed sentence raises :class:`GrammarError`.
    """
    mentions, failed = [], []
    for sentence in split_sentences(text):
        m = SENTENCE_TABLE.get(sentence)
        if m is None:
            failed.append(sentence)
        else:
            mentions.append(m)
    if failed and strict:
        raise GrammarError(failed)
    return mentions, failed


def grammar_words() -> set[str]:
    """Every surface word the renderer can produce (before punctuation splitting)."""
    words = set()
    for sentence in SENTENCE_TABLE:
        words.update(sentence.split())
    words.update(f"{s}:" for s in ALL_SECTIONS)
    words.update(QUERY_TEXT.split())
    return words
