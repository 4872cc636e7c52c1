"""Word-level tokenizer over the closed report and cue vocabulary."""
from __future__ import annotations

import re
from typing import Iterable, Sequence

from .. import grammar
from ..questions import PHRASES

PAD, BOS, EOS, IMG, SEP = "<pad>", "<bos>", "<eos>", "<img>", "<sep>"
SPECIALS = (PAD, BOS, EOS, IMG, SEP)
PUNCT = ".,:;()?"

_SPLIT_RE = re.compile(r"[^\s.,:;()?]+|[.,:;()?]")


class VocabularyError(KeyError):
    def __init__(self, word: str):
        self.word = word
        super().__init__(f"word {word!r} is not in the vocabulary")

    def __str__(self):
        return self.args[0]


def split_words(text: str) -> list[str]:
    return _SPLIT_RE.findall(text)


def canonicalize(text: str) -> str:
    """Single spaces between words, none before ``.,:;?)`` or after ``(``."""
    out = ""
    for w in split_words(text):
        if not out:
            out = w
        elif w in ".,:;?)" or out.endswith("("):
            out += w
        else:
            out += " " + w
    return out


def _closed_words() -> list[str]:
    from ..cueprompt import EMPTY_CUE, PREAMBLE

    words = set()
    for text in grammar.grammar_words():
        words.update(split_words(text))
    for table in PHRASES.values():
        for phrase in table.values():
            words.update(split_words(phrase))
    words.update(split_words(EMPTY_CUE))
    words.update(split_words(PREAMBLE))
    words.update(PUNCT)
    return sorted(words)


class Vocabulary:
    def __init__(self, words: Iterable[str]):
        self.tokens = list(SPECIALS) + [w for w in words if w not in SPECIALS]
        self.ids = {t: i for i, t in enumerate(self.tokens)}
        if len(self.ids) != len(self.tokens):
            raise ValueError("duplicate vocabulary entries")

    @classmethod
    def default(cls) -> "Vocabulary":
        return cls(_closed_words())

    def __len__(self):
        return len(self.tokens)

    @property
    def pad_id(self) -> int:
        return self.ids[PAD]

    @property
    def bos_id(self) -> int:
        return self.ids[BOS]

    @property
    def eos_id(self) -> int:
        return self.ids[EOS]

    def encode(self, text: str, add_special: bool = False) -> list[int]:
        ids = []
        for w in split_words(text):
            try:
                ids.append(self.ids[w])
            except KeyError:
                raise VocabularyError(w) from None
        if add_special:
            ids = [self.bos_id] + ids + [self.eos_id]
        return ids

    def decode(self, ids: Sequence[int]) -> str:
        words = [self.tokens[i] for i in ids if self.tokens[i] not in SPECIALS]
        return canonicalize(" ".join(words))


def tokenize(text: str, vocab: Vocabulary | None = None) -> list[int]:
    """``[BOS] + word ids + [EOS]``; the empty string gives ``[BOS, EOS]``."""
    return (vocab or default_vocab()).encode(text, add_special=True)


def detokenize(ids: Sequence[int], vocab: Vocabulary | None = None) -> str:
    return (vocab or default_vocab()).decode(ids)


_DEFAULT = None


def default_vocab() -> Vocabulary:
    global _DEFAULT
    if _DEFAULT is None:
        _DEFAULT = Vocabulary.default()
    return _DEFAULT
