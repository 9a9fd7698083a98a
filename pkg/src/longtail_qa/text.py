"""Text normalization, the unified text-to-text serialization, and the vocab.

One normalizer is shared by the metrics, BM25, and the trainable encoders so
token identities agree everywhere: lowercase, strip punctuation, collapse
whitespace.
"""

from __future__ import annotations

import re
from dataclasses import dataclass
from string import ascii_lowercase

_PUNCT = re.compile(r"[^0-9a-z\s]+")
_WS = re.compile(r"\s+")


def normalize(text: str) -> str:
    text = _PUNCT.sub("", text.lower())
    return _WS.sub(" ", text).strip()


def tokenize(text: str) -> list[str]:
    norm = normalize(text)
    return norm.split(" ") if norm else []


@dataclass(frozen=True)
class SerializedPair:
    source_text: str
    target_text: str


def serialize_instance(instance) -> SerializedPair:
    """Render an instance to the unified lowercase source/target pair.

    Source is question, then (for multiple choice) the lettered options,
    then a newline and the context.  Target is the answer.
    """
    q = instance.question.lower()
    if instance.format == "multiple_choice":
        letters = (f"({ascii_lowercase[i]}) {opt.lower()}"
                   for i, opt in enumerate(instance.options))
        q = q + " " + " ".join(letters)
    return SerializedPair(source_text=f"{q}\n{instance.context.lower()}",
                          target_text=instance.answer.lower())


class Vocab:
    """Word-level vocabulary with pad/bos/eos/unk specials."""

    PAD, BOS, EOS, UNK = 0, 1, 2, 3
    SPECIALS = ("<pad>", "<bos>", "<eos>", "<unk>")

    def __init__(self, words: list[str]):
        self.words = list(self.SPECIALS) + [w for w in words if w not in self.SPECIALS]
        self.index = {w: i for i, w in enumerate(self.words)}

    def __len__(self) -> int:
        return len(self.words)

    @classmethod
    def build(cls, texts, max_size: int | None = None) -> "Vocab":
        counts: dict[str, int] = {}
        for text in texts:
            for tok in tokenize(text):
                counts[tok] = counts.get(tok, 0) + 1
        ordered = sorted(counts, key=lambda w: (-counts[w], w))
        if max_size is not None:
            ordered = ordered[: max(0, max_size - len(cls.SPECIALS))]
        return cls(ordered)

    def encode(self, text: str) -> list[int]:
        return [self.index.get(tok, self.UNK) for tok in tokenize(text)]

    def decode(self, ids) -> str:
        toks = []
        for i in ids:
            i = int(i)
            if i == self.EOS:
                break
            if i > self.UNK:
                toks.append(self.words[i])
            elif i == self.UNK:
                toks.append("<unk>")
        return " ".join(toks)
