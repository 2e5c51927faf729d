"""Closed vocabulary over the attribute-grid caption grammar.

Tokenization is whitespace splitting over a fixed word list. Reserved ids:
[DEC]=0 (decoding-task start), [CLS]=1 (encoding start), [PAD]=2, [EOS]=3.
"""

from __future__ import annotations

DEC, CLS, PAD, EOS = 0, 1, 2, 3
SPECIALS = ["[DEC]", "[CLS]", "[PAD]", "[EOS]"]

COLORS = ["red", "green", "blue", "yellow"]
SHAPES = ["circle", "square", "triangle"]
NUMBER_WORDS = ["zero", "one", "two", "three", "four", "five", "six", "seven",
                "eight", "nine", "ten", "eleven", "twelve", "thirteen",
                "fourteen", "fifteen", "sixteen"]
_FILLER = ["at", "what", "color", "is", "the", "shape", "how", "many",
           "shapes", "Question:", "Answer:", "Short", "answer:"]

WORDS = COLORS + SHAPES + NUMBER_WORDS + _FILLER
ALL_TOKENS = SPECIALS + WORDS

_TOKEN_TO_ID = {w: i for i, w in enumerate(ALL_TOKENS)}

VOCAB_SIZE = len(ALL_TOKENS)


def encode(text: str) -> list[int]:
    """Whitespace-tokenize ``text``; unknown words are an error."""
    ids = []
    for word in text.split():
        if word not in _TOKEN_TO_ID:
            raise ValueError(f"word {word!r} is not in the vocabulary")
        ids.append(_TOKEN_TO_ID[word])
    return ids


def decode(ids) -> str:
    return " ".join(ALL_TOKENS[int(i)] for i in ids)


def token_id(word: str) -> int:
    return _TOKEN_TO_ID[word]


def number_word(n: int) -> str:
    if not 0 <= n < len(NUMBER_WORDS):
        raise ValueError(f"no number word for {n}")
    return NUMBER_WORDS[n]


def pad_batch(seqs, prefix: int | None = None, suffix: int | None = None):
    """Stack variable-length id sequences into a PAD-filled int array.

    Optionally prepends/appends a special id to every sequence first.
    """
    import numpy as np

    rows = []
    for seq in seqs:
        row = list(seq)
        if prefix is not None:
            row = [prefix] + row
        if suffix is not None:
            row = row + [suffix]
        rows.append(row)
    width = max(len(r) for r in rows)
    out = np.full((len(rows), width), PAD, dtype=np.int64)
    for i, row in enumerate(rows):
        out[i, :len(row)] = row
    return out
