"""Deterministic synthetic multimodal world.

Images are g-by-g attribute grids (shape + color per cell, cells may be
empty). Captions are grammar strings naming every occupied cell with its
coordinates, so caption and grid determine each other exactly; VQA pairs are
derived from the grid with exact answers. Everything regenerates bit-
identically from (seed, n_items, grid_size).
"""

from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass, field

import numpy as np

from . import vocab

FORMAT_HEADER = "#qfkit-data v1"

_SHAPE_CODE = {"circle": "c", "square": "s", "triangle": "t"}
_COLOR_CODE = {"red": "r", "green": "g", "blue": "b", "yellow": "y"}
_CODE_SHAPE = {v: k for k, v in _SHAPE_CODE.items()}
_CODE_COLOR = {v: k for k, v in _COLOR_CODE.items()}


class DataFormatError(ValueError):
    """A dataset file does not conform to the v1 line format."""


@dataclass(frozen=True)
class SyntheticImage:
    """g*g grid; each cell is (shape, color) or None for an empty cell.

    Empty cells are canonical (no hidden color) so that distinct grids never
    share a caption.
    """

    grid_size: int
    cells: tuple  # length g*g, row-major; entries None or (shape, color)

    def __post_init__(self):
        if len(self.cells) != self.grid_size * self.grid_size:
            raise ValueError("cell count does not match grid size")
        if not any(c is not None for c in self.cells):
            raise ValueError("image must have at least one occupied cell")

    def cell(self, row: int, col: int):
        return self.cells[row * self.grid_size + col]

    def occupied(self) -> list[tuple[int, int, str, str]]:
        """(row, col, shape, color) for every non-empty cell, row-major."""
        out = []
        for idx, c in enumerate(self.cells):
            if c is not None:
                out.append((idx // self.grid_size, idx % self.grid_size, c[0], c[1]))
        return out

    def encode(self) -> str:
        codes = []
        for c in self.cells:
            codes.append(".." if c is None else _SHAPE_CODE[c[0]] + _COLOR_CODE[c[1]])
        return f"{self.grid_size}:{''.join(codes)}"

    @staticmethod
    def decode(text: str) -> "SyntheticImage":
        try:
            g_str, body = text.split(":", 1)
            g = int(g_str)
        except ValueError as exc:
            raise DataFormatError(f"bad grid encoding {text!r}") from exc
        if len(body) != 2 * g * g:
            raise DataFormatError(f"grid encoding length mismatch in {text!r}")
        cells = []
        for i in range(g * g):
            pair = body[2 * i:2 * i + 2]
            if pair == "..":
                cells.append(None)
            elif pair[0] in _CODE_SHAPE and pair[1] in _CODE_COLOR:
                cells.append((_CODE_SHAPE[pair[0]], _CODE_COLOR[pair[1]]))
            else:
                raise DataFormatError(f"bad cell code {pair!r} in {text!r}")
        return SyntheticImage(g, tuple(cells))


def random_image(rng: np.random.Generator, grid_size: int) -> SyntheticImage:
    """Random grid, at least one cell occupied.

    Cells draw uniformly from 4 shape slots (one of them empty) x 4 colors,
    with the empty slot collapsing to a canonical colorless cell.
    """
    n_shapes, n_colors = len(vocab.SHAPES), len(vocab.COLORS)
    while True:
        cells = []
        for _ in range(grid_size * grid_size):
            state = rng.integers(0, (n_shapes + 1) * n_colors)
            if state < n_colors:
                cells.append(None)
            else:
                shape = vocab.SHAPES[state // n_colors - 1]
                color = vocab.COLORS[state % n_colors]
                cells.append((shape, color))
        if any(c is not None for c in cells):
            return SyntheticImage(grid_size, tuple(cells))


# captions -----------------------------------------------------------

def _phrase(row: int, col: int, shape: str, color: str) -> str:
    return f"{color} {shape} at {vocab.number_word(row)} {vocab.number_word(col)}"


def render_caption(image: SyntheticImage, variant: int) -> list[int]:
    """Token ids describing every occupied cell exactly once.

    Variant 0 lists cells row-major; variant 1 uses a permutation seeded from
    the grid content, so both variants carry the same phrase multiset.
    """
    if variant not in (0, 1):
        raise ValueError(f"caption variant must be 0 or 1, got {variant}")
    entries = image.occupied()
    if variant == 1:
        digest = hashlib.sha256(image.encode().encode()).digest()
        perm_rng = np.random.default_rng(int.from_bytes(digest[:8], "little"))
        entries = [entries[i] for i in perm_rng.permutation(len(entries))]
    return vocab.encode(" ".join(_phrase(*e) for e in entries))


def parse_caption(tokens, grid_size: int) -> SyntheticImage:
    """Inverse of ``render_caption``: rebuild the grid from a caption."""
    words = vocab.decode(tokens).split()
    if len(words) % 5 != 0 or not words:
        raise DataFormatError("caption length is not a multiple of the phrase length")
    cells: list = [None] * (grid_size * grid_size)
    for i in range(0, len(words), 5):
        color, shape, at_word, row_w, col_w = words[i:i + 5]
        if at_word != "at" or color not in vocab.COLORS or shape not in vocab.SHAPES:
            raise DataFormatError(f"malformed phrase {words[i:i + 5]!r}")
        row = vocab.NUMBER_WORDS.index(row_w)
        col = vocab.NUMBER_WORDS.index(col_w)
        if not (0 <= row < grid_size and 0 <= col < grid_size):
            raise DataFormatError("phrase coordinates outside the grid")
        if cells[row * grid_size + col] is not None:
            raise DataFormatError("caption names the same cell twice")
        cells[row * grid_size + col] = (shape, color)
    return SyntheticImage(grid_size, tuple(cells))


def is_grammar_valid(tokens, grid_size: int) -> bool:
    """Membership oracle for the caption/QA grammar.

    Accepts ``caption`` optionally followed by a question/answer block in
    either answer-prompt format, with the answer consistent with the caption.
    """
    words = vocab.decode(tokens).split()
    if "Question:" in words:
        q_at = words.index("Question:")
        caption_words, rest = words[:q_at], words[q_at + 1:]
        if "answer:" in rest:
            a_at = rest.index("answer:")
            if a_at == 0 or rest[a_at - 1] != "Short":
                return False
            question, answer = rest[:a_at - 1], rest[a_at + 1:]
        elif "Answer:" in rest:
            a_at = rest.index("Answer:")
            question, answer = rest[:a_at], rest[a_at + 1:]
        else:
            return False
    else:
        caption_words, question, answer = words, None, None
    try:
        image = parse_caption(vocab.encode(" ".join(caption_words)), grid_size)
    except (DataFormatError, ValueError):
        return False
    if question is None:
        return True
    if len(answer) != 1:
        return False
    try:
        expected = answer_question(image, vocab.encode(" ".join(question)))
    except (ValueError, DataFormatError):
        return False
    return vocab.decode(expected).split() == answer


# VQA ---------------------------------------------------------------

def _question_candidates(image: SyntheticImage) -> list[tuple[str, str]]:
    out = []
    for row, col, shape, color in image.occupied():
        rw, cw = vocab.number_word(row), vocab.number_word(col)
        out.append((f"what color is the {shape} at {rw} {cw}", color))
        out.append((f"what shape is at {rw} {cw}", shape))
    for color in vocab.COLORS:
        count = sum(1 for _, _, _, c in image.occupied() if c == color)
        out.append((f"how many {color} shapes", vocab.number_word(count)))
    return out


def answer_question(image: SyntheticImage, question_tokens) -> list[int]:
    """Exact ground-truth answer for a templated question."""
    text = vocab.decode(question_tokens)
    for q, a in _question_candidates(image):
        if q == text:
            return vocab.encode(a)
    raise ValueError(f"question {text!r} does not apply to this image")


def make_vqa_pair(image: SyntheticImage, rng: np.random.Generator) -> tuple[list[int], list[int]]:
    """Sample one (question, answer) pair; never asks about an empty cell."""
    candidates = _question_candidates(image)
    q, a = candidates[rng.integers(0, len(candidates))]
    return vocab.encode(q), vocab.encode(a)


# dataset ------------------------------------------------------------

@dataclass
class PairItem:
    image: SyntheticImage
    captions: tuple[list[int], list[int]]
    qa: list[tuple[list[int], list[int]]]
    split: str  # train | val | test


@dataclass
class PairDataset:
    seed: int
    grid_size: int
    items: list[PairItem] = field(default_factory=list)

    def split_indices(self, split: str) -> list[int]:
        return [i for i, item in enumerate(self.items) if item.split == split]

    def __len__(self):
        return len(self.items)


def split_sizes(n_items: int) -> tuple[int, int, int]:
    """80/10/10: val and test each get floor(n/10), train takes the rest."""
    n_val = n_items // 10
    n_test = n_items // 10
    return n_items - n_val - n_test, n_val, n_test


def generate_dataset(seed: int, n_items: int, grid_size: int = 2,
                     qa_per_item: int = 2) -> PairDataset:
    """Deterministic dataset of distinct grids with captions and QA pairs."""
    if n_items < 1:
        raise ValueError("n_items must be at least 1")
    rng = np.random.default_rng(seed)
    seen: set[str] = set()
    images: list[SyntheticImage] = []
    while len(images) < n_items:
        img = random_image(rng, grid_size)
        key = img.encode()
        if key not in seen:
            seen.add(key)
            images.append(img)
    n_train, n_val, n_test = split_sizes(n_items)
    splits = ["train"] * n_train + ["val"] * n_val + ["test"] * n_test
    ds = PairDataset(seed=seed, grid_size=grid_size)
    for img, split in zip(images, splits):
        qa = [make_vqa_pair(img, rng) for _ in range(qa_per_item)]
        ds.items.append(PairItem(
            image=img,
            captions=(render_caption(img, 0), render_caption(img, 1)),
            qa=qa,
            split=split,
        ))
    return ds


# file io ------------------------------------------------------------

def save_dataset(ds: PairDataset, path: str) -> None:
    lines = [FORMAT_HEADER]
    for item in ds.items:
        qa_enc = json.dumps([[vocab.decode(q), vocab.decode(a)] for q, a in item.qa],
                            separators=(",", ":"))
        lines.append("\t".join([
            item.split,
            item.image.encode(),
            vocab.decode(item.captions[0]),
            vocab.decode(item.captions[1]),
            qa_enc,
        ]))
    with open(path, "w", encoding="utf-8") as fh:
        fh.write("\n".join(lines) + "\n")


def load_dataset(path: str) -> PairDataset:
    with open(path, encoding="utf-8") as fh:
        lines = fh.read().splitlines()
    if not lines or lines[0] != FORMAT_HEADER:
        raise DataFormatError(f"missing or unsupported header (expected {FORMAT_HEADER!r})")
    ds = PairDataset(seed=-1, grid_size=0)
    for ln, line in enumerate(lines[1:], start=2):
        if not line:
            continue
        fields = line.split("\t")
        if len(fields) != 5:
            raise DataFormatError(f"line {ln}: expected 5 tab-separated fields")
        split, grid_enc, cap0, cap1, qa_enc = fields
        if split not in ("train", "val", "test"):
            raise DataFormatError(f"line {ln}: unknown split {split!r}")
        image = SyntheticImage.decode(grid_enc)
        if ds.grid_size == 0:
            ds.grid_size = image.grid_size
        elif image.grid_size != ds.grid_size:
            raise DataFormatError(f"line {ln}: mixed grid sizes")
        try:
            qa_raw = json.loads(qa_enc)
            qa = [(vocab.encode(q), vocab.encode(a)) for q, a in qa_raw]
            captions = (vocab.encode(cap0), vocab.encode(cap1))
        except (json.JSONDecodeError, ValueError) as exc:
            raise DataFormatError(f"line {ln}: {exc}") from exc
        ds.items.append(PairItem(image=image, captions=captions, qa=qa, split=split))
    if not ds.items:
        raise DataFormatError("dataset contains no items")
    return ds


def file_sha256(path: str) -> str:
    digest = hashlib.sha256()
    with open(path, "rb") as fh:
        digest.update(fh.read())
    return digest.hexdigest()


# frozen-LM pretraining corpus ---------------------------------------

def corpus_from_dataset(ds: PairDataset) -> list[str]:
    """Text-only pretraining lines derived from the train split.

    Per item: both caption variants alone, plus grounded question/answer
    continuations of variant 0 in both answer-prompt formats. The grounded
    lines are what give the frozen LM its text-conditioned QA ability.
    """
    lines = []
    for idx in ds.split_indices("train"):
        item = ds.items[idx]
        cap0 = vocab.decode(item.captions[0])
        cap1 = vocab.decode(item.captions[1])
        lines.append(cap0)
        lines.append(cap1)
        for q, a in item.qa:
            q_text, a_text = vocab.decode(q), vocab.decode(a)
            lines.append(f"{cap0} Question: {q_text} Answer: {a_text}")
            lines.append(f"{cap1} Question: {q_text} Short answer: {a_text}")
    return lines


def save_corpus(lines: list[str], path: str) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        fh.write("\n".join(lines) + "\n")


def load_corpus(path: str) -> list[str]:
    with open(path, encoding="utf-8") as fh:
        return [line for line in fh.read().splitlines() if line]
