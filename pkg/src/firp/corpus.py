"""Text ingestion: byte-level tokens, deterministic splits, synthetic corpora."""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .errors import DataError

__all__ = [
    "Corpus",
    "encode",
    "decode",
    "ingest_corpus",
    "corpus_from_text",
    "make_periodic_text",
    "make_template_text",
]


def encode(text: str) -> list[int]:
    """UTF-8 bytes as token ids; ASCII text stays within a 128-token vocabulary."""
    return list(text.encode("utf-8"))


def decode(tokens) -> str:
    return bytes(int(t) for t in tokens).decode("utf-8")


@dataclass
class Corpus:
    """A tokenised text with disjoint train/validation/test line splits."""

    text: str
    vocab_size: int
    split_ratios: tuple[float, float, float]
    seed: int
    train_tokens: np.ndarray
    val_tokens: np.ndarray
    test_tokens: np.ndarray

    def split(self, name: str) -> np.ndarray:
        return {"train": self.train_tokens, "val": self.val_tokens, "test": self.test_tokens}[name]


def corpus_from_text(
    text: str,
    split_ratios: tuple[float, float, float] = (0.8, 0.1, 0.1),
    seed: int = 0,
) -> Corpus:
    """Split lines deterministically (seeded), preserving original line order
    within each split, then tokenise each split's text."""
    if not text:
        raise DataError("corpus text is empty")
    if abs(sum(split_ratios) - 1.0) > 1e-9 or any(r < 0 for r in split_ratios):
        raise DataError(f"split ratios must be non-negative and sum to 1, got {split_ratios}")
    lines = text.splitlines()
    if not lines:
        raise DataError("corpus has no lines")
    n = len(lines)
    rng = np.random.default_rng(seed)
    order = rng.permutation(n)
    c1 = round(n * split_ratios[0])
    c2 = round(n * (split_ratios[0] + split_ratios[1]))
    assignment = np.empty(n, dtype=np.int64)
    assignment[order[:c1]] = 0
    assignment[order[c1:c2]] = 1
    assignment[order[c2:]] = 2
    parts = []
    for split_id in range(3):
        kept = [lines[i] for i in range(n) if assignment[i] == split_id]
        parts.append("\n".join(kept) + ("\n" if kept else ""))
    vocab_size = 128 if all(b < 128 for b in text.encode("utf-8")) else 256
    train, val, test = (np.array(encode(p), dtype=np.int64) for p in parts)
    return Corpus(
        text=text,
        vocab_size=vocab_size,
        split_ratios=split_ratios,
        seed=seed,
        train_tokens=train,
        val_tokens=val,
        test_tokens=test,
    )


def ingest_corpus(
    path: str | Path,
    split_ratios: tuple[float, float, float] = (0.8, 0.1, 0.1),
    seed: int = 0,
) -> Corpus:
    path = Path(path)
    try:
        text = path.read_text(encoding="utf-8")
    except OSError as e:
        raise DataError(f"cannot read corpus file {path}: {e}") from e
    if not text:
        raise DataError(f"corpus file {path} is empty")
    return corpus_from_text(text, split_ratios, seed)


_PERIODIC_SENTENCES = [
    "the quick brown fox jumps over the lazy dog.",
    "pack my box with five dozen liquor jugs now.",
    "how vexingly quick daft zebras jump around.",
    "sphinx of black quartz judge my vow at once.",
]


def make_periodic_text(copies: int = 200) -> str:
    """Highly predictable text: a short fixed cycle of sentences, one per line."""
    if copies < 1:
        raise DataError("need at least one copy")
    return "\n".join(_PERIODIC_SENTENCES * copies) + "\n"


_TEMPLATE_SLOTS = {
    "name": ["ada", "brook", "casey", "devon", "ember", "flint"],
    "verb": ["paints", "repairs", "studies", "carries", "designs", "polishes"],
    "adj": ["copper", "quiet", "narrow", "bright", "wooden", "crooked"],
    "noun": ["bridge", "lantern", "engine", "compass", "ladder", "telescope"],
    "place": ["harbor", "meadow", "station", "archive", "orchard", "workshop"],
}


def make_template_text(n_lines: int = 800, seed: int = 0) -> str:
    """Mildly varied templated sentences: predictable structure, sampled slots."""
    if n_lines < 1:
        raise DataError("need at least one line")
    rng = np.random.default_rng(seed)
    lines = []
    for _ in range(n_lines):
        pick = {k: v[rng.integers(0, len(v))] for k, v in _TEMPLATE_SLOTS.items()}
        lines.append(
            f"{pick['name']} {pick['verb']} the {pick['adj']} {pick['noun']} near the {pick['place']}."
        )
    return "\n".join(lines) + "\n"
