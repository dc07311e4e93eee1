"""
Bundled Toy Corpora
===================
Deterministic generators for the built-in datasets. Each generator returns
raw records (dicts keyed by column name) per split; the split sizes come from
the dataset descriptor.

Corpora:
- toy-sentiment: templated movie sentences, label 0/1, balanced per split
- parity: length-8 bit strings, label 0 (even) / 1 (odd), balanced per split;
  train enumerates every string
- copy: three letters from a-h echoed back
- toy-arith: single-digit a + b, answer 0..18
"""
from __future__ import annotations

from typing import Callable

import numpy as np

from peftlab.core.errors import ConfigError

SPLIT_ORDER = ("train", "validation", "test")

NOUNS = ("movie", "film", "plot")
ADVERBS = ("very", "really", None)
POSITIVE = ("great", "good", "fun")
NEGATIVE = ("bad", "dull", "awful")
LETTERS = tuple("abcdefgh")
NUMERALS = (
    "zero", "one", "two", "three", "four", "five", "six", "seven", "eight", "nine",
    "ten", "eleven", "twelve", "thirteen", "fourteen", "fifteen", "sixteen",
    "seventeen", "eighteen",
)


def _rng(corpus_seed: int, split: str) -> np.random.Generator:
    return np.random.default_rng((corpus_seed, SPLIT_ORDER.index(split) if split in SPLIT_ORDER else 99))


def _balanced_labels(rng: np.random.Generator, n: int) -> np.ndarray:
    labels = np.array([i % 2 for i in range(n)])
    return rng.permutation(labels)


def toy_sentiment(split: str, size: int) -> list[dict]:
    rng = _rng(1301, split)
    records = []
    for label in _balanced_labels(rng, size):
        words = POSITIVE if label == 1 else NEGATIVE
        noun = NOUNS[rng.integers(len(NOUNS))]
        adverb = ADVERBS[rng.integers(len(ADVERBS))]
        first, second = rng.choice(len(words), size=2, replace=False)
        parts = ["the", noun, "was"]
        if adverb:
            parts.append(adverb)
        parts.append(words[first])
        if rng.random() < 0.5:
            parts += ["and", words[second]]
        records.append({"text": " ".join(parts), "label": int(label)})
    return records


def parity(split: str, size: int) -> list[dict]:
    """The train split cycles through a permutation of all 256 strings."""
    rng = _rng(1302, split)
    if split == "train":
        order = rng.permutation(256)
        codes = [int(order[i % 256]) for i in range(size)]
        rows = [[(code >> k) & 1 for k in range(7, -1, -1)] for code in codes]
    else:
        rows = []
        for label in _balanced_labels(rng, size):
            bits = rng.integers(0, 2, size=7).tolist()
            bits.append(int((label - sum(bits)) % 2))
            rows.append(bits)
    return [{"bits": " ".join(str(b) for b in bits), "label": sum(bits) % 2} for bits in rows]


def copy(split: str, size: int) -> list[dict]:
    rng = _rng(1303, split)
    records = []
    for _ in range(size):
        span = " ".join(LETTERS[i] for i in rng.integers(0, len(LETTERS), size=3))
        records.append({"source": span, "target": span})
    return records


def toy_arith(split: str, size: int) -> list[dict]:
    rng = _rng(1304, split)
    records = []
    for _ in range(size):
        a, b = (int(v) for v in rng.integers(0, 10, size=2))
        records.append({"question": f"{a} + {b}", "answer": a + b})
    return records


GENERATORS: dict[str, Callable[[str, int], list[dict]]] = {
    "toy-sentiment": toy_sentiment,
    "parity": parity,
    "copy": copy,
    "toy-arith": toy_arith,
}


def generate(corpus: str, split: str, size: int) -> list[dict]:
    """
    Raises:
        ConfigError: unknown corpus
    """
    try:
        generator = GENERATORS[corpus]
    except KeyError:
        raise ConfigError(f"unknown builtin corpus '{corpus}'; available: {sorted(GENERATORS)}") from None
    return generator(split, size)
