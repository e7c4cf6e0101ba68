"""Frequent Word Bank: corpus-level TF-IDF ranking of caption vocabulary."""
from __future__ import annotations

import math
import re
from collections import Counter
from dataclasses import dataclass, field
from importlib import resources

from ..errors import DataError

TOKEN_RE = re.compile(r"[a-z]{2,}")
STOPWORDS_FILE = "stopwords_en_v1.txt"


def load_stop_words(name: str = STOPWORDS_FILE) -> frozenset[str]:
    text = resources.files("acmo.planner").joinpath("data", name).read_text(encoding="utf-8")
    return frozenset(line.strip() for line in text.splitlines() if line.strip() and not line.startswith("#"))


def tokenize(doc: str) -> list[str]:
    """Lowercase alphabetic runs of two or more letters."""
    return TOKEN_RE.findall(doc.lower())


@dataclass
class WordBank:
    entries: list[tuple[str, float]]
    truncated: bool = True  # False when fewer than top_n terms survived
    top_n: int = 512
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        words = [w for w, _ in self.entries]
        if len(set(words)) != len(words):
            raise DataError("word bank entries must be unique")
        scores = [s for _, s in self.entries]
        if any(b > a for a, b in zip(scores, scores[1:])):
            raise DataError("word bank scores must be non-increasing")

    @property
    def words(self) -> list[str]:
        return [w for w, _ in self.entries]

    def serialize(self) -> str:
        return " ".join(self.words)

    def __len__(self) -> int:
        return len(self.entries)


def build_word_bank(
    corpus: list[str],
    max_features: int = 1024,
    top_n: int = 512,
    stop_words: frozenset[str] | set[str] | None = None,
) -> WordBank:
    """Rank terms by their summed L2-normalized smoothed TF-IDF weights."""
    if not corpus:
        raise DataError("empty corpus")
    stop = load_stop_words() if stop_words is None else frozenset(stop_words)
    docs = [Counter(t for t in tokenize(d) if t not in stop) for d in corpus]
    totals = Counter()
    for c in docs:
        totals.update(c)
    # vocabulary: highest total counts, ties broken alphabetically
    vocab = sorted(totals, key=lambda w: (-totals[w], w))[:max_features]
    keep = set(vocab)
    n = len(docs)
    df = Counter()
    for c in docs:
        df.update(w for w in c if w in keep)
    idf = {w: math.log((1 + n) / (1 + df[w])) + 1.0 for w in vocab}
    score = dict.fromkeys(vocab, 0.0)
    for c in docs:
        row = {w: cnt * idf[w] for w, cnt in c.items() if w in keep}
        norm = math.sqrt(sum(v * v for v in row.values()))
        if norm == 0:
            continue
        for w, v in row.items():
            score[w] += v / norm
    ranked = sorted(score.items(), key=lambda kv: (-kv[1], kv[0]))
    return WordBank(
        ranked[:top_n],
        truncated=len(ranked) >= top_n,
        top_n=top_n,
        meta={"max_features": max_features, "documents": n},
    )
