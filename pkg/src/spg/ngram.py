"""Word n-gram LM: add-k smoothing with fallback to shorter contexts.

A context seen in training uses its own add-k distribution; an unseen
context falls back to the longest seen suffix (ultimately the unigram).
Every distribution used is a proper add-k distribution over the vocabulary,
so each context normalizes exactly.
"""

from __future__ import annotations

import json
import math
from collections import Counter, defaultdict
from pathlib import Path
from typing import Iterable, Sequence

BOS = "<s>"
UNK = "<unk>"
LM_VERSION = 1


class NGramLM:
    def __init__(self, order: int, k: float, vocab: Sequence[str],
                 counts: dict[tuple[str, ...], Counter]):
        if order < 1:
            raise ValueError("order must be >= 1")
        if k <= 0:
            raise ValueError("add-k constant must be positive")
        self.order = order
        self.k = float(k)
        self.vocab = tuple(vocab)
        if UNK not in self.vocab:
            raise ValueError("vocabulary must contain <unk>")
        self._known = set(self.vocab)
        self.counts = counts
        self._totals = {ctx: sum(c.values()) for ctx, c in counts.items()}

    def _context(self, history: Sequence[str]) -> tuple[str, ...]:
        ctx = tuple(history[len(history) - (self.order - 1):]) if self.order > 1 else ()
        while ctx and ctx not in self.counts:
            ctx = ctx[1:]
        return ctx

    def map_word(self, w: str) -> str:
        return w if w in self._known and w != BOS else UNK

    def cond_logprob(self, word: str, history: Sequence[str]) -> float:
        """log P(word | history); ``history`` already padded / mapped."""
        ctx = self._context(history)
        c = self.counts.get(ctx, Counter())
        num = c.get(self.map_word(word), 0) + self.k
        den = self._totals.get(ctx, 0) + self.k * len(self.vocab)
        return math.log(num / den)

    def padded(self, words: Sequence[str]) -> list[str]:
        return [BOS] * (self.order - 1) + [self.map_word(w) for w in words]

    def logprob(self, words: Sequence[str]) -> float:
        """Sum of conditional log-probabilities, left-padded with ``<s>``."""
        seq = self.padded(words)
        pad = self.order - 1
        return sum(self.cond_logprob(seq[i], seq[:i]) for i in range(pad, len(seq)))

    def perplexity(self, sentences: Iterable[Sequence[str]]) -> float:
        total, n = 0.0, 0
        for s in sentences:
            total += self.logprob(s)
            n += len(s)
        return math.exp(-total / max(n, 1))

    def to_record(self) -> dict:
        return {
            "version": LM_VERSION,
            "order": self.order,
            "k": self.k,
            "vocab": list(self.vocab),
            "counts": [[list(ctx), dict(sorted(c.items()))]
                       for ctx, c in sorted(self.counts.items())],
        }

    @classmethod
    def from_record(cls, rec: dict) -> "NGramLM":
        if rec.get("version") != LM_VERSION:
            raise ValueError(f"unsupported LM version {rec.get('version')!r}")
        counts = {tuple(ctx): Counter(c) for ctx, c in rec["counts"]}
        return cls(rec["order"], rec["k"], rec["vocab"], counts)

    def save(self, path) -> None:
        Path(path).write_text(json.dumps(self.to_record(), sort_keys=True), encoding="utf-8")

    @classmethod
    def load(cls, path) -> "NGramLM":
        return cls.from_record(json.loads(Path(path).read_text(encoding="utf-8")))


def train_ngram(corpus: Iterable[Sequence[str]], order: int, k: float = 1.0,
                vocab: Sequence[str] | None = None) -> NGramLM:
    """Count n-grams of every order up to ``order``.

    The vocabulary is the training words (or ``vocab``) plus ``<unk>``.
    """
    if order < 1:
        raise ValueError("order must be >= 1")
    sents = [list(s) for s in corpus]
    if not sents:
        raise ValueError("empty training corpus")
    words = sorted(set(vocab) if vocab is not None else {w for s in sents for w in s})
    words = [w for w in words if w not in (BOS, UNK)] + [UNK]
    known = set(words)
    counts: dict[tuple[str, ...], Counter] = defaultdict(Counter)
    for s in sents:
        seq = [BOS] * (order - 1) + [w if w in known else UNK for w in s]
        for i in range(order - 1, len(seq)):
            for n in range(order):
                ctx = tuple(seq[i - n:i])
                counts[ctx][seq[i]] += 1
    counts.setdefault((), Counter())
    return NGramLM(order, k, words, dict(counts))


def lm_logprob(lm: NGramLM, words: Sequence[str]) -> float:
    return lm.logprob(words)
