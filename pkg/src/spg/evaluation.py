"""Error rates and the matched-pairs significance test."""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Mapping, Sequence

import numpy as np


@dataclass(frozen=True)
class ErrorBreakdown:
    substitutions: int = 0
    insertions: int = 0
    deletions: int = 0
    ref_len: int = 0

    @property
    def errors(self) -> int:
        return self.substitutions + self.insertions + self.deletions

    @property
    def rate(self) -> float:
        if self.ref_len == 0:
            return 0.0 if self.errors == 0 else math.inf
        return self.errors / self.ref_len

    def __add__(self, other: "ErrorBreakdown") -> "ErrorBreakdown":
        return ErrorBreakdown(
            self.substitutions + other.substitutions,
            self.insertions + other.insertions,
            self.deletions + other.deletions,
            self.ref_len + other.ref_len,
        )

    def to_record(self) -> dict:
        return {
            "wer": self.rate,
            "S": self.substitutions,
            "I": self.insertions,
            "D": self.deletions,
            "N_ref": self.ref_len,
        }


def edit_errors(reference: Sequence, hypothesis: Sequence) -> ErrorBreakdown:
    """Levenshtein alignment with unit costs.

    Among equally short alignments the backtrace prefers a substitution,
    then an insertion, then a deletion.
    """
    ref = list(reference)
    hyp = list(hypothesis)
    n, m = len(ref), len(hyp)
    d = np.zeros((n + 1, m + 1), dtype=np.int64)
    d[:, 0] = np.arange(n + 1)
    d[0, :] = np.arange(m + 1)
    for i in range(1, n + 1):
        for j in range(1, m + 1):
            cost = 0 if ref[i - 1] == hyp[j - 1] else 1
            d[i, j] = min(d[i - 1, j - 1] + cost, d[i, j - 1] + 1, d[i - 1, j] + 1)

    S = I = D = 0
    i, j = n, m
    while i > 0 or j > 0:
        if i > 0 and j > 0:
            cost = 0 if ref[i - 1] == hyp[j - 1] else 1
            if d[i, j] == d[i - 1, j - 1] + cost:
                S += cost
                i, j = i - 1, j - 1
                continue
        if j > 0 and d[i, j] == d[i, j - 1] + 1:
            I += 1
            j -= 1
            continue
        D += 1
        i -= 1
    return ErrorBreakdown(S, I, D, n)


def edit_distance(a: Sequence, b: Sequence) -> int:
    return edit_errors(a, b).errors


def corpus_errors(
    refs: Mapping[str, Sequence], hyps: Mapping[str, Sequence]
) -> ErrorBreakdown:
    if set(refs) != set(hyps):
        missing = sorted(set(refs) ^ set(hyps))
        raise KeyError(f"utterance ids differ between refs and hyps: {missing[:5]}")
    total = ErrorBreakdown()
    for utt_id in sorted(refs):
        total = total + edit_errors(refs[utt_id], hyps[utt_id])
    return total


def corpus_wer(refs: Mapping[str, Sequence], hyps: Mapping[str, Sequence]) -> float:
    """Micro-averaged error rate: total edits over total reference tokens."""
    return corpus_errors(refs, hyps).rate


def per_utterance_errors(
    refs: Mapping[str, Sequence], hyps: Mapping[str, Sequence]
) -> list[int]:
    """Edit counts ordered by utt_id, as input for ``matched_pairs_test``."""
    if set(refs) != set(hyps):
        raise KeyError("utterance ids differ between refs and hyps")
    return [edit_errors(refs[u], hyps[u]).errors for u in sorted(refs)]


@dataclass(frozen=True)
class SignificanceResult:
    p_value: float
    z: float
    n: int
    mean_diff: float
    degenerate: bool = False


def matched_pairs_test(errors_a: Sequence[float], errors_b: Sequence[float]) -> SignificanceResult:
    """Two-tailed matched-pairs test on per-utterance error differences.

    Uses the normal approximation z = mean(d) / (s / sqrt(N)) with the
    sample standard deviation s. When every difference is the same nonzero
    value the statistic is unbounded; that case returns p = 0 with
    ``degenerate`` set.
    """
    a = np.asarray(errors_a, dtype=np.float64)
    b = np.asarray(errors_b, dtype=np.float64)
    if a.shape != b.shape or a.ndim != 1:
        raise ValueError("error vectors must be aligned 1-d sequences")
    n = a.size
    if n < 2:
        raise ValueError("matched-pairs test needs at least 2 utterances")
    d = a - b
    mean = float(d.mean())
    if np.all(d == 0):
        return SignificanceResult(1.0, 0.0, n, 0.0)
    sd = float(d.std(ddof=1))
    if sd == 0.0:
        return SignificanceResult(0.0, math.copysign(math.inf, mean), n, mean, degenerate=True)
    z = mean / (sd / math.sqrt(n))
    p = math.erfc(abs(z) / math.sqrt(2.0))
    return SignificanceResult(min(p, 1.0), z, n, mean)


def format_table(rows: Sequence[Mapping], columns: Sequence[str]) -> str:
    """Aligned plain-text table."""
    cells = [[_fmt(r.get(c)) for c in columns] for r in rows]
    widths = [max(len(c), *(len(row[i]) for row in cells)) if cells else len(c)
              for i, c in enumerate(columns)]
    lines = ["  ".join(c.ljust(w) for c, w in zip(columns, widths))]
    lines.append("  ".join("-" * w for w in widths))
    for row in cells:
        lines.append("  ".join(v.ljust(w) for v, w in zip(row, widths)))
    return "\n".join(lines) + "\n"


def _fmt(v) -> str:
    if v is None:
        return "-"
    if isinstance(v, float):
        if v != 0 and abs(v) < 1e-3:
            return f"{v:.2e}"
        return f"{v:.4f}"
    return str(v)
