"""Toy language, corpora, and simulated S2P frame posteriors.

The emission model is a one-hot score per phoneme frame plus Gaussian score
noise, pushed through a log-softmax. Word boundaries carry no marker, so
homophones and segmentation are the ambiguities left for the P2G model and
the language model.
"""

from __future__ import annotations

import string
from dataclasses import dataclass, field, replace
from typing import Sequence

import numpy as np

from ._util import mix_seed
from .ctc import BLANK, FrameLogits, greedy_decode
from .evaluation import ErrorBreakdown, edit_errors

PHONEME_NAMES = list("aeioupbtdkgmnlrsfvzh") + [f"x{i}" for i in range(100)]


@dataclass(frozen=True)
class SynthConfig:
    n_words: int = 8
    n_phonemes: int = 12
    homophone_groups: int = 2
    pron_len: tuple[int, int] = (2, 4)
    spelling_len: tuple[int, int] = (3, 6)
    # Dirichlet concentration of the word grammar; small is sparse
    grammar_concentration: float = 0.3
    # words of history the next word depends on (1: bigram, 2: trigram)
    grammar_order: int = 2

    @classmethod
    def from_dict(cls, d: dict) -> "SynthConfig":
        d = dict(d)
        for k in ("pron_len", "spelling_len"):
            if k in d:
                d[k] = tuple(d[k])
        return cls(**d)


@dataclass(frozen=True)
class Lexicon:
    words: tuple[tuple[str, tuple[str, ...]], ...]
    phoneme_inventory: tuple[str, ...]
    grapheme_inventory: tuple[str, ...]
    initial: tuple[float, ...] = ()
    transitions: tuple[tuple[float, ...], ...] = ()

    def __post_init__(self):
        inv = set(self.phoneme_inventory)
        for word, pron in self.words:
            if not pron or not set(pron) <= inv:
                raise ValueError(f"pronunciation of {word!r} uses unknown phonemes")
        n = len(self.words)
        if self.transitions and len(self.transitions) not in (n, n + n * n):
            raise ValueError(f"{len(self.transitions)} grammar rows do not fit {n} words")

    @property
    def pronunciations(self) -> dict[str, tuple[str, ...]]:
        return {w: p for w, p in self.words}

    def homophone_groups(self) -> list[list[str]]:
        by_pron: dict[tuple, list[str]] = {}
        for w, p in self.words:
            by_pron.setdefault(p, []).append(w)
        return [ws for ws in by_pron.values() if len(ws) > 1]

    def homophones(self) -> set[str]:
        return {w for g in self.homophone_groups() for w in g}

    def pronounce(self, text: Sequence[str]) -> tuple[str, ...]:
        prons = self.pronunciations
        out: list[str] = []
        for w in text:
            out.extend(prons[w])
        return tuple(out)

    def to_record(self) -> dict:
        return {
            "words": [[w, list(p)] for w, p in self.words],
            "phoneme_inventory": list(self.phoneme_inventory),
            "grapheme_inventory": list(self.grapheme_inventory),
            "initial": list(self.initial),
            "transitions": [list(r) for r in self.transitions],
        }

    @classmethod
    def from_record(cls, rec: dict) -> "Lexicon":
        return cls(
            words=tuple((w, tuple(p)) for w, p in rec["words"]),
            phoneme_inventory=tuple(rec["phoneme_inventory"]),
            grapheme_inventory=tuple(rec["grapheme_inventory"]),
            initial=tuple(rec.get("initial", ())),
            transitions=tuple(tuple(r) for r in rec.get("transitions", ())),
        )


@dataclass(frozen=True)
class NoiseSpec:
    duration_range: tuple[int, int] = (1, 3)
    blank_prior: float = 0.3
    confusion_scale: float = 1.0
    seed: int = 0
    # pre-softmax score of the intended symbol before noise
    peak_score: float = 5.0

    def __post_init__(self):
        lo, hi = self.duration_range
        object.__setattr__(self, "duration_range", (int(lo), int(hi)))
        if lo < 1 or hi < lo:
            raise ValueError(f"invalid duration_range {self.duration_range}")
        if self.confusion_scale < 0:
            raise ValueError("confusion_scale must be >= 0")
        if not 0 <= self.blank_prior < 1:
            raise ValueError("blank_prior must be in [0, 1)")

    @classmethod
    def from_dict(cls, d: dict) -> "NoiseSpec":
        return cls(**d)

    def to_dict(self) -> dict:
        return {
            "duration_range": list(self.duration_range),
            "blank_prior": self.blank_prior,
            "confusion_scale": self.confusion_scale,
            "seed": self.seed,
            "peak_score": self.peak_score,
        }


@dataclass(frozen=True)
class Utterance:
    utt_id: str
    text: tuple[str, ...]
    reference_phonemes: tuple[str, ...]
    frame_logits: FrameLogits | None = field(default=None, compare=False)

    def to_record(self) -> dict:
        return {"utt_id": self.utt_id, "text": list(self.text),
                "phonemes": list(self.reference_phonemes)}

    @classmethod
    def from_record(cls, rec: dict) -> "Utterance":
        return cls(rec["utt_id"], tuple(rec["text"]), tuple(rec["phonemes"]))


def _random_spelling(rng, lo, hi, taken):
    letters = np.array(list(string.ascii_lowercase))
    while True:
        n = int(rng.integers(lo, hi + 1))
        word = "".join(rng.choice(letters, size=n))
        if word not in taken:
            return word


def build_toy_language(config: SynthConfig, seed: int) -> Lexicon:
    """Random lexicon with homophone pairs and a sparse Markov word grammar."""
    if config.n_words < 1:
        raise ValueError("need at least one word")
    if config.n_phonemes < 2:
        raise ValueError("need at least two phonemes")
    if config.homophone_groups < 0 or config.homophone_groups > config.n_words // 2:
        raise ValueError(
            f"{config.homophone_groups} homophone pairs do not fit in {config.n_words} words"
        )
    lo, hi = config.pron_len
    n_distinct = config.n_words - config.homophone_groups
    if config.n_phonemes ** hi < n_distinct:
        raise ValueError("phoneme inventory too small for distinct pronunciations")

    rng = np.random.default_rng(mix_seed(seed, "lexicon"))
    inventory = tuple(PHONEME_NAMES[: config.n_phonemes])

    prons: list[tuple[str, ...]] = []
    while len(prons) < n_distinct:
        n = int(rng.integers(lo, hi + 1))
        p = tuple(rng.choice(inventory, size=n).tolist())
        if p not in prons:
            prons.append(p)
    # the first homophone_groups pronunciations are shared by two words each
    assignment = list(range(n_distinct)) + list(range(config.homophone_groups))

    spellings: list[str] = []
    for _ in range(config.n_words):
        spellings.append(_random_spelling(rng, *config.spelling_len, set(spellings)))
    order = rng.permutation(config.n_words)
    words = tuple((spellings[i], prons[assignment[j]]) for i, j in zip(range(config.n_words), order))

    if config.grammar_order not in (1, 2):
        raise ValueError("grammar_order must be 1 or 2")
    a = config.grammar_concentration
    n = config.n_words
    initial = rng.dirichlet(np.full(n, a))
    # rows: one per previous word, then (order 2) one per (word, word) history
    transitions = rng.dirichlet(np.full(n, a), size=n + (n * n if config.grammar_order == 2 else 0))
    return Lexicon(
        words=words,
        phoneme_inventory=inventory,
        grapheme_inventory=tuple(spellings),
        initial=tuple(initial.tolist()),
        transitions=tuple(tuple(r) for r in transitions.tolist()),
    )


def generate_corpus(
    lexicon: Lexicon,
    n_utts: int,
    len_range: Sequence[int],
    seed: int,
    prefix: str = "utt",
) -> list[Utterance]:
    """Word sequences from the lexicon's word grammar."""
    if not lexicon.words:
        raise ValueError("empty lexicon")
    if n_utts < 1:
        raise ValueError("n_utts must be >= 1")
    lo, hi = int(len_range[0]), int(len_range[1])
    if lo < 1 or hi < lo:
        raise ValueError(f"invalid len_range {len_range}")
    names = [w for w, _ in lexicon.words]
    nw = len(names)
    initial = np.asarray(lexicon.initial) if lexicon.initial else np.full(nw, 1.0 / nw)
    trans = np.asarray(lexicon.transitions) if lexicon.transitions else np.full((nw, nw), 1.0 / nw)

    corpus = []
    for i in range(n_utts):
        utt_id = f"{prefix}{i:05d}"
        rng = np.random.default_rng(mix_seed(seed, utt_id))
        n = int(rng.integers(lo, hi + 1))
        idx = [int(rng.choice(nw, p=initial))]
        for _ in range(n - 1):
            row = idx[-1]
            if len(trans) > nw and len(idx) > 1:
                row = nw + idx[-2] * nw + idx[-1]
            idx.append(int(rng.choice(nw, p=trans[row])))
        text = tuple(names[j] for j in idx)
        corpus.append(Utterance(utt_id, text, lexicon.pronounce(text)))
    return corpus


def emit_frame_logits(
    phonemes: Sequence[str],
    noise: NoiseSpec,
    seed,
    inventory: Sequence[str],
    blank_index: int = 0,
    utt_id: str = "",
) -> FrameLogits:
    """Simulated CTC posteriors for a reference phoneme sequence.

    Each phoneme spans a uniform random number of frames; a blank frame is
    inserted between phonemes with probability ``blank_prior`` (always
    between identical neighbours, which CTC would otherwise merge).
    """
    if not phonemes:
        raise ValueError("phoneme sequence must be non-empty")
    inventory = tuple(inventory)
    fl_cols = {p: (i if i < blank_index else i + 1) for i, p in enumerate(inventory)}
    unknown = [p for p in phonemes if p not in fl_cols]
    if unknown:
        raise ValueError(f"unknown phoneme {unknown[0]!r}")
    rng = np.random.default_rng(seed)
    lo, hi = noise.duration_range
    targets: list[int] = []
    for i, p in enumerate(phonemes):
        if i > 0 and (phonemes[i - 1] == p or rng.random() < noise.blank_prior):
            targets.append(blank_index)
        targets.extend([fl_cols[p]] * int(rng.integers(lo, hi + 1)))
    T, C = len(targets), len(inventory) + 1
    scores = np.zeros((T, C))
    scores[np.arange(T), targets] = noise.peak_score
    if noise.confusion_scale > 0:
        scores += rng.normal(0.0, noise.confusion_scale, size=(T, C))
    scores -= scores.max(axis=1, keepdims=True)
    logp = scores - np.log(np.exp(scores).sum(axis=1, keepdims=True))
    return FrameLogits(logp, blank_index, inventory, utt_id)


def attach_logits(
    corpus: Sequence[Utterance], lexicon: Lexicon, noise: NoiseSpec
) -> list[Utterance]:
    """Emit frame logits for every utterance; seeds mix noise.seed and utt_id."""
    return [
        replace(u, frame_logits=emit_frame_logits(
            u.reference_phonemes, noise, mix_seed(noise.seed, u.utt_id),
            lexicon.phoneme_inventory, utt_id=u.utt_id))
        for u in corpus
    ]


def greedy_phoneme_errors(corpus: Sequence[Utterance]) -> ErrorBreakdown:
    total = ErrorBreakdown()
    for u in corpus:
        total = total + edit_errors(u.reference_phonemes, greedy_decode(u.frame_logits))
    return total


def greedy_per(corpus: Sequence[Utterance], lexicon: Lexicon, noise: NoiseSpec) -> float:
    """Phoneme error rate of best-path decoding at a given noise setting."""
    return greedy_phoneme_errors(attach_logits(corpus, lexicon, noise)).rate


def calibrate_confusion_scale(
    corpus: Sequence[Utterance],
    lexicon: Lexicon,
    noise: NoiseSpec,
    target_per: float,
    tol: float = 0.005,
    hi: float = 8.0,
    max_iter: int = 30,
) -> float:
    """Bisect confusion_scale until greedy PER is within ``tol`` of the target."""
    lo_s, hi_s = 0.0, hi
    if greedy_per(corpus, lexicon, replace(noise, confusion_scale=hi_s)) < target_per:
        raise ValueError(f"target PER {target_per} unreachable below scale {hi}")
    mid = hi_s
    for _ in range(max_iter):
        mid = 0.5 * (lo_s + hi_s)
        per = greedy_per(corpus, lexicon, replace(noise, confusion_scale=mid))
        if abs(per - target_per) <= tol:
            break
        if per < target_per:
            lo_s = mid
        else:
            hi_s = mid
    return mid


__all__ = [
    "BLANK",
    "Lexicon",
    "NoiseSpec",
    "SynthConfig",
    "Utterance",
    "attach_logits",
    "build_toy_language",
    "calibrate_confusion_scale",
    "emit_frame_logits",
    "generate_corpus",
    "greedy_per",
    "greedy_phoneme_errors",
]
