"""CTC lattice inference over simulated S2P frame posteriors.

Everything here works in the natural-log domain. The impossible event is
represented by ``IMPOSSIBLE`` (negative infinity); it is only ever combined
through ``np.logaddexp`` / addition with finite values, never subtracted.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass
from typing import Iterable, Sequence

import numpy as np

IMPOSSIBLE = -math.inf
BLANK = "<b>"

ORIGINS = ("beam", "sampled", "merged")


class InventoryError(ValueError):
    """A phoneme is not part of the frame inventory."""


def is_impossible(logprob: float) -> bool:
    return logprob == IMPOSSIBLE


@dataclass(frozen=True)
class FrameLogits:
    """T x (V+1) matrix of per-frame log-probabilities, blank included.

    ``inventory`` lists the V phoneme identifiers in column order with the
    blank column skipped, i.e. column ``c`` holds ``inventory[c]`` for
    ``c < blank_index`` and ``inventory[c - 1]`` above it.
    """

    frames: np.ndarray
    blank_index: int
    inventory: tuple[str, ...]
    utt_id: str = ""

    def __post_init__(self):
        frames = np.array(self.frames, dtype=np.float64)
        if frames.ndim != 2 or frames.shape[0] < 1:
            raise ValueError("frames must be a non-empty T x (V+1) matrix")
        inventory = tuple(self.inventory)
        if len(inventory) < 1:
            raise ValueError("phoneme inventory must be non-empty")
        if frames.shape[1] != len(inventory) + 1:
            raise ValueError(
                f"frames have {frames.shape[1]} columns, expected {len(inventory) + 1}"
            )
        if not 0 <= self.blank_index < frames.shape[1]:
            raise ValueError(f"blank_index {self.blank_index} out of range")
        if np.any(np.isnan(frames)) or np.any(frames > 1e-12):
            raise ValueError("frames must hold log-probabilities")
        mass = np.exp(frames).sum(axis=1)
        if np.any(np.abs(mass - 1.0) > 1e-9):
            raise ValueError("every frame must be normalized within 1e-9")
        frames.setflags(write=False)
        object.__setattr__(self, "frames", frames)
        object.__setattr__(self, "inventory", inventory)

    @property
    def T(self) -> int:
        return self.frames.shape[0]

    @property
    def V(self) -> int:
        return len(self.inventory)

    @property
    def symbols(self) -> tuple[str, ...]:
        """Column labels, with ``BLANK`` at ``blank_index``."""
        syms = list(self.inventory)
        syms.insert(self.blank_index, BLANK)
        return tuple(syms)

    def column_of(self) -> dict[str, int]:
        return {s: i for i, s in enumerate(self.symbols) if i != self.blank_index}

    def to_columns(self, tokens: Sequence[str]) -> list[int]:
        cols = self.column_of()
        try:
            return [cols[t] for t in tokens]
        except KeyError as exc:
            raise InventoryError(f"phoneme {exc.args[0]!r} not in inventory") from None

    def to_record(self) -> dict:
        return {
            "utt_id": self.utt_id,
            "inventory": list(self.inventory),
            "blank_index": self.blank_index,
            "frames": self.frames.tolist(),
        }

    @classmethod
    def from_record(cls, rec: dict) -> "FrameLogits":
        return cls(
            frames=np.asarray(rec["frames"], dtype=np.float64),
            blank_index=int(rec["blank_index"]),
            inventory=tuple(rec["inventory"]),
            utt_id=rec.get("utt_id", ""),
        )

    def to_json(self) -> str:
        return json.dumps(self.to_record())

    @classmethod
    def from_json(cls, line: str) -> "FrameLogits":
        return cls.from_record(json.loads(line))


@dataclass(frozen=True)
class PhonemeHypothesis:
    tokens: tuple[str, ...]
    acoustic_logprob: float

    def __post_init__(self):
        object.__setattr__(self, "tokens", tuple(self.tokens))
        if BLANK in self.tokens:
            raise ValueError("hypothesis tokens must not contain the blank")
        lp = float(self.acoustic_logprob)
        if math.isnan(lp) or lp == math.inf or lp > 1e-9:
            raise ValueError(f"invalid acoustic log-probability {lp}")
        object.__setattr__(self, "acoustic_logprob", min(lp, 0.0))

    def to_record(self) -> dict:
        lp = None if is_impossible(self.acoustic_logprob) else self.acoustic_logprob
        return {"tokens": list(self.tokens), "acoustic_logprob": lp}

    @classmethod
    def from_record(cls, rec: dict) -> "PhonemeHypothesis":
        lp = rec["acoustic_logprob"]
        return cls(tuple(rec["tokens"]), IMPOSSIBLE if lp is None else float(lp))


def _rank_key(hyp: PhonemeHypothesis):
    return (-hyp.acoustic_logprob, hyp.tokens)


@dataclass(frozen=True)
class HypothesisSet:
    """De-duplicated hypotheses, best first (ties: lexicographic tokens)."""

    hypotheses: tuple[PhonemeHypothesis, ...]
    origin: str = "beam"
    dropped: int = 0

    def __post_init__(self):
        if self.origin not in ORIGINS:
            raise ValueError(f"unknown origin {self.origin!r}")
        hyps = tuple(sorted(self.hypotheses, key=_rank_key))
        seen = set()
        for h in hyps:
            if h.tokens in seen:
                raise ValueError(f"duplicate hypothesis {h.tokens}")
            seen.add(h.tokens)
        object.__setattr__(self, "hypotheses", hyps)

    def __len__(self):
        return len(self.hypotheses)

    def __iter__(self):
        return iter(self.hypotheses)

    def __getitem__(self, idx):
        return self.hypotheses[idx]

    def top(self, k: int) -> "HypothesisSet":
        return HypothesisSet(self.hypotheses[:k], self.origin, self.dropped)

    @property
    def token_seqs(self) -> list[tuple[str, ...]]:
        return [h.tokens for h in self.hypotheses]

    @property
    def logprobs(self) -> np.ndarray:
        return np.array([h.acoustic_logprob for h in self.hypotheses], dtype=np.float64)

    def to_record(self) -> dict:
        return {
            "origin": self.origin,
            "dropped": self.dropped,
            "hypotheses": [h.to_record() for h in self.hypotheses],
        }

    @classmethod
    def from_record(cls, rec: dict) -> "HypothesisSet":
        return cls(
            tuple(PhonemeHypothesis.from_record(h) for h in rec["hypotheses"]),
            rec.get("origin", "beam"),
            int(rec.get("dropped", 0)),
        )


def merge_sets(sets: Iterable[HypothesisSet]) -> HypothesisSet:
    """Union of hypothesis sets; a repeated sequence keeps its best score."""
    best: dict[tuple, float] = {}
    dropped = 0
    for hs in sets:
        dropped += hs.dropped
        for h in hs:
            if h.tokens not in best or h.acoustic_logprob > best[h.tokens]:
                best[h.tokens] = h.acoustic_logprob
    hyps = tuple(PhonemeHypothesis(t, lp) for t, lp in best.items())
    return HypothesisSet(hyps, "merged", dropped)


def collapse_path(path: Sequence, blank=BLANK) -> list:
    """Merge consecutive repeats, then drop blanks."""
    out = []
    prev = None
    for sym in path:
        if sym != prev and sym != blank:
            out.append(sym)
        prev = sym
    return out


def _collapse_rows(paths: np.ndarray, blank: int) -> list[tuple[int, ...]]:
    keep = paths != blank
    keep[:, 1:] &= paths[:, 1:] != paths[:, :-1]
    return [tuple(row[m].tolist()) for row, m in zip(paths, keep)]


def greedy_decode(fl: FrameLogits) -> list[str]:
    """Best-path (argmax per frame) decoding, collapsed."""
    best = np.argmax(fl.frames, axis=1)
    syms = fl.symbols
    return [syms[c] for c in collapse_path(best.tolist(), blank=fl.blank_index)]


def _forward_logprob(frames: np.ndarray, blank: int, labels: Sequence[int]) -> float:
    T = frames.shape[0]
    L = len(labels)
    if L == 0:
        return float(frames[:, blank].sum())
    # minimum frames: one per label plus one blank between each repeated pair
    repeats = sum(1 for a, b in zip(labels[:-1], labels[1:]) if a == b)
    if L + repeats > T:
        return IMPOSSIBLE
    ext = np.full(2 * L + 1, blank, dtype=np.int64)
    ext[1::2] = labels
    S = ext.size
    skip = np.zeros(S, dtype=bool)
    skip[3::2] = ext[3::2] != ext[1:-2:2]

    alpha = np.full(S, IMPOSSIBLE)
    alpha[0] = frames[0, blank]
    alpha[1] = frames[0, ext[1]]
    for t in range(1, T):
        prev = alpha
        acc = prev.copy()
        acc[1:] = np.logaddexp(acc[1:], prev[:-1])
        acc[2:] = np.where(skip[2:], np.logaddexp(acc[2:], prev[:-2]), acc[2:])
        alpha = acc + frames[t, ext]
    total = float(np.logaddexp(alpha[-1], alpha[-2]))
    return total


def ctc_sequence_logprob(fl: FrameLogits, h: Sequence[str]) -> float:
    """log p(h | x): log-sum over all frame paths collapsing to ``h``."""
    if BLANK in h:
        raise ValueError("label sequence must not contain the blank")
    labels = fl.to_columns(h)
    return _forward_logprob(fl.frames, fl.blank_index, labels)


def prefix_beam_search(
    fl: FrameLogits, K: int, max_len: int | None = None
) -> HypothesisSet:
    """Top-K collapsed label sequences by CTC prefix beam search.

    Each prefix keeps the pair (log p ending in blank, log p ending in a
    label). Candidates whose score cannot reach the top K are filtered with
    numpy before the per-prefix merge, which leaves the result unchanged.
    ``max_len`` drops longer prefixes (counted in ``dropped``).
    """
    if K < 1:
        raise ValueError("beam size K must be >= 1")
    frames = fl.frames
    blank = fl.blank_index
    T, C = frames.shape
    labels = np.array([c for c in range(C) if c != blank], dtype=np.int64)
    label_pos = {int(c): i for i, c in enumerate(labels)}
    dropped = 0

    prefixes: list[tuple[int, ...]] = [()]
    pb = np.array([0.0])
    pnb = np.array([IMPOSSIBLE])

    for t in range(T):
        lp = frames[t]
        total = np.logaddexp(pb, pnb)
        last = np.array([p[-1] if p else -1 for p in prefixes], dtype=np.int64)

        # staying on the same prefix
        stay_b = total + lp[blank]
        stay_nb = pnb + np.where(last >= 0, lp[np.maximum(last, 0)], IMPOSSIBLE)

        # extending by label c; after the same label only via a blank
        ext = total[:, None] + lp[labels][None, :]
        same = labels[None, :] == last[:, None]
        ext = np.where(same, pb[:, None] + lp[labels][None, :], ext)

        index = {p: i for i, p in enumerate(prefixes)}
        new: dict[tuple[int, ...], list[float]] = {
            p: [stay_b[i], stay_nb[i]] for i, p in enumerate(prefixes)
        }

        # extensions landing on an existing prefix always merge; the rest
        # only matter if they can make the top K
        merging = np.zeros(ext.shape, dtype=bool)
        for q in prefixes:
            if q and q[:-1] in index:
                merging[index[q[:-1]], label_pos[q[-1]]] = True
        ok = ext > IMPOSSIBLE
        free = np.nonzero((ok & ~merging).ravel())[0]
        flat = ext.ravel()
        if free.size > K:
            thresh = np.partition(flat[free], free.size - K)[free.size - K]
            free = free[flat[free] >= thresh]
        chosen = np.concatenate([np.nonzero((ok & merging).ravel())[0], free])
        nlab = labels.size
        for j in np.sort(chosen).tolist():
            r, c = divmod(j, nlab)
            key = prefixes[r] + (int(labels[c]),)
            if max_len is not None and len(key) > max_len:
                dropped += 1
                continue
            slot = new.get(key)
            if slot is None:
                new[key] = [IMPOSSIBLE, float(flat[j])]
            else:
                slot[1] = float(np.logaddexp(slot[1], flat[j]))

        keys = list(new)
        nb = np.array([new[k][0] for k in keys])
        nnb = np.array([new[k][1] for k in keys])
        tot = np.logaddexp(nb, nnb)
        order = sorted(range(len(keys)), key=lambda i: (-tot[i], keys[i]))
        order = [i for i in order if tot[i] > IMPOSSIBLE][:K]
        prefixes = [keys[i] for i in order]
        pb = nb[order]
        pnb = nnb[order]

    syms = fl.symbols
    hyps = tuple(
        PhonemeHypothesis(tuple(syms[c] for c in p), float(np.logaddexp(b, n)))
        for p, b, n in zip(prefixes, pb, pnb)
    )
    return HypothesisSet(hyps, "beam", dropped)


def _tempered(frames: np.ndarray, temperature: float) -> np.ndarray:
    if temperature == 1.0:
        return frames
    if temperature <= 0:
        raise ValueError("temperature must be positive")
    scaled = frames / temperature
    return scaled - np.logaddexp.reduce(scaled, axis=1, keepdims=True)


def sample_paths(
    fl: FrameLogits, R: int, seed, temperature: float = 1.0
) -> dict[tuple[str, ...], int]:
    """Draw R frame paths and count their collapsed label sequences."""
    if R < 0:
        raise ValueError("sample count R must be >= 0")
    if R == 0:
        return {}
    rng = np.random.default_rng(seed)
    probs = np.exp(_tempered(fl.frames, temperature))
    cdf = np.cumsum(probs, axis=1)
    cdf[:, -1] = 1.0
    u = rng.random((R, fl.T))
    paths = np.empty((R, fl.T), dtype=np.int64)
    for t in range(fl.T):
        paths[:, t] = np.searchsorted(cdf[t], u[:, t], side="right")
    uniq, counts = np.unique(paths, axis=0, return_counts=True)
    syms = fl.symbols
    out: dict[tuple[str, ...], int] = {}
    for labels, n in zip(_collapse_rows(uniq, fl.blank_index), counts.tolist()):
        key = tuple(syms[c] for c in labels)
        out[key] = out.get(key, 0) + n
    return out


def sample_hypotheses(
    fl: FrameLogits,
    R: int,
    seed,
    temperature: float = 1.0,
    max_len: int | None = None,
) -> HypothesisSet:
    """Sampled hypotheses, de-duplicated, each with its exact CTC log-prob."""
    counts = sample_paths(fl, R, seed, temperature)
    dropped = 0
    hyps = []
    for tokens in counts:
        if max_len is not None and len(tokens) > max_len:
            dropped += 1
            continue
        hyps.append(PhonemeHypothesis(tokens, ctc_sequence_logprob(fl, tokens)))
    return HypothesisSet(tuple(hyps), "sampled", dropped)
