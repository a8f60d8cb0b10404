"""Top-K marginalized (TKM) training losses and decoding.

The P2G likelihood is marginalized over the S2P top-K phoneme hypotheses:

    p(y | x) ~= sum_k w_k * p(y | h_k)

with ``w_k`` the acoustic probabilities renormalized over the selected set
(a per-item constant in the loss and a positive per-utterance factor in
decoding, so gradients and rankings are unaffected).
"""

from __future__ import annotations

import math
from dataclasses import dataclass, replace
from typing import Sequence

import numpy as np

from ._util import mix_seed
from .ctc import HypothesisSet
from .p2g import P2GModel, backward, beam_decode_many, forward, score_batch


@dataclass(frozen=True)
class TKMBatchItem:
    hypotheses: HypothesisSet
    target: tuple[str, ...]
    utt_id: str = ""

    def __post_init__(self):
        if len(self.hypotheses) == 0:
            raise ValueError(f"{self.utt_id}: empty hypothesis set")
        if not np.all(np.isfinite(self.hypotheses.logprobs)):
            raise ValueError(f"{self.utt_id}: acoustic log-probs must be finite")
        object.__setattr__(self, "target", tuple(self.target))


@dataclass(frozen=True)
class Candidate:
    tokens: tuple[str, ...]
    tkm_logscore: float
    provenance: tuple[int, ...]
    lm_logscore: float | None = None
    combined_logscore: float | None = None

    def to_record(self) -> dict:
        return {"tokens": list(self.tokens), "tkm_logscore": self.tkm_logscore,
                "lm_logscore": self.lm_logscore,
                "combined_logscore": self.combined_logscore,
                "provenance": list(self.provenance)}

    @classmethod
    def from_record(cls, rec: dict) -> "Candidate":
        return cls(tuple(rec["tokens"]), float(rec["tkm_logscore"]),
                   tuple(int(k) for k in rec["provenance"]),
                   rec.get("lm_logscore"), rec.get("combined_logscore"))

    @property
    def final_logscore(self) -> float:
        return self.tkm_logscore if self.combined_logscore is None else self.combined_logscore


def renormalize_weights(hyps: HypothesisSet | Sequence[float]) -> np.ndarray:
    """Softmax over acoustic log-probabilities."""
    lp = hyps.logprobs if isinstance(hyps, HypothesisSet) else np.asarray(hyps, dtype=np.float64)
    if lp.size == 0:
        raise ValueError("empty hypothesis set")
    if not np.any(np.isfinite(lp)):
        raise ValueError("all hypotheses are impossible")
    m = lp[np.isfinite(lp)].max()
    w = np.where(np.isfinite(lp), np.exp(np.where(np.isfinite(lp), lp - m, 0.0)), 0.0)
    return w / w.sum()


def _log_weights(logprobs: np.ndarray) -> np.ndarray:
    m = logprobs.max()
    return logprobs - m - np.log(np.exp(logprobs - m).sum())


def _marginal_batch(model: P2GModel, groups):
    """groups: list of (list of phoneme seqs, log weights, target)."""
    pairs, owner = [], []
    for g, (hs, _, y) in enumerate(groups):
        for h in hs:
            pairs.append((h, y))
            owner.append(g)
    fwd = forward(model, pairs)
    owner = np.array(owner)
    joint = np.concatenate([lw for _, lw, _ in groups]) + fwd.seq_logprob
    losses = np.empty(len(groups))
    resp = np.empty(len(pairs))
    start = 0
    for g, (hs, _, _) in enumerate(groups):
        seg = joint[start:start + len(hs)]
        m = seg.max()
        lse = m + math.log(np.exp(seg - m).sum())
        losses[g] = -lse
        resp[start:start + len(hs)] = np.exp(seg - lse)
        start += len(hs)
    return fwd, losses, resp, owner


def _group(hyps: HypothesisSet, idx: Sequence[int], target):
    sub = [hyps[i] for i in idx]
    lw = _log_weights(np.array([h.acoustic_logprob for h in sub]))
    return ([h.tokens for h in sub], lw, tuple(target))


def tkm_loss(model: P2GModel, item: TKMBatchItem) -> float:
    """-log sum_k w_k p(y | h_k) over the item's hypotheses."""
    _, losses, _, _ = _marginal_batch(model, [_group(item.hypotheses, range(len(item.hypotheses)), item.target)])
    loss = float(losses[0])
    if not math.isfinite(loss):
        raise FloatingPointError(f"non-finite TKM loss for {item.utt_id}")
    return loss


def tkm_grad(model: P2GModel, items: Sequence[TKMBatchItem], subsets=None):
    """Gradient and summed value of the TKM loss over items.

    Acoustic weights are constants; the gradient is
    ``sum_k r_k * grad(-log p(y | h_k))`` with posterior responsibilities r_k.
    """
    if subsets is None:
        subsets = [range(len(it.hypotheses)) for it in items]
    groups = [_group(it.hypotheses, idx, it.target) for it, idx in zip(items, subsets)]
    fwd, losses, resp, _ = _marginal_batch(model, groups)
    return backward(model, fwd, resp), float(losses.sum())


def draw_subset(n: int, K: int, rng) -> list[int]:
    """n distinct indices from range(K), uniformly, in ascending order."""
    if not 1 <= n <= K:
        raise ValueError(f"need 1 <= n <= K, got n={n}, K={K}")
    return sorted(rng.choice(K, size=n, replace=False).tolist())


def randomized_tkm_loss(model: P2GModel, item: TKMBatchItem, n: int, K: int, rng) -> float:
    """TKM loss over n hypotheses drawn without replacement from the top K."""
    if K > len(item.hypotheses):
        raise ValueError(f"K={K} exceeds the {len(item.hypotheses)} available hypotheses")
    idx = draw_subset(n, K, rng)
    _, losses, _, _ = _marginal_batch(model, [_group(item.hypotheses, idx, item.target)])
    return float(losses[0])


def item_rng(seed: int, utt_id: str, epoch: int):
    return np.random.default_rng(mix_seed(seed, utt_id, epoch))


def make_tkm_loss(K: int):
    """Training loss over the top-K hypotheses (p2g.train loss interface)."""

    def loss_fn(model, items, epoch):
        subsets = [range(min(K, len(it.hypotheses))) for it in items]
        grads, loss = tkm_grad(model, items, subsets)
        for g in grads.values():
            g /= len(items)
        return grads, loss, float(sum(len(it.target) + 1 for it in items))

    return loss_fn


def make_rtkm_loss(n: int, K: int, seed: int):
    """Randomized TKM training loss: a fresh n-of-top-K draw on every visit.

    The draw for an item is seeded by (seed, utt_id, epoch). Evaluation calls
    (epoch < 0) use the top n without randomness, as in decoding.
    """
    if not 1 <= n <= K:
        raise ValueError(f"need 1 <= n <= K, got n={n}, K={K}")

    def loss_fn(model, items, epoch):
        subsets = []
        for it in items:
            k_eff = min(K, len(it.hypotheses))
            n_eff = min(n, k_eff)
            if epoch < 0:
                subsets.append(range(n_eff))
            else:
                subsets.append(draw_subset(n_eff, k_eff, item_rng(seed, it.utt_id, epoch)))
        grads, loss = tkm_grad(model, items, subsets)
        for g in grads.values():
            g /= len(items)
        return grads, loss, float(sum(len(it.target) + 1 for it in items))

    return loss_fn


# ---------------------------------------------------------------- decoding


def _rank(cands: list[Candidate]) -> list[Candidate]:
    return sorted(cands, key=lambda c: (-c.tkm_logscore, c.tokens))


def tkm_decode_many(
    model: P2GModel, hyp_sets: Sequence[HypothesisSet], S: int, max_len: int
) -> list[list[Candidate]]:
    """TKM decoding with the fast approximation, batched over utterances.

    Every hypothesis gets its own P2G beam of size S; a candidate's score sums
    ``w_k p(y | h_k)`` over the beams that produced it only.
    """
    if S < 1:
        raise ValueError("beam size S must be >= 1")
    flat, owner = [], []
    for u, hs in enumerate(hyp_sets):
        if len(hs) == 0:
            raise ValueError("empty hypothesis set")
        for h in hs:
            flat.append(h.tokens)
            owner.append(u)
    beams = beam_decode_many(model, flat, S, max_len)
    out = []
    pos = 0
    for hs in hyp_sets:
        lw = _log_weights(hs.logprobs)
        acc: dict[tuple, list] = {}
        for k in range(len(hs)):
            for y, sc in beams[pos + k]:
                acc.setdefault(y, []).append((k, lw[k] + sc))
        pos += len(hs)
        if not acc:
            raise RuntimeError("P2G beam search produced no candidates")
        cands = [
            Candidate(y, float(np.logaddexp.reduce([v for _, v in terms])),
                      tuple(k for k, _ in terms))
            for y, terms in acc.items()
        ]
        out.append(_rank(cands)[:S])
    return out


def tkm_decode(model: P2GModel, hyps: HypothesisSet, S: int, max_len: int) -> list[Candidate]:
    return tkm_decode_many(model, [hyps], S, max_len)[0]


def exact_rescore(
    model: P2GModel, hyps: HypothesisSet, candidates: Sequence[Candidate]
) -> list[Candidate]:
    """Re-score candidates with forced p(y | h_k) under every hypothesis."""
    if not candidates:
        return []
    lw = _log_weights(hyps.logprobs)
    pairs = [(h.tokens, c.tokens) for c in candidates for h in hyps]
    scores = score_batch(model, pairs).reshape(len(candidates), len(hyps))
    out = [
        replace(c, tkm_logscore=float(np.logaddexp.reduce(lw + scores[i])),
                provenance=tuple(range(len(hyps))), lm_logscore=None, combined_logscore=None)
        for i, c in enumerate(candidates)
    ]
    return _rank(out)


def rescore_with_lm(candidates: Sequence[Candidate], lm, lam: float, beta: float = 0.0) -> list[Candidate]:
    """Log-linear combination with an LM score and a word-count reward.

    ``combined = tkm + lam * lm_logprob(y) + beta * |y|``; the sort is stable,
    so lam = beta = 0 keeps the incoming order.
    """
    if not (math.isfinite(lam) and math.isfinite(beta)):
        raise ValueError("lam and beta must be finite")
    out = []
    for c in candidates:
        lm_lp = lm.logprob(c.tokens)
        out.append(replace(c, lm_logscore=lm_lp,
                           combined_logscore=c.tkm_logscore + lam * lm_lp + beta * len(c.tokens)))
    return sorted(out, key=lambda c: -c.combined_logscore)
