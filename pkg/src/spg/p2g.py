"""Attention encoder-decoder P2G model with analytic gradients (numpy, float64).

Architecture: bidirectional GRU encoder over phoneme embeddings (plus an
end-of-phonemes token, so an empty hypothesis still has one position), GRU
decoder fed with the previous token embedding and the previous attention
context, bilinear dot-product attention, a tanh combination layer and a
linear output projection over ``</s>`` + word tokens.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Sequence

import numpy as np

from ._util import mix_seed

CHECKPOINT_VERSION = 1

PAD, EOP = "<pad>", "<eop>"
BOS, EOS = "<s>", "</s>"

_MASKED = -1e9


class CheckpointError(ValueError):
    pass


class TrainingDiverged(RuntimeError):
    pass


def _sigmoid(x):
    return 0.5 * (1.0 + np.tanh(0.5 * x))


def _log_softmax(x):
    m = x.max(axis=-1, keepdims=True)
    z = x - m
    return z - np.log(np.exp(z).sum(axis=-1, keepdims=True))


PARAM_ORDER = (
    "emb_ph", "emb_gr",
    "enc_f_Wx", "enc_f_Wh", "enc_f_b",
    "enc_b_Wx", "enc_b_Wh", "enc_b_b",
    "init_W", "init_b",
    "dec_Wx", "dec_Wh", "dec_b",
    "att_W",
    "comb_W", "comb_b",
    "out_W", "out_b",
)


class P2GModel:
    """Parameters, dimensions and token maps of a P2G model.

    ``phonemes`` and ``graphemes`` are the task inventories; the model adds
    its own specials (``<pad>``, ``<eop>`` on the input side; ``<s>`` and
    ``</s>`` on the output side, sharing index 0 of the decoder tables).
    """

    def __init__(self, params: dict[str, np.ndarray], embed: int, hidden: int,
                 phonemes: Sequence[str], graphemes: Sequence[str]):
        self.params = params
        self.embed = int(embed)
        self.hidden = int(hidden)
        self.phonemes = tuple(phonemes)
        self.graphemes = tuple(graphemes)
        self.ph_vocab = (PAD, EOP) + self.phonemes
        self.out_vocab = (EOS,) + self.graphemes
        self.ph_index = {p: i for i, p in enumerate(self.ph_vocab)}
        self.gr_index = {g: i + 1 for i, g in enumerate(self.graphemes)}

    @property
    def dims(self) -> dict:
        return {"embed": self.embed, "hidden": self.hidden}

    def copy(self) -> "P2GModel":
        return P2GModel({k: v.copy() for k, v in self.params.items()},
                        self.embed, self.hidden, self.phonemes, self.graphemes)

    def encode_phonemes(self, h: Sequence[str]) -> list[int]:
        try:
            return [self.ph_index[p] for p in h if p not in (PAD, EOP)] + [1]
        except KeyError as exc:
            raise ValueError(f"unknown phoneme token {exc.args[0]!r}") from None

    def encode_graphemes(self, y: Sequence[str]) -> list[int]:
        try:
            return [self.gr_index[g] for g in y]
        except KeyError as exc:
            raise ValueError(f"unknown grapheme token {exc.args[0]!r}") from None

    def decode_graphemes(self, ids: Sequence[int]) -> tuple[str, ...]:
        return tuple(self.out_vocab[i] for i in ids)

    def param_shapes(self) -> dict[str, tuple[int, ...]]:
        E, H = self.embed, self.hidden
        Vp, Vo = len(self.ph_vocab), len(self.out_vocab)
        return {
            "emb_ph": (Vp, E), "emb_gr": (Vo, E),
            "enc_f_Wx": (E, 3 * H), "enc_f_Wh": (H, 3 * H), "enc_f_b": (3 * H,),
            "enc_b_Wx": (E, 3 * H), "enc_b_Wh": (H, 3 * H), "enc_b_b": (3 * H,),
            "init_W": (2 * H, H), "init_b": (H,),
            "dec_Wx": (E + 2 * H, 3 * H), "dec_Wh": (H, 3 * H), "dec_b": (3 * H,),
            "att_W": (2 * H, H),
            "comb_W": (3 * H, H), "comb_b": (H,),
            "out_W": (H, Vo), "out_b": (Vo,),
        }

    def n_params(self) -> int:
        return sum(v.size for v in self.params.values())


def init_model(dims, seed: int, phonemes: Sequence[str], graphemes: Sequence[str]) -> P2GModel:
    """Uniform(-1/sqrt(fan_in), 1/sqrt(fan_in)) weights, zero biases.

    ``dims`` is ``(embed, hidden)`` or a mapping with those keys.
    """
    if isinstance(dims, dict):
        embed, hidden = dims["embed"], dims["hidden"]
    else:
        embed, hidden = dims
    if embed < 1 or hidden < 1:
        raise ValueError(f"dims must be positive, got {(embed, hidden)}")
    if not phonemes or not graphemes:
        raise ValueError("phoneme and grapheme inventories must be non-empty")
    model = P2GModel({}, embed, hidden, phonemes, graphemes)
    rng = np.random.default_rng(mix_seed(seed, "p2g-init"))
    for name in PARAM_ORDER:
        shape = model.param_shapes()[name]
        if len(shape) == 1:
            model.params[name] = np.zeros(shape)
        else:
            scale = 1.0 / math.sqrt(shape[1] if name.startswith("emb") else shape[0])
            model.params[name] = rng.uniform(-scale, scale, size=shape)
    model.params["emb_ph"][0] = 0.0
    return model


# ---------------------------------------------------------------- kernels


def _gru(x, h, Wx, Wh, b):
    H = h.shape[1]
    gx = x @ Wx + b
    gh = h @ Wh
    z = _sigmoid(gx[:, :H] + gh[:, :H])
    r = _sigmoid(gx[:, H:2 * H] + gh[:, H:2 * H])
    ghn = gh[:, 2 * H:]
    n = np.tanh(gx[:, 2 * H:] + r * ghn)
    return (1.0 - z) * n + z * h, (x, h, z, r, n, ghn)


def _gru_back(dh_new, cache, Wx, Wh, gWx, gWh, gb):
    x, h, z, r, n, ghn = cache
    dn = dh_new * (1.0 - z)
    dz = dh_new * (h - n)
    dh = dh_new * z
    dn_pre = dn * (1.0 - n * n)
    dr_pre = dn_pre * ghn * r * (1.0 - r)
    dz_pre = dz * z * (1.0 - z)
    dgx = np.concatenate([dz_pre, dr_pre, dn_pre], axis=1)
    dgh = np.concatenate([dz_pre, dr_pre, dn_pre * r], axis=1)
    gWx += x.T @ dgx
    gb += dgx.sum(axis=0)
    gWh += h.T @ dgh
    return dgx @ Wx.T, dh + dgh @ Wh.T


@dataclass
class Encoded:
    enc: np.ndarray    # (B, Tx, 2H)
    keys: np.ndarray   # (B, Tx, H)
    mask: np.ndarray   # (B, Tx) float
    s0: np.ndarray     # (B, H)
    cache: dict = field(default_factory=dict)

    def rows(self, idx) -> "Encoded":
        return Encoded(self.enc[idx], self.keys[idx], self.mask[idx], self.s0[idx])


def _pad(seqs: Sequence[Sequence[int]]) -> tuple[np.ndarray, np.ndarray]:
    T = max(len(s) for s in seqs)
    ids = np.zeros((len(seqs), T), dtype=np.int64)
    mask = np.zeros((len(seqs), T))
    for i, s in enumerate(seqs):
        ids[i, :len(s)] = s
        mask[i, :len(s)] = 1.0
    return ids, mask


def _encode(P, x_ids: Sequence[Sequence[int]], keep_cache: bool = False) -> Encoded:
    X, M = _pad(x_ids)
    B, Tx = X.shape
    H = P["enc_f_Wh"].shape[0]
    emb = P["emb_ph"][X]
    hf = np.zeros((B, Tx, H))
    hb = np.zeros((B, Tx, H))
    cf, cb = [None] * Tx, [None] * Tx
    h = np.zeros((B, H))
    for t in range(Tx):
        m = M[:, t:t + 1]
        new, cf[t] = _gru(emb[:, t], h, P["enc_f_Wx"], P["enc_f_Wh"], P["enc_f_b"])
        h = m * new + (1.0 - m) * h
        hf[:, t] = h
    h = np.zeros((B, H))
    for t in range(Tx - 1, -1, -1):
        m = M[:, t:t + 1]
        new, cb[t] = _gru(emb[:, t], h, P["enc_b_Wx"], P["enc_b_Wh"], P["enc_b_b"])
        h = m * new + (1.0 - m) * h
        hb[:, t] = h
    enc = np.concatenate([hf, hb], axis=2) * M[:, :, None]
    lengths = M.sum(axis=1, keepdims=True)
    mean = enc.sum(axis=1) / lengths
    s0 = np.tanh(mean @ P["init_W"] + P["init_b"])
    keys = enc @ P["att_W"]
    out = Encoded(enc, keys, M, s0)
    if keep_cache:
        out.cache = {"X": X, "cf": cf, "cb": cb, "mean": mean, "lengths": lengths}
    return out


def _dec_step(P, E: Encoded, s_prev, c_prev, tok):
    x = np.concatenate([P["emb_gr"][tok], c_prev], axis=1)
    s, gcache = _gru(x, s_prev, P["dec_Wx"], P["dec_Wh"], P["dec_b"])
    scores = np.einsum("bh,bth->bt", s, E.keys)
    scores = np.where(E.mask > 0, scores, _MASKED)
    scores -= scores.max(axis=1, keepdims=True)
    alpha = np.exp(scores)
    alpha /= alpha.sum(axis=1, keepdims=True)
    c = np.einsum("bt,btd->bd", alpha, E.enc)
    sc = np.concatenate([s, c], axis=1)
    o = np.tanh(sc @ P["comb_W"] + P["comb_b"])
    logp = _log_softmax(o @ P["out_W"] + P["out_b"])
    return logp, s, c, (gcache, alpha, sc, o, tok)


# ---------------------------------------------------------- forward / back


@dataclass
class Forward:
    seq_logprob: np.ndarray  # (B,)
    n_tokens: np.ndarray     # (B,) target tokens incl. </s>
    enc: Encoded
    steps: list
    Y_out: np.ndarray
    Y_mask: np.ndarray
    logps: list


def _pairs_to_ids(model: P2GModel, pairs):
    xs = [model.encode_phonemes(h) for h, _ in pairs]
    ys = [model.encode_graphemes(y) for _, y in pairs]
    return xs, ys


def forward(model: P2GModel, pairs: Sequence[tuple[Sequence[str], Sequence[str]]]) -> Forward:
    """Teacher-forced forward pass over a batch of (phonemes, tokens) pairs."""
    if not pairs:
        raise ValueError("empty batch")
    P = model.params
    xs, ys = _pairs_to_ids(model, pairs)
    E = _encode(P, xs, keep_cache=True)
    Y_in, _ = _pad([[0] + y for y in ys])
    Y_out, Y_mask = _pad([y + [0] for y in ys])
    B, Ty = Y_in.shape
    s = E.s0
    c = np.zeros((B, E.enc.shape[2]))
    steps, logps = [], []
    total = np.zeros(B)
    for i in range(Ty):
        logp, s, c, cache = _dec_step(P, E, s, c, Y_in[:, i])
        steps.append(cache)
        logps.append(logp)
        total += logp[np.arange(B), Y_out[:, i]] * Y_mask[:, i]
    return Forward(total, Y_mask.sum(axis=1), E, steps, Y_out, Y_mask, logps)


def backward(model: P2GModel, fwd: Forward, weights) -> dict[str, np.ndarray]:
    """Gradient of ``-sum_b weights[b] * seq_logprob[b]``."""
    P = model.params
    w = np.asarray(weights, dtype=np.float64)
    G = {k: np.zeros_like(v) for k, v in P.items()}
    E = fwd.enc
    B, Tx, D = E.enc.shape
    H = D // 2
    Esz = P["emb_gr"].shape[1]

    ds_next = np.zeros((B, H))
    dc_next = np.zeros((B, D))
    denc = np.zeros_like(E.enc)
    dkeys = np.zeros_like(E.keys)
    rows = np.arange(B)
    for i in range(len(fwd.steps) - 1, -1, -1):
        gcache, alpha, sc, o, tok = fwd.steps[i]
        dlogits = np.exp(fwd.logps[i])
        dlogits[rows, fwd.Y_out[:, i]] -= 1.0
        dlogits *= (w * fwd.Y_mask[:, i])[:, None]
        G["out_W"] += o.T @ dlogits
        G["out_b"] += dlogits.sum(axis=0)
        dpre = (dlogits @ P["out_W"].T) * (1.0 - o * o)
        G["comb_W"] += sc.T @ dpre
        G["comb_b"] += dpre.sum(axis=0)
        dsc = dpre @ P["comb_W"].T
        ds = dsc[:, :H] + ds_next
        dc = dsc[:, H:] + dc_next
        denc += alpha[:, :, None] * dc[:, None, :]
        dalpha = np.einsum("btd,bd->bt", E.enc, dc)
        dscore = alpha * (dalpha - (alpha * dalpha).sum(axis=1, keepdims=True))
        s_cur = sc[:, :H]
        ds += np.einsum("bt,bth->bh", dscore, E.keys)
        dkeys += dscore[:, :, None] * s_cur[:, None, :]
        dx, ds_next = _gru_back(ds, gcache, P["dec_Wx"], P["dec_Wh"],
                                G["dec_Wx"], G["dec_Wh"], G["dec_b"])
        np.add.at(G["emb_gr"], tok, dx[:, :Esz])
        dc_next = dx[:, Esz:]

    cache = E.cache
    dpre0 = ds_next * (1.0 - E.s0 * E.s0)
    G["init_W"] += cache["mean"].T @ dpre0
    G["init_b"] += dpre0.sum(axis=0)
    dmean = dpre0 @ P["init_W"].T
    denc += (dmean / cache["lengths"])[:, None, :] * E.mask[:, :, None]
    G["att_W"] += np.einsum("btd,bth->dh", E.enc, dkeys)
    denc += dkeys @ P["att_W"].T
    denc *= E.mask[:, :, None]

    X = cache["X"]
    dh = np.zeros((B, H))
    for t in range(Tx - 1, -1, -1):
        dh = dh + denc[:, t, :H]
        m = E.mask[:, t:t + 1]
        dx, dprev = _gru_back(m * dh, cache["cf"][t], P["enc_f_Wx"], P["enc_f_Wh"],
                              G["enc_f_Wx"], G["enc_f_Wh"], G["enc_f_b"])
        np.add.at(G["emb_ph"], X[:, t], dx)
        dh = dprev + (1.0 - m) * dh
    dh = np.zeros((B, H))
    for t in range(Tx):
        dh = dh + denc[:, t, H:]
        m = E.mask[:, t:t + 1]
        dx, dprev = _gru_back(m * dh, cache["cb"][t], P["enc_b_Wx"], P["enc_b_Wh"],
                              G["enc_b_Wx"], G["enc_b_Wh"], G["enc_b_b"])
        np.add.at(G["emb_ph"], X[:, t], dx)
        dh = dprev + (1.0 - m) * dh
    return G


def grad_nll(model: P2GModel, batch, weights=None) -> tuple[dict[str, np.ndarray], float]:
    """Gradients and value of the weighted NLL ``-sum_b w_b log p(y_b | h_b)``.

    ``batch`` is a sequence of ``(phonemes, tokens)``; ``weights`` defaults
    to ones.
    """
    batch = list(batch)
    if not batch:
        raise ValueError("empty batch")
    w = np.ones(len(batch)) if weights is None else np.asarray(weights, dtype=np.float64)
    fwd = forward(model, batch)
    loss = float(-(w * fwd.seq_logprob).sum())
    if not math.isfinite(loss):
        raise FloatingPointError(f"non-finite loss {loss}")
    return backward(model, fwd, w), loss


# ---------------------------------------------------------------- scoring


def score_batch(model: P2GModel, pairs, batch_size: int = 256) -> np.ndarray:
    """log p(y | h) for many pairs, end token included."""
    out = np.empty(len(pairs))
    for start in range(0, len(pairs), batch_size):
        chunk = pairs[start:start + batch_size]
        out[start:start + len(chunk)] = forward(model, chunk).seq_logprob
    return out


def score_sequence(model: P2GModel, h: Sequence[str], y: Sequence[str]) -> float:
    return float(forward(model, [(h, y)]).seq_logprob[0])


def next_token_logprobs(model: P2GModel, h: Sequence[str], y_prefix: Sequence[str]) -> np.ndarray:
    """Distribution over ``model.out_vocab`` after ``y_prefix`` given ``h``."""
    P = model.params
    E = _encode(P, [model.encode_phonemes(h)])
    s, c = E.s0, np.zeros((1, E.enc.shape[2]))
    for tok in [0] + model.encode_graphemes(y_prefix):
        logp, s, c, _ = _dec_step(P, E, s, c, np.array([tok]))
    return logp[0]


def beam_decode(model: P2GModel, h: Sequence[str], S: int, max_len: int):
    """Ranked ``[(tokens, logprob), ...]`` for one phoneme sequence."""
    return beam_decode_many(model, [h], S, max_len)[0]


def beam_decode_many(model: P2GModel, hs: Sequence[Sequence[str]], S: int, max_len: int):
    """Length-synchronous beam search, run for several inputs in one batch.

    At each step every live prefix is expanded by every output token and the
    best S candidates per input are kept; those ending in ``</s>`` are
    finished. At ``max_len`` tokens only ``</s>`` may follow. Search stops
    for an input once S finished hypotheses all beat its best live prefix.
    """
    if S < 1:
        raise ValueError("beam size S must be >= 1")
    if max_len < 0:
        raise ValueError("max_len must be >= 0")
    P = model.params
    n = len(hs)
    if n == 0:
        return []
    E_all = _encode(P, [model.encode_phonemes(h) for h in hs])
    V = len(model.out_vocab)

    # live beams: per input list of (score, ids, row-state index)
    owner = np.arange(n)
    s = E_all.s0
    c = np.zeros((n, E_all.enc.shape[2]))
    tok = np.zeros(n, dtype=np.int64)
    live_scores = np.zeros(n)
    live_ids: list[tuple[int, ...]] = [()] * n
    finished: list[list[tuple[float, tuple[int, ...]]]] = [[] for _ in range(n)]
    step = 0
    while owner.size:
        E = E_all.rows(owner)
        logp, s_new, c_new, _ = _dec_step(P, E, s, c, tok)
        cand = live_scores[:, None] + logp
        if step >= max_len:
            cand[:, 1:] = -np.inf
        keep_rows, keep_tok, keep_owner, keep_scores, keep_ids = [], [], [], [], []
        for g in np.unique(owner):
            rows = np.nonzero(owner == g)[0]
            flat = cand[rows].ravel()
            order = np.argsort(-flat, kind="stable")[:S]
            for j in order:
                sc = float(flat[j])
                if sc == -np.inf:
                    continue
                r, t = divmod(int(j), V)
                ids = live_ids[rows[r]] + (t,)
                if t == 0:
                    finished[g].append((sc, ids[:-1]))
                else:
                    keep_rows.append(rows[r]); keep_tok.append(t); keep_owner.append(g)
                    keep_scores.append(sc); keep_ids.append(ids)
        # drop inputs whose finished list can no longer be beaten
        sel = []
        for k, g in enumerate(keep_owner):
            fin = finished[g]
            if len(fin) >= S:
                worst = sorted(x[0] for x in fin)[-S]
                if keep_scores[k] < worst:
                    continue
            sel.append(k)
        idx = np.array([keep_rows[k] for k in sel], dtype=np.int64)
        owner = np.array([keep_owner[k] for k in sel], dtype=np.int64)
        s, c = s_new[idx], c_new[idx]
        tok = np.array([keep_tok[k] for k in sel], dtype=np.int64)
        live_scores = np.array([keep_scores[k] for k in sel])
        live_ids = [keep_ids[k] for k in sel]
        step += 1

    out = []
    for g in range(n):
        best = sorted(finished[g], key=lambda x: (-x[0], x[1]))[:S]
        out.append([(model.decode_graphemes(ids), sc) for sc, ids in best])
    return out


def greedy_decode(model: P2GModel, h: Sequence[str], max_len: int):
    """Argmax decoding, one token at a time."""
    P = model.params
    E = _encode(P, [model.encode_phonemes(h)])
    s, c = E.s0, np.zeros((1, E.enc.shape[2]))
    tok, ids, total = 0, [], 0.0
    for step in range(max_len + 1):
        logp, s, c, _ = _dec_step(P, E, s, c, np.array([tok]))
        tok = 0 if step == max_len else int(np.argmax(logp[0]))
        total += float(logp[0, tok])
        if tok == 0:
            break
        ids.append(tok)
    return model.decode_graphemes(ids), total


# ---------------------------------------------------------------- training


@dataclass
class TrainConfig:
    learning_rate: float = 3e-3
    optimizer: str = "adam"
    batch_size: int = 32
    max_epochs: int = 20
    patience: int = 3
    clip_norm: float = 5.0
    min_delta: float = 0.0

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        return cls(**d)


@dataclass
class TrainTrace:
    train_loss: list[float] = field(default_factory=list)   # nats / token, per epoch
    dev_loss: list[float] = field(default_factory=list)
    batch_loss: list[float] = field(default_factory=list)
    # dev loss of the starting parameters; best_epoch -1 means they were kept
    initial_dev_loss: float | None = None
    best_epoch: int = -1
    stopped_early: bool = False

    def to_record(self) -> dict:
        return {"train_loss": self.train_loss, "dev_loss": self.dev_loss,
                "initial_dev_loss": self.initial_dev_loss,
                "best_epoch": self.best_epoch, "stopped_early": self.stopped_early}


# loss functions take (model, items, epoch) and return (grads, loss_sum, n_tokens);
# the gradient is of the mean per-item loss
LossFn = Callable[[P2GModel, list, int], tuple[dict, float, float]]


def nll_loss(model: P2GModel, items, epoch: int = 0):
    """Mean per-item cross-entropy over (phonemes, tokens) items."""
    pairs = [(it[0], it[1]) for it in items]
    fwd = forward(model, pairs)
    w = np.full(len(pairs), 1.0 / len(pairs))
    loss = float(-fwd.seq_logprob.sum())
    if not math.isfinite(loss):
        raise FloatingPointError(f"non-finite loss {loss}")
    return backward(model, fwd, w), loss, float(fwd.n_tokens.sum())


def eval_loss(model: P2GModel, items, loss_fn: LossFn = nll_loss, batch_size: int = 256) -> float:
    """Loss in nats per target token, no gradient use."""
    total, tokens = 0.0, 0.0
    for start in range(0, len(items), batch_size):
        _, loss, n = loss_fn(model, items[start:start + batch_size], -1)
        total += loss
        tokens += n
    return total / max(tokens, 1.0)


class Adam:
    def __init__(self, params, lr, beta1=0.9, beta2=0.999, eps=1e-8):
        self.lr, self.b1, self.b2, self.eps = lr, beta1, beta2, eps
        self.m = {k: np.zeros_like(v) for k, v in params.items()}
        self.v = {k: np.zeros_like(v) for k, v in params.items()}
        self.t = 0

    def step(self, params, grads):
        self.t += 1
        c1 = 1.0 - self.b1 ** self.t
        c2 = 1.0 - self.b2 ** self.t
        for k in PARAM_ORDER:
            g = grads[k]
            self.m[k] = self.b1 * self.m[k] + (1.0 - self.b1) * g
            self.v[k] = self.b2 * self.v[k] + (1.0 - self.b2) * g * g
            params[k] -= self.lr * (self.m[k] / c1) / (np.sqrt(self.v[k] / c2) + self.eps)


class SGD:
    def __init__(self, params, lr):
        self.lr = lr

    def step(self, params, grads):
        for k in PARAM_ORDER:
            params[k] -= self.lr * grads[k]


def _clip(grads, max_norm):
    if not max_norm:
        return grads
    norm = math.sqrt(sum(float((grads[k] ** 2).sum()) for k in PARAM_ORDER))
    if norm > max_norm:
        scale = max_norm / norm
        return {k: g * scale for k, g in grads.items()}
    return grads


def train(
    model: P2GModel,
    dataset: Sequence,
    config: TrainConfig,
    seed: int,
    dev: Sequence | None = None,
    loss_fn: LossFn = nll_loss,
    dev_loss_fn: LossFn | None = None,
    log: Callable[[str], None] | None = None,
) -> tuple[P2GModel, TrainTrace]:
    """Mini-batch training with a fixed learning rate and early stopping.

    Returns a new model holding the parameters with the best dev loss, the
    starting parameters included (or the last epoch's parameters when no dev
    set is given).
    """
    dataset = list(dataset)
    if not dataset:
        raise ValueError("empty training set")
    dev_loss_fn = dev_loss_fn or loss_fn
    model = model.copy()
    if config.optimizer == "adam":
        opt = Adam(model.params, config.learning_rate)
    elif config.optimizer == "sgd":
        opt = SGD(model.params, config.learning_rate)
    else:
        raise ValueError(f"unknown optimizer {config.optimizer!r}")
    rng = np.random.default_rng(mix_seed(seed, "shuffle"))
    trace = TrainTrace()
    best = math.inf
    best_params = None
    bad = 0
    if dev:
        best = trace.initial_dev_loss = eval_loss(model, list(dev), dev_loss_fn)
        best_params = {k: v.copy() for k, v in model.params.items()}
    for epoch in range(config.max_epochs):
        order = rng.permutation(len(dataset))
        tot, ntok = 0.0, 0.0
        for start in range(0, len(order), config.batch_size):
            items = [dataset[i] for i in order[start:start + config.batch_size]]
            grads, loss, n = loss_fn(model, items, epoch)
            if not math.isfinite(loss):
                raise TrainingDiverged(f"non-finite loss at epoch {epoch}, batch {start}")
            opt.step(model.params, _clip(grads, config.clip_norm))
            tot += loss
            ntok += n
            trace.batch_loss.append(loss / max(n, 1.0))
        if not all(np.all(np.isfinite(v)) for v in model.params.values()):
            raise TrainingDiverged(f"non-finite parameters after epoch {epoch}")
        trace.train_loss.append(tot / max(ntok, 1.0))
        if dev:
            dl = eval_loss(model, list(dev), dev_loss_fn)
            trace.dev_loss.append(dl)
            if log:
                log(f"epoch {epoch}: train {trace.train_loss[-1]:.4f} dev {dl:.4f}")
            if dl < best - config.min_delta:
                best, bad = dl, 0
                best_params = {k: v.copy() for k, v in model.params.items()}
                trace.best_epoch = epoch
            else:
                bad += 1
                if bad >= config.patience:
                    trace.stopped_early = True
                    break
        elif log:
            log(f"epoch {epoch}: train {trace.train_loss[-1]:.4f}")
    if best_params is not None:
        model.params = best_params
    else:
        trace.best_epoch = len(trace.train_loss) - 1
    return model, trace


# ------------------------------------------------------------- checkpoint


def save_checkpoint(model: P2GModel, path) -> None:
    doc = {
        "version": CHECKPOINT_VERSION,
        "dims": model.dims,
        "vocab": {"phonemes": list(model.phonemes), "graphemes": list(model.graphemes)},
        "params": {k: model.params[k].tolist() for k in PARAM_ORDER},
    }
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(doc), encoding="utf-8")


def load_checkpoint(path) -> P2GModel:
    try:
        doc = json.loads(Path(path).read_text(encoding="utf-8"))
    except (OSError, UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise CheckpointError(f"cannot read checkpoint {path}: {exc}") from None
    if not isinstance(doc, dict) or "version" not in doc:
        raise CheckpointError(f"{path}: not a P2G checkpoint")
    if doc["version"] != CHECKPOINT_VERSION:
        raise CheckpointError(
            f"{path}: checkpoint version {doc['version']} != supported {CHECKPOINT_VERSION}")
    try:
        model = P2GModel({}, doc["dims"]["embed"], doc["dims"]["hidden"],
                         doc["vocab"]["phonemes"], doc["vocab"]["graphemes"])
        shapes = model.param_shapes()
        for name in PARAM_ORDER:
            arr = np.asarray(doc["params"][name], dtype=np.float64)
            if arr.shape != shapes[name]:
                raise CheckpointError(f"{path}: {name} has shape {arr.shape}, expected {shapes[name]}")
            model.params[name] = arr
    except (KeyError, TypeError, ValueError) as exc:
        if isinstance(exc, CheckpointError):
            raise
        raise CheckpointError(f"{path}: corrupt checkpoint ({exc})") from None
    return model
