"""End-to-end experiment: data, S2P hypotheses, P2G training regimes, decoding,
LM re-scoring, evaluation and the train x decode comparison report.

Everything is keyed by utterance id and iterated in corpus order, so two runs
with the same config and seed produce identical reports.
"""

from __future__ import annotations

import math
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field, fields, replace
from typing import Callable, Sequence

from ._util import mix_seed
from .ctc import HypothesisSet, prefix_beam_search
from .danp import AugmentedDataset, SchemeConfig, build_augmented, clean_dataset, train_danp
from .evaluation import (
    corpus_errors,
    format_table,
    matched_pairs_test,
    per_utterance_errors,
)
from .ngram import NGramLM, train_ngram
from .p2g import P2GModel, TrainConfig, TrainTrace, init_model, train
from .synth import (
    Lexicon,
    NoiseSpec,
    SynthConfig,
    Utterance,
    attach_logits,
    build_toy_language,
    calibrate_confusion_scale,
    generate_corpus,
    greedy_phoneme_errors,
)
from .tkm import Candidate, TKMBatchItem, make_rtkm_loss, make_tkm_loss, rescore_with_lm, tkm_decode_many

REGIMES = ("clean", "danp", "tkm", "rtkm")
DECODERS = ("best-path", "tkm")
SPLITS = ("train", "dev", "test")
WARM_START = {"danp": "clean", "tkm": "danp", "rtkm": "danp"}


class ConfigError(ValueError):
    pass


@dataclass(frozen=True)
class CorpusConfig:
    n_train: int = 2000
    n_dev: int = 500
    n_test: int = 500
    # text-only sentences for the n-gram LM
    n_lm_text: int = 20000
    len_range: tuple[int, int] = (3, 8)


@dataclass(frozen=True)
class TKMConfig:
    K: int = 32
    n: int = 8
    S: int = 4
    decode_n: int = 8
    max_len: int = 12
    # overrides of the shared training config for the marginal regimes
    batch_size: int | None = 16
    learning_rate: float | None = 1e-3


@dataclass(frozen=True)
class LMConfig:
    order: int = 3
    k: float = 0.1
    lambdas: tuple[float, ...] = (0.0, 0.05, 0.1, 0.2, 0.3, 0.5, 1.0)
    beta: float = 0.0


@dataclass(frozen=True)
class ExperimentConfig:
    seed: int = 0
    synth: SynthConfig = SynthConfig()
    corpus: CorpusConfig = CorpusConfig()
    noise: NoiseSpec = NoiseSpec()
    # when set, confusion_scale is re-tuned on the dev split to this greedy PER
    target_per: float | None = 0.15
    s2p_K: int = 32
    danp: SchemeConfig = SchemeConfig()
    tkm: TKMConfig = TKMConfig()
    model: dict = field(default_factory=lambda: {"embed": 24, "hidden": 48})
    train: TrainConfig = TrainConfig()
    # regime -> regime whose trained model it starts from (absent: fresh init)
    warm_start: dict = field(default_factory=lambda: dict(WARM_START))
    lm: LMConfig = LMConfig()
    regimes: tuple[str, ...] = ("clean", "danp", "rtkm")
    decoders: tuple[str, ...] = DECODERS

    @classmethod
    def from_dict(cls, d: dict) -> "ExperimentConfig":
        if not isinstance(d, dict):
            raise ConfigError("config must be a JSON object")
        known = {f.name for f in fields(cls)}
        unknown = sorted(set(d) - known - {"paths"})
        if unknown:
            raise ConfigError(f"unknown config keys: {unknown}")
        kw = {}
        try:
            for key, val in d.items():
                if key == "paths":
                    continue
                if key == "synth":
                    val = SynthConfig.from_dict(val)
                elif key == "corpus":
                    val = CorpusConfig(**{**val, "len_range": tuple(val.get("len_range", (3, 8)))})
                elif key == "noise":
                    val = NoiseSpec.from_dict({**val, "duration_range": tuple(val.get("duration_range", (1, 3)))})
                elif key == "danp":
                    val = SchemeConfig.from_dict(val)
                elif key == "tkm":
                    val = TKMConfig(**val)
                elif key == "train":
                    val = TrainConfig.from_dict(val)
                elif key == "lm":
                    val = LMConfig(**{**val, "lambdas": tuple(val.get("lambdas", LMConfig.lambdas))})
                elif key in ("regimes", "decoders"):
                    val = tuple(val)
                kw[key] = val
            cfg = cls(**kw)
        except (TypeError, ValueError) as exc:
            if isinstance(exc, ConfigError):
                raise
            raise ConfigError(f"invalid config: {exc}") from None
        cfg.validate()
        return cfg

    def validate(self) -> None:
        bad = [r for r in self.regimes if r not in REGIMES]
        if bad:
            raise ConfigError(f"unknown training regimes {bad}; choose from {REGIMES}")
        bad = [r for r in self.decoders if r not in DECODERS]
        if bad:
            raise ConfigError(f"unknown decoders {bad}; choose from {DECODERS}")
        t = self.tkm
        if not 1 <= t.n <= t.K:
            raise ConfigError(f"tkm needs 1 <= n <= K, got n={t.n}, K={t.K}")
        if t.K > self.s2p_K or t.decode_n > self.s2p_K:
            raise ConfigError("tkm K and decode_n cannot exceed s2p_K")
        if self.target_per is not None and not 0 < self.target_per < 1:
            raise ConfigError("target_per must be in (0, 1)")
        if not isinstance(self.warm_start, dict):
            raise ConfigError("warm_start must map regime -> source regime")
        for regime, src in self.warm_start.items():
            if regime not in REGIMES or (src is not None and src not in REGIMES):
                raise ConfigError(f"unknown regime in warm_start: {regime!r} -> {src!r}")
            if src is not None and REGIMES.index(src) >= REGIMES.index(regime):
                raise ConfigError(f"{regime!r} cannot start from {src!r}; sources must come earlier in {REGIMES}")
        if self.train.optimizer not in ("adam", "sgd"):
            raise ConfigError(f"unknown optimizer {self.train.optimizer!r}")
        if not self.lm.lambdas or 0.0 not in self.lm.lambdas:
            raise ConfigError("lm.lambdas must include 0.0")
        c = self.corpus
        if min(c.n_train, c.n_dev, c.n_test, c.n_lm_text) < 1:
            raise ConfigError("corpus sizes must be positive")

    def to_dict(self) -> dict:
        d = asdict(self)
        d["noise"] = self.noise.to_dict()
        d["danp"]["checkpoints"] = [ns.to_dict() for ns in self.danp.checkpoints]
        return d


# ------------------------------------------------------------------ data


@dataclass
class Data:
    lexicon: Lexicon
    noise: NoiseSpec
    splits: dict[str, list[Utterance]]
    lm_texts: list[tuple[str, ...]]

    def refs(self, split: str) -> dict[str, tuple[str, ...]]:
        return {u.utt_id: u.text for u in self.splits[split]}

    def homophone_ids(self, split: str) -> list[str]:
        homs = self.lexicon.homophones()
        return [u.utt_id for u in self.splits[split] if homs & set(u.text)]


def generate_data(cfg: ExperimentConfig) -> Data:
    """Toy language, three splits with simulated frame logits, LM text."""
    seed = cfg.seed
    lex = build_toy_language(cfg.synth, seed)
    c = cfg.corpus
    sizes = {"train": c.n_train, "dev": c.n_dev, "test": c.n_test}
    splits = {name: generate_corpus(lex, n, c.len_range, seed, prefix=name) for name, n in sizes.items()}
    noise = replace(cfg.noise, seed=seed)
    if cfg.target_per is not None:
        scale = calibrate_confusion_scale(splits["dev"], lex, noise, cfg.target_per)
        noise = replace(noise, confusion_scale=scale)
    splits = {name: attach_logits(utts, lex, noise) for name, utts in splits.items()}
    lm_texts = [u.text for u in generate_corpus(lex, c.n_lm_text, c.len_range, seed, prefix="lmtext")]
    return Data(lex, noise, splits, lm_texts)


def _beam_chunk(args):
    logits, K = args
    return [prefix_beam_search(fl, K) for fl in logits]


def decode_hypotheses(utts: Sequence[Utterance], K: int, workers: int = 1) -> dict[str, HypothesisSet]:
    """Top-K CTC prefix beam hypotheses per utterance."""
    logits = [u.frame_logits for u in utts]
    if workers > 1 and len(logits) > 1:
        size = math.ceil(len(logits) / workers)
        chunks = [(logits[i:i + size], K) for i in range(0, len(logits), size)]
        with ProcessPoolExecutor(workers) as ex:
            sets = [hs for part in ex.map(_beam_chunk, chunks) for hs in part]
    else:
        sets = _beam_chunk((logits, K))
    return {u.utt_id: hs for u, hs in zip(utts, sets)}


# --------------------------------------------------------------- training


def tkm_items(utts: Sequence[Utterance], hyps: dict[str, HypothesisSet], K: int) -> list[TKMBatchItem]:
    return [TKMBatchItem(hyps[u.utt_id].top(K), u.text, u.utt_id) for u in utts]


def build_danp(data: Data, cfg: ExperimentConfig, split: str = "train") -> AugmentedDataset:
    return build_augmented(data.splits[split], cfg.danp, mix_seed(cfg.seed, "danp", split)[-1],
                           lexicon=data.lexicon)


def train_regime(
    regime: str,
    data: Data,
    hyps: dict[str, HypothesisSet],
    cfg: ExperimentConfig,
    init: P2GModel | None = None,
    danp_sets: tuple[AugmentedDataset, AugmentedDataset] | None = None,
    log: Callable[[str], None] | None = None,
) -> tuple[P2GModel, TrainTrace]:
    """Train one P2G regime; ``init`` (if given) is the starting model."""
    if regime not in REGIMES:
        raise ConfigError(f"unknown regime {regime!r}")
    lex = data.lexicon
    if init is None:
        init = init_model(cfg.model, cfg.seed, lex.phoneme_inventory, lex.grapheme_inventory)
    tr, dv = data.splits["train"], data.splits["dev"]
    if regime == "clean":
        return train(init, clean_dataset(tr).items, cfg.train, cfg.seed,
                     dev=clean_dataset(dv).items, log=log)
    if regime == "danp":
        train_set, dev_set = danp_sets or (build_danp(data, cfg, "train"), build_danp(data, cfg, "dev"))
        return train_danp(init, train_set, cfg.train, cfg.seed, dev=dev_set.items, log=log)
    t = cfg.tkm
    tc = cfg.train
    if t.batch_size is not None:
        tc = replace(tc, batch_size=t.batch_size)
    if t.learning_rate is not None:
        tc = replace(tc, learning_rate=t.learning_rate)
    if regime == "tkm":
        loss_fn = make_tkm_loss(t.K)
    else:
        loss_fn = make_rtkm_loss(t.n, t.K, cfg.seed)
    return train(init, tkm_items(tr, hyps, t.K), tc, cfg.seed,
                 dev=tkm_items(dv, hyps, t.K), loss_fn=loss_fn, log=log)


def training_order(cfg: ExperimentConfig) -> list[str]:
    """Requested regimes plus their warm-start sources, sources first."""
    need = set()
    for regime in cfg.regimes:
        while regime and regime not in need:
            need.add(regime)
            regime = cfg.warm_start.get(regime)
    return [r for r in REGIMES if r in need]


# ---------------------------------------------------------------- decoding


def decode(
    model: P2GModel,
    utts: Sequence[Utterance],
    hyps: dict[str, HypothesisSet],
    mode: str,
    cfg: ExperimentConfig,
) -> dict[str, list[Candidate]]:
    """best-path: P2G beam on the top S2P hypothesis; tkm: top-``decode_n`` marginal."""
    if mode not in DECODERS:
        raise ConfigError(f"unknown decoder {mode!r}")
    n = 1 if mode == "best-path" else cfg.tkm.decode_n
    sets = [hyps[u.utt_id].top(n) for u in utts]
    out = tkm_decode_many(model, sets, cfg.tkm.S, cfg.tkm.max_len)
    return {u.utt_id: c for u, c in zip(utts, out)}


def top1(cands: dict[str, list[Candidate]]) -> dict[str, tuple[str, ...]]:
    return {k: v[0].tokens if v else () for k, v in cands.items()}


def restrict(d: dict, ids: Sequence[str]) -> dict:
    return {k: d[k] for k in ids}


def rescore_all(cands: dict[str, list[Candidate]], lm: NGramLM, lam: float, beta: float = 0.0):
    return {k: rescore_with_lm(v, lm, lam, beta) for k, v in cands.items()}


def tune_lambda(
    dev_cands: dict[str, list[Candidate]],
    refs: dict[str, tuple[str, ...]],
    lm: NGramLM,
    lambdas: Sequence[float],
    beta: float = 0.0,
) -> tuple[float, dict[float, float]]:
    """Pick the LM weight with the lowest dev WER; ties go to the smaller weight."""
    wers = {float(lam): corpus_errors(refs, top1(rescore_all(dev_cands, lm, lam, beta))).rate
            for lam in lambdas}
    best = min(sorted(wers), key=lambda lam: wers[lam])
    return best, wers


def train_lm(data: Data, cfg: ExperimentConfig) -> NGramLM:
    return train_ngram(data.lm_texts, cfg.lm.order, cfg.lm.k)


# ------------------------------------------------------------------ report


def _system_name(regime: str, decoder: str) -> str:
    return f"{regime}/{decoder}"


def run_experiment(
    cfg: ExperimentConfig,
    workers: int = 1,
    log: Callable[[str], None] | None = None,
) -> dict:
    """Full train x decode grid plus LM re-scoring; returns the report dict."""
    say = log or (lambda _msg: None)
    data = generate_data(cfg)
    say(f"seed {cfg.seed}: confusion_scale {data.noise.confusion_scale:.6g}")
    hyps: dict[str, HypothesisSet] = {}
    for split in SPLITS:
        hyps.update(decode_hypotheses(data.splits[split], cfg.s2p_K, workers))
    say(f"seed {cfg.seed}: S2P top-{cfg.s2p_K} hypotheses ready")

    models, traces, danp_stats = {}, {}, None
    for regime in training_order(cfg):
        src = cfg.warm_start.get(regime)
        init = models[src] if src else None
        danp_sets = None
        if regime == "danp":
            danp_sets = (build_danp(data, cfg, "train"), build_danp(data, cfg, "dev"))
            danp_stats = danp_sets[0].stats
        models[regime], traces[regime] = train_regime(regime, data, hyps, cfg, init, danp_sets)
        say(f"seed {cfg.seed}: trained {regime} ({len(traces[regime].train_loss)} epochs)")

    test = data.splits["test"]
    refs = data.refs("test")
    hom = data.homophone_ids("test")
    decoded: dict[str, dict[str, list[Candidate]]] = {}
    wer: dict[str, dict] = {}
    for regime in cfg.regimes:
        for dec in cfg.decoders:
            name = _system_name(regime, dec)
            decoded[name] = decode(models[regime], test, hyps, dec, cfg)
            errs = corpus_errors(refs, top1(decoded[name]))
            hom_errs = corpus_errors(restrict(refs, hom), restrict(top1(decoded[name]), hom))
            wer[name] = {**errs.to_record(), "homophone_wer": hom_errs.rate}
            say(f"seed {cfg.seed}: {name} WER {errs.rate:.4f}")

    report = {
        "seed": cfg.seed,
        "config": cfg.to_dict(),
        "data": {
            "confusion_scale": data.noise.confusion_scale,
            "greedy_per": {s: greedy_phoneme_errors(data.splits[s]).rate for s in SPLITS},
            "n_utterances": {s: len(data.splits[s]) for s in SPLITS},
            "n_homophone_test": len(hom),
            "homophones": [list(g) for g in data.lexicon.homophone_groups()],
        },
        "danp": danp_stats,
        "training": {r: traces[r].to_record() for r in traces},
        "wer": wer,
    }

    # LM re-scoring of the TKM-decoded output of the last regime (r-TKM by default)
    lm_regime = "rtkm" if "rtkm" in cfg.regimes else cfg.regimes[-1]
    if "tkm" in cfg.decoders:
        lm = train_lm(data, cfg)
        dev_ids = data.homophone_ids("dev")
        dev_cands = decode(models[lm_regime], [u for u in data.splits["dev"] if u.utt_id in set(dev_ids)],
                           hyps, "tkm", cfg)
        lam, dev_wers = tune_lambda(dev_cands, restrict(data.refs("dev"), dev_ids), lm,
                                    cfg.lm.lambdas, cfg.lm.beta)
        base = decoded[_system_name(lm_regime, "tkm")]
        zero = rescore_all(base, lm, 0.0)
        tuned = rescore_all(base, lm, lam, cfg.lm.beta)
        order_kept = all([c.tokens for c in zero[k]] == [c.tokens for c in base[k]] for k in base)
        name = _system_name(lm_regime, "tkm") + "+lm"
        decoded[name] = tuned
        report["lm"] = {
            "system": name,
            "lambda": lam,
            "dev_homophone_wer": {repr(k): v for k, v in sorted(dev_wers.items())},
            "lambda0_order_unchanged": order_kept,
            "test_homophone_wer_lambda0": corpus_errors(restrict(refs, hom), restrict(top1(zero), hom)).rate,
            "test_homophone_wer_tuned": corpus_errors(restrict(refs, hom), restrict(top1(tuned), hom)).rate,
            "test_wer_tuned": corpus_errors(refs, top1(tuned)).rate,
        }
        wer[name] = {**corpus_errors(refs, top1(tuned)).to_record(),
                     "homophone_wer": report["lm"]["test_homophone_wer_tuned"]}
        say(f"seed {cfg.seed}: LM weight {lam:g}, {name} WER {wer[name]['wer']:.4f}")

    names = list(decoded)
    per_utt = {n: per_utterance_errors(refs, top1(decoded[n])) for n in names}
    sig = []
    for i, a in enumerate(names):
        for b in names[i + 1:]:
            r = matched_pairs_test(per_utt[a], per_utt[b])
            sig.append({"a": a, "b": b, "p_value": r.p_value, "z": r.z,
                        "mean_diff": r.mean_diff, "n": r.n, "degenerate": r.degenerate})
    report["significance"] = sig
    return report


def report_table(report: dict) -> str:
    """Aligned train-regime x decoder WER table followed by pairwise p-values."""
    cfg = report["config"]
    rows = []
    for regime in cfg["regimes"]:
        row = {"train": regime}
        for dec in cfg["decoders"]:
            row[dec] = report["wer"].get(_system_name(regime, dec), {}).get("wer")
        rows.append(row)
    lines = [f"seed {report['seed']}  greedy PER (test) {report['data']['greedy_per']['test']:.4f}", "",
             format_table(rows, ["train", *cfg["decoders"]])]
    if "lm" in report:
        lm = report["lm"]
        lines += ["", f"LM re-scoring of {lm['system'][:-3]}: lambda={lm['lambda']:g}",
                  format_table([
                      {"set": "test (homophone)", "lambda=0": lm["test_homophone_wer_lambda0"],
                       "tuned": lm["test_homophone_wer_tuned"]},
                  ], ["set", "lambda=0", "tuned"])]
    lines += ["", format_table(
        [{"a": s["a"], "b": s["b"], "p": s["p_value"], "z": s["z"]} for s in report["significance"]],
        ["a", "b", "p", "z"])]
    return "\n".join(lines) + "\n"
