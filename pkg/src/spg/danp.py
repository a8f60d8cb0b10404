"""Noisy-phoneme training data for the P2G model.

Each utterance contributes the S2P beam hypotheses and/or sampled
hypotheses of one or more emission variants (stand-ins for S2P
checkpoints), paired with its reference text.
"""

from __future__ import annotations

from collections import Counter
from dataclasses import dataclass, field
from typing import Sequence

from ._util import mix_seed
from .ctc import prefix_beam_search, sample_hypotheses
from .p2g import P2GModel, TrainConfig, TrainTrace, train
from .synth import Lexicon, NoiseSpec, Utterance, emit_frame_logits

SOURCES = ("clean", "beam", "sampled")


@dataclass(frozen=True)
class SchemeConfig:
    K_beam: int = 8
    R_samples: int = 0
    include_clean: bool = False
    # emission variants; empty means "use the utterance's own frame logits"
    checkpoints: tuple[NoiseSpec, ...] = ()
    temperature: float = 1.0
    max_len: int | None = None

    @classmethod
    def from_dict(cls, d: dict) -> "SchemeConfig":
        d = dict(d)
        d["checkpoints"] = tuple(
            c if isinstance(c, NoiseSpec) else NoiseSpec.from_dict(c)
            for c in d.get("checkpoints", ()))
        return cls(**d)


@dataclass(frozen=True)
class AugmentedItem:
    utt_id: str
    phonemes: tuple[str, ...]
    target: tuple[str, ...]
    source: str
    variant: int

    def __getitem__(self, i):
        # behaves as a (phonemes, target) pair for the P2G loss functions
        return (self.phonemes, self.target)[i]

    def to_record(self) -> dict:
        return {"utt_id": self.utt_id, "phonemes": list(self.phonemes),
                "target": list(self.target), "source": self.source,
                "variant": self.variant}

    @classmethod
    def from_record(cls, rec: dict) -> "AugmentedItem":
        if rec.get("source") not in SOURCES:
            raise ValueError(f"unknown source {rec.get('source')!r}")
        return cls(rec["utt_id"], tuple(rec["phonemes"]), tuple(rec["target"]),
                   rec["source"], int(rec["variant"]))


@dataclass
class AugmentedDataset:
    items: list[AugmentedItem]
    raw_count: int = 0
    stats: dict = field(default_factory=dict)

    def __len__(self):
        return len(self.items)

    def __iter__(self):
        return iter(self.items)

    @property
    def dedup_ratio(self) -> float:
        return len(self.items) / self.raw_count if self.raw_count else 1.0


def build_augmented(
    corpus: Sequence[Utterance],
    scheme: SchemeConfig,
    seed: int,
    lexicon: Lexicon | None = None,
) -> AugmentedDataset:
    """Union of beam / sampled / clean phoneme sequences per utterance.

    Items are de-duplicated per utterance on (phonemes, target); the first
    occurrence wins, in the order clean, then per variant beam then sampled.
    """
    if not corpus:
        raise ValueError("empty corpus")
    if scheme.K_beam <= 0 and scheme.R_samples <= 0 and not scheme.include_clean:
        raise ValueError("all augmentation schemes are disabled")
    if scheme.checkpoints and lexicon is None:
        raise ValueError("emission variants need the lexicon's phoneme inventory")

    items: list[AugmentedItem] = []
    raw = 0
    per_source: Counter = Counter()
    for utt in corpus:
        seen: set[tuple] = set()
        target = tuple(utt.text)

        def add(phonemes, source, variant):
            nonlocal raw
            raw += 1
            key = (tuple(phonemes), target)
            if key in seen:
                return
            seen.add(key)
            items.append(AugmentedItem(utt.utt_id, tuple(phonemes), target, source, variant))
            per_source[source] += 1

        if scheme.include_clean:
            add(utt.reference_phonemes, "clean", -1)
        if scheme.checkpoints:
            views = [
                emit_frame_logits(utt.reference_phonemes, ns, mix_seed(ns.seed, utt.utt_id),
                                  lexicon.phoneme_inventory, utt_id=utt.utt_id)
                for ns in scheme.checkpoints
            ]
        else:
            if utt.frame_logits is None:
                raise ValueError(f"utterance {utt.utt_id} has no frame logits")
            views = [utt.frame_logits]
        for v, fl in enumerate(views):
            if scheme.K_beam > 0:
                for h in prefix_beam_search(fl, scheme.K_beam, scheme.max_len):
                    add(h.tokens, "beam", v)
            if scheme.R_samples > 0:
                sampled = sample_hypotheses(
                    fl, scheme.R_samples, mix_seed(seed, utt.utt_id, v),
                    scheme.temperature, scheme.max_len)
                for h in sampled:
                    add(h.tokens, "sampled", v)
    stats = {"per_source": dict(sorted(per_source.items())), "raw": raw,
             "unique": len(items), "dedup_ratio": len(items) / raw if raw else 1.0}
    return AugmentedDataset(items, raw, stats)


def clean_dataset(corpus: Sequence[Utterance]) -> AugmentedDataset:
    """Reference pronunciations only (plain supervised P2G training data)."""
    items = [AugmentedItem(u.utt_id, tuple(u.reference_phonemes), tuple(u.text), "clean", -1)
             for u in corpus]
    return AugmentedDataset(items, len(items), {"per_source": {"clean": len(items)},
                                                "raw": len(items), "unique": len(items),
                                                "dedup_ratio": 1.0})


def train_danp(
    model: P2GModel,
    dataset: AugmentedDataset,
    config: TrainConfig,
    seed: int,
    dev: Sequence | None = None,
    log=None,
) -> tuple[P2GModel, TrainTrace]:
    """Cross-entropy training on noisy pairs, every pair weighted equally."""
    if not len(dataset):
        raise ValueError("empty dataset")
    return train(model, list(dataset.items), config, seed, dev=dev, log=log)
