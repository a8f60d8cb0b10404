import math

import numpy as np
import pytest

from spg.ngram import BOS, UNK, NGramLM, lm_logprob, train_ngram
from spg.synth import SynthConfig, build_toy_language, generate_corpus


def test_add_one_unigram():
    lm = train_ngram([["a", "a", "b"]], order=1, k=1.0)
    assert set(lm.vocab) == {"a", "b", UNK}
    assert math.exp(lm.cond_logprob("a", [])) == pytest.approx(0.5)
    assert math.exp(lm.cond_logprob(UNK, [])) == pytest.approx(1 / 6)
    assert math.exp(lm.cond_logprob("zzz", [])) == pytest.approx(1 / 6)


def test_empty_and_single_word():
    lm = train_ngram([["a", "a", "b"]], order=1, k=1.0)
    assert lm_logprob(lm, []) == 0.0
    assert lm_logprob(lm, ["b"]) == pytest.approx(math.log(2 / 6))


def test_unigram_concatenation_identity():
    lm = train_ngram([["a", "b", "c"], ["c", "c"]], order=1, k=0.5)
    u, v = ["a", "c"], ["b", "x", "c"]
    assert lm_logprob(lm, u + v) == pytest.approx(lm_logprob(lm, u) + lm_logprob(lm, v), abs=1e-12)


def test_order_validation():
    with pytest.raises(ValueError):
        train_ngram([["a"]], order=0)
    with pytest.raises(ValueError):
        train_ngram([], order=2)


def test_bigram_hand_computed():
    lm = train_ngram([["a", "b"], ["a", "a"]], order=2, k=1.0)
    # context (a,): a->b once, a->a once; |V| = 3
    assert math.exp(lm.cond_logprob("b", [BOS, "a"])) == pytest.approx(2 / 5)
    # context (<s>,): a twice
    assert math.exp(lm.cond_logprob("a", [BOS])) == pytest.approx(3 / 5)
    # unseen context (b,) falls back to the unigram
    assert lm.cond_logprob("a", [BOS, "b"]) == lm.cond_logprob("a", [])


@pytest.fixture(scope="module")
def synthetic_texts():
    lex = build_toy_language(SynthConfig(), seed=3)
    train = [u.text for u in generate_corpus(lex, 500, (3, 8), seed=1)]
    held = [u.text for u in generate_corpus(lex, 500, (3, 8), seed=2, prefix="held")]
    return lex, train, held


def test_normalization_on_sampled_contexts(synthetic_texts):
    lex, train, _ = synthetic_texts
    lm = train_ngram(train, order=4, k=0.5)
    rng = np.random.default_rng(0)
    words = list(lex.grapheme_inventory) + [BOS, "oov"]
    for _ in range(100):
        ctx = [words[i] for i in rng.integers(0, len(words), size=int(rng.integers(0, 4)))]
        ctx = [BOS] * 3 + [lm.map_word(w) for w in ctx]
        total = sum(math.exp(lm.cond_logprob(w, ctx)) for w in lm.vocab)
        assert total == pytest.approx(1.0, abs=1e-9)


def test_train_perplexity_below_heldout():
    gaps = []
    for seed in range(5):
        lex = build_toy_language(SynthConfig(), seed=seed)
        train = [u.text for u in generate_corpus(lex, 500, (3, 8), seed=seed)]
        held = [u.text for u in generate_corpus(lex, 500, (3, 8), seed=seed + 100, prefix="h")]
        lm = train_ngram(train, order=4, k=0.5)
        gaps.append(lm.perplexity(held) - lm.perplexity(train))
    assert np.mean(gaps) >= 0


def test_serialization_round_trip(tmp_path, synthetic_texts):
    _, train, held = synthetic_texts
    lm = train_ngram(train, order=3, k=0.25)
    path = tmp_path / "lm.json"
    lm.save(path)
    back = NGramLM.load(path)
    for s in held[:20]:
        assert back.logprob(s) == lm.logprob(s)
    rec = lm.to_record()
    rec["version"] = 99
    with pytest.raises(ValueError):
        NGramLM.from_record(rec)
