"""
Phoneme hypotheses from noisy CTC frames
========================================

Build the toy language, simulate frame logits for a few sentences at a
greedy phoneme error rate of about 15%, and look at what the S2P side hands
to the P2G model: the best path, the top-K beam and its probability mass.
"""

import numpy as np

from spg.ctc import ctc_sequence_logprob, greedy_decode, prefix_beam_search, sample_paths
from spg.synth import (
    NoiseSpec,
    SynthConfig,
    attach_logits,
    build_toy_language,
    calibrate_confusion_scale,
    generate_corpus,
    greedy_phoneme_errors,
)

lex = build_toy_language(SynthConfig(), seed=0)
for word, pron in lex.words:
    print(f"{word:>8}  {' '.join(pron)}")
print("homophones:", lex.homophone_groups())

# %%
# Calibrate the noise so that greedy decoding gets ~15% of phonemes wrong.
dev = generate_corpus(lex, 200, (3, 8), seed=0, prefix="dev")
noise = NoiseSpec(seed=0)
scale = calibrate_confusion_scale(dev, lex, noise, 0.15)
noise = NoiseSpec(seed=0, confusion_scale=scale)
dev = attach_logits(dev, lex, noise)
print(f"\nconfusion_scale {scale:.3f}, greedy PER {greedy_phoneme_errors(dev).rate:.3f}")

# %%
# One utterance: reference, best path and the top of the beam.
u = min(dev, key=lambda u: len(u.reference_phonemes))
fl = u.frame_logits
print("\ntext     ", " ".join(u.text))
print("reference", " ".join(u.reference_phonemes))
print("best path", " ".join(greedy_decode(fl)))
beam = prefix_beam_search(fl, 8)
for h in beam:
    mark = "*" if h.tokens == u.reference_phonemes else " "
    print(f" {mark} {np.exp(h.acoustic_logprob):.4f}  {' '.join(h.tokens)}")
print(f"mass covered by the top 8: {np.exp(np.logaddexp.reduce(beam.logprobs)):.3f}")

# %%
# The forward algorithm sums every frame path of a hypothesis. A pruned beam
# loses some of those paths, so its score is a lower bound that tightens as K
# grows. Sampled frame paths estimate the same quantity.
h = beam[0]
print(f"\nforward log p {ctc_sequence_logprob(fl, h.tokens):.4f}")
for K in (8, 64, 256):
    wide = prefix_beam_search(fl, K)
    print(f"  beam K={K:<3} {wide.logprobs[wide.token_seqs.index(h.tokens)]:.4f}")
counts = sample_paths(fl, 20000, seed=1)
print(f"sampled frequency {counts.get(h.tokens, 0) / 20000:.4f} vs {np.exp(ctc_sequence_logprob(fl, h.tokens)):.4f}")

# %%
# How often is the reference anywhere in the top K?
for K in (1, 4, 8, 32):
    hit = np.mean([u.reference_phonemes in prefix_beam_search(u.frame_logits, K).token_seqs for u in dev])
    print(f"reference in top {K:2d}: {hit:.2f}")
