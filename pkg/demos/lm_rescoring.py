"""
Telling homophones apart with a word n-gram
===========================================

Homophones share a pronunciation, so the P2G model can only guess from the
neighbouring words it has seen. A word n-gram trained on text alone gives a
second opinion; this script shows the effect of the interpolation weight on
a handful of candidate lists.
"""

from spg.ngram import train_ngram
from spg.synth import SynthConfig, build_toy_language, generate_corpus
from spg.tkm import Candidate, rescore_with_lm

lex = build_toy_language(SynthConfig(), seed=0)
text = [u.text for u in generate_corpus(lex, 5000, (3, 8), seed=0, prefix="lmtext")]
lm = train_ngram(text, order=3, k=0.1)
print("homophones:", lex.homophone_groups())

# %%
# Swap one homophone in a real sentence and compare LM scores.
group = lex.homophone_groups()[0]
sent = next(t for t in text if group[0] in t or group[1] in t)
i = next(j for j, w in enumerate(sent) if w in group)
other = group[1] if sent[i] == group[0] else group[0]
swapped = sent[:i] + (other,) + sent[i + 1:]
for s in (sent, swapped):
    print(f"{lm.logprob(s):8.3f}  {' '.join(s)}")

# %%
# Two candidates the P2G model scores almost the same: the swap wins by a hair.
cands = [Candidate(swapped, -1.00, (0,)), Candidate(sent, -1.05, (0,))]
for lam in (0.0, 0.1, 0.5):
    best = rescore_with_lm(cands, lm, lam)[0]
    print(f"lambda {lam:<4} -> {' '.join(best.tokens)}")
