"""Two-step phoneme-based ASR decoding on a synthetic language.

CTC phoneme hypotheses (``ctc``) from simulated S2P posteriors (``synth``)
feed an attention P2G model (``p2g``) trained on noisy phonemes (``danp``)
or with top-K marginalization (``tkm``), with n-gram LM re-scoring
(``ngram``) and WER / significance evaluation (``evaluation``).
"""

__version__ = "0.1.0"
