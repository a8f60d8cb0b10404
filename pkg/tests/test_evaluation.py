import math

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from oracles import levenshtein
from spg.evaluation import (
    ErrorBreakdown,
    corpus_errors,
    corpus_wer,
    edit_distance,
    edit_errors,
    format_table,
    matched_pairs_test,
    per_utterance_errors,
)

tokens = st.lists(st.sampled_from("abcd"), max_size=8)


@pytest.mark.parametrize("ref, hyp, S, I, D, rate", [
    ("abc", "abc", 0, 0, 0, 0.0),
    ("abc", "axc", 1, 0, 0, 1 / 3),
    ("ab", "", 0, 0, 2, 1.0),
    ("", "ab", 0, 2, 0, math.inf),
    ("abc", "abxc", 0, 1, 0, 1 / 3),
])
def test_edit_errors_examples(ref, hyp, S, I, D, rate):
    e = edit_errors(list(ref), list(hyp))
    assert (e.substitutions, e.insertions, e.deletions) == (S, I, D)
    assert e.ref_len == len(ref)
    assert e.rate == rate


def test_tie_break_prefers_substitution():
    # "ab" -> "ba" can be 2 substitutions or insertion+deletion
    e = edit_errors(["a", "b"], ["b", "a"])
    assert (e.substitutions, e.insertions, e.deletions) == (2, 0, 0)


@given(tokens, tokens)
def test_edit_errors_match_oracle(a, b):
    e = edit_errors(a, b)
    assert e.errors == levenshtein(a, b)
    assert e.ref_len - e.deletions - e.substitutions + e.insertions + e.substitutions == len(b)


@given(tokens)
def test_self_distance_zero(x):
    assert edit_distance(x, x) == 0


@given(tokens, tokens, tokens)
def test_triangle_inequality(x, y, z):
    assert edit_distance(x, z) <= edit_distance(x, y) + edit_distance(y, z)


def test_corpus_wer():
    refs = {"u1": ["a", "b"], "u2": ["c", "d"]}
    assert corpus_wer(refs, dict(refs)) == 0.0
    assert corpus_wer(refs, {"u1": ["a", "b"], "u2": []}) == 0.5
    with pytest.raises(KeyError):
        corpus_wer(refs, {"u1": ["a"]})


def test_micro_differs_from_macro():
    refs = {"u1": ["a"], "u2": ["a", "b", "c", "d"]}
    hyps = {"u1": [], "u2": ["a", "b", "c", "d"]}
    micro = corpus_wer(refs, hyps)
    macro = np.mean([edit_errors(refs[u], hyps[u]).rate for u in refs])
    assert micro == pytest.approx(0.2)
    assert macro == pytest.approx(0.5)


def test_breakdown_record():
    e = corpus_errors({"u": ["a", "b"]}, {"u": ["a", "c", "d"]})
    assert e.to_record() == {"wer": 1.0, "S": 1, "I": 1, "D": 0, "N_ref": 2}
    assert ErrorBreakdown(1, 0, 0, 4) + ErrorBreakdown(0, 1, 1, 4) == ErrorBreakdown(1, 1, 1, 8)


def test_per_utterance_errors_ordered_by_id():
    refs = {"b": ["x"], "a": ["x", "y"]}
    hyps = {"b": [], "a": ["x"]}
    assert per_utterance_errors(refs, hyps) == [1, 1]


def test_matched_pairs_identical():
    r = matched_pairs_test([1, 2, 0, 3], [1, 2, 0, 3])
    assert r.p_value == 1.0


def test_matched_pairs_constant_difference_is_degenerate():
    r = matched_pairs_test([1] * 100, [0] * 100)
    assert r.degenerate
    assert r.p_value == 0.0


def test_matched_pairs_closed_form():
    # d has mean 0.5 and sample stddev 1 exactly, N = 400 -> z = 10
    n = 400
    signs = np.tile([1.0, -1.0], n // 2)
    d = 0.5 + signs * math.sqrt((n - 1) / n)
    assert d.std(ddof=1) == pytest.approx(1.0, abs=1e-12)
    r = matched_pairs_test(d, np.zeros(n))
    assert r.z == pytest.approx(10.0, abs=1e-9)
    assert r.p_value < 1e-20
    assert r.p_value == pytest.approx(math.erfc(10 / math.sqrt(2)), rel=1e-6)


@given(st.lists(st.tuples(st.integers(0, 5), st.integers(0, 5)), min_size=2, max_size=30))
def test_matched_pairs_symmetric(pairs):
    a = [x for x, _ in pairs]
    b = [y for _, y in pairs]
    assert matched_pairs_test(a, b).p_value == matched_pairs_test(b, a).p_value


def test_matched_pairs_needs_two():
    with pytest.raises(ValueError):
        matched_pairs_test([1], [0])


def test_format_table_aligns():
    out = format_table([{"sys": "a", "wer": 0.125}, {"sys": "bbb", "wer": None}], ["sys", "wer"])
    lines = out.splitlines()
    assert lines[0].startswith("sys")
    assert "0.1250" in lines[2]
    assert lines[3].split()[1] == "-"
