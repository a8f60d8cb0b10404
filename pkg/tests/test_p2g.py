import math

import numpy as np
import pytest

from oracles import enumerate_token_sequences, gradient_check
from spg.p2g import (
    CheckpointError,
    TrainConfig,
    beam_decode,
    beam_decode_many,
    grad_nll,
    greedy_decode,
    init_model,
    load_checkpoint,
    next_token_logprobs,
    save_checkpoint,
    score_batch,
    score_sequence,
    train,
)

PH = ("a", "b", "c")
GR = ("x", "y")


def small_model(seed=0, dims=(4, 5)):
    return init_model(dims, seed, PH, GR)


def sharpened(model, scale=3.0):
    # bigger output weights give peaked, non-trivial distributions
    m = model.copy()
    m.params["out_W"] *= scale
    m.params["out_b"] = np.array([0.3, -0.2, 0.1])
    return m


def random_pairs(rng, n, max_h=4, max_y=3):
    return [
        (tuple(rng.choice(PH, size=int(rng.integers(0, max_h + 1)))),
         tuple(rng.choice(GR, size=int(rng.integers(0, max_y + 1)))))
        for _ in range(n)
    ]


def test_init_deterministic_and_shapes():
    a, b = small_model(3), small_model(3)
    for k, shape in a.param_shapes().items():
        assert a.params[k].shape == shape
        np.testing.assert_array_equal(a.params[k], b.params[k])
    assert np.all(a.params["out_b"] == 0.0)
    assert not np.array_equal(a.params["out_W"], small_model(4).params["out_W"])


def test_zero_output_layer_is_uniform():
    m = small_model()
    m.params["out_W"][:] = 0.0
    lp = next_token_logprobs(m, ["a", "b"], ["x"])
    np.testing.assert_allclose(lp, -math.log(3), atol=1e-12)
    y = ("x", "y", "y")
    assert score_sequence(m, ["c"], y) == pytest.approx(-(len(y) + 1) * math.log(3), abs=1e-12)


def test_unknown_tokens_rejected():
    m = small_model()
    with pytest.raises(ValueError):
        score_sequence(m, ["zz"], ["x"])
    with pytest.raises(ValueError):
        score_sequence(m, ["a"], ["zz"])


def test_next_token_distribution_normalized():
    m = sharpened(small_model(1))
    lp = next_token_logprobs(m, ["a", "c"], ["y"])
    assert np.exp(lp).sum() == pytest.approx(1.0, abs=1e-12)


def test_score_is_sum_of_next_token_logprobs():
    m = sharpened(small_model(2))
    h, y = ["b", "a", "c"], ["x", "x", "y"]
    total = sum(next_token_logprobs(m, h, y[:i])[m.gr_index[t]] for i, t in enumerate(y))
    total += next_token_logprobs(m, h, y)[0]
    assert score_sequence(m, h, y) == pytest.approx(total, abs=1e-12)


def test_batched_scoring_matches_single():
    m = sharpened(small_model(5))
    pairs = random_pairs(np.random.default_rng(0), 20)
    batch = score_batch(m, pairs, batch_size=7)
    for (h, y), s in zip(pairs, batch):
        assert s == pytest.approx(score_sequence(m, h, y), abs=1e-12)


def test_empty_hypothesis_is_scorable():
    m = small_model()
    assert math.isfinite(score_sequence(m, [], ["x"]))


def test_sequence_distribution_sums_to_one_in_the_limit():
    # mass over all y up to length L approaches 1 from below
    m = sharpened(small_model(6))
    mass = sum(math.exp(score_sequence(m, ["a"], y)) for y in enumerate_token_sequences(GR, 6))
    assert 0.9 < mass <= 1.0 + 1e-12


def test_gradient_matches_finite_differences():
    m = sharpened(small_model(7, dims=(3, 4)))
    rng = np.random.default_rng(1)
    batch = random_pairs(rng, 4)
    w = rng.uniform(0.5, 1.5, size=len(batch))
    grads, _ = grad_nll(m, batch, w)

    def f():
        return grad_nll(m, batch, w)[1]

    worst, checked = gradient_check(m.params, f, grads, rng)
    assert checked >= 100
    assert worst <= 1e-4


def beam_oracle(m, h, S, max_len):
    scored = [(score_sequence(m, h, y), y) for y in enumerate_token_sequences(GR, max_len)]
    scored.sort(key=lambda t: (-t[0], t[1]))
    return scored[:S]


def test_beam_matches_enumeration_with_wide_beam():
    # with S >= |candidates| the beam is exhaustive
    m = sharpened(small_model(8))
    out = beam_decode(m, ["a", "b"], S=15, max_len=3)
    oracle = beam_oracle(m, ["a", "b"], 15, 3)
    assert [y for y, _ in out] == [y for _, y in oracle]
    for (_, s), (so, _) in zip(out, oracle):
        assert s == pytest.approx(so, abs=1e-9)


def test_beam_scores_equal_forced_scores():
    m = sharpened(small_model(9))
    for y, s in beam_decode(m, ["c", "a"], S=4, max_len=5):
        assert s == pytest.approx(score_sequence(m, ["c", "a"], y), abs=1e-9)
        assert len(y) <= 5


def test_beam_of_one_equals_greedy():
    m = sharpened(small_model(10))
    for h in (["a"], ["b", "c", "a"], []):
        (y, s), = beam_decode(m, h, S=1, max_len=6)
        gy, gs = greedy_decode(m, h, max_len=6)
        assert y == gy
        assert s == pytest.approx(gs, abs=1e-12)


def test_batched_beam_matches_single():
    m = sharpened(small_model(11))
    hs = [["a"], ["b", "b"], [], ["c", "a", "b"]]
    assert beam_decode_many(m, hs, 3, 4) == [beam_decode(m, h, 3, 4) for h in hs]


def test_beam_max_len_zero_yields_empty_only():
    m = small_model()
    out = beam_decode(m, ["a"], S=3, max_len=0)
    assert [y for y, _ in out] == [()]


def test_overfits_single_pair():
    m = init_model((8, 16), 0, PH, GR)
    pair = (("a", "b"), ("y", "x", "y"))
    cfg = TrainConfig(learning_rate=1e-2, batch_size=1, max_epochs=200, patience=200)
    m, trace = train(m, [pair], cfg, seed=0)
    per_token = -score_sequence(m, *pair) / 4
    assert per_token < 0.01
    assert trace.train_loss[-1] < trace.train_loss[0]


def test_early_stopping_restores_best():
    rng = np.random.default_rng(2)
    data = random_pairs(rng, 30)
    dev = random_pairs(rng, 30)   # unrelated to train, so dev loss soon worsens
    cfg = TrainConfig(learning_rate=3e-2, batch_size=8, max_epochs=60, patience=2)
    m, trace = train(small_model(), data, cfg, seed=0, dev=dev)
    assert trace.stopped_early
    assert len(trace.dev_loss) == trace.best_epoch + 1 + cfg.patience
    best = min(trace.dev_loss)
    assert trace.dev_loss[trace.best_epoch] == best
    got = -sum(score_sequence(m, h, y) for h, y in dev) / sum(len(y) + 1 for _, y in dev)
    assert got == pytest.approx(best, abs=1e-12)


def test_early_stopping_can_keep_starting_point():
    rng = np.random.default_rng(4)
    dev = random_pairs(rng, 20)
    fitted, _ = train(small_model(), dev, TrainConfig(learning_rate=1e-2, batch_size=4, max_epochs=40), seed=0)
    noise = random_pairs(rng, 20)
    cfg = TrainConfig(learning_rate=3e-2, batch_size=4, max_epochs=10, patience=2)
    m, trace = train(fitted, noise, cfg, seed=0, dev=dev)
    assert trace.best_epoch == -1
    assert all(d > trace.initial_dev_loss for d in trace.dev_loss)
    for k in m.params:
        np.testing.assert_array_equal(m.params[k], fitted.params[k])


def test_training_is_deterministic():
    data = random_pairs(np.random.default_rng(3), 20)
    cfg = TrainConfig(batch_size=4, max_epochs=3)
    a, ta = train(small_model(), data, cfg, seed=5)
    b, tb = train(small_model(), data, cfg, seed=5)
    assert ta.batch_loss == tb.batch_loss
    for k in a.params:
        np.testing.assert_array_equal(a.params[k], b.params[k])


def test_unknown_optimizer():
    with pytest.raises(ValueError):
        train(small_model(), [(("a",), ("x",))], TrainConfig(optimizer="nope"), seed=0)


def test_checkpoint_round_trip(tmp_path):
    m = sharpened(small_model(12))
    path = tmp_path / "ck.json"
    save_checkpoint(m, path)
    back = load_checkpoint(path)
    for k in m.params:
        np.testing.assert_array_equal(back.params[k], m.params[k])
    assert back.phonemes == m.phonemes and back.graphemes == m.graphemes
    assert beam_decode(back, ["a", "c"], 3, 4) == beam_decode(m, ["a", "c"], 3, 4)


def test_checkpoint_version_mismatch(tmp_path):
    import json
    path = tmp_path / "ck.json"
    save_checkpoint(small_model(), path)
    doc = json.loads(path.read_text())
    doc["version"] = 42
    path.write_text(json.dumps(doc))
    with pytest.raises(CheckpointError):
        load_checkpoint(path)
    path.write_text("{not json")
    with pytest.raises(CheckpointError):
        load_checkpoint(path)
