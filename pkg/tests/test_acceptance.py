"""Acceptance suite: one test per criterion, each printing a PASS/FAIL line.

Criteria 7-9 share one five-seed run of the full experiment with the bundled
``acceptance.json`` config (about 25 minutes on one core).
"""

import json
import math
import time

import numpy as np
import pytest

from oracles import (
    enumerate_ctc,
    enumerate_token_sequences,
    gradient_check,
    logsumexp,
    oracle_ranking,
    random_frames,
)
from spg.cli import CONFIG_DIR, main
from spg.ctc import (
    FrameLogits,
    HypothesisSet,
    PhonemeHypothesis,
    ctc_sequence_logprob,
    prefix_beam_search,
    sample_paths,
)
from spg.evaluation import matched_pairs_test
from spg.p2g import beam_decode, grad_nll, init_model, score_sequence
from spg.pipeline import ExperimentConfig, run_experiment
from spg.tkm import (
    TKMBatchItem,
    exact_rescore,
    item_rng,
    make_rtkm_loss,
    randomized_tkm_loss,
    tkm_decode,
    tkm_grad,
    tkm_loss,
)

SEEDS = (0, 1, 2, 3, 4)
MAX_RUNTIME_S = 30 * 60


@pytest.fixture
def verdict(capsys):
    def emit(n, ok, detail):
        with capsys.disabled():
            print(f"\n[criterion {n}] {'PASS' if ok else 'FAIL'}: {detail}")
        assert ok, detail
    return emit


def ctc_instances():
    rng = np.random.default_rng(2024)
    out = []
    for _ in range(100):
        T, V = int(rng.integers(1, 7)), int(rng.integers(1, 4))
        frames, blank = random_frames(rng, T, V)
        out.append(FrameLogits(frames, blank, tuple(f"p{i}" for i in range(V))))
    return out


def test_criterion_1_ctc_oracle(verdict):
    t0 = time.perf_counter()
    worst_p, worst_total = 0.0, 0.0
    for fl in ctc_instances():
        dist = enumerate_ctc(fl.frames, fl.blank_index, fl.symbols)
        probs = {s: math.exp(ctc_sequence_logprob(fl, s)) for s in dist}
        worst_p = max(worst_p, max(abs(probs[s] - p) for s, p in dist.items()))
        worst_total = max(worst_total, abs(math.fsum(probs.values()) - 1.0))
    dt = time.perf_counter() - t0
    ok = worst_p <= 1e-9 and worst_total <= 1e-9 and dt < 10
    verdict(1, ok, f"max |p - oracle| {worst_p:.2e}, max |sum - 1| {worst_total:.2e}, {dt:.2f}s")


def test_criterion_2_beam_exactness(verdict):
    mismatches = 0
    for fl in ctc_instances():
        dist = enumerate_ctc(fl.frames, fl.blank_index, fl.symbols)
        if prefix_beam_search(fl, len(dist)).token_seqs != oracle_ranking(dist):
            mismatches += 1
    verdict(2, mismatches == 0, f"{mismatches}/100 rankings differ from the oracle")


def test_criterion_3_sampling_convergence(verdict):
    R = 200_000
    rng = np.random.default_rng(7)
    frames, blank = random_frames(rng, 3, 2)
    fl = FrameLogits(frames, blank, ("a", "b"))
    dist = enumerate_ctc(fl.frames, fl.blank_index, fl.symbols)
    counts = sample_paths(fl, R, seed=11)
    assert set(counts) <= set(dist)
    worst = 0.0
    for seq, p in dist.items():
        sigma = math.sqrt(p * (1 - p) / R)
        dev = abs(counts.get(seq, 0) / R - p)
        worst = max(worst, dev / sigma if sigma > 0 else (0.0 if dev == 0 else math.inf))
    verdict(3, worst <= 3.0, f"{len(dist)} sequences, worst deviation {worst:.2f} sigma")


# ------------------------------------------------------------- gradients

PH, GR = ("a", "b", "c"), ("x", "y")


def peaked_model(seed, dims=(3, 4)):
    m = init_model(dims, seed, PH, GR)
    m.params["out_W"] *= 3.0
    m.params["out_b"] = np.array([0.2, -0.1, 0.3])
    return m


def random_hyps(rng, K):
    seqs = set()
    while len(seqs) < K:
        seqs.add(tuple(rng.choice(PH, size=int(rng.integers(0, 4)))))
    return HypothesisSet(tuple(PhonemeHypothesis(s, float(-rng.exponential(2.0))) for s in seqs))


def test_criterion_4_gradient_checks(verdict):
    rng = np.random.default_rng(3)
    results = {}

    m = peaked_model(1)
    batch = [(("a", "b"), ("x", "y")), (("c",), ("y",)), ((), ("x", "x", "y"))]
    g, _ = grad_nll(m, batch)
    results["cross-entropy"] = gradient_check(m.params, lambda: grad_nll(m, batch)[1], g, rng)

    m = peaked_model(2)
    items = [TKMBatchItem(random_hyps(rng, 4), ("x", "y"), "u0"),
             TKMBatchItem(random_hyps(rng, 3), ("y",), "u1")]
    g, _ = tkm_grad(m, items)
    results["tkm"] = gradient_check(m.params, lambda: sum(tkm_loss(m, it) for it in items), g, rng)

    m = peaked_model(3)
    items = [TKMBatchItem(random_hyps(rng, 6), ("x",), f"u{i}") for i in range(2)]
    g, _, _ = make_rtkm_loss(2, 5, seed=9)(m, items, 4)
    f = lambda: sum(randomized_tkm_loss(m, it, 2, 5, item_rng(9, it.utt_id, 4)) for it in items) / 2  # noqa: E731
    results["randomized tkm"] = gradient_check(m.params, f, g, rng)

    ok = all(n >= 100 and w <= 1e-4 for w, n in results.values())
    detail = ", ".join(f"{k}: {w:.1e} over {n} params" for k, (w, n) in results.items())
    verdict(4, ok, detail)


def test_criterion_5_reductions(verdict):
    rng = np.random.default_rng(5)
    m = peaked_model(4, dims=(4, 5))
    worst_k1, worst_nk, rank_ok = 0.0, 0.0, True
    for i in range(20):
        hs = random_hyps(rng, 5)
        y = tuple(rng.choice(GR, size=int(rng.integers(0, 4))))
        one = TKMBatchItem(hs.top(1), y)
        worst_k1 = max(worst_k1, abs(tkm_loss(m, one) + score_sequence(m, hs[0].tokens, y)))
        full = TKMBatchItem(hs, y)
        r = randomized_tkm_loss(m, full, 5, 5, np.random.default_rng(i))
        worst_nk = max(worst_nk, abs(r - tkm_loss(m, full)))
        cands = tkm_decode(m, hs.top(1), 4, 5)
        rank_ok &= [c.tokens for c in cands] == [t for t, _ in beam_decode(m, hs[0].tokens, 4, 5)]
    ok = worst_k1 <= 1e-12 and worst_nk <= 1e-12 and rank_ok
    verdict(5, ok, f"K=1 vs CE {worst_k1:.1e}, n=K vs TKM {worst_nk:.1e}, decode K=1 ranking equal: {rank_ok}")


def test_criterion_6_marginalization_oracle(verdict):
    rng = np.random.default_rng(6)
    n, exact_ok, fast_ok, disagreements = 100, 0, 0, []
    ys = list(enumerate_token_sequences(GR, 3))
    for i in range(n):
        m = init_model((4, 6), i, ("a", "b"), GR)
        m.params["out_W"] *= 3.0
        frames, blank = random_frames(rng, 3, 2)
        hs = prefix_beam_search(FrameLogits(frames, blank, ("a", "b")), 64)
        assert abs(math.fsum(math.exp(h.acoustic_logprob) for h in hs) - 1) < 1e-9
        score = {y: logsumexp([h.acoustic_logprob + score_sequence(m, h.tokens, y) for h in hs]) for y in ys}
        brute = min(ys, key=lambda y: (-score[y], y))
        exact = exact_rescore(m, hs, tkm_decode(m, hs, len(ys), 3))[0].tokens
        fast = tkm_decode(m, hs, 4, 3)[0].tokens
        exact_ok += exact == brute
        fast_ok += fast == brute
        if fast != brute:
            disagreements.append((i, fast, brute))
    for d in disagreements:
        print(f"fast decode disagreement on instance {d[0]}: {d[1]} vs {d[2]}")
    ok = exact_ok == n and fast_ok / n >= 0.95
    verdict(6, ok, f"exact rescore {exact_ok}/{n}, fast decode agreement {fast_ok}/{n}")


# ------------------------------------------------------ end-to-end runs


@pytest.fixture(scope="module")
def seed_reports():
    raw = json.loads((CONFIG_DIR / "acceptance.json").read_text())
    base = ExperimentConfig.from_dict(raw)
    t0 = time.perf_counter()
    reports = []
    for seed in SEEDS:
        cfg = ExperimentConfig.from_dict({**raw, "seed": seed})
        assert cfg.corpus == base.corpus
        reports.append(run_experiment(cfg))
    return reports, time.perf_counter() - t0


def _wer(r, system):
    return r["wer"][system]["wer"]


def test_criterion_7_directional_orderings(verdict, seed_reports):
    reports, elapsed = seed_reports
    a = b = c = 0
    rows = []
    for r in reports:
        clean, danp = _wer(r, "clean/best-path"), _wer(r, "danp/best-path")
        rt_bp, rt_tkm = _wer(r, "rtkm/best-path"), _wer(r, "rtkm/tkm")
        a += danp < clean
        b += rt_tkm <= danp
        c += rt_tkm <= rt_bp
        rows.append(f"seed {r['seed']}: PER {r['data']['greedy_per']['test']:.3f} clean {clean:.4f} "
                    f"danp {danp:.4f} rtkm-bp {rt_bp:.4f} rtkm-tkm {rt_tkm:.4f}")
    print("\n".join(rows))
    ok = a >= 4 and b >= 4 and c >= 4 and elapsed < MAX_RUNTIME_S
    verdict(7, ok, f"(a) {a}/5 (b) {b}/5 (c) {c}/5 seeds, five runs took {elapsed / 60:.1f} min")


def test_criterion_8_lm_rescoring(verdict, seed_reports):
    reports, _ = seed_reports
    better = 0
    for r in reports:
        lm = r["lm"]
        better += lm["test_homophone_wer_tuned"] < lm["test_homophone_wer_lambda0"]
        print(f"seed {r['seed']}: lambda {lm['lambda']:g} homophone WER "
              f"{lm['test_homophone_wer_lambda0']:.4f} -> {lm['test_homophone_wer_tuned']:.4f}")
    noop = all(r["lm"]["lambda0_order_unchanged"] for r in reports)
    verdict(8, better >= 4 and noop, f"tuned lambda beats lambda=0 in {better}/5 seeds, lambda=0 no-op: {noop}")


def test_criterion_9_significance(verdict, seed_reports, tmp_path):
    reports, _ = seed_reports
    same = matched_pairs_test([3, 0, 1, 2], [3, 0, 1, 2]).p_value
    path = tmp_path / "hyps.jsonl"
    path.write_text('{"utt_id": "u1", "candidates": [{"tokens": ["w"], "tkm_logscore": -1.0, "provenance": [0]}]}\n'
                    '{"utt_id": "u2", "candidates": [{"tokens": [], "tkm_logscore": -2.0, "provenance": [0]}]}\n')
    refs = tmp_path / "refs.jsonl"
    refs.write_text('{"utt_id": "u1", "text": ["w"]}\n{"utt_id": "u2", "text": ["v"]}\n')
    code = main(["significance", str(path), str(path), "--refs", str(refs), "--out", str(tmp_path / "out")])
    file_p = json.loads(next((tmp_path / "out" / "significance").glob("v*/result.json")).read_text())["p_value"]
    sig = 0
    for r in reports:
        p = next(s["p_value"] for s in r["significance"]
                 if {s["a"], s["b"]} == {"clean/best-path", "danp/best-path"})
        sig += p < 0.05
    ok = same == 1.0 and code == 0 and file_p == 1.0 and sig >= 4
    verdict(9, ok, f"identical files p={file_p}, DANP vs clean p<0.05 in {sig}/5 seeds")


def test_criterion_10_determinism(verdict, tmp_path):
    cfg = str(CONFIG_DIR / "demo.json")
    for _ in range(2):
        assert main(["experiment-matrix", "--config", cfg, "--out", str(tmp_path)]) == 0
    root = tmp_path / "experiment-matrix"
    same = all((root / "v001" / f).read_bytes() == (root / "v002" / f).read_bytes()
               for f in ("report.json", "report.txt"))
    verdict(10, same, "two demo-config pipeline runs give byte-identical report.json and report.txt")
