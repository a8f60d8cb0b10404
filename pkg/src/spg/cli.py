"""Command-line entry point: ``python -m spg <subcommand>``.

Every stage writes into a fresh versioned directory ``<out>/<stage>/vNNN/``
and reads the latest version of the stages it depends on. Errors are printed
to stderr as one JSON object and mapped to distinct exit codes.
"""

from __future__ import annotations

import argparse
import json
import os
import re
import sys
from dataclasses import replace
from pathlib import Path

from ._util import dump_json, read_jsonl, write_jsonl
from .ctc import FrameLogits, HypothesisSet
from .danp import AugmentedDataset, AugmentedItem
from .evaluation import corpus_errors, matched_pairs_test, per_utterance_errors
from .p2g import CheckpointError, TrainingDiverged, load_checkpoint, save_checkpoint
from .pipeline import (
    DECODERS,
    REGIMES,
    SPLITS,
    ConfigError,
    Data,
    ExperimentConfig,
    decode,
    decode_hypotheses,
    generate_data,
    report_table,
    rescore_all,
    restrict,
    run_experiment,
    top1,
    train_lm,
    train_regime,
    tune_lambda,
)
from .synth import Lexicon, NoiseSpec, Utterance
from .tkm import Candidate

EXIT_OK = 0
EXIT_UNEXPECTED = 1
EXIT_USAGE = 2
EXIT_MISSING_INPUT = 3
EXIT_SCHEMA = 4
EXIT_CONFIG = 5
EXIT_DIVERGED = 6

CONFIG_DIR = Path(__file__).parent / "configs"


class MissingInput(FileNotFoundError):
    pass


class SchemaError(ValueError):
    pass


# ----------------------------------------------------------- stage dirs

_VERSION = re.compile(r"^v(\d{3,})$")


def _versions(stage_root: Path) -> list[int]:
    if not stage_root.is_dir():
        return []
    return sorted(int(m.group(1)) for p in stage_root.iterdir() if (m := _VERSION.match(p.name)))


def new_stage_dir(out: Path, stage: str) -> Path:
    root = out / stage
    vs = _versions(root)
    path = root / f"v{(vs[-1] + 1 if vs else 1):03d}"
    path.mkdir(parents=True)
    return path


def latest_stage_dir(out: Path, stage: str) -> Path:
    vs = _versions(out / stage)
    if not vs:
        raise MissingInput(f"no output of stage {stage!r} under {out}; run it first")
    return out / stage / f"v{vs[-1]:03d}"


def _read_json(path: Path):
    if not path.exists():
        raise MissingInput(f"missing file {path}")
    try:
        return json.loads(path.read_text(encoding="utf-8"))
    except json.JSONDecodeError as exc:
        raise SchemaError(f"{path}: malformed JSON ({exc.msg})") from None


def _write_json(path: Path, obj) -> None:
    path.write_text(json.dumps(obj, indent=1, sort_keys=True) + "\n", encoding="utf-8")


def _records(path: Path) -> list[dict]:
    if not path.exists():
        raise MissingInput(f"missing file {path}")
    try:
        return list(read_jsonl(path))
    except ValueError as exc:
        raise SchemaError(str(exc)) from None


def _parse(kind: str, path: Path, fn):
    try:
        return fn()
    except (KeyError, TypeError, ValueError) as exc:
        raise SchemaError(f"{path}: invalid {kind} record ({exc})") from None


# ------------------------------------------------------------ loaders


def load_config(args) -> ExperimentConfig:
    path = Path(args.config) if args.config else CONFIG_DIR / "demo.json"
    if not path.exists():
        raise MissingInput(f"config file {path} not found")
    try:
        raw = json.loads(path.read_text(encoding="utf-8"))
    except json.JSONDecodeError as exc:
        raise ConfigError(f"{path}: malformed JSON ({exc.msg})") from None
    cfg = ExperimentConfig.from_dict(raw)
    if args.seed is not None:
        cfg = replace(cfg, seed=args.seed)
    return cfg


def load_data(out: Path) -> Data:
    d = latest_stage_dir(out, "synth")
    lex_path = d / "lexicon.json"
    lexicon = _parse("lexicon", lex_path, lambda: Lexicon.from_record(_read_json(lex_path)))
    noise = _parse("noise", d / "noise.json", lambda: NoiseSpec.from_dict(
        {**_read_json(d / "noise.json"), "duration_range": tuple(_read_json(d / "noise.json")["duration_range"])}))
    splits = {}
    for split in SPLITS:
        utts = [_parse("utterance", d / f"{split}.jsonl", lambda r=r: Utterance.from_record(r))
                for r in _records(d / f"{split}.jsonl")]
        logits = {}
        for r in _records(d / f"logits_{split}.jsonl"):
            fl = _parse("frame logits", d / f"logits_{split}.jsonl", lambda r=r: FrameLogits.from_record(r))
            logits[fl.utt_id] = fl
        missing = [u.utt_id for u in utts if u.utt_id not in logits]
        if missing:
            raise SchemaError(f"{d}: no frame logits for {missing[0]}")
        splits[split] = [replace(u, frame_logits=logits[u.utt_id]) for u in utts]
    texts = [tuple(r["text"]) for r in _records(d / "lm_text.jsonl")]
    return Data(lexicon, noise, splits, texts)


def load_hyps(out: Path) -> dict[str, HypothesisSet]:
    d = latest_stage_dir(out, "s2p")
    hyps = {}
    for split in SPLITS:
        path = d / f"hyps_{split}.jsonl"
        for r in _records(path):
            hyps[r["utt_id"]] = _parse("hypothesis set", path, lambda r=r: HypothesisSet.from_record(r))
    return hyps


def load_candidates(path: Path) -> dict[str, list[Candidate]]:
    out = {}
    for r in _records(path):
        out[r["utt_id"]] = _parse("candidate", path,
                                  lambda r=r: [Candidate.from_record(c) for c in r["candidates"]])
    return out


def write_candidates(path: Path, cands: dict[str, list[Candidate]]) -> None:
    write_jsonl(path, ({"utt_id": k, "candidates": [c.to_record() for c in v]} for k, v in cands.items()))


def _candidates_path(out: Path, ref: str, split: str) -> Path:
    """``ref`` is a file path or a stage name such as ``decode-rtkm-tkm``."""
    p = Path(ref)
    if p.suffix == ".jsonl":
        if not p.exists():
            raise MissingInput(f"missing file {p}")
        return p
    return latest_stage_dir(out, ref) / f"candidates_{split}.jsonl"


def _load_model(out: Path, regime: str):
    path = latest_stage_dir(out, f"train-{regime}") / "model.json"
    if not path.exists():
        raise MissingInput(f"missing file {path}")
    return load_checkpoint(path)


# ----------------------------------------------------------- commands


def cmd_synth_gen(args, cfg, out):
    data = generate_data(cfg)
    d = new_stage_dir(out, "synth")
    _write_json(d / "lexicon.json", data.lexicon.to_record())
    _write_json(d / "noise.json", data.noise.to_dict())
    for split, utts in data.splits.items():
        write_jsonl(d / f"{split}.jsonl", (u.to_record() for u in utts))
        write_jsonl(d / f"logits_{split}.jsonl", (u.frame_logits.to_record() for u in utts))
    write_jsonl(d / "lm_text.jsonl", ({"text": list(t)} for t in data.lm_texts))
    return {"dir": str(d), "confusion_scale": data.noise.confusion_scale}


def cmd_s2p_decode(args, cfg, out):
    data = load_data(out)
    d = new_stage_dir(out, "s2p")
    for split in SPLITS:
        hyps = decode_hypotheses(data.splits[split], cfg.s2p_K, args.workers)
        write_jsonl(d / f"hyps_{split}.jsonl", ({"utt_id": k, **v.to_record()} for k, v in hyps.items()))
    return {"dir": str(d)}


def cmd_danp_build(args, cfg, out):
    from .pipeline import build_danp

    data = load_data(out)
    d = new_stage_dir(out, "danp")
    stats = {}
    for split in ("train", "dev"):
        ds = build_danp(data, cfg, split)
        write_jsonl(d / f"augmented_{split}.jsonl", (it.to_record() for it in ds))
        stats[split] = ds.stats
    _write_json(d / "stats.json", stats)
    return {"dir": str(d), "stats": stats}


def _load_danp(out: Path) -> tuple[AugmentedDataset, AugmentedDataset]:
    d = latest_stage_dir(out, "danp")
    sets = []
    for split in ("train", "dev"):
        path = d / f"augmented_{split}.jsonl"
        items = [_parse("augmented item", path, lambda r=r: AugmentedItem.from_record(r)) for r in _records(path)]
        sets.append(AugmentedDataset(items, len(items)))
    return sets[0], sets[1]


def cmd_train(args, cfg, out):
    regime = args.regime
    data = load_data(out)
    hyps = load_hyps(out) if regime in ("tkm", "rtkm") else {}
    src = cfg.warm_start.get(regime)
    init = _load_model(out, src) if src else None
    danp_sets = _load_danp(out) if regime == "danp" else None

    def log(msg):
        print(f"[train {regime}] {msg}", file=sys.stderr)

    model, trace = train_regime(regime, data, hyps, cfg, init, danp_sets, log=log)
    d = new_stage_dir(out, f"train-{regime}")
    save_checkpoint(model, d / "model.json")
    _write_json(d / "trace.json", trace.to_record())
    return {"dir": str(d), "epochs": len(trace.train_loss), "best_epoch": trace.best_epoch}


def cmd_decode(args, cfg, out):
    data = load_data(out)
    hyps = load_hyps(out)
    model = _load_model(out, args.model)
    d = new_stage_dir(out, f"decode-{args.model}-{args.mode}")
    for split in ("dev", "test"):
        write_candidates(d / f"candidates_{split}.jsonl",
                         decode(model, data.splits[split], hyps, args.mode, cfg))
    return {"dir": str(d)}


def cmd_rescore(args, cfg, out):
    data = load_data(out)
    src = f"decode-{args.model}-tkm"
    dev = load_candidates(_candidates_path(out, src, "dev"))
    test = load_candidates(_candidates_path(out, src, "test"))
    lm = train_lm(data, cfg)
    dev_ids = [i for i in data.homophone_ids("dev") if i in dev]
    lam, wers = tune_lambda(restrict(dev, dev_ids), restrict(data.refs("dev"), dev_ids), lm,
                            cfg.lm.lambdas, cfg.lm.beta)
    d = new_stage_dir(out, f"rescore-{args.model}")
    lm.save(d / "lm.json")
    write_candidates(d / "candidates_dev.jsonl", rescore_all(dev, lm, lam, cfg.lm.beta))
    write_candidates(d / "candidates_test.jsonl", rescore_all(test, lm, lam, cfg.lm.beta))
    tuning = {"lambda": lam, "dev_homophone_wer": {repr(k): v for k, v in sorted(wers.items())}}
    _write_json(d / "tuning.json", tuning)
    return {"dir": str(d), **tuning}


def cmd_eval(args, cfg, out):
    data = load_data(out)
    result = {}
    for split in ("dev", "test"):
        cands = load_candidates(_candidates_path(out, args.system, split))
        refs = data.refs(split)
        missing = sorted(set(refs) - set(cands))
        if missing:
            raise SchemaError(f"{args.system}: no output for {missing[0]} ({split})")
        hom = data.homophone_ids(split)
        result[split] = {**corpus_errors(refs, top1(cands)).to_record(),
                         "homophone_wer": corpus_errors(restrict(refs, hom), restrict(top1(cands), hom)).rate}
    name = Path(args.system).stem if args.system.endswith(".jsonl") else args.system
    d = new_stage_dir(out, "eval")
    _write_json(d / "wer.json", {"system": name, **result})
    return {"dir": str(d), "system": name, **result}


def cmd_significance(args, cfg, out):
    split = args.split
    a = load_candidates(_candidates_path(out, args.a, split))
    b = load_candidates(_candidates_path(out, args.b, split))
    if set(a) != set(b):
        raise SchemaError("the two systems cover different utterances")
    if args.refs:
        refs = {}
        for r in _records(Path(args.refs)):
            refs[r["utt_id"]] = tuple(r["text"])
    else:
        refs = load_data(out).refs(split)
    refs = {k: refs[k] for k in a}
    r = matched_pairs_test(per_utterance_errors(refs, top1(a)), per_utterance_errors(refs, top1(b)))
    result = {"a": args.a, "b": args.b, "split": split, "p_value": r.p_value, "z": r.z,
              "mean_diff": r.mean_diff, "n": r.n, "degenerate": r.degenerate}
    d = new_stage_dir(out, "significance")
    _write_json(d / "result.json", result)
    return {"dir": str(d), **result}


def cmd_experiment_matrix(args, cfg, out):
    def log(msg):
        print(f"[matrix] {msg}", file=sys.stderr)

    report = run_experiment(cfg, workers=args.workers, log=log)
    d = new_stage_dir(out, "experiment-matrix")
    (d / "report.json").write_text(dump_json(report) + "\n", encoding="utf-8")
    (d / "report.txt").write_text(report_table(report), encoding="utf-8")
    print(report_table(report), file=sys.stderr)
    return {"dir": str(d)}


COMMANDS = {
    "synth-gen": cmd_synth_gen,
    "s2p-decode": cmd_s2p_decode,
    "danp-build": cmd_danp_build,
    "train": cmd_train,
    "decode": cmd_decode,
    "rescore": cmd_rescore,
    "eval": cmd_eval,
    "significance": cmd_significance,
    "experiment-matrix": cmd_experiment_matrix,
}


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="experiment config JSON (default: bundled demo config)")
    common.add_argument("--seed", type=int, help="override the config seed")
    common.add_argument("--workers", type=int, default=int(os.environ.get("SPG_WORKERS", "1")),
                        help="worker processes for per-utterance work (env SPG_WORKERS)")
    common.add_argument("--out", default=os.environ.get("SPG_OUT", "out"),
                        help="output root (env SPG_OUT)")

    p = argparse.ArgumentParser(prog="spg", description="Two-step phoneme-to-grapheme ASR experiments.")
    sub = p.add_subparsers(dest="command", required=True)
    sub.add_parser("synth-gen", parents=[common], help="toy language, corpora, frame logits")
    sub.add_parser("s2p-decode", parents=[common], help="CTC prefix beam hypotheses")
    sub.add_parser("danp-build", parents=[common], help="noisy-phoneme training pairs")
    t = sub.add_parser("train", parents=[common], help="train a P2G model")
    t.add_argument("regime", choices=REGIMES)
    dcd = sub.add_parser("decode", parents=[common], help="decode dev and test")
    dcd.add_argument("mode", choices=DECODERS)
    dcd.add_argument("--model", choices=REGIMES, default="rtkm", help="training regime of the model")
    r = sub.add_parser("rescore", parents=[common], help="n-gram LM re-scoring of TKM output")
    r.add_argument("--model", choices=REGIMES, default="rtkm")
    e = sub.add_parser("eval", parents=[common], help="WER of a system")
    e.add_argument("system", help="stage name (e.g. decode-rtkm-tkm) or candidates .jsonl file")
    s = sub.add_parser("significance", parents=[common], help="matched-pairs test of two systems")
    s.add_argument("a")
    s.add_argument("b")
    s.add_argument("--split", choices=("dev", "test"), default="test")
    s.add_argument("--refs", help="JSONL with utt_id/text references (default: latest synth stage)")
    sub.add_parser("experiment-matrix", parents=[common], help="full train x decode comparison")
    return p


def _fail(code: int, kind: str, exc: BaseException) -> int:
    print(json.dumps({"error": kind, "message": str(exc), "exit_code": code}), file=sys.stderr)
    return code


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    if args.workers < 1:
        return _fail(EXIT_CONFIG, "config", ValueError("--workers must be >= 1"))
    out = Path(args.out)
    try:
        cfg = load_config(args)
        result = COMMANDS[args.command](args, cfg, out)
    except MissingInput as exc:
        return _fail(EXIT_MISSING_INPUT, "missing_input", exc)
    except (SchemaError, CheckpointError) as exc:
        return _fail(EXIT_SCHEMA, "schema", exc)
    except ConfigError as exc:
        return _fail(EXIT_CONFIG, "config", exc)
    except (TrainingDiverged, FloatingPointError) as exc:
        return _fail(EXIT_DIVERGED, "diverged", exc)
    except Exception as exc:  # noqa: BLE001 - last-resort machine-readable error
        return _fail(EXIT_UNEXPECTED, "unexpected", exc)
    print(json.dumps(result, sort_keys=True))
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
