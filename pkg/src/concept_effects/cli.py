"""Command-line pipeline: gen-synth, ingest, train, estimate, report."""

from __future__ import annotations

import argparse
import copy
import json
import logging
import os
import sys
from dataclasses import fields
from pathlib import Path

from . import estimators as est
from .model import EncoderConfig
from .synth import default_scm, sample_corpus, true_concept_effect
from .text import (
    CHEST_PAIN,
    ConceptSpec,
    RecordError,
    build_vocab,
    ingest_ddxplus,
    load_corpus,
    read_jsonl,
    save_corpus,
    split_summary,
)
from .train import Checkpoint, TrainConfig, train_baseline, train_stage1, train_stage2

log = logging.getLogger("concept_effects")

STAGES = ("baseline", "tc", "cf")

# Benchmark-scale defaults; the "train" section's shared keys apply to every
# stage and the per-stage sub-sections override them.
DEFAULT_CONFIG = {
    "data": {
        "source": "synth",
        "paths": {},
        "concepts": [CHEST_PAIN.to_dict()],
        "n_train": 4000,
        "n_test": 1000,
        "min_freq": 2,
        "gold_mode": "distribution",
    },
    "model": {"layers": 2, "hidden": 64, "heads": 4, "max_len": 64, "ff": 0, "enable_cc": False},
    "train": {
        "baseline": {"steps": 1000, "batch_size": 128},
        "tc": {"steps": 800, "lr": 3e-3, "tc_batch_size": 128, "adversary_l2": 0.01},
        # the stage-2 head is convex on precomputed features, so run it full-batch to convergence
        "cf": {"steps": 2000, "lr": 1e-2, "batch_size": 4000},
    },
    "eval": {"concept": "chest pain", "control": None, "population": "treated", "top_k": 5,
             "bottom_k": None, "diseases": None},
}
_DATA_KEYS = set(DEFAULT_CONFIG["data"])
_EVAL_KEYS = set(DEFAULT_CONFIG["eval"])
_MODEL_KEYS = {f.name for f in fields(EncoderConfig)} - {"vocab_size", "num_diseases", "head_mode", "lam"}
_TRAIN_KEYS = {f.name for f in fields(TrainConfig)}


class CliError(Exception):
    """Expected failure: reported on stderr with a nonzero exit."""


def _merge(base: dict, override: dict, where: str, allowed: set | None = None) -> dict:
    out = copy.deepcopy(base)
    for k, v in override.items():
        if allowed is not None and k not in allowed:
            raise CliError(f"unknown key {where}.{k}")
        out[k] = v
    return out


def load_run_config(path: str | None) -> dict:
    """Defaults overlaid with a JSON config file; unknown keys are rejected."""
    cfg = copy.deepcopy(DEFAULT_CONFIG)
    if path is None:
        return cfg
    p = Path(path)
    if not p.is_file():
        raise CliError(f"config file not found: {path}")
    try:
        user = json.loads(p.read_text(encoding="utf-8"))
    except json.JSONDecodeError as exc:
        raise CliError(f"{path}: invalid JSON ({exc.msg} at line {exc.lineno})") from None
    if not isinstance(user, dict):
        raise CliError(f"{path}: config must be a JSON object")
    unknown = set(user) - set(cfg)
    if unknown:
        raise CliError(f"unknown config sections: {sorted(unknown)}")
    cfg["data"] = _merge(cfg["data"], user.get("data", {}), "data", _DATA_KEYS)
    cfg["model"] = _merge(cfg["model"], user.get("model", {}), "model", _MODEL_KEYS)
    cfg["eval"] = _merge(cfg["eval"], user.get("eval", {}), "eval", _EVAL_KEYS)
    train = user.get("train", {})
    shared = {k: v for k, v in train.items() if k not in STAGES}
    merged = _merge({}, shared, "train", _TRAIN_KEYS)
    for stage in STAGES:
        stage_cfg = _merge(cfg["train"].get(stage, {}), train.get(stage, {}), f"train.{stage}", _TRAIN_KEYS)
        merged[stage] = stage_cfg
    cfg["train"] = merged
    if cfg["data"]["source"] not in ("synth", "ddxplus"):
        raise CliError("data.source must be 'synth' or 'ddxplus'")
    return cfg


def concepts_of(cfg: dict) -> tuple[ConceptSpec, ...]:
    try:
        return tuple(ConceptSpec.from_dict(c) for c in cfg["data"]["concepts"])
    except (KeyError, TypeError, ValueError) as exc:
        raise CliError(f"bad concept spec: {exc}") from None


def train_config(cfg: dict, stage: str, args) -> TrainConfig:
    d = {k: v for k, v in cfg["train"].items() if k not in STAGES}
    d.update(cfg["train"][stage])
    if args.seed is not None:
        d["seed"] = args.seed
    if getattr(args, "lam", None) is not None:
        d["lam"] = args.lam
    if getattr(args, "head_mode", None) is not None:
        d["head_mode"] = args.head_mode
    try:
        return TrainConfig.from_dict(d)
    except (TypeError, ValueError) as exc:
        raise CliError(f"train config for stage {stage}: {exc}") from None


# -- path checks -------------------------------------------------------------------


def _need_file(path: str | Path, what: str) -> Path:
    p = Path(path)
    if not p.is_file():
        raise CliError(f"{what} not found: {path}")
    return p


def _need_checkpoint(path: str | Path, what: str) -> Path:
    p = Path(path)
    if not (p / "manifest.json").is_file():
        raise CliError(f"{what} is not a checkpoint directory: {path}")
    return p


def _out_dir(path: str | Path) -> Path:
    p = Path(path)
    try:
        p.mkdir(parents=True, exist_ok=True)
    except OSError as exc:
        raise CliError(f"cannot create output directory {path}: {exc.strerror}") from None
    if not os.access(p, os.W_OK):
        raise CliError(f"output directory is not writable: {path}")
    return p


def _write(path: Path, text: str) -> None:
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        fh.write(text)


def _dump(obj) -> str:
    return json.dumps(obj, indent=2, sort_keys=True) + "\n"


# -- commands ----------------------------------------------------------------------


def cmd_gen_synth(args, cfg: dict) -> int:
    out = _out_dir(args.out)
    seed = 0 if args.seed is None else args.seed
    n_train = args.n_train or cfg["data"]["n_train"]
    n_test = args.n_test or cfg["data"]["n_test"]
    scm = default_scm()
    concepts = concepts_of(cfg)
    train = sample_corpus(scm, seed, n_train, "train", concepts)
    test = sample_corpus(scm, seed, n_test, "test", concepts)
    save_corpus(out / "train.jsonl", train)
    save_corpus(out / "test.jsonl", test)
    _write(out / "scm.json", scm.to_json() + "\n")
    effect = true_concept_effect(scm)
    concept = scm.symptom_names[scm.concept_symptom]
    _write(out / "true_effect.json", _dump({"concept": concept, "diseases": scm.disease_names,
                                            "effect": [float(x) for x in effect]}))
    _write(out / "diseases.json", _dump(scm.disease_names))
    print(f"wrote {n_train} train and {n_test} test records to {out}")
    return 0


def _parse_counts(items) -> dict[str, int]:
    counts = {}
    for item in items:
        name, sep, n = item.partition("=")
        if not sep or not n.isdigit():
            raise CliError(f"--split-counts expects NAME=COUNT, got {item!r}")
        counts[name] = int(n)
    return counts


def cmd_ingest(args, cfg: dict) -> int:
    if args.split_counts:
        print(split_summary(_parse_counts(args.split_counts)))
        return 0
    if not args.raw or not args.evidences or not args.conditions or not args.out:
        raise CliError("ingest needs --raw, --evidences, --conditions and --out (or --split-counts)")
    splits = {}
    for item in args.raw:
        name, sep, path = item.partition("=")
        if not sep:
            name, path = Path(item).stem, item
        splits[name] = _need_file(path, f"raw split {name!r}")
    evid_path = _need_file(args.evidences, "evidence dictionary")
    cond_path = _need_file(args.conditions, "condition list")
    out = _out_dir(args.out)
    try:
        evidences = json.loads(evid_path.read_text(encoding="utf-8"))
        conditions = json.loads(cond_path.read_text(encoding="utf-8"))
    except json.JSONDecodeError as exc:
        raise CliError(f"dictionary is not valid JSON: {exc.msg} at line {exc.lineno}") from None
    concepts = concepts_of(cfg)
    counts = {}
    for name, path in splits.items():
        rows = read_jsonl(path)
        if not rows:
            raise CliError(f"{path}: no records")
        records = []
        for lineno, raw in enumerate(rows, 1):
            try:
                records.append(ingest_ddxplus(raw, evidences, conditions, concepts, cfg["data"]["gold_mode"]))
            except (RecordError, KeyError, TypeError, ValueError) as exc:
                raise CliError(f"{path}: record {lineno}: {exc}") from None
        save_corpus(out / f"{name}.jsonl", records)
        counts[name] = len(records)
    names = list(conditions) if isinstance(conditions, dict) else [
        c if isinstance(c, str) else c["name"] for c in conditions]
    _write(out / "diseases.json", _dump(names))
    summary = split_summary(counts)
    _write(out / "summary.txt", summary + "\n")
    print(summary)
    return 0


def cmd_train(args, cfg: dict) -> int:
    corpus_path = _need_file(args.corpus, "training corpus")
    if args.stage == "cf":
        if not args.tc_checkpoint:
            raise CliError("--stage cf requires --tc-checkpoint")
        tc_path = _need_checkpoint(args.tc_checkpoint, "--tc-checkpoint")
    elif args.tc_checkpoint:
        raise CliError(f"--tc-checkpoint only applies to --stage cf, not {args.stage}")
    out = _out_dir(args.out)
    records = load_corpus(corpus_path)
    if not records:
        raise CliError(f"{corpus_path}: corpus is empty")
    tcfg = train_config(cfg, args.stage, args)
    if args.stage == "cf":
        tc = Checkpoint.load(tc_path)
        if tc.stage != "tc":
            raise CliError(f"--tc-checkpoint has stage {tc.stage!r}; stage cf needs a 'tc' checkpoint")
        ckpt, trace = train_stage2(tcfg, tc, records)
    else:
        vocab = build_vocab([r.text for r in records], cfg["data"]["min_freq"])
        enc = EncoderConfig(vocab_size=len(vocab), num_diseases=len(records[0].gold), lam=tcfg.lam,
                            head_mode=tcfg.head_mode, **cfg["model"])
        if args.stage == "baseline":
            ckpt, trace = train_baseline(tcfg, enc, records, vocab)
        else:
            concept = args.concept or cfg["eval"]["concept"]
            ckpt, trace = train_stage1(tcfg, enc, records, vocab, concept, cfg["eval"]["control"])
    ckpt.save(out)
    _write(out / "trace.csv", trace.to_csv())
    final = ", ".join(f"{k} {v:.4f}" for k, v in ckpt.metadata["final_losses"].items())
    print(f"{args.stage} checkpoint written to {out} ({final})")
    return 0


def _disease_names(args, cfg: dict, test_path: Path, n: int) -> list[str]:
    path = args.diseases or cfg["eval"]["diseases"]
    if path is None and (test_path.parent / "diseases.json").is_file():
        path = test_path.parent / "diseases.json"
    if path is None:
        return [f"disease {i}" for i in range(n)]
    names = json.loads(_need_file(path, "disease names").read_text(encoding="utf-8"))
    if len(names) != n:
        raise CliError(f"{path} lists {len(names)} diseases but the models predict {n}")
    return [str(x) for x in names]


def cmd_estimate(args, cfg: dict) -> int:
    base_path = _need_checkpoint(args.baseline, "--baseline")
    cf_path = _need_checkpoint(args.cf, "--cf")
    test_path = _need_file(args.test, "test corpus")
    out = _out_dir(args.out)
    base, cf = Checkpoint.load(base_path), Checkpoint.load(cf_path)
    if base.stage != "baseline":
        raise CliError(f"--baseline has stage {base.stage!r}")
    if cf.stage != "cf":
        raise CliError(f"--cf has stage {cf.stage!r}")
    if base.vocab_hash != cf.vocab_hash or base.config.num_diseases != cf.config.num_diseases:
        raise CliError(f"incompatible checkpoints: baseline vocab {base.vocab_hash} ({base.config.num_diseases} "
                       f"diseases), cf vocab {cf.vocab_hash} ({cf.config.num_diseases} diseases)")
    records = load_corpus(test_path)
    if not records:
        raise CliError(f"{test_path}: test corpus is empty")
    concept = args.concept or cfg["eval"]["concept"]
    try:
        est.concept_flags(records, concept)
    except KeyError as exc:
        raise CliError(str(exc.args[0])) from None
    names = _disease_names(args, cfg, test_path, base.config.num_diseases)
    population = args.population or cfg["eval"]["population"]
    control = cf.metadata.get("control")
    report = est.estimate(est.CheckpointPredictor(base), est.CheckpointPredictor(cf), records, concept, names,
                          population, control)
    checks = report.sum_checks()
    if not all(checks.values()):
        raise CliError(f"report failed validation: {checks}")
    _write(out / "report.json", report.to_json())
    _write(out / "report.csv", report.to_csv())
    top_k = args.top_k if args.top_k is not None else cfg["eval"]["top_k"]
    print(report.tables(top_k, cfg["eval"]["bottom_k"]), end="")
    return 0


def cmd_report(args, cfg: dict) -> int:
    top_k = args.top_k if args.top_k is not None else cfg["eval"]["top_k"]
    bottom_k = args.bottom_k if args.bottom_k is not None else cfg["eval"]["bottom_k"]
    if args.values:
        data = json.loads(_need_file(args.values, "values file").read_text(encoding="utf-8"))
        if not isinstance(data, dict) or not data:
            raise CliError("--values must be a non-empty JSON object of name -> value")
        rows = est.ranked_rows(list(data), [float(v) for v in data.values()], top_k, bottom_k)
        render = est.latex_table if args.format == "latex" else est.pipe_table
        print(render(rows, args.metric), end="")
        return 0
    if not args.report:
        raise CliError("report needs --report PATH or --values PATH")
    report = est.EffectReport.from_dict(json.loads(_need_file(args.report, "report").read_text(encoding="utf-8")))
    if args.format == "latex":
        print(est.latex_table(est.ranked_rows(report.diseases, report.treate_abs, top_k, bottom_k), "TReATE"))
        print(est.latex_table(est.ranked_rows(report.diseases, report.conexp, top_k, bottom_k), "CONEXP"), end="")
    else:
        print(report.tables(top_k, bottom_k), end="")
    return 0


# -- entry point -------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="JSON run configuration")
    common.add_argument("--seed", type=int, help="master seed (overrides the config)")
    common.add_argument("-v", "--verbose", action="store_true")

    p = argparse.ArgumentParser(prog="concept-effects", description=__doc__)
    sub = p.add_subparsers(dest="command", required=True)

    g = sub.add_parser("gen-synth", parents=[common], help="sample the synthetic benchmark corpus")
    g.add_argument("--out", required=True)
    g.add_argument("--n-train", type=int)
    g.add_argument("--n-test", type=int)
    g.set_defaults(func=cmd_gen_synth)

    i = sub.add_parser("ingest", parents=[common], help="convert DDXPlus-style records")
    i.add_argument("--raw", nargs="+", help="SPLIT=PATH pairs (JSON Lines)")
    i.add_argument("--evidences", help="evidence dictionary JSON")
    i.add_argument("--conditions", help="pathology list or mapping JSON")
    i.add_argument("--out")
    i.add_argument("--split-counts", nargs="+", metavar="SPLIT=N", help="only print the split summary")
    i.set_defaults(func=cmd_ingest)

    t = sub.add_parser("train", parents=[common], help="train a baseline, tc or cf checkpoint")
    t.add_argument("--stage", choices=STAGES, required=True)
    t.add_argument("--corpus", required=True)
    t.add_argument("--out", required=True)
    t.add_argument("--tc-checkpoint")
    t.add_argument("--lambda", dest="lam", type=float)
    t.add_argument("--head-mode", choices=("sparsemax", "softmax"))
    t.add_argument("--concept")
    t.set_defaults(func=cmd_train)

    e = sub.add_parser("estimate", parents=[common], help="compute TReATE and CONEXP")
    e.add_argument("--baseline", required=True)
    e.add_argument("--cf", required=True)
    e.add_argument("--test", required=True)
    e.add_argument("--concept")
    e.add_argument("--out", required=True)
    e.add_argument("--diseases", help="JSON list of disease names")
    e.add_argument("--population", choices=est.POPULATIONS)
    e.add_argument("--top-k", type=int)
    e.set_defaults(func=cmd_estimate)

    r = sub.add_parser("report", parents=[common], help="render top/bottom tables")
    r.add_argument("--report")
    r.add_argument("--values", help="JSON object of disease -> value")
    r.add_argument("--metric", default="TReATE")
    r.add_argument("--top-k", type=int)
    r.add_argument("--bottom-k", type=int)
    r.add_argument("--format", choices=("pipe", "latex"), default="pipe")
    r.set_defaults(func=cmd_report)
    return p


def _error(command: str, exc: BaseException) -> None:
    kind = type(exc).__name__
    msg = str(exc.args[0]) if isinstance(exc, KeyError) and exc.args else str(exc)
    plain = os.environ.get("NO_COLOR") is not None or not sys.stderr.isatty()
    prefix = "error:" if plain else "\033[31merror:\033[0m"
    sys.stderr.write(f"concept-effects {command}: {prefix} {msg}\n")
    sys.stderr.write(json.dumps({"command": command, "error": kind, "message": msg}, sort_keys=True) + "\n")


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        cfg = load_run_config(args.config)
        return args.func(args, cfg)
    except (CliError, RecordError, ValueError, KeyError, OSError, est.IncompatibleModels) as exc:
        _error(args.command, exc)
        return 1
    except FloatingPointError as exc:
        _error(args.command, exc)
        return 2


if __name__ == "__main__":
    sys.exit(main())
