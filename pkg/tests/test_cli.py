from __future__ import annotations

import json

import pytest

from concept_effects.cli import load_run_config, main, CliError

from test_text import EVIDENCES, PATHOLOGIES

TINY_CONFIG = {
    "data": {"n_train": 60, "n_test": 30, "min_freq": 1},
    "model": {"layers": 1, "hidden": 16, "heads": 2, "max_len": 64, "ff": 32},
    "train": {"batch_size": 8, "baseline": {"steps": 3}, "tc": {"steps": 3, "tc_batch_size": 16},
              "cf": {"steps": 3}},
}


def run(*argv):
    return main([str(a) for a in argv])


def last_json_line(text):
    return json.loads(text.strip().splitlines()[-1])


@pytest.fixture(scope="module")
def tiny(tmp_path_factory):
    """gen-synth plus the three training stages at toy scale."""
    root = tmp_path_factory.mktemp("cli")
    cfg = root / "config.json"
    cfg.write_text(json.dumps(TINY_CONFIG))
    assert run("gen-synth", "--config", cfg, "--out", root / "data", "--seed", 3) == 0
    corpus = root / "data" / "train.jsonl"
    assert run("train", "--config", cfg, "--stage", "baseline", "--corpus", corpus, "--out", root / "base") == 0
    assert run("train", "--config", cfg, "--stage", "tc", "--corpus", corpus, "--out", root / "tc",
               "--lambda", 2.5) == 0
    assert run("train", "--config", cfg, "--stage", "cf", "--corpus", corpus, "--tc-checkpoint", root / "tc",
               "--out", root / "cf") == 0
    return root, cfg


def test_gen_synth_default_sizes(tmp_path, capsys):
    assert run("gen-synth", "--out", tmp_path) == 0
    assert "4000 train and 1000 test" in capsys.readouterr().out
    assert len((tmp_path / "train.jsonl").read_text().splitlines()) == 4000
    assert len((tmp_path / "test.jsonl").read_text().splitlines()) == 1000
    truth = json.loads((tmp_path / "true_effect.json").read_text())
    assert truth["concept"] == "chest pain" and len(truth["effect"]) == 5


def test_gen_synth_determinism(tmp_path):
    for name, seed in (("a", 1), ("b", 1), ("c", 2)):
        assert run("gen-synth", "--out", tmp_path / name, "--seed", seed, "--n-train", 50, "--n-test", 10) == 0
    for f in ("train.jsonl", "test.jsonl", "scm.json", "true_effect.json"):
        assert (tmp_path / "a" / f).read_bytes() == (tmp_path / "b" / f).read_bytes()
    assert (tmp_path / "a" / "train.jsonl").read_bytes() != (tmp_path / "c" / "train.jsonl").read_bytes()


def test_gen_synth_unwritable(tmp_path, capsys):
    blocker = tmp_path / "file"
    blocker.write_text("x")
    assert run("gen-synth", "--out", blocker / "sub") == 1
    err = last_json_line(capsys.readouterr().err)
    assert err["command"] == "gen-synth" and err["error"] == "CliError"


# -- ingest ------------------------------------------------------------------------


def _write_ingest_inputs(tmp_path, rows):
    raw = tmp_path / "raw.jsonl"
    raw.write_text("".join(json.dumps(r) + "\n" for r in rows))
    (tmp_path / "ev.json").write_text(json.dumps(EVIDENCES))
    (tmp_path / "cond.json").write_text(json.dumps(PATHOLOGIES))
    return ["--evidences", tmp_path / "ev.json", "--conditions", tmp_path / "cond.json"]


def test_ingest_ten_records(tmp_path, capsys):
    rows = [{"id": f"r{i}", "age": 20 + i, "sex": "MF"[i % 2], "pathology": PATHOLOGIES[i % 3],
             "evidences": ["E_1", "E_2"] if i % 2 else ["E_3", "E_4_@_V_2"]} for i in range(10)]
    dicts = _write_ingest_inputs(tmp_path, rows)
    assert run("ingest", "--raw", f"test={tmp_path / 'raw.jsonl'}", *dicts, "--out", tmp_path / "out") == 0
    out = (tmp_path / "out" / "test.jsonl").read_text().splitlines()
    assert len(out) == 10
    assert [json.loads(line)["concept_flags"]["chest pain"] for line in out] == [0, 1] * 5
    assert "test 10 100.00%" in capsys.readouterr().out
    assert json.loads((tmp_path / "out" / "diseases.json").read_text()) == PATHOLOGIES


def test_ingest_errors(tmp_path, capsys):
    dicts = _write_ingest_inputs(tmp_path, [])
    assert run("ingest", "--raw", f"train={tmp_path / 'raw.jsonl'}", *dicts, "--out", tmp_path / "o") == 1
    assert "no records" in last_json_line(capsys.readouterr().err)["message"]
    bad = [{"id": "a", "age": 30, "sex": "F", "pathology": "URTI", "evidences": ["E_1"]},
           {"id": "b", "age": 30, "sex": "F", "pathology": "URTI", "evidences": ["E_77"]}]
    dicts = _write_ingest_inputs(tmp_path, bad)
    assert run("ingest", "--raw", f"train={tmp_path / 'raw.jsonl'}", *dicts, "--out", tmp_path / "o") == 1
    msg = last_json_line(capsys.readouterr().err)["message"]
    assert "record 2" in msg and "E_77" in msg


def test_split_counts_audit(capsys):
    assert run("ingest", "--split-counts", "test=134530", "train=1025603") == 0
    assert "test 134530 11.60%" in capsys.readouterr().out


# -- config ------------------------------------------------------------------------


def test_config_rejects_unknown_keys(tmp_path):
    for bad in ({"extra": {}}, {"model": {"depth": 2}}, {"train": {"tc": {"epochs": 1}}}, {"data": {"src": 1}}):
        path = tmp_path / "c.json"
        path.write_text(json.dumps(bad))
        with pytest.raises(CliError, match="unknown"):
            load_run_config(str(path))


def test_config_stage_overrides(tmp_path):
    path = tmp_path / "c.json"
    path.write_text(json.dumps({"train": {"lr": 0.01, "tc": {"steps": 7}}}))
    cfg = load_run_config(str(path))
    assert cfg["train"]["lr"] == 0.01 and cfg["train"]["tc"]["steps"] == 7
    assert cfg["train"]["baseline"]["steps"] == 1000


# -- train / estimate / report -----------------------------------------------------


def test_train_tags_and_lambda(tiny):
    root, _ = tiny
    assert json.loads((root / "base" / "manifest.json").read_text())["stage"] == "baseline"
    tc = json.loads((root / "tc" / "manifest.json").read_text())
    assert tc["stage"] == "tc" and tc["metadata"]["lambda"] == 2.5
    assert (root / "tc" / "trace.csv").read_text().startswith("step,mlm,nsp,tc,total\n")
    assert json.loads((root / "cf" / "manifest.json").read_text())["stage"] == "cf"


def test_train_stage_mismatches(tiny, capsys):
    root, cfg = tiny
    corpus = root / "data" / "train.jsonl"
    assert run("train", "--config", cfg, "--stage", "cf", "--corpus", corpus, "--tc-checkpoint", root / "base",
               "--out", root / "x") == 1
    assert "stage 'baseline'" in last_json_line(capsys.readouterr().err)["message"]
    assert run("train", "--config", cfg, "--stage", "cf", "--corpus", corpus, "--out", root / "x") == 1
    assert run("train", "--config", cfg, "--stage", "baseline", "--corpus", corpus,
               "--tc-checkpoint", root / "tc", "--out", root / "x") == 1


def test_estimate_writes_reports(tiny, capsys):
    root, cfg = tiny
    assert run("estimate", "--config", cfg, "--baseline", root / "base", "--cf", root / "cf",
               "--test", root / "data" / "test.jsonl", "--out", root / "report") == 0
    printed = capsys.readouterr().out
    assert "| Disease | TReATE |" in printed and "| Disease | CONEXP |" in printed
    report = json.loads((root / "report" / "report.json").read_text())
    assert len(report["diseases"]) == 5 and all(report["checks"].values())
    assert (root / "report" / "report.csv").read_text().startswith("disease,treate_abs,treate_signed,conexp\n")
    assert run("report", "--report", root / "report" / "report.json", "--format", "latex", "--top-k", 2) == 0
    assert "\\textbf{Disease} & \\textbf{TReATE} \\\\" in capsys.readouterr().out


def test_same_checkpoint_twice_is_zero(tiny, tmp_path):
    root, cfg = tiny
    assert run("estimate", "--config", cfg, "--baseline", root / "base", "--cf", root / "cf",
               "--test", root / "data" / "test.jsonl", "--out", tmp_path, "--population", "all") == 0
    # a cf checkpoint compared with itself through the library
    from concept_effects.estimators import CheckpointPredictor, treate
    from concept_effects.text import load_corpus
    from concept_effects.train import Checkpoint

    cf = CheckpointPredictor(Checkpoint.load(root / "cf"))
    signed, _ = treate(cf, cf, load_corpus(root / "data" / "test.jsonl"))
    assert (signed == 0).all()


def test_estimate_errors(tiny, tmp_path, capsys):
    root, cfg = tiny
    test = root / "data" / "test.jsonl"
    assert run("estimate", "--config", cfg, "--baseline", root / "cf", "--cf", root / "cf",
               "--test", test, "--out", tmp_path) == 1
    assert "--baseline has stage 'cf'" in last_json_line(capsys.readouterr().err)["message"]
    assert run("estimate", "--config", cfg, "--baseline", root / "base", "--cf", root / "cf",
               "--test", test, "--out", tmp_path, "--concept", "fever") == 1
    err = last_json_line(capsys.readouterr().err)
    assert err["command"] == "estimate" and "fever" in err["message"]


def test_estimate_incompatible_vocab(tiny, tmp_path, capsys):
    root, cfg = tiny
    other = tmp_path / "data2"
    assert run("gen-synth", "--config", cfg, "--out", other, "--seed", 99, "--n-train", 20) == 0
    assert run("train", "--config", cfg, "--stage", "baseline", "--corpus", other / "train.jsonl",
               "--out", tmp_path / "b2") == 0
    capsys.readouterr()
    assert run("estimate", "--config", cfg, "--baseline", tmp_path / "b2", "--cf", root / "cf",
               "--test", root / "data" / "test.jsonl", "--out", tmp_path / "r") == 1
    assert "incompatible checkpoints" in last_json_line(capsys.readouterr().err)["message"]


def test_report_from_values(tmp_path, capsys):
    values = tmp_path / "v.json"
    values.write_text(json.dumps({"A": 0.1, "B": -0.0256, "C": 0.082}))
    assert run("report", "--values", values, "--metric", "CONEXP", "--top-k", 1, "--bottom-k", 1) == 0
    assert capsys.readouterr().out.splitlines() == ["| Disease | CONEXP |", "|---|---|", "| A | 0.1 |",
                                                     "| ... | ... |", "| B | -0.0256 |"]


def test_plain_error_output(tmp_path, capsys, monkeypatch):
    monkeypatch.setenv("NO_COLOR", "1")
    assert run("report", "--report", tmp_path / "missing.json") == 1
    first = capsys.readouterr().err.splitlines()[0]
    assert first.startswith("concept-effects report: error:") and "\033" not in first
