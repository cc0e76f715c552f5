from __future__ import annotations

import json
import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from concept_effects import estimators as est
from concept_effects.estimators import (
    EffectReport,
    IncompatibleModels,
    conexp,
    conexp_from_predictions,
    format_value,
    latex_table,
    pipe_table,
    ranked_rows,
    select_population,
    treate,
    validate_against_oracle,
)
from concept_effects.text import CanonicalRecord


class Stub:
    """Predictor that looks its output up by record id, or returns one constant row."""

    def __init__(self, table, n_classes=2, vocab_hash="v0"):
        self.table = table
        self.n_classes = n_classes
        self.vocab_hash = vocab_hash

    def predict(self, records):
        if isinstance(self.table, dict):
            return np.array([self.table[r.id] for r in records], dtype=np.float64)
        return np.tile(np.asarray(self.table, dtype=np.float64), (len(records), 1))


def _records(flags, concept="chest pain"):
    return [CanonicalRecord(str(i), "Patient: hi.", {concept: int(f)}, [1.0, 0.0]) for i, f in enumerate(flags)]


def test_constant_stubs():
    recs = _records([1, 0, 1])
    signed, absolute = treate(Stub([0.8, 0.2]), Stub([0.5, 0.5]), recs)
    np.testing.assert_allclose(signed, [0.3, -0.3], atol=1e-12)
    np.testing.assert_allclose(absolute, [0.3, 0.3], atol=1e-12)


def test_identical_models_give_exact_zero():
    rng = np.random.default_rng(0)
    table = {str(i): p for i, p in enumerate(rng.dirichlet(np.ones(4), size=50))}
    model = Stub(table, 4)
    signed, _ = treate(model, model, _records([i % 2 for i in range(50)]))
    assert (signed == 0).all()


def test_treate_contracts():
    with pytest.raises(ValueError):
        treate(Stub([0.5, 0.5]), Stub([0.5, 0.5]), [])
    with pytest.raises(IncompatibleModels, match="v0.*v1"):
        treate(Stub([0.5, 0.5]), Stub([0.5, 0.5], vocab_hash="v1"), _records([1]))
    with pytest.raises(IncompatibleModels):
        treate(Stub([0.5, 0.5]), Stub([0.2, 0.3, 0.5], n_classes=3), _records([1]))


def test_conexp_example():
    table = {"0": [0.8, 0.2], "1": [0.6, 0.4], "2": [0.2, 0.8], "3": [0.4, 0.6]}
    np.testing.assert_allclose(conexp(Stub(table), _records([1, 1, 0, 0]), "chest pain"), [0.4, -0.4], atol=1e-12)


def test_conexp_needs_both_groups():
    with pytest.raises(ValueError, match="3 concept-present, 0 concept-absent"):
        conexp(Stub([0.5, 0.5]), _records([1, 1, 1]), "chest pain")
    with pytest.raises(KeyError):
        conexp(Stub([0.5, 0.5]), _records([1, 0]), "fever")


def _conexp_by_loops(rows, flags):
    """Independent path: exact float sums per class with math.fsum, one pass per group."""
    k = len(rows[0])
    present = [r for r, f in zip(rows, flags) if f == 1]
    absent = [r for r, f in zip(rows, flags) if f == 0]
    return [math.fsum(r[j] for r in present) / len(present) - math.fsum(r[j] for r in absent) / len(absent)
            for j in range(k)]


@settings(max_examples=50, deadline=None)
@given(st.integers(0, 2**32 - 1), st.integers(2, 60), st.integers(2, 8))
def test_conexp_matches_brute_force(seed, n, k):
    rng = np.random.default_rng(seed)
    preds = rng.dirichlet(np.ones(k), size=n)
    flags = np.array([1, 0] + list(rng.integers(0, 2, size=n - 2)))
    got = conexp_from_predictions(preds, flags)
    np.testing.assert_allclose(got, _conexp_by_loops(preds.tolist(), flags.tolist()), atol=1e-9, rtol=0)
    assert abs(got.sum()) < 1e-6


@settings(max_examples=30, deadline=None)
@given(st.integers(0, 2**32 - 1), st.randoms(use_true_random=False))
def test_treate_permutation_invariant(seed, r):
    rng = np.random.default_rng(seed)
    n = 40
    o = Stub({str(i): p for i, p in enumerate(rng.dirichlet(np.ones(5), size=n))}, 5)
    cf = Stub({str(i): p for i, p in enumerate(rng.dirichlet(np.ones(5), size=n))}, 5)
    recs = _records(rng.integers(0, 2, size=n))
    shuffled = list(recs)
    r.shuffle(shuffled)
    a, _ = treate(o, cf, recs)
    b, _ = treate(o, cf, shuffled)
    np.testing.assert_allclose(a, b, atol=1e-9, rtol=0)
    assert abs(a.sum()) < 1e-6


def test_population_selection():
    recs = _records([1, 0, 1, 0])
    assert [r.id for r in select_population(recs, "chest pain", "treated")] == ["0", "2"]
    assert len(select_population(recs, "chest pain", "all")) == 4
    with pytest.raises(ValueError):
        select_population(_records([0, 0]), "chest pain", "treated")
    with pytest.raises(ValueError):
        select_population(recs, "chest pain", "untreated")


def test_estimate_assembles_report():
    table = {"0": [0.9, 0.1], "1": [0.3, 0.7], "2": [0.7, 0.3], "3": [0.1, 0.9]}
    report = est.estimate(Stub(table), Stub([0.5, 0.5]), _records([1, 0, 1, 0]), "chest pain", ["a", "b"])
    np.testing.assert_allclose(report.treate_signed, [0.3, -0.3])
    np.testing.assert_allclose(report.conexp, [0.6, -0.6])
    assert (report.n_test, report.n_present, report.n_absent, report.n_population) == (4, 2, 2, 2)
    assert all(report.sum_checks().values())
    with pytest.raises(IncompatibleModels):
        est.estimate(Stub(table), Stub([0.5, 0.5]), _records([1, 0, 1, 0]), "chest pain", ["a"])


def test_report_serialization_roundtrip():
    report = EffectReport("chest pain", ["a", "b", "c"], [0.1, -0.3, 0.2], [0.05, 0.0, -0.05], 10, 4, 6,
                          baseline_id="x", cf_id="y")
    back = EffectReport.from_dict(json.loads(report.to_json()))
    assert back.to_json() == report.to_json()
    np.testing.assert_array_equal(back.treate_abs, [0.1, 0.3, 0.2])
    csv_lines = report.to_csv().splitlines()
    assert csv_lines[0] == "disease,treate_abs,treate_signed,conexp"
    assert csv_lines[2] == "b,0.3,-0.3,0.0"
    assert report.sum_checks() == {"treate_sums_to_zero": True, "conexp_sums_to_zero": True}
    with pytest.raises(ValueError):
        EffectReport("c", ["a"], [0.1, 0.2], [0.0], 1, 1, 0)


# -- table fixtures ----------------------------------------------------------------

TREATE_TOP = {"Bronchitis": 0.2708, "Anemia": 0.2076, "PSVT": 0.1339, "Myasthenia gravis": 0.1214,
              "Acute dystonic reactions": 0.0693}
TREATE_BOTTOM = {"Larygospasm": 0.0056, "Croup": 0.0037, "Viral pharyngitis": 0.0035, "Cluster headache": 0.0017,
                 "Bronchiolitis": 0.0001}
TREATE_TABLE = r"""\begin{tabular}{|l|l|}
\hline
\textbf{Disease} & \textbf{TReATE} \\
\hline
Bronchitis & 0.2708 \\
\hline
Anemia & 0.2076 \\
\hline
PSVT & 0.1339 \\
\hline
Myasthenia gravis & 0.1214 \\
\hline
Acute dystonic reactions & 0.0693 \\
\hline
... & ...\\
\hline
Larygospasm & 0.0056 \\
\hline
Croup & 0.0037 \\
\hline
Viral pharyngitis & 0.0035 \\
\hline
Cluster headache & 0.0017 \\
\hline
Bronchiolitis & 0.0001 \\
\hline
\end{tabular}
"""
CONEXP_VALUES = {"Bronchitis": 0.082, "PSVT": 0.079, "Myocarditis": 0.063, "Allergic sinusitis": -0.022,
                 "Acute laryngytis": -0.0256}
CONEXP_TABLE = r"""\begin{tabular}{|l|l|}
\hline
\textbf{Disease} & \textbf{CONEXP} \\
\hline
Bronchitis & 0.082 \\
\hline
PSVT & 0.079 \\
\hline
Myocarditis & 0.063 \\
\hline
... & ...\\
\hline
Allergic sinusitis & -0.022 \\
\hline
Acute laryngytis & -0.0256 \\
\hline
\end{tabular}
"""


def _shuffled_treate_values():
    # the ranked extremes plus unlisted middle diseases, in scrambled input order
    middle = {f"middle {i}": v for i, v in enumerate(np.linspace(0.06, 0.01, 39))}
    values = {**TREATE_BOTTOM, **middle, **TREATE_TOP}
    keys = list(values)
    np.random.default_rng(0).shuffle(keys)
    return {k: values[k] for k in keys}


def test_treate_table_fixture():
    values = _shuffled_treate_values()
    rows = ranked_rows(list(values), list(values.values()), 5)
    assert latex_table(rows, "TReATE") == TREATE_TABLE
    assert [r[0] for r in rows] == list(TREATE_TOP) + ["..."] + list(TREATE_BOTTOM)


def test_conexp_table_fixture():
    values = {**CONEXP_VALUES, "Sarcoidosis": 0.01, "Influenza": -0.004}
    values = {k: values[k] for k in sorted(values)}
    rows = ranked_rows(list(values), list(values.values()), 3, 2)
    assert latex_table(rows, "CONEXP") == CONEXP_TABLE
    assert pipe_table(rows, "CONEXP").splitlines()[:3] == ["| Disease | CONEXP |", "|---|---|", "| Bronchitis | 0.082 |"]


def test_format_value():
    assert [format_value(v) for v in (0.2708, 0.0820, -0.0256, 0.0001, 0.0, -0.00001, 1.0)] == \
        ["0.2708", "0.082", "-0.0256", "0.0001", "0", "0", "1"]


def test_ranked_rows_edge_cases():
    assert ranked_rows(["a", "b"], [0.1, 0.2], 5) == [("b", "0.2"), ("a", "0.1")]
    assert ranked_rows(["a", "b", "c"], [0.1, 0.1, 0.1], 1, 0) == [("a", "0.1"), ("...", "...")]
    with pytest.raises(ValueError):
        ranked_rows(["a"], [0.1, 0.2], 1)


# -- oracle validation -------------------------------------------------------------


def test_validate_identical_and_reversed():
    truth = np.array([0.44, -0.30, -0.35, -0.24, -0.15])
    same = validate_against_oracle(np.abs(truth), truth)
    assert same["spearman"] == pytest.approx(1.0) and same["top1_agree"]
    rev = validate_against_oracle([1.0, 2.0, 3.0, 4.0], [4.0, 3.0, 2.0, 1.0])
    assert rev["spearman"] == pytest.approx(-1.0) and not rev["top1_agree"]


def test_validate_contracts():
    with pytest.raises(ValueError, match="length mismatch"):
        validate_against_oracle([0.1, 0.2], [0.1, 0.2, 0.3])
    with pytest.raises(ValueError):
        validate_against_oracle([0.1], [0.1])
