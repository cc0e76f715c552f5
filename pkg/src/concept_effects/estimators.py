"""TReATE and CONEXP estimators, effect reports and ground-truth validation."""

from __future__ import annotations

import csv
import hashlib
import io
import json
from dataclasses import dataclass, field
from typing import Protocol, Sequence

import numpy as np

from .model import classify
from .text import CanonicalRecord, tokenize
from .train import Checkpoint

POPULATIONS = ("treated", "all")


class Predictor(Protocol):
    vocab_hash: str
    n_classes: int

    def predict(self, records: Sequence[CanonicalRecord]) -> np.ndarray: ...


class IncompatibleModels(ValueError):
    pass


def checkpoint_id(ckpt: Checkpoint) -> str:
    """Short content digest of a checkpoint's stage, config and weights."""
    h = hashlib.sha256()
    h.update(ckpt.stage.encode())
    h.update(json.dumps(ckpt.config.to_dict(), sort_keys=True).encode())
    for name in sorted(ckpt.params):
        h.update(name.encode())
        h.update(np.ascontiguousarray(ckpt.params[name], dtype="<f4").tobytes())
    return h.hexdigest()[:16]


class CheckpointPredictor:
    """Disease distributions from a baseline or counterfactual checkpoint."""

    def __init__(self, ckpt: Checkpoint, batch_size: int = 256):
        if ckpt.stage not in ("baseline", "cf"):
            raise ValueError(f"checkpoint stage {ckpt.stage!r} has no trained disease head")
        self.ckpt = ckpt
        self.batch_size = batch_size
        self.vocab_hash = ckpt.vocab_hash
        self.n_classes = ckpt.config.num_diseases
        self.id = checkpoint_id(ckpt)

    def predict(self, records: Sequence[CanonicalRecord]) -> np.ndarray:
        enc = self.ckpt.config
        ids = np.stack([tokenize(r.text, self.ckpt.vocab, enc.max_len) for r in records])
        return classify(self.ckpt.params, ids, enc, enc.head_mode).astype(np.float64)


def _check_pair(model_o: Predictor, model_cf: Predictor) -> None:
    if model_o.vocab_hash != model_cf.vocab_hash:
        raise IncompatibleModels(
            f"vocabulary mismatch: O has {model_o.vocab_hash}, CF has {model_cf.vocab_hash}")
    if model_o.n_classes != model_cf.n_classes:
        raise IncompatibleModels(f"disease count mismatch: O has {model_o.n_classes}, CF has {model_cf.n_classes}")


def _mean_rows(p: np.ndarray) -> np.ndarray:
    # sequential sum in example order, so the reduction does not depend on blocking
    acc = np.zeros(p.shape[1], dtype=np.float64)
    for row in p:
        acc += row
    return acc / len(p)


def treate(model_o: Predictor, model_cf: Predictor, records: Sequence[CanonicalRecord]) -> tuple[np.ndarray, np.ndarray]:
    """Mean prediction under O minus mean prediction under CF. Returns (signed, absolute)."""
    _check_pair(model_o, model_cf)
    if len(records) == 0:
        raise ValueError("TReATE needs a non-empty test set")
    signed = _mean_rows(model_o.predict(records)) - _mean_rows(model_cf.predict(records))
    return signed, np.abs(signed)


def concept_flags(records: Sequence[CanonicalRecord], concept: str) -> np.ndarray:
    missing = [r.id for r in records if concept not in r.concept_flags]
    if missing:
        raise KeyError(f"{len(missing)} records lack a flag for concept {concept!r} (first: {missing[0]})")
    return np.array([r.concept_flags[concept] for r in records], dtype=np.int64)


def conexp_from_predictions(preds: np.ndarray, flags: np.ndarray) -> np.ndarray:
    flags = np.asarray(flags)
    n1, n0 = int((flags == 1).sum()), int((flags == 0).sum())
    if n1 == 0 or n0 == 0:
        raise ValueError(f"CONEXP needs both groups: {n1} concept-present, {n0} concept-absent")
    return _mean_rows(preds[flags == 1]) - _mean_rows(preds[flags == 0])


def conexp(model_o: Predictor, records: Sequence[CanonicalRecord], concept: str) -> np.ndarray:
    """Mean prediction over concept-present examples minus over concept-absent ones."""
    flags = concept_flags(records, concept)
    conexp_from_predictions(np.zeros((len(flags), 1)), flags)  # fail before inference
    return conexp_from_predictions(model_o.predict(records), flags)


def select_population(records: Sequence[CanonicalRecord], concept: str, population: str) -> list[CanonicalRecord]:
    """Examples TReATE averages over: the concept-present ones, or every example."""
    if population not in POPULATIONS:
        raise ValueError(f"population must be one of {POPULATIONS}")
    if population == "all":
        return list(records)
    flags = concept_flags(records, concept)
    chosen = [r for r, f in zip(records, flags) if f == 1]
    if not chosen:
        raise ValueError(f"no test example contains concept {concept!r}; use population 'all'")
    return chosen


# -- reports ---------------------------------------------------------------------


def format_value(v: float) -> str:
    """Four decimals with trailing zeros dropped: 0.0820 -> 0.082."""
    s = f"{v:.4f}".rstrip("0").rstrip(".")
    return "0" if s in ("-0", "") else s


def ranked_rows(names: Sequence[str], values, top_k: int, bottom_k: int | None = None) -> list[tuple[str, str]]:
    """Rows sorted by value, descending, keeping the first ``top_k`` and last ``bottom_k``.

    Ties keep the input order. A ``("...", "...")`` row marks omitted entries.
    """
    bottom_k = top_k if bottom_k is None else bottom_k
    if len(names) != len(values):
        raise ValueError("names and values differ in length")
    if top_k < 0 or bottom_k < 0:
        raise ValueError("top_k and bottom_k must be >= 0")
    order = sorted(range(len(names)), key=lambda i: -float(values[i]))
    rows = [(names[i], format_value(values[i])) for i in order]
    if top_k + bottom_k >= len(rows):
        return rows
    return rows[:top_k] + [("...", "...")] + (rows[len(rows) - bottom_k:] if bottom_k else [])


def pipe_table(rows: list[tuple[str, str]], metric: str) -> str:
    lines = [f"| Disease | {metric} |", "|---|---|"]
    lines += [f"| {a} | {b} |" for a, b in rows]
    return "\n".join(lines) + "\n"


def latex_table(rows: list[tuple[str, str]], metric: str) -> str:
    """A ruled two-column tabular block with a bold header."""
    lines = ["\\begin{tabular}{|l|l|}", "\\hline", f"\\textbf{{Disease}} & \\textbf{{{metric}}} \\\\", "\\hline"]
    for a, b in rows:
        sep = "" if a == "..." else " "  # the elision row is written tight
        lines += [f"{a} & {b}{sep}\\\\", "\\hline"]
    lines.append("\\end{tabular}")
    return "\n".join(lines) + "\n"


@dataclass
class EffectReport:
    concept: str
    diseases: list[str]
    treate_signed: np.ndarray
    conexp: np.ndarray
    n_test: int
    n_present: int
    n_absent: int
    population: str = "treated"
    n_population: int = 0
    baseline_id: str = ""
    cf_id: str = ""
    control_concept: str | None = None
    extra: dict = field(default_factory=dict)

    def __post_init__(self):
        self.treate_signed = np.asarray(self.treate_signed, dtype=np.float64)
        self.conexp = np.asarray(self.conexp, dtype=np.float64)
        d = len(self.diseases)
        if self.treate_signed.shape != (d,) or self.conexp.shape != (d,):
            raise ValueError("effect vectors must have one entry per disease")

    @property
    def treate_abs(self) -> np.ndarray:
        return np.abs(self.treate_signed)

    def sum_checks(self, tol: float = 1e-6) -> dict[str, bool]:
        return {"treate_sums_to_zero": bool(abs(self.treate_signed.sum()) <= tol),
                "conexp_sums_to_zero": bool(abs(self.conexp.sum()) <= tol)}

    def to_dict(self) -> dict:
        return {
            "concept": self.concept,
            "control_concept": self.control_concept,
            "population": self.population,
            "n_test": self.n_test,
            "n_population": self.n_population,
            "n_present": self.n_present,
            "n_absent": self.n_absent,
            "baseline_id": self.baseline_id,
            "cf_id": self.cf_id,
            "diseases": [
                {"name": n, "treate_abs": float(a), "treate_signed": float(s), "conexp_signed": float(c)}
                for n, a, s, c in zip(self.diseases, self.treate_abs, self.treate_signed, self.conexp)
            ],
            "checks": self.sum_checks(),
            **({"extra": self.extra} if self.extra else {}),
        }

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True) + "\n"

    @classmethod
    def from_dict(cls, d: dict) -> "EffectReport":
        rows = d["diseases"]
        return cls(d["concept"], [r["name"] for r in rows], [r["treate_signed"] for r in rows],
                   [r["conexp_signed"] for r in rows], d["n_test"], d["n_present"], d["n_absent"],
                   d.get("population", "treated"), d.get("n_population", 0), d.get("baseline_id", ""),
                   d.get("cf_id", ""), d.get("control_concept"), d.get("extra", {}))

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["disease", "treate_abs", "treate_signed", "conexp"])
        for n, a, s, c in zip(self.diseases, self.treate_abs, self.treate_signed, self.conexp):
            w.writerow([n, repr(float(a)), repr(float(s)), repr(float(c))])
        return buf.getvalue()

    def tables(self, top_k: int = 5, bottom_k: int | None = None) -> str:
        t = pipe_table(ranked_rows(self.diseases, self.treate_abs, top_k, bottom_k), "TReATE")
        c = pipe_table(ranked_rows(self.diseases, self.conexp, top_k, bottom_k), "CONEXP")
        return t + "\n" + c


def estimate(model_o: Predictor, model_cf: Predictor, records: Sequence[CanonicalRecord], concept: str,
             diseases: Sequence[str], population: str = "treated", control_concept: str | None = None) -> EffectReport:
    flags = concept_flags(records, concept)
    n1, n0 = int((flags == 1).sum()), int((flags == 0).sum())
    if len(diseases) != model_o.n_classes:
        raise IncompatibleModels(f"{len(diseases)} disease names for a {model_o.n_classes}-way model")
    chosen = select_population(records, concept, population)
    signed, _ = treate(model_o, model_cf, chosen)
    cx = conexp(model_o, records, concept)
    return EffectReport(concept, list(diseases), signed, cx, len(records), n1, n0, population, len(chosen),
                        getattr(model_o, "id", ""), getattr(model_cf, "id", ""), control_concept)


def validate_against_oracle(report_or_values, truth) -> dict:
    """Spearman correlation of TReATE magnitudes with |truth|, plus top-1 agreement."""
    from scipy.stats import spearmanr

    values = report_or_values.treate_abs if isinstance(report_or_values, EffectReport) else report_or_values
    a = np.abs(np.asarray(values, dtype=np.float64))
    b = np.abs(np.asarray(truth, dtype=np.float64))
    if a.shape != b.shape:
        raise ValueError(f"length mismatch: {a.shape[0] if a.ndim else 0} estimates vs {b.shape[0] if b.ndim else 0} truths")
    if a.size < 2:
        raise ValueError("rank correlation needs at least two diseases")
    rho = float(spearmanr(a, b).statistic)
    return {"spearman": rho, "top1_agree": bool(np.argmax(a) == np.argmax(b)),
            "top1_estimate": int(np.argmax(a)), "top1_truth": int(np.argmax(b))}
