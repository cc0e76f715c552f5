"""Baseline, concept-forgetting (stage 1) and frozen-encoder classifier
(stage 2) training, plus Adam, loss traces and checkpoint persistence."""

from __future__ import annotations

import json
import logging
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path
from typing import Sequence

import numpy as np

from .autodiff import Graph
from .model import (
    CLASSIFIER_PARAMS,
    HEAD_MODES,
    TARGET_MODES,
    EncoderConfig,
    Stage1Batch,
    bind,
    cls_features,
    disease_loss,
    disease_scores,
    encode,
    fit_concept_head,
    init_params,
    is_encoder_param,
    stage1_loss,
    trim_padding,
)
from .seeding import derive_rng
from .text import CanonicalRecord, Vocab, make_mlm_example, make_nsp_pair, split_turns, tokenize

log = logging.getLogger(__name__)

STAGES = ("baseline", "tc", "cf")
ADVERSARIES = ("refit", "gradient")
FORMAT_VERSION = 1


@dataclass
class TrainConfig:
    seed: int = 0
    steps: int = 500
    batch_size: int = 32
    lr: float = 1e-3
    lam: float = 6.0
    head_mode: str = "sparsemax"
    target_mode: str = "onehot"
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    mlm_rate: float = 0.15
    adversary: str = "refit"
    adversary_l2: float = 0.3
    tc_batch_size: int = 0  # 0 -> batch_size

    def __post_init__(self):
        if self.steps < 1:
            raise ValueError("steps must be >= 1")
        if self.batch_size < 1:
            raise ValueError("batch_size must be >= 1")
        if not self.lr > 0:
            raise ValueError("lr must be > 0")
        if self.lam < 0:
            raise ValueError("lambda must be >= 0")
        if self.head_mode not in HEAD_MODES:
            raise ValueError(f"head_mode must be one of {HEAD_MODES}")
        if self.target_mode not in TARGET_MODES:
            raise ValueError(f"target_mode must be one of {TARGET_MODES}")
        if self.tc_batch_size < 0:
            raise ValueError("tc_batch_size must be >= 0")
        if self.adversary not in ADVERSARIES:
            raise ValueError(f"adversary must be one of {ADVERSARIES}")

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        unknown = set(d) - {f.name for f in fields(cls)}
        if unknown:
            raise ValueError(f"unknown train config keys: {sorted(unknown)}")
        return cls(**d)


# -- optimizer -------------------------------------------------------------------


@dataclass
class AdamState:
    t: int = 0
    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)


def adam_step(params: dict[str, np.ndarray], grads: dict[str, np.ndarray], state: AdamState,
              lr: float = 1e-3, beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8):
    """One bias-corrected Adam update of the parameters named in ``grads``.

    Returns a new parameter dict (untouched entries are shared) and the state.
    """
    for name, g in grads.items():
        if g.shape != params[name].shape:
            raise ValueError(f"gradient shape {g.shape} != parameter {name} shape {params[name].shape}")
        if not np.isfinite(g).all():
            raise FloatingPointError(f"non-finite gradient for parameter {name}")
    state.t += 1
    b1, b2 = np.float32(beta1), np.float32(beta2)
    c1 = np.float32(1.0 - beta1**state.t)
    c2 = np.float32(1.0 - beta2**state.t)
    out = dict(params)
    for name in grads:
        g = grads[name].astype(np.float32)
        m = state.m.get(name, np.zeros_like(g))
        v = state.v.get(name, np.zeros_like(g))
        m = b1 * m + (np.float32(1) - b1) * g
        v = b2 * v + (np.float32(1) - b2) * (g * g)
        state.m[name], state.v[name] = m, v
        step = np.float32(lr) * (m / c1) / (np.sqrt(v / c2) + np.float32(eps))
        out[name] = (params[name] - step).astype(np.float32)
    return out, state


# -- traces and checkpoints ------------------------------------------------------


@dataclass
class LossTrace:
    columns: tuple[str, ...]
    rows: list[tuple] = field(default_factory=list)

    def append(self, step: int, values: Sequence[float]) -> None:
        vals = tuple(float(v) for v in values)
        if not all(np.isfinite(vals)):
            raise FloatingPointError(f"non-finite loss at step {step}: {vals}")
        self.rows.append((step,) + vals)

    def column(self, name: str) -> np.ndarray:
        i = self.columns.index(name)
        return np.array([r[i] for r in self.rows])

    def __len__(self) -> int:
        return len(self.rows)

    def to_csv(self) -> str:
        lines = [",".join(self.columns)]
        lines += [",".join([str(r[0])] + [repr(v) for v in r[1:]]) for r in self.rows]
        return "\n".join(lines) + "\n"


@dataclass
class Checkpoint:
    config: EncoderConfig
    params: dict[str, np.ndarray]
    vocab: Vocab
    stage: str
    metadata: dict = field(default_factory=dict)

    def __post_init__(self):
        if self.stage not in STAGES:
            raise ValueError(f"stage must be one of {STAGES}")

    @property
    def vocab_hash(self) -> str:
        return self.vocab.hash

    def save(self, path: str | Path) -> None:
        path = Path(path)
        path.mkdir(parents=True, exist_ok=True)
        tensors, offset, chunks = [], 0, []
        for name, arr in self.params.items():
            data = np.ascontiguousarray(arr, dtype="<f4").tobytes()
            tensors.append({"name": name, "shape": list(arr.shape), "offset": offset, "nbytes": len(data)})
            chunks.append(data)
            offset += len(data)
        manifest = {
            "format": FORMAT_VERSION,
            "stage": self.stage,
            "config": self.config.to_dict(),
            "vocab_hash": self.vocab_hash,
            "metadata": self.metadata,
            "tensors": tensors,
        }
        (path / "manifest.json").write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")
        (path / "weights.bin").write_bytes(b"".join(chunks))
        (path / "vocab.json").write_text(self.vocab.to_json() + "\n")

    @classmethod
    def load(cls, path: str | Path) -> "Checkpoint":
        path = Path(path)
        manifest = json.loads((path / "manifest.json").read_text())
        if manifest.get("format") != FORMAT_VERSION:
            raise ValueError(f"{path}: unsupported checkpoint format {manifest.get('format')!r}")
        vocab = Vocab.from_json((path / "vocab.json").read_text())
        if vocab.hash != manifest["vocab_hash"]:
            raise ValueError(f"{path}: vocab.json does not match the manifest hash")
        blob = (path / "weights.bin").read_bytes()
        params = {}
        for t in manifest["tensors"]:
            raw = blob[t["offset"]:t["offset"] + t["nbytes"]]
            params[t["name"]] = np.frombuffer(raw, dtype="<f4").astype(np.float32).reshape(t["shape"])
        return cls(EncoderConfig.from_dict(manifest["config"]), params, vocab, manifest["stage"],
                   manifest["metadata"])


# -- helpers ---------------------------------------------------------------------


def _token_matrix(records: Sequence[CanonicalRecord], vocab: Vocab, max_len: int) -> np.ndarray:
    return np.stack([tokenize(r.text, vocab, max_len) for r in records])


def _gold_matrix(records: Sequence[CanonicalRecord]) -> np.ndarray:
    return np.asarray([r.gold for r in records], dtype=np.float32)


def _batch_indices(seed: int, tag: str, step: int, n: int, batch_size: int) -> np.ndarray:
    rng = derive_rng(seed, tag, "batch", step)
    return np.sort(rng.choice(n, size=min(batch_size, n), replace=False))


def _check_corpus(records, enc: EncoderConfig) -> None:
    if not records:
        raise ValueError("training corpus is empty")
    if any(len(r.gold) != enc.num_diseases for r in records):
        raise ValueError(f"every record must carry a gold vector over {enc.num_diseases} diseases")


def concept_labels(records: Sequence[CanonicalRecord], concept: str) -> np.ndarray:
    try:
        return np.array([r.concept_flags[concept] for r in records], dtype=np.int64)
    except KeyError:
        raise KeyError(f"records lack a flag for concept {concept!r}") from None


def _final(trace: LossTrace) -> dict[str, float]:
    return {c: trace.rows[-1][i] for i, c in enumerate(trace.columns) if c != "step"}


# -- training procedures ---------------------------------------------------------


def train_baseline(config: TrainConfig, enc: EncoderConfig, records: Sequence[CanonicalRecord],
                   vocab: Vocab) -> tuple[Checkpoint, LossTrace]:
    """Original model O: encoder and classifier trained on the disease objective only."""
    _check_corpus(records, enc)
    ids = _token_matrix(records, vocab, enc.max_len)
    gold = _gold_matrix(records)
    params = init_params(enc, derive_rng(config.seed, "baseline").integers(2**63))
    trainable = [n for n in params if is_encoder_param(n) or n in CLASSIFIER_PARAMS]
    state = AdamState()
    trace = LossTrace(("step", "loss"))
    for step in range(config.steps):
        idx = _batch_indices(config.seed, "baseline", step, len(records), config.batch_size)
        g = Graph()
        P = bind(g, params, trainable)
        _, cls = encode(g, P, trim_padding(ids[idx])[0], enc)
        loss = disease_loss(g, disease_scores(g, P, cls), gold[idx], config.head_mode, config.target_mode)
        grads = g.param_grads(g.backprop(loss))
        params, state = adam_step(params, grads, state, config.lr, config.beta1, config.beta2, config.eps)
        trace.append(step, [g.value(loss)[0]])
    meta = {"seed": config.seed, "steps": config.steps, "head_mode": config.head_mode,
            "target_mode": config.target_mode, "final_losses": _final(trace)}
    return Checkpoint(enc, params, vocab, "baseline", meta), trace


def build_stage1_batch(records: Sequence[CanonicalRecord], idx: np.ndarray, ids: np.ndarray,
                       turns: list[list[str]], tc: np.ndarray, cc: np.ndarray | None,
                       vocab: Vocab, max_len: int, seed: int, step: int, mlm_rate: float,
                       tc_idx: np.ndarray | None = None) -> Stage1Batch:
    mlm_in, mlm_tgt, nsp_in, nsp_lab = [], [], [], []
    for i in idx:
        rid = records[i].id
        ex = make_mlm_example(ids[i], derive_rng(seed, "mlm", step, rid), len(vocab), mlm_rate)
        mlm_in.append(ex.input_ids)
        mlm_tgt.append(ex.targets)
        pair = make_nsp_pair(int(i), turns, derive_rng(seed, "nsp", step, rid), vocab, max_len)
        nsp_in.append(pair.input_ids)
        nsp_lab.append(pair.label)
    tc_idx = idx if tc_idx is None else tc_idx
    mlm_ids, mlm_tgt = trim_padding(np.stack(mlm_in), np.stack(mlm_tgt))
    (nsp_ids,) = trim_padding(np.stack(nsp_in))
    (tc_ids,) = trim_padding(ids[tc_idx])
    return Stage1Batch(mlm_ids, mlm_tgt, nsp_ids, np.array(nsp_lab, dtype=np.int64),
                       tc_ids, tc[tc_idx], None if cc is None else cc[tc_idx])


def train_stage1(config: TrainConfig, enc: EncoderConfig, records: Sequence[CanonicalRecord], vocab: Vocab,
                 concept: str, control: str | None = None) -> tuple[Checkpoint, LossTrace]:
    """Concept-forgetting encoder: MLM + NSP + reversed treatment-concept loss.

    With ``adversary="gradient"`` the TC head is one more Adam-trained
    parameter. With ``"refit"`` (default) the head is refitted to the current
    TC batch before every step, so the reversed gradient always comes from the
    best linear concept detector rather than a stale one.
    """
    _check_corpus(records, enc)
    tc = concept_labels(records, concept)
    if tc.min() == tc.max():
        raise ValueError(f"concept {concept!r} labels are all {tc[0]}; the adversary would be degenerate")
    cc = None
    if enc.enable_cc:
        if control is None:
            raise ValueError("enable_cc requires a control concept")
        cc = concept_labels(records, control)
    ids = _token_matrix(records, vocab, enc.max_len)
    turns = [split_turns(r.text) for r in records]
    params = init_params(enc, derive_rng(config.seed, "stage1").integers(2**63))
    trainable = [n for n in params if n not in CLASSIFIER_PARAMS and (enc.enable_cc or not n.startswith("cc."))]
    head_names = ("tc.w", "tc.b")

    def refit(feats, labels):
        return fit_concept_head(feats, labels, config.adversary_l2)

    if config.adversary == "refit":
        trainable = [n for n in trainable if n not in head_names]
    state = AdamState()
    cols = ("step", "mlm", "nsp", "tc") + (("cc",) if enc.enable_cc else ()) + ("total",)
    trace = LossTrace(cols)
    for step in range(config.steps):
        idx = _batch_indices(config.seed, "stage1", step, len(records), config.batch_size)
        tc_idx = _batch_indices(config.seed, "stage1-tc", step, len(records),
                                config.tc_batch_size or config.batch_size)
        batch = build_stage1_batch(records, idx, ids, turns, tc, cc, vocab, enc.max_len,
                                   config.seed, step, config.mlm_rate, tc_idx)
        g = Graph()
        P = bind(g, params, trainable)
        fit = refit if config.adversary == "refit" else None
        losses = stage1_loss(g, P, batch, enc, config.lam, fit_head=fit)
        grads = g.param_grads(g.backprop(losses["total"]))
        if config.adversary == "refit":
            # the head is a best response to the current batch; keep it for the record
            for n in head_names:
                params[n] = np.array(g.value(g.params[n]))
                grads.pop(n)
        params, state = adam_step(params, grads, state, config.lr, config.beta1, config.beta2, config.eps)
        trace.append(step, [g.value(losses[c])[0] for c in cols[1:]])
        if step % 50 == 0:
            log.debug("stage1 step %d %s", step, trace.rows[-1])
    meta = {"seed": config.seed, "steps": config.steps, "lambda": config.lam, "concept": concept,
            "adversary": config.adversary,
            "control": control if enc.enable_cc else None, "final_losses": _final(trace)}
    return Checkpoint(enc, params, vocab, "tc", meta), trace


def fold_standardization(w: np.ndarray, b: np.ndarray, mu: np.ndarray,
                         sd: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Rewrite a linear head on ``(x - mu) / sd`` as one acting on raw ``x``."""
    raw_w = np.asarray(w, dtype=np.float64) / sd[:, None]
    raw_b = np.asarray(b, dtype=np.float64) - mu @ raw_w
    return raw_w.astype(np.float32), raw_b.astype(np.float32)


def train_stage2(config: TrainConfig, tc_checkpoint: Checkpoint,
                 records: Sequence[CanonicalRecord]) -> tuple[Checkpoint, LossTrace]:
    """Counterfactual model CF: frozen stage-1 encoder, linear disease head on CLS."""
    if tc_checkpoint.stage != "tc":
        raise ValueError(f"stage 2 needs a 'tc' checkpoint, got {tc_checkpoint.stage!r}")
    enc = tc_checkpoint.config
    _check_corpus(records, enc)
    ids = _token_matrix(records, tc_checkpoint.vocab, enc.max_len)
    raw = cls_features(tc_checkpoint.params, ids, enc).astype(np.float64)
    # The adversary can shrink the CLS scale by orders of magnitude, which stalls
    # Adam on a raw linear head. Train on standardized features and fold the
    # affine map back into clf.w / clf.b afterwards; the function class is unchanged.
    mu, sd = raw.mean(axis=0), raw.std(axis=0) + 1e-12
    feats = ((raw - mu) / sd).astype(np.float32)
    gold = _gold_matrix(records)
    head = {n: tc_checkpoint.params[n] for n in CLASSIFIER_PARAMS}
    state = AdamState()
    trace = LossTrace(("step", "loss"))
    for step in range(config.steps):
        idx = _batch_indices(config.seed, "stage2", step, len(records), config.batch_size)
        g = Graph()
        P = bind(g, head)
        x = g.constant(feats[idx])
        loss = disease_loss(g, disease_scores(g, P, x), gold[idx], config.head_mode, config.target_mode)
        grads = g.param_grads(g.backprop(loss))
        head, state = adam_step(head, grads, state, config.lr, config.beta1, config.beta2, config.eps)
        trace.append(step, [g.value(loss)[0]])
    params = dict(tc_checkpoint.params)
    params["clf.w"], params["clf.b"] = fold_standardization(head["clf.w"], head["clf.b"], mu, sd)
    meta = dict(tc_checkpoint.metadata)
    meta.update({"seed": config.seed, "stage2_steps": config.steps, "head_mode": config.head_mode,
                 "target_mode": config.target_mode, "stage1_final_losses": tc_checkpoint.metadata.get("final_losses"),
                 "final_losses": _final(trace)})
    cfg = EncoderConfig.from_dict({**enc.to_dict(), "head_mode": config.head_mode})
    return Checkpoint(cfg, params, tc_checkpoint.vocab, "cf", meta), trace


def lambda_sweep(config: TrainConfig, enc: EncoderConfig, records, vocab, concept: str,
                 lambdas=(0.0, 1.0, 6.0)) -> dict[float, tuple[Checkpoint, LossTrace]]:
    out = {}
    for lam in lambdas:
        cfg = TrainConfig(**{**asdict(config), "lam": float(lam)})
        out[float(lam)] = train_stage1(cfg, enc, records, vocab, concept)
    return out


# -- probing ---------------------------------------------------------------------


def concept_probe_accuracy(checkpoint: Checkpoint, train: Sequence[CanonicalRecord],
                           test: Sequence[CanonicalRecord], concept: str) -> float:
    """Held-out accuracy of a freshly fitted logistic-regression probe on frozen CLS vectors."""
    from sklearn.linear_model import LogisticRegression
    from sklearn.pipeline import make_pipeline
    from sklearn.preprocessing import StandardScaler

    enc = checkpoint.config
    xtr = cls_features(checkpoint.params, _token_matrix(train, checkpoint.vocab, enc.max_len), enc)
    xte = cls_features(checkpoint.params, _token_matrix(test, checkpoint.vocab, enc.max_len), enc)
    probe = make_pipeline(StandardScaler(), LogisticRegression(max_iter=2000))
    probe.fit(xtr.astype(np.float64), concept_labels(train, concept))
    return float(probe.score(xte.astype(np.float64), concept_labels(test, concept)))
