"""Tiny post-LN transformer encoder with MLM, NSP, treatment-concept,
control-concept and disease heads, built on :mod:`concept_effects.autodiff`."""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass, fields

import numpy as np

from . import simplex
from .autodiff import Graph, ShapeError
from .seeding import derive_rng
from .text import PAD

HEAD_MODES = ("sparsemax", "softmax")
TARGET_MODES = ("onehot", "distribution")
MASK_VALUE = -1e9


@dataclass
class EncoderConfig:
    vocab_size: int
    num_diseases: int
    layers: int = 2
    hidden: int = 64
    heads: int = 4
    max_len: int = 128
    ff: int = 0  # 0 -> 4 * hidden
    lam: float = 6.0
    enable_cc: bool = False
    head_mode: str = "sparsemax"

    def __post_init__(self):
        if self.hidden % self.heads:
            raise ValueError(f"hidden ({self.hidden}) must be divisible by heads ({self.heads})")
        if self.lam < 0:
            raise ValueError("lambda must be >= 0")
        if self.head_mode not in HEAD_MODES:
            raise ValueError(f"head_mode must be one of {HEAD_MODES}")
        if min(self.vocab_size, self.num_diseases, self.layers, self.hidden, self.max_len) < 1:
            raise ValueError("EncoderConfig extents must be positive")
        if not self.ff:
            self.ff = 4 * self.hidden

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "EncoderConfig":
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ValueError(f"unknown model config keys: {sorted(unknown)}")
        return cls(**d)


def param_shapes(config: EncoderConfig) -> dict[str, tuple[int, ...]]:
    h, f = config.hidden, config.ff
    shapes = {
        "tok_emb": (config.vocab_size, h),
        "pos_emb": (config.max_len, h),
        "emb_ln.g": (h,),
        "emb_ln.b": (h,),
    }
    for i in range(config.layers):
        p = f"layer{i}."
        for w in ("q", "k", "v", "o"):
            shapes[p + "w" + w] = (h, h)
            shapes[p + "b" + w] = (h,)
        shapes.update({
            p + "ln1.g": (h,), p + "ln1.b": (h,),
            p + "w1": (h, f), p + "b1": (f,),
            p + "w2": (f, h), p + "b2": (h,),
            p + "ln2.g": (h,), p + "ln2.b": (h,),
        })
    shapes.update({
        "mlm.w": (h, config.vocab_size), "mlm.b": (config.vocab_size,),
        "nsp.w": (h, 2), "nsp.b": (2,),
        "tc.w": (h, 2), "tc.b": (2,),
        "cc.w": (h, 2), "cc.b": (2,),
        "clf.w": (h, config.num_diseases), "clf.b": (config.num_diseases,),
    })
    return shapes


ENCODER_PREFIXES = ("tok_emb", "pos_emb", "emb_ln.", "layer")
CLASSIFIER_PARAMS = ("clf.w", "clf.b")


def is_encoder_param(name: str) -> bool:
    return name.startswith(ENCODER_PREFIXES)


def init_params(config: EncoderConfig, seed: int) -> dict[str, np.ndarray]:
    """Normal(0, 0.02) weights, zero biases, unit layer-norm gains."""
    params = {}
    for name, shape in param_shapes(config).items():
        if name.endswith(".g"):
            params[name] = np.ones(shape, dtype=np.float32)
        elif len(shape) == 1:
            params[name] = np.zeros(shape, dtype=np.float32)
        else:
            rng = derive_rng(seed, "init", name)
            params[name] = (0.02 * rng.standard_normal(shape)).astype(np.float32)
    return params


def bind(graph: Graph, params: dict[str, np.ndarray], trainable=None) -> dict[str, int]:
    """Put parameters on the tape; names outside ``trainable`` become constants."""
    nodes = {}
    for name, value in params.items():
        if trainable is None or name in trainable:
            nodes[name] = graph.param(name, value)
        else:
            nodes[name] = graph.constant(value)
    return nodes


def _linear(g: Graph, x: int, P: dict[str, int], prefix: str) -> int:
    return g.add(g.matmul(x, P[prefix + "w"]), P[prefix + "b"])


def encode(g: Graph, P: dict[str, int], ids, config: EncoderConfig) -> tuple[int, int]:
    """Return (sequence states node, CLS vector node) for a (batch, length) id array."""
    ids = np.asarray(ids)
    if ids.ndim == 1:
        ids = ids[None, :]
    b, length = ids.shape
    if length > config.max_len:
        raise ShapeError("encode", [ids.shape], f"sequence longer than max_len={config.max_len}")
    if ids.min() < 0 or ids.max() >= config.vocab_size:
        raise ShapeError("encode", [ids.shape], f"token id outside vocab of size {config.vocab_size}")
    h, nh = config.hidden, config.heads
    dh = h // nh
    x = g.embedding(P["tok_emb"], ids)
    pos = g.slice(P["pos_emb"], 0, 0, length)
    x = g.layer_norm(g.add(x, pos), P["emb_ln.g"], P["emb_ln.b"])
    mask = np.where(ids == PAD, MASK_VALUE, 0.0).astype(g.dtype)[:, None, :]
    for i in range(config.layers):
        p = f"layer{i}."
        q = g.add(g.matmul(x, P[p + "wq"]), P[p + "bq"])
        k = g.add(g.matmul(x, P[p + "wk"]), P[p + "bk"])
        v = g.add(g.matmul(x, P[p + "wv"]), P[p + "bv"])
        ctx = []
        for j in range(nh):
            qh = g.slice(q, -1, j * dh, (j + 1) * dh)
            kh = g.slice(k, -1, j * dh, (j + 1) * dh)
            vh = g.slice(v, -1, j * dh, (j + 1) * dh)
            scores = g.scale(g.matmul(qh, kh, transpose_b=True), 1.0 / math.sqrt(dh))
            ctx.append(g.matmul(g.softmax(scores, mask=mask), vh))
        attn = g.add(g.matmul(g.concat(ctx, axis=-1), P[p + "wo"]), P[p + "bo"])
        x = g.layer_norm(g.add(x, attn), P[p + "ln1.g"], P[p + "ln1.b"])
        ff = g.gelu(g.add(g.matmul(x, P[p + "w1"]), P[p + "b1"]))
        ff = g.add(g.matmul(ff, P[p + "w2"]), P[p + "b2"])
        x = g.layer_norm(g.add(x, ff), P[p + "ln2.g"], P[p + "ln2.b"])
    cls = g.slice(x, 1, 0, 1, squeeze=True)
    return x, cls


# -- losses -------------------------------------------------------------------


@dataclass
class Stage1Batch:
    mlm_ids: np.ndarray
    mlm_targets: np.ndarray
    nsp_ids: np.ndarray
    nsp_labels: np.ndarray
    tc_ids: np.ndarray
    tc_labels: np.ndarray
    cc_labels: np.ndarray | None = None


def stage1_loss(g: Graph, P: dict[str, int], batch: Stage1Batch, config: EncoderConfig,
                lam: float | None = None, fit_head=None) -> dict[str, int]:
    """MLM + NSP + treatment-concept cross-entropy (+ optional control concept).

    The treatment head reads the CLS vector through a gradient-reversal node,
    so the head itself trains normally while the encoder receives ``-lam``
    times the head's gradient. If ``fit_head`` is given it is called with the
    (CLS values, labels) of the TC batch and must return fresh ``(tc.w, tc.b)``
    arrays, which are put on the tape as the head parameters. Returns the
    component and total loss nodes.
    """
    lam = config.lam if lam is None else lam
    pairs = [(batch.mlm_ids, batch.mlm_targets), (batch.nsp_ids, batch.nsp_labels),
             (batch.tc_ids, batch.tc_labels)]
    for ids, tgt in pairs:
        if len(ids) == 0:
            raise ValueError("stage-1 batches must be non-empty")
        if len(ids) != len(tgt):
            raise ShapeError("stage1_loss", [np.shape(ids), np.shape(tgt)], "ids and targets disagree")
    if batch.mlm_targets.shape != batch.mlm_ids.shape:
        raise ShapeError("stage1_loss", [batch.mlm_ids.shape, batch.mlm_targets.shape], "MLM targets")

    tc_labels = np.asarray(batch.tc_labels)
    _, tc_cls = encode(g, P, batch.tc_ids, config)
    if fit_head is not None:
        w, b = fit_head(g.value(tc_cls), tc_labels)
        P = dict(P, **{"tc.w": g.param("tc.w", w), "tc.b": g.param("tc.b", b)})
    tc = g.cross_entropy(_linear(g, g.grad_reverse(tc_cls, lam), P, "tc."), tc_labels)
    seq, _ = encode(g, P, batch.mlm_ids, config)
    mlm = g.cross_entropy(_linear(g, seq, P, "mlm."), batch.mlm_targets)
    _, nsp_cls = encode(g, P, batch.nsp_ids, config)
    nsp = g.cross_entropy(_linear(g, nsp_cls, P, "nsp."), np.asarray(batch.nsp_labels))
    out = {"mlm": mlm, "nsp": nsp, "tc": tc}
    total = g.add(g.add(mlm, nsp), tc)
    if config.enable_cc:
        if batch.cc_labels is None or len(batch.cc_labels) != len(batch.tc_ids):
            raise ValueError("enable_cc requires control-concept labels for the TC batch")
        out["cc"] = g.cross_entropy(_linear(g, tc_cls, P, "cc."), np.asarray(batch.cc_labels))
        total = g.add(total, out["cc"])
    out["total"] = total
    return out


def fit_concept_head(features: np.ndarray, labels: np.ndarray, l2: float = 0.3,
                     iterations: int = 15) -> tuple[np.ndarray, np.ndarray]:
    """Best-response linear concept head: L2-regularised logistic regression.

    Fitted by Newton's method on standardised features, then mapped back to a
    two-logit head (``tc.w``, ``tc.b``) acting on the raw features.
    """
    x = np.asarray(features, dtype=np.float64)
    y = np.asarray(labels, dtype=np.float64)
    mu = x.mean(axis=0)
    sd = x.std(axis=0) + 1e-6
    z = np.hstack([(x - mu) / sd, np.ones((len(x), 1))])
    n, d = z.shape
    reg = np.full(d, l2)
    reg[-1] = 0.0  # intercept is not penalised
    w = np.zeros(d)
    for _ in range(iterations):
        p = 1.0 / (1.0 + np.exp(-np.clip(z @ w, -30, 30)))
        grad = z.T @ (p - y) / n + reg * w
        hess = (z * (p * (1 - p))[:, None]).T @ z / n + np.diag(reg) + 1e-9 * np.eye(d)
        w -= np.linalg.solve(hess, grad)
    coef = w[:-1] / sd
    bias = w[-1] - mu @ coef
    tc_w = np.stack([-coef / 2, coef / 2], axis=1).astype(np.float32)
    tc_b = np.array([-bias / 2, bias / 2], dtype=np.float32)
    return tc_w, tc_b


def disease_scores(g: Graph, P: dict[str, int], cls: int) -> int:
    return _linear(g, cls, P, "clf.")


def disease_loss(g: Graph, scores: int, gold: np.ndarray, head_mode: str, target_mode: str) -> int:
    """Sparsemax loss / cross-entropy for one-hot targets; squared error of the
    output distribution for distribution targets."""
    gold = np.asarray(gold)
    if target_mode == "onehot":
        labels = gold.argmax(axis=1) if gold.ndim == 2 else gold
        if head_mode == "sparsemax":
            return g.sparsemax_loss(scores, labels)
        return g.cross_entropy(scores, labels.astype(np.int64))
    if target_mode != "distribution":
        raise ValueError(f"target_mode must be one of {TARGET_MODES}")
    dist = g.sparsemax(scores) if head_mode == "sparsemax" else g.softmax(scores)
    return g.squared_error(dist, g.constant(gold))


def trim_padding(ids: np.ndarray, *aligned: np.ndarray) -> tuple[np.ndarray, ...]:
    """Drop trailing columns that are PAD in every row (and the same columns of ``aligned``).

    Masked positions contribute nothing to attention, so this only saves work.
    """
    ids = np.asarray(ids)
    used = np.flatnonzero((ids != PAD).any(axis=0))
    width = int(used[-1]) + 1 if len(used) else 1
    return (ids[:, :width],) + tuple(np.asarray(a)[:, :width] for a in aligned)


# -- inference -------------------------------------------------------------------


def cls_features(params: dict[str, np.ndarray], ids, config: EncoderConfig, batch_size: int = 256) -> np.ndarray:
    ids = np.asarray(ids)
    out = []
    for start in range(0, len(ids), batch_size):
        g = Graph()
        P = bind(g, params, trainable=())
        _, cls = encode(g, P, ids[start:start + batch_size], config)
        out.append(g.value(cls))
    return np.concatenate(out, axis=0)


def head_distribution(scores: np.ndarray, head_mode: str) -> np.ndarray:
    if head_mode == "sparsemax":
        return simplex.sparsemax(scores)
    if head_mode != "softmax":
        raise ValueError(f"head_mode must be one of {HEAD_MODES}")
    z = scores - scores.max(axis=-1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=-1, keepdims=True)


def classify_features(params: dict[str, np.ndarray], features: np.ndarray, head_mode: str) -> np.ndarray:
    scores = features @ params["clf.w"] + params["clf.b"]
    return head_distribution(scores, head_mode)


def classify(params: dict[str, np.ndarray], ids, config: EncoderConfig, head_mode: str | None = None) -> np.ndarray:
    """Disease distribution per row of ``ids`` (linear map of CLS, then sparsemax/softmax)."""
    feats = cls_features(params, ids, config)
    return classify_features(params, feats, head_mode or config.head_mode)
