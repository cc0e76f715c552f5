"""Sparsemax and Euclidean projection onto the probability simplex.

All functions act on the last axis, so a 2-D array is a batch of score rows.
Arithmetic runs in float64; results are returned in the input's float dtype.
"""

from __future__ import annotations

import itertools

import numpy as np

ORACLE_MAX_DIM = 12


def _as_scores(z) -> tuple[np.ndarray, np.dtype]:
    z = np.asarray(z)
    dtype = z.dtype if z.dtype.kind == "f" else np.dtype(np.float64)
    if z.ndim == 0 or z.shape[-1] == 0:
        raise ValueError("sparsemax needs at least one score")
    z64 = z.astype(np.float64)
    if not np.isfinite(z64).all():
        raise ValueError("sparsemax scores must be finite")
    return z64, dtype


def threshold_and_support(z) -> tuple[np.ndarray, np.ndarray]:
    """Return (tau, support size) per row.

    k(z) = max{k : 1 + k z_(k) >= sum_{j<=k} z_(j)} over the descending sort.
    Ties at the boundary are included; this leaves tau unchanged.
    """
    z, _ = _as_scores(z)
    zs = -np.sort(-z, axis=-1)
    cssv = np.cumsum(zs, axis=-1)
    ks = np.arange(1, z.shape[-1] + 1, dtype=np.float64)
    cond = 1.0 + ks * zs >= cssv
    k = cond.sum(axis=-1)
    tau = (np.take_along_axis(cssv, k[..., None] - 1, axis=-1)[..., 0] - 1.0) / k
    return tau, k


def sparsemax(z) -> np.ndarray:
    z64, dtype = _as_scores(z)
    tau, _ = threshold_and_support(z64)
    return np.maximum(z64 - tau[..., None], 0.0).astype(dtype)


def sparsemax_backward(p, upstream) -> np.ndarray:
    """Jacobian-transpose product of sparsemax at output ``p``."""
    p = np.asarray(p)
    upstream = np.asarray(upstream)
    if p.shape != upstream.shape:
        raise ValueError(f"sparsemax_backward: shape mismatch {p.shape} vs {upstream.shape}")
    s = p > 0
    g = np.where(s, upstream.astype(np.float64), 0.0)
    v_hat = g.sum(axis=-1, keepdims=True) / s.sum(axis=-1, keepdims=True)
    out = np.where(s, g - v_hat, 0.0)
    return out.astype(upstream.dtype if upstream.dtype.kind == "f" else np.float64)


def sparsemax_loss(z, gold) -> tuple[np.ndarray, np.ndarray]:
    """Sparsemax loss for one-hot targets and its gradient.

    For a single score vector returns (scalar, vector); for a batch of rows
    returns (per-row losses, per-row gradients).
    """
    z64, dtype = _as_scores(z)
    single = z64.ndim == 1
    rows = z64.reshape(-1, z64.shape[-1])
    gold = np.asarray(gold).reshape(-1)
    if gold.shape[0] != rows.shape[0]:
        raise ValueError(f"sparsemax_loss: {rows.shape[0]} score rows but {gold.shape[0]} labels")
    if ((gold < 0) | (gold >= rows.shape[1])).any():
        raise IndexError(f"sparsemax_loss: gold index out of range [0, {rows.shape[1]})")
    tau, _ = threshold_and_support(rows)
    p = np.maximum(rows - tau[:, None], 0.0)
    in_support = p > 0
    sq = np.where(in_support, rows * rows - (tau * tau)[:, None], 0.0).sum(axis=1)
    idx = np.arange(rows.shape[0])
    loss = np.maximum(-rows[idx, gold] + 0.5 * sq + 0.5, 0.0)
    grad = p
    grad[idx, gold] -= 1.0
    if single:
        return loss[0].astype(dtype), grad[0].astype(dtype)
    return loss.astype(dtype), grad.reshape(z64.shape).astype(dtype)


def project_simplex_oracle(z) -> np.ndarray:
    """Exhaustive-support Euclidean projection of one vector onto the simplex.

    Test-scale only: enumerates all 2^n - 1 candidate supports.
    """
    z = np.asarray(z, dtype=np.float64).reshape(-1)
    n = z.shape[0]
    if n == 0:
        raise ValueError("empty score vector")
    if n > ORACLE_MAX_DIM:
        raise ValueError(f"oracle limited to length <= {ORACLE_MAX_DIM}, got {n}")
    best, best_dist = None, np.inf
    for size in range(1, n + 1):
        for support in itertools.combinations(range(n), size):
            s = list(support)
            tau = (z[s].sum() - 1.0) / size
            cand = np.zeros(n)
            cand[s] = z[s] - tau
            if (cand[s] < 0).any():
                continue
            dist = float(((cand - z) ** 2).sum())
            if dist < best_dist:
                best, best_dist = cand, dist
    return best
