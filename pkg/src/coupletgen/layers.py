"""Forward/backward primitives for the hand-built network.

Every forward returns ``(out, cache)``; the matching backward consumes the
upstream gradient and the cache and returns gradients for its inputs and
parameters.  All math is float64.
"""

from __future__ import annotations

import numpy as np

LAYERNORM_EPS = 1e-5


def linear_forward(x: np.ndarray, w: np.ndarray, b: np.ndarray):
    """y = x @ w + b over the last axis."""
    return x @ w + b, (x, w)


def linear_backward(dy: np.ndarray, cache):
    x, w = cache
    dx = dy @ w.T
    dw = x.reshape(-1, x.shape[-1]).T @ dy.reshape(-1, dy.shape[-1])
    db = dy.reshape(-1, dy.shape[-1]).sum(axis=0)
    return dx, dw, db


def layernorm_forward(x: np.ndarray, gamma: np.ndarray, beta: np.ndarray):
    mu = x.mean(axis=-1, keepdims=True)
    var = x.var(axis=-1, keepdims=True)
    inv_std = 1.0 / np.sqrt(var + LAYERNORM_EPS)
    xhat = (x - mu) * inv_std
    return gamma * xhat + beta, (xhat, inv_std, gamma)


def layernorm_backward(dy: np.ndarray, cache):
    xhat, inv_std, gamma = cache
    dxhat = dy * gamma
    dmean = dxhat.mean(axis=-1, keepdims=True)
    dproj = (dxhat * xhat).mean(axis=-1, keepdims=True)
    dx = inv_std * (dxhat - dmean - xhat * dproj)
    dgamma = (dy * xhat).reshape(-1, dy.shape[-1]).sum(axis=0)
    dbeta = dy.reshape(-1, dy.shape[-1]).sum(axis=0)
    return dx, dgamma, dbeta


def relu_forward(x: np.ndarray):
    return np.maximum(x, 0.0), (x > 0.0)


def relu_backward(dy: np.ndarray, cache):
    return dy * cache


def masked_softmax(scores: np.ndarray, mask: np.ndarray | None):
    """Row-wise softmax over the last axis; blocked entries (mask False)
    get zero weight.  A query row with no allowed key is an error."""
    if mask is not None:
        if not np.all(np.any(np.broadcast_to(mask, scores.shape), axis=-1)):
            raise ValueError("attention: some query row has every key masked out")
        scores = np.where(mask, scores, -np.inf)
    shifted = scores - scores.max(axis=-1, keepdims=True)
    weights = np.exp(shifted)
    weights /= weights.sum(axis=-1, keepdims=True)
    return weights


def softmax_backward(dw: np.ndarray, weights: np.ndarray):
    inner = (dw * weights).sum(axis=-1, keepdims=True)
    return weights * (dw - inner)


def attention_core_forward(q: np.ndarray, k: np.ndarray, v: np.ndarray, mask: np.ndarray | None):
    """softmax(q kᵀ / sqrt(d)) v on (..., n, d) stacks."""
    scale = 1.0 / np.sqrt(q.shape[-1])
    scores = (q @ np.swapaxes(k, -1, -2)) * scale
    weights = masked_softmax(scores, mask)
    out = weights @ v
    return out, (q, k, v, weights, scale)


def attention_core_backward(dout: np.ndarray, cache):
    q, k, v, weights, scale = cache
    dweights = dout @ np.swapaxes(v, -1, -2)
    dv = np.swapaxes(weights, -1, -2) @ dout
    dscores = softmax_backward(dweights, weights) * scale
    dq = dscores @ k
    dk = np.swapaxes(dscores, -1, -2) @ q
    return dq, dk, dv


def dropout_forward(x: np.ndarray, p: float, rng: np.random.Generator | None, train: bool):
    """Inverted dropout; identity when not training or p == 0."""
    if not train or p <= 0.0:
        return x, None
    keep = (rng.random(x.shape) >= p) / (1.0 - p)
    return x * keep, keep


def dropout_backward(dy: np.ndarray, cache):
    if cache is None:
        return dy
    return dy * cache


def embedding_grad(d_rows: np.ndarray, ids: np.ndarray, table_shape) -> np.ndarray:
    """Scatter-add per-position gradients back into a table gradient."""
    d_table = np.zeros(table_shape, dtype=np.float64)
    np.add.at(d_table, ids.reshape(-1), d_rows.reshape(-1, d_rows.shape[-1]))
    return d_table


def positional_encoding(length: int, d_model: int) -> np.ndarray:
    """Sinusoidal position table: PE[p, 2i] = sin(p / 10000^(2i/d)),
    PE[p, 2i+1] = cos of the same argument."""
    if d_model % 2 != 0:
        raise ValueError("positional encoding requires an even model dimension")
    positions = np.arange(length, dtype=np.float64)[:, None]
    freqs = np.power(10000.0, -np.arange(0, d_model, 2, dtype=np.float64) / d_model)
    args = positions * freqs
    pe = np.empty((length, d_model), dtype=np.float64)
    pe[:, 0::2] = np.sin(args)
    pe[:, 1::2] = np.cos(args)
    return pe
