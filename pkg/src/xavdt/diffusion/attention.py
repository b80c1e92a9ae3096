"""Scaled dot-product attention on numpy arrays."""
from __future__ import annotations

import numpy as np
from scipy.special import softmax


def attention(q, k, v, d: int | None = None, return_weights: bool = False):
    """``softmax(q k^T / sqrt(d)) v`` over the last two axes.

    q: (..., Lq, d), k: (..., Lk, d), v: (..., Lk, dv).  ``d`` defaults to
    the trailing dim of ``q`` and must agree with it when given.
    """
    q = np.asarray(q, dtype=np.float64)
    k = np.asarray(k, dtype=np.float64)
    v = np.asarray(v, dtype=np.float64)
    if q.shape[-1] != k.shape[-1]:
        raise ValueError(f"query dim {q.shape[-1]} != key dim {k.shape[-1]}")
    if k.shape[-2] != v.shape[-2]:
        raise ValueError(f"key tokens {k.shape[-2]} != value tokens {v.shape[-2]}")
    if d is None:
        d = q.shape[-1]
    elif d != q.shape[-1]:
        raise ValueError(f"embed dim {d} does not match query dim {q.shape[-1]}")
    logits = q @ np.swapaxes(k, -1, -2) / np.sqrt(d)
    weights = softmax(logits, axis=-1)
    out = weights @ v
    return (out, weights) if return_weights else out


def multi_head_attention(x, ctx, wq, wk, wv, heads: int):
    """Per-head attention outputs before the output projection.

    x: (B, Lq, Dq), ctx: (B, Lk, Dk); wq/wk/wv are (heads*dh, D*) matrices.
    Returns (B, Lq, heads, dh).
    """
    x = np.asarray(x, dtype=np.float64)
    ctx = np.asarray(ctx, dtype=np.float64)
    q = x @ np.asarray(wq).T
    k = ctx @ np.asarray(wk).T
    v = ctx @ np.asarray(wv).T
    B, Lq, inner = q.shape
    if inner % heads:
        raise ValueError(f"inner dim {inner} not divisible by {heads} heads")
    dh = inner // heads
    split = lambda a: a.reshape(a.shape[0], a.shape[1], heads, dh).transpose(0, 2, 1, 3)
    out = attention(split(q), split(k), split(v), d=dh)
    return out.transpose(0, 2, 1, 3)
