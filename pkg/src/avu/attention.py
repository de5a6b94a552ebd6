"""Scaled dot-product attention sites.

A site owns its query/key/value projections (separate parameter sets per
site, never shared between self- and cross-attention). `attend` computes
softmax(q Wq (k Wk)^T / sqrt(d)) (v Wv) and also returns the weight rows,
which downstream code uses for masking checks and localization readouts.
"""

from __future__ import annotations

import math

import numpy as np

from . import tensor as tz
from .errors import ShapeError
from .tensor import DTensor


class AttentionSite:
    """Projection parameters for one attention operation.

    n_heads splits the model width; every head attends independently and
    the head outputs are re-concatenated. Weight init is scaled-normal
    with std 1/sqrt(d_model).
    """

    def __init__(self, rng, d_model, name, n_heads=1):
        if d_model % n_heads != 0:
            raise ShapeError(f"attention site {name!r}: d_model {d_model} "
                             f"not divisible by {n_heads} heads")
        self.name = name
        self.d_model = d_model
        self.n_heads = n_heads
        self.d_head = d_model // n_heads
        std = 1.0 / math.sqrt(d_model)
        self.wq = DTensor(rng.normal(0.0, std, (d_model, d_model)), name=f"{name}.wq")
        self.wk = DTensor(rng.normal(0.0, std, (d_model, d_model)), name=f"{name}.wk")
        self.wv = DTensor(rng.normal(0.0, std, (d_model, d_model)), name=f"{name}.wv")

    def params(self):
        return {p.name: p for p in (self.wq, self.wk, self.wv)}


def _split_heads(x, n_heads, d_head):
    # (..., n, C) -> (..., h, n, dh)
    lead = x.shape[:-2]
    n = x.shape[-2]
    x = tz.reshape(x, lead + (n, n_heads, d_head))
    perm = tuple(range(len(lead))) + (len(lead) + 1, len(lead), len(lead) + 2)
    return tz.transpose(x, perm)


def _merge_heads(x):
    # (..., h, n, dh) -> (..., n, h*dh)
    lead = x.shape[:-3]
    h, n, dh = x.shape[-3:]
    perm = tuple(range(len(lead))) + (len(lead) + 1, len(lead), len(lead) + 2)
    return tz.reshape(tz.transpose(x, perm), lead + (n, h * dh))


def attend(site, query, context, mask=None):
    """Attention of `query` rows over `context` rows.

    query (..., n, C), context (..., m, C); leading dims must broadcast.
    mask, when given, is an additive score offset broadcastable to
    (..., n, m): 0 keeps a pair, -inf removes it (exactly, including its
    gradient). Returns (output (..., n, C), weights (..., [h,] n, m)).
    """
    if query.shape[-1] != site.d_model or context.shape[-1] != site.d_model:
        raise ShapeError(
            f"attend[{site.name}]: expected width {site.d_model}, got query "
            f"{query.shape} context {context.shape}")
    q = tz.matmul(query, site.wq)
    k = tz.matmul(context, site.wk)
    v = tz.matmul(context, site.wv)
    if site.n_heads > 1:
        q = _split_heads(q, site.n_heads, site.d_head)
        k = _split_heads(k, site.n_heads, site.d_head)
        v = _split_heads(v, site.n_heads, site.d_head)
    scores = tz.scale(tz.matmul(q, tz.transpose(k)), 1.0 / math.sqrt(site.d_head))
    if mask is not None:
        m = mask.data if isinstance(mask, DTensor) else np.asarray(mask, dtype=np.float64)
        if site.n_heads > 1 and m.ndim >= 2:
            m = m[..., None, :, :] if m.ndim == scores.ndim - 1 else m
        scores = tz.add(scores, DTensor(m))
    weights = tz.softmax_lastdim(scores)
    out = tz.matmul(weights, v)
    if site.n_heads > 1:
        out = _merge_heads(out)
    return out, weights


def self_attend(site, x, mask=None):
    """Attention of a sequence over itself."""
    return attend(site, x, x, mask=mask)


def cross_attend(site, query, context, mask=None):
    """Attention of one sequence over another."""
    return attend(site, query, context, mask=mask)


def causal_mask(n):
    """(n, n) additive mask: row i may look at columns 0..i."""
    m = np.zeros((n, n))
    m[np.triu_indices(n, k=1)] = -np.inf
    return m
