"""Softmax, kernelized, and mixed token-mixing primitives.

All functions take pre-projected queries/keys/values shaped `(n, d)` or
`(batch, n, d)` (DenseArray or ndarray) and are differentiable through the
gradient engine. The quadratic path materializes an `n x n` weight matrix;
the linear path exploits associativity,

    out_i = phi(q_i) (sum_j phi(k_j) v_j^T) / (phi(q_i) . sum_j phi(k_j)),

which never forms the `n x n` matrix and costs O(n d^2).
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .grad_engine import (DenseArray, ShapeError, as_dense, clip, concat_last,
                          matmul, neg, softmax_last, sum_, transpose)

DENOM_GUARD = 1e-6


def softmax_attention(q, k, v, scale: str = "sqrt") -> DenseArray:
    """Quadratic softmax attention.

    `scale` selects the logit divisor: "sqrt" uses sqrt(d) (the standalone
    convention), "dim" uses d itself (the convention the mixed layer pairs
    with its linear branch).
    """
    q, k, v = as_dense(q), as_dense(k), as_dense(v)
    d = q.shape[-1]
    if scale == "sqrt":
        divisor = math.sqrt(d)
    elif scale == "dim":
        divisor = float(d)
    else:
        raise ValueError(f"softmax_attention: unknown scale {scale!r}")
    logits = matmul(q, transpose(k)) * (1.0 / divisor)
    return matmul(softmax_last(logits), v)


def hedgehog_feature_map(x, w) -> DenseArray:
    """phi(x) = softmax(x w) ++ softmax(-x w), concatenated on the last axis.

    x: (..., n, d), w: (d, m) -> (..., n, 2m). Entries are strictly positive
    and each output row sums to exactly 2 (two softmaxes).
    """
    x, w = as_dense(x), as_dense(w)
    if x.shape[-1] != w.shape[0]:
        raise ShapeError(f"hedgehog_feature_map: x last dim {x.shape[-1]} "
                         f"!= w first dim {w.shape[0]}")
    z = matmul(x, w)
    return concat_last(softmax_last(z), softmax_last(neg(z)))


def kernel_quadratic_attention(fq, fk, v) -> DenseArray:
    """O(n^2) reference: weights fq fk^T, normalized per query row.

    Oracle for `linear_attention` — mathematically identical output, computed
    the slow explicit way (and without the denominator guard).
    """
    fq, fk, v = as_dense(fq), as_dense(fk), as_dense(v)
    a = matmul(fq, transpose(fk))
    return matmul(a, v) / sum_(a, axis=-1, keepdims=True)


def linear_attention(fq, fk, v, guard: float = DENOM_GUARD) -> DenseArray:
    """Associativity-ordered attention over feature-mapped q/k: O(n d^2).

    `guard` is added to the per-query normalizer; with positive feature maps
    (e.g. hedgehog) the normalizer is bounded below by n * min-entry, so the
    guard only matters for adversarially tiny features.
    """
    fq, fk, v = as_dense(fq), as_dense(fk), as_dense(v)
    kv = matmul(transpose(fk), v)                     # (..., m, d_v)
    ksum = sum_(fk, axis=-2, keepdims=True)           # (..., 1, m)
    numer = matmul(fq, kv)                            # (..., n, d_v)
    denom = sum_(fq * ksum, axis=-1, keepdims=True) + guard
    return numer / denom


def mixed_attention(q, k, v, hh_wq, hh_wk, r) -> DenseArray:
    """Convex blend of a softmax branch and a hedgehog linear branch.

    r is a scalar selection score, clipped to [0, 1] before use (gradients
    pass at the boundary). The softmax branch uses the `dim` logit divisor so
    the two branches see comparably scaled similarities.
    """
    r = clip(as_dense(r), 0.0, 1.0)
    soft = softmax_attention(q, k, v, scale="dim")
    lin = linear_attention(hedgehog_feature_map(q, hh_wq),
                           hedgehog_feature_map(k, hh_wk), v)
    return r * soft + (1.0 - r) * lin


@dataclass
class AttentionParams:
    """Per-layer projection weights plus the hedgehog feature matrices."""

    w_q: DenseArray
    w_k: DenseArray
    w_v: DenseArray
    hh_wq: DenseArray
    hh_wk: DenseArray


def init_hedgehog(rng: np.random.Generator, d: int, dtype=np.float32) -> np.ndarray:
    """Orthogonalized random (d, d/2) matrix, scaled by 1/sqrt(d)."""
    if d % 2 != 0:
        raise ValueError(f"init_hedgehog: head dim must be even, got {d}")
    base = rng.standard_normal((d, d // 2))
    ortho, _ = np.linalg.qr(base)
    return (ortho / math.sqrt(d)).astype(dtype)
