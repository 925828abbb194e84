"""Selective feature ensemble: top-k cross-attention of a visual query over description rows.

All functions accept a single query (1-D) or a batch stacked on the leading axis.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Optional

import numpy as np

from .numeric import softmax


@dataclass
class ProjectionLayer:
    W: np.ndarray  # (C_e, D)
    b: np.ndarray  # (C_e,)

    @classmethod
    def init(cls, D: int, C_e: int, rng: np.random.Generator) -> "ProjectionLayer":
        bound = 1.0 / math.sqrt(D)
        return cls(rng.uniform(-bound, bound, (C_e, D)), rng.uniform(-bound, bound, C_e))

    @property
    def in_dim(self) -> int:
        return self.W.shape[1]

    @property
    def out_dim(self) -> int:
        return self.W.shape[0]


@dataclass
class AttentionLogits:
    values: np.ndarray    # masked logits, -inf outside the selection
    selected: np.ndarray  # boolean mask, same shape as values

    @property
    def indices(self):
        if self.selected.ndim == 1:
            return np.flatnonzero(self.selected)
        return [np.flatnonzero(row) for row in self.selected]


def project(u, layer: ProjectionLayer) -> np.ndarray:
    u = np.asarray(u, dtype=np.float64)
    if u.shape[-1] != layer.in_dim:
        raise ValueError(f"visual dim {u.shape[-1]} does not match projection input {layer.in_dim}")
    return u @ layer.W.T + layer.b


def raw_attention(e_prime, u_hd) -> np.ndarray:
    """Scaled dot products ``e_prime @ u_hd / sqrt(C_e)``.

    ``e_prime`` is (N_d, C_e) or (B, N_d, C_e); ``u_hd`` is (C_e,) or (B, C_e).
    """
    e_prime = np.asarray(e_prime, dtype=np.float64)
    u_hd = np.asarray(u_hd, dtype=np.float64)
    c_e = e_prime.shape[-1]
    if u_hd.shape[-1] != c_e:
        raise ValueError(f"query dim {u_hd.shape[-1]} does not match description dim {c_e}")
    return np.einsum("...nc,...c->...n", e_prime, u_hd) / math.sqrt(c_e)


def select_topk(scores, k: int, inverted: bool = False, n_valid=None) -> AttentionLogits:
    """Keep the k largest scores (of the negated scores when ``inverted``), mask the rest with -inf.

    Ties go to the lowest index. ``k`` larger than the number of rows is
    clamped. ``n_valid`` (per row) marks trailing padding rows that can never
    be selected.
    """
    if k < 1:
        raise ValueError(f"k must be >= 1, got {k}")
    scores = np.asarray(scores, dtype=np.float64)
    squeeze = scores.ndim == 1
    z = np.atleast_2d(-scores if inverted else scores)
    n_rows, n_d = z.shape
    if n_valid is None:
        n_valid = np.full(n_rows, n_d)
    n_valid = np.broadcast_to(np.asarray(n_valid), (n_rows,))
    valid = np.arange(n_d)[None, :] < n_valid[:, None]
    key = np.where(valid, -z, np.inf)
    order = np.argsort(key, axis=1, kind="stable")
    ranks = np.empty_like(order)
    np.put_along_axis(ranks, order, np.broadcast_to(np.arange(n_d), order.shape), axis=1)
    k_eff = np.minimum(k, n_valid)
    selected = ranks < k_eff[:, None]
    values = np.where(selected, z, -np.inf)
    if squeeze:
        return AttentionLogits(values[0], selected[0])
    return AttentionLogits(values, selected)


def attention_weights(logits: AttentionLogits) -> np.ndarray:
    return softmax(logits.values, axis=-1)


def aggregate(e_prime, logits: AttentionLogits) -> np.ndarray:
    """Convex combination of description rows weighted by softmax of the masked logits."""
    w = attention_weights(logits)
    return np.einsum("...n,...nc->...c", w, np.asarray(e_prime, dtype=np.float64))


def average_rows(e_prime, n_valid=None) -> np.ndarray:
    """Uniform mean of the (valid) description rows; the attention-free baseline."""
    e_prime = np.asarray(e_prime, dtype=np.float64)
    if n_valid is None:
        return e_prime.mean(axis=-2)
    n_d = e_prime.shape[-2]
    mask = (np.arange(n_d)[None, :] < np.asarray(n_valid)[:, None]).astype(np.float64)
    return np.einsum("bn,bnc->bc", mask / mask.sum(axis=1, keepdims=True), e_prime)


def compose_motion(e, m: Optional[np.ndarray]) -> np.ndarray:
    e = np.asarray(e, dtype=np.float64)
    if m is None:
        return e
    m = np.asarray(m, dtype=np.float64)
    if m.shape[-1] != e.shape[-1]:
        raise ValueError(f"motion dim {m.shape[-1]} does not match semantic dim {e.shape[-1]}")
    return e + m
