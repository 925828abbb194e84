"""Contrastive objectives over scoring-head outputs.

Every ``*_with_grad`` function returns the batch loss together with its
gradient w.r.t. the scores it was given, so the trainer can chain it into
the model's backward pass.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .numeric import logsumexp, sigmoid, softmax, softplus

LOSS_KINDS = ("xsample", "ysample", "softmax_ce", "jsd")


@dataclass
class LossConfig:
    kind: str = "xsample"
    n_neg: int = 8
    temperature: float = 1.0

    def __post_init__(self):
        if self.kind not in LOSS_KINDS:
            raise ValueError(f"unknown loss kind {self.kind!r}; expected one of {LOSS_KINDS}")
        if self.n_neg < 1:
            raise ValueError("n_neg must be >= 1")
        if not self.temperature > 0:
            raise ValueError("temperature must be positive")

    @property
    def regime(self) -> str:
        """Negative-sampling regime used to build pairs for this loss."""
        if self.kind == "ysample":
            return "ysample"
        if self.kind == "softmax_ce":
            return "all_classes"
        return "xsample"


def infonce(f_pos, f_neg) -> float:
    """Mean over anchors of -log(e^pos / (e^pos + sum_j e^neg_j)).

    ``f_pos`` is (K,) or scalar and ``f_neg`` is (K, n_neg) or (n_neg,).
    """
    return infonce_with_grad(f_pos, f_neg)[0]


def infonce_with_grad(f_pos, f_neg):
    f_pos = np.atleast_1d(np.asarray(f_pos, dtype=np.float64))
    f_neg = np.asarray(f_neg, dtype=np.float64)
    if f_neg.ndim == 1:
        f_neg = f_neg[None, :]
    if f_neg.shape[-1] == 0:
        raise ValueError("infonce needs at least one negative")
    if f_neg.shape[0] != f_pos.shape[0]:
        raise ValueError(f"{f_pos.shape[0]} anchors but {f_neg.shape[0]} negative rows")
    logits = np.concatenate([f_pos[:, None], f_neg], axis=1)
    per = logsumexp(logits, axis=1) - f_pos
    K = f_pos.shape[0]
    p = softmax(logits, axis=1) / K
    return float(per.mean()), p[:, 0] - 1.0 / K, p[:, 1:]


def softplus_infonce_with_grad(s_pos, s_neg):
    """InfoNCE on softplus-wrapped raw scores; gradients are w.r.t. the raw scores."""
    s_pos = np.asarray(s_pos, dtype=np.float64)
    s_neg = np.asarray(s_neg, dtype=np.float64)
    loss, g_pos, g_neg = infonce_with_grad(softplus(s_pos), softplus(s_neg))
    return loss, g_pos * sigmoid(s_pos), g_neg * sigmoid(s_neg)


def softmax_ce(sim_row, true_idx, T: float = 1.0) -> float:
    """Cross-entropy of softmax(sim_row / T) against ``true_idx``; rows may be batched."""
    return softmax_ce_with_grad(sim_row, true_idx, T)[0]


def softmax_ce_with_grad(sim, true_idx, T: float = 1.0):
    if not T > 0:
        raise ValueError("temperature must be positive")
    sim = np.asarray(sim, dtype=np.float64)
    single = sim.ndim == 1
    sim = np.atleast_2d(sim)
    true_idx = np.atleast_1d(np.asarray(true_idx))
    n, c = sim.shape
    if np.any(true_idx < 0) or np.any(true_idx >= c):
        raise IndexError(f"true_idx out of range for {c} classes")
    z = sim / T
    rows = np.arange(n)
    loss = logsumexp(z, axis=1) - z[rows, true_idx]
    g = softmax(z, axis=1)
    g[rows, true_idx] -= 1.0
    g /= n * T
    return float(loss.mean()), (g[0] if single else g)


def jsd_mi(pos_scores, neg_scores) -> float:
    """Negative Jensen-Shannon mutual-information bound: mean softplus(-pos) + mean softplus(neg)."""
    return jsd_mi_with_grad(pos_scores, neg_scores)[0]


def jsd_mi_with_grad(pos_scores, neg_scores):
    pos = np.atleast_1d(np.asarray(pos_scores, dtype=np.float64))
    neg = np.atleast_1d(np.asarray(neg_scores, dtype=np.float64))
    if pos.size == 0 or neg.size == 0:
        raise ValueError("jsd_mi needs nonempty positive and negative scores")
    loss = np.mean(softplus(-pos)) + np.mean(softplus(neg))
    g_pos = -sigmoid(-pos) / pos.size
    g_neg = sigmoid(neg) / neg.size
    return float(loss), g_pos.reshape(np.shape(pos_scores)), g_neg.reshape(np.shape(neg_scores))
