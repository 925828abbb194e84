"""Small numeric kernel: stable nonlinearities, masked softmax, Adam, gradient checks."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Dict, Mapping, Tuple

import numpy as np

ParamDict = Dict[str, np.ndarray]


class EmptySupportError(ValueError):
    pass


def softplus(z):
    """log(1 + e^z) evaluated without overflow for large |z|."""
    z = np.asarray(z, dtype=np.float64)
    out = np.maximum(z, 0.0) + np.log1p(np.exp(-np.abs(z)))
    return out if out.ndim else float(out)


def sigmoid(z):
    z = np.asarray(z, dtype=np.float64)
    out = np.empty_like(z)
    pos = z >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-z[pos]))
    ez = np.exp(z[~pos])
    out[~pos] = ez / (1.0 + ez)
    return out if out.ndim else float(out)


def relu(z):
    return np.maximum(z, 0.0)


def softmax(v, axis: int = -1) -> np.ndarray:
    """Softmax along ``axis``; entries equal to -inf get weight exactly 0.

    Raises EmptySupportError if a slice along ``axis`` is entirely masked.
    """
    v = np.asarray(v, dtype=np.float64)
    vmax = np.max(v, axis=axis, keepdims=True)
    if np.any(np.isneginf(vmax)):
        raise EmptySupportError("empty support: every entry is masked")
    ex = np.exp(v - vmax)
    return ex / np.sum(ex, axis=axis, keepdims=True)


def logsumexp(v, axis: int = -1) -> np.ndarray:
    v = np.asarray(v, dtype=np.float64)
    vmax = np.max(v, axis=axis, keepdims=True)
    out = vmax + np.log(np.sum(np.exp(v - vmax), axis=axis, keepdims=True))
    return np.squeeze(out, axis=axis)


def l2_normalize(v, eps: float = 1e-12, axis: int = -1) -> np.ndarray:
    """Unit-normalize along ``axis``; slices with norm <= eps come back as zeros."""
    v = np.asarray(v, dtype=np.float64)
    norm = np.linalg.norm(v, axis=axis, keepdims=True)
    safe = np.where(norm > eps, norm, 1.0)
    return np.where(norm > eps, v / safe, 0.0)


# ---------------------------------------------------------------------------
# Adam
# ---------------------------------------------------------------------------


@dataclass
class AdamState:
    beta1: float = 0.9
    beta2: float = 0.999
    epsilon: float = 1e-8
    step: int = 0
    first_moment: ParamDict = field(default_factory=dict)
    second_moment: ParamDict = field(default_factory=dict)


def adam_step(params: ParamDict, grads: Mapping[str, np.ndarray], state: AdamState,
              lr: float) -> Tuple[ParamDict, AdamState]:
    """One bias-corrected Adam update. ``params`` and ``state`` are updated in place."""
    for name, g in grads.items():
        if name not in params:
            raise KeyError(f"gradient for unknown parameter block {name!r}")
        if g.shape != params[name].shape:
            raise ValueError(f"shape mismatch for {name!r}: {g.shape} vs {params[name].shape}")
        if not np.all(np.isfinite(g)):
            raise FloatingPointError(f"non-finite gradient in parameter block {name!r}")

    state.step += 1
    b1, b2, eps = state.beta1, state.beta2, state.epsilon
    corr1 = 1.0 - b1 ** state.step
    corr2 = 1.0 - b2 ** state.step
    for name, g in grads.items():
        m = state.first_moment.get(name)
        v = state.second_moment.get(name)
        if m is None:
            m = np.zeros_like(params[name])
            v = np.zeros_like(params[name])
        m = b1 * m + (1.0 - b1) * g
        v = b2 * v + (1.0 - b2) * g * g
        state.first_moment[name] = m
        state.second_moment[name] = v
        params[name] -= lr * (m / corr1) / (np.sqrt(v / corr2) + eps)
    return params, state


# ---------------------------------------------------------------------------
# Finite-difference checking
# ---------------------------------------------------------------------------


def grad_check(loss_fn: Callable[[ParamDict], float], grad_fn: Callable[[ParamDict], ParamDict],
               params: ParamDict, h: float = 1e-5) -> float:
    """Max relative error between ``grad_fn`` and central differences of ``loss_fn``.

    Each entry's error is divided by ``max(|analytic|, |numeric|, 1e-8)``.
    Entries missing from the analytic gradient count as zero. ``params`` is
    perturbed in place and restored before returning.
    """
    if not 1e-6 <= h <= 1e-3:
        raise ValueError(f"step h={h} outside [1e-6, 1e-3]")
    if not np.isfinite(loss_fn(params)):
        raise FloatingPointError("loss is not finite at the base point")
    analytic = grad_fn(params)

    worst = 0.0
    for name, p in params.items():
        flat = p.reshape(-1)
        a_flat = np.asarray(analytic.get(name, np.zeros_like(p))).reshape(-1)
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + h
            lp = loss_fn(params)
            flat[i] = orig - h
            lm = loss_fn(params)
            flat[i] = orig
            if not (np.isfinite(lp) and np.isfinite(lm)):
                raise FloatingPointError(f"loss is not finite while perturbing {name}[{i}]")
            num = (lp - lm) / (2.0 * h)
            denom = max(abs(a_flat[i]), abs(num), 1e-8)
            worst = max(worst, abs(a_flat[i] - num) / denom)
    return worst
