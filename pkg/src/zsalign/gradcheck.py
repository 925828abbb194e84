"""Randomized finite-difference checks of the hand-written backward pass."""

from __future__ import annotations

from dataclasses import dataclass
from typing import List

import numpy as np

from .losses import jsd_mi_with_grad, softmax_ce_with_grad, softplus_infonce_with_grad
from .mla import ClassStack, MlaModel, model_backward, model_forward
from .numeric import grad_check, l2_normalize

# Instances closer than this to a ReLU hinge or a top-k boundary are redrawn:
# central differences across a kink measure the jump, not the derivative.
KINK_MARGIN = 1e-3


@dataclass
class GradInstance:
    model: MlaModel
    U: np.ndarray
    cls_idx: np.ndarray
    stack: ClassStack
    inverted: bool
    n_anchor: int
    n_neg: int
    loss_kind: str = "xsample"

    def _scores(self):
        return model_forward(self.model, self.U, self.cls_idx, self.stack, self.inverted)

    def _loss_grad(self, s):
        K, n = self.n_anchor, self.n_neg
        if self.loss_kind == "softmax_ce":
            n_cls = len(self.stack.class_ids)
            loss, g = softmax_ce_with_grad(s.reshape(K, n_cls), np.arange(K) % n_cls, 0.5)
            return loss, g.reshape(-1)
        fn = jsd_mi_with_grad if self.loss_kind == "jsd" else softplus_infonce_with_grad
        loss, gp, gn = fn(s[:K], s[K:].reshape(K, n))
        return loss, np.concatenate([gp, gn.reshape(-1)])

    def loss(self, params=None) -> float:
        return self._loss_grad(self._scores()[0])[0]

    def grads(self, params=None):
        s, caches = self._scores()
        return model_backward(self.model, caches, self._loss_grad(s)[1])

    def kink_distance(self) -> float:
        """Smallest distance of any ReLU input or top-k boundary from its switching point."""
        dist = np.inf
        for br, cache in zip(self.model.branches, self._scores()[1]):
            _, groups, stack, inverted, A, X, Z1, A1, Z2, A2 = cache
            dist = min(dist, np.abs(Z1).min(), np.abs(Z2).min())
            if A is None or br.k >= stack.desc.shape[1]:
                continue
            H = self.U @ br.projection.W.T + br.projection.b
            for c, idx in groups:
                r = H[idx] @ stack.desc[c].T / np.sqrt(stack.desc.shape[2])
                r = -r if inverted else r
                top = -np.sort(-r, axis=1)
                dist = min(dist, np.min(top[:, br.k - 1] - top[:, br.k]))
        return float(dist)


def random_instance(seed: int, C_e: int = 16, D: int = 8, N_d: int = 8, k: int = 3, n_neg: int = 4,
                    n_anchor: int = 1, hidden=(16, 8), n_branches: int = 1, loss: str = "xsample",
                    inverted=None) -> GradInstance:
    """A small random branch-loss instance at least KINK_MARGIN away from every kink."""
    ss = np.random.SeedSequence(seed)
    for attempt in ss.spawn(1000):
        rng = np.random.default_rng(attempt)
        inv = bool(rng.integers(2)) if inverted is None else inverted
        model = MlaModel.build(D, C_e, [k + i for i in range(n_branches)], hidden,
                               seed=int(rng.integers(2 ** 31)))
        n_cls = max(2, n_anchor)
        desc = l2_normalize(rng.standard_normal((n_cls, N_d, C_e)))
        motion = l2_normalize(rng.standard_normal((n_cls, C_e)))
        stack = ClassStack(list(range(n_cls)), desc, np.full(n_cls, N_d), motion)
        anchors = np.arange(n_anchor) % n_cls
        if loss == "softmax_ce":
            U = np.repeat(l2_normalize(rng.standard_normal((n_anchor, D))), n_cls, axis=0)
            cls_idx = np.tile(np.arange(n_cls), n_anchor)
        else:
            U = l2_normalize(rng.standard_normal((n_anchor * (1 + n_neg), D)))
            cls_idx = np.concatenate([anchors, np.repeat(anchors, n_neg)])
        inst = GradInstance(model, U, cls_idx, stack, inv, n_anchor, n_neg, loss)
        if inst.kink_distance() >= KINK_MARGIN:
            return inst
    raise RuntimeError(f"no kink-free instance found for seed {seed}")


def run_suite(n_seeds: int = 100, h: float = 1e-4, first_seed: int = 0, **kwargs) -> List[float]:
    """Max relative gradient error for each of ``n_seeds`` random instances."""
    errors = []
    for seed in range(first_seed, first_seed + n_seeds):
        inst = random_instance(seed, **kwargs)
        errors.append(grad_check(inst.loss, inst.grads, inst.model.params(), h))
    return errors
