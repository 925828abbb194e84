"""Contrastive training loop: negative sampling, warmup + cosine schedule, attention inversion, Adam."""

from __future__ import annotations

import json
import logging
import math
import time
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import List, Optional, Sequence

import numpy as np

from .data import EmbeddingSet, Fold, SemanticCodebook
from .losses import (LossConfig, jsd_mi_with_grad, softmax_ce_with_grad,
                     softplus_infonce_with_grad)
from .mla import ClassStack, MlaModel, model_backward, model_forward, save_checkpoint
from .numeric import AdamState, adam_step

log = logging.getLogger(__name__)


class InsufficientNegativesError(ValueError):
    pass


class TrainingError(RuntimeError):
    pass


@dataclass
class TrainConfig:
    epochs: int = 100
    batch_size: int = 128
    lr_max: float = 1e-5
    warmup_epochs: int = 15
    a_inv: bool = True
    n_ep: Optional[int] = None
    loss: LossConfig = field(default_factory=LossConfig)
    seed: int = 0
    checkpoint_every_epoch: bool = False

    def __post_init__(self):
        if isinstance(self.loss, dict):
            self.loss = LossConfig(**self.loss)
        if self.n_ep is None:
            self.n_ep = self.warmup_epochs
        if self.epochs < 1 or self.batch_size < 1:
            raise ValueError("epochs and batch_size must be >= 1")
        if not 0 <= self.warmup_epochs <= self.epochs:
            raise ValueError("warmup_epochs must be in [0, epochs]")
        if not 0 <= self.n_ep <= self.epochs:
            raise ValueError("n_ep must be in [0, epochs]")
        if self.lr_max < 0:
            raise ValueError("lr_max must be nonnegative")

    def inverted_at(self, epoch: int) -> bool:
        return bool(self.a_inv and epoch < self.n_ep)

    def to_json(self) -> dict:
        return asdict(self)

    @classmethod
    def from_json(cls, obj: dict) -> "TrainConfig":
        known = {f for f in cls.__dataclass_fields__}
        return cls(**{k: v for k, v in obj.items() if k in known})


@dataclass
class EpochRecord:
    epoch: int
    loss: float
    lr: float
    a_inv_active: bool


@dataclass
class TrainReport:
    epochs: List[EpochRecord] = field(default_factory=list)
    wall_time: float = 0.0
    checkpoint: Optional[str] = None

    @property
    def losses(self) -> List[float]:
        return [r.loss for r in self.epochs]

    def to_json(self, include_wall_time: bool = True) -> dict:
        out = {"epochs": [asdict(r) for r in self.epochs], "checkpoint": self.checkpoint}
        if include_wall_time:
            out["wall_time"] = self.wall_time
        return out

    def write_csv(self, path) -> None:
        with open(path, "w") as fh:
            fh.write("epoch,loss,lr,a_inv_active\n")
            for r in self.epochs:
                fh.write(f"{r.epoch},{r.loss!r},{r.lr!r},{int(r.a_inv_active)}\n")


# ---------------------------------------------------------------------------
# Schedule
# ---------------------------------------------------------------------------


def _warmup_lr(epoch: float, cfg: TrainConfig) -> float:
    return cfg.lr_max * epoch / cfg.warmup_epochs


def _cosine_lr(epoch: float, cfg: TrainConfig) -> float:
    span = cfg.epochs - cfg.warmup_epochs
    if span <= 0:
        return cfg.lr_max
    return cfg.lr_max * 0.5 * (1.0 + math.cos(math.pi * (epoch - cfg.warmup_epochs) / span))


def lr_at(epoch: float, cfg: TrainConfig) -> float:
    """Linear ramp from 0 over the warmup epochs, cosine annealing afterwards."""
    if epoch < cfg.warmup_epochs:
        return _warmup_lr(epoch, cfg)
    return _cosine_lr(epoch, cfg)


# ---------------------------------------------------------------------------
# Negative sampling
# ---------------------------------------------------------------------------


def sample_negatives(labels: np.ndarray, regime: str, n_neg: int, rng: np.random.Generator,
                     seen_classes: Optional[Sequence[int]] = None) -> np.ndarray:
    """Draw negatives for every anchor of a batch, without replacement.

    ``xsample``: returns (B, n_neg) batch positions of samples from other classes;
    each negative pair is (u_j, semantics of the anchor's class).
    ``ysample``: returns (B, n_neg) class ids different from the anchor's class;
    each negative pair is (u_i, semantics of class_j).
    """
    labels = np.asarray(labels)
    B = labels.shape[0]
    out = np.empty((B, n_neg), dtype=np.int64)
    if regime == "xsample":
        for i in range(B):
            pool = np.flatnonzero(labels != labels[i])
            if pool.size < n_neg:
                raise InsufficientNegativesError(
                    f"insufficient negative pool: {pool.size} other-class samples, need {n_neg}")
            out[i] = rng.choice(pool, size=n_neg, replace=False)
    elif regime == "ysample":
        if seen_classes is None:
            raise ValueError("ysample needs the seen class list")
        classes = np.asarray(sorted(seen_classes))
        for i in range(B):
            pool = classes[classes != labels[i]]
            if pool.size < n_neg:
                raise InsufficientNegativesError(
                    f"insufficient negative pool: {pool.size} other classes, need {n_neg}")
            out[i] = rng.choice(pool, size=n_neg, replace=False)
    else:
        raise ValueError(f"unknown sampling regime {regime!r}")
    return out


# ---------------------------------------------------------------------------
# One batch
# ---------------------------------------------------------------------------


def batch_loss_and_grads(model: MlaModel, U: np.ndarray, labels: np.ndarray, stack: ClassStack,
                         loss_cfg: LossConfig, inverted: bool, rng: np.random.Generator):
    """Loss for one batch and gradients w.r.t. all model parameters."""
    B, n_neg = U.shape[0], loss_cfg.n_neg
    anchor_cls = stack.index(labels)
    regime = loss_cfg.regime

    if regime == "all_classes":
        n_cls = len(stack.class_ids)
        rows = np.repeat(U, n_cls, axis=0)
        cls_idx = np.tile(np.arange(n_cls), B)
        s, caches = model_forward(model, rows, cls_idx, stack, inverted)
        loss, g = softmax_ce_with_grad(s.reshape(B, n_cls), anchor_cls, loss_cfg.temperature)
        return loss, model_backward(model, caches, g.reshape(-1))

    if regime == "xsample":
        neg = sample_negatives(labels, "xsample", n_neg, rng)
        neg_rows = U[neg.reshape(-1)]
        neg_cls = np.repeat(anchor_cls, n_neg)
    else:
        neg = sample_negatives(labels, "ysample", n_neg, rng, stack.class_ids)
        neg_rows = np.repeat(U, n_neg, axis=0)
        neg_cls = stack.index(neg.reshape(-1))
    rows = np.concatenate([U, neg_rows])
    cls_idx = np.concatenate([anchor_cls, neg_cls])
    s, caches = model_forward(model, rows, cls_idx, stack, inverted)
    s_pos, s_neg = s[:B], s[B:].reshape(B, n_neg)
    if loss_cfg.kind == "jsd":
        loss, g_pos, g_neg = jsd_mi_with_grad(s_pos, s_neg)
    else:
        loss, g_pos, g_neg = softplus_infonce_with_grad(s_pos, s_neg)
    ds = np.concatenate([g_pos, g_neg.reshape(-1)])
    return loss, model_backward(model, caches, ds)


# ---------------------------------------------------------------------------
# Training loop
# ---------------------------------------------------------------------------


def train(model: MlaModel, data: EmbeddingSet, codebook: SemanticCodebook, fold: Fold,
          cfg: TrainConfig, checkpoint_dir=None):
    """Train a copy of ``model`` on the fold's seen classes. Returns ``(model, TrainReport)``.

    Only seen-class samples and seen-class codebook entries are ever read.
    """
    seen = sorted(int(c) for c in fold.seen)
    if set(seen) & set(int(c) for c in fold.unseen):
        raise ValueError("fold seen and unseen sets overlap")
    U, labels = data.select(seen)
    if U.shape[0] == 0:
        raise ValueError("no training samples for the seen classes")
    if U.shape[1] != model.D:
        raise ValueError(f"data visual dim {U.shape[1]} != model D {model.D}")
    present = sorted(set(int(c) for c in labels))
    stack = ClassStack.from_codebook(codebook.restrict(seen), seen)
    if stack.desc.shape[2] != model.C_e:
        raise ValueError(f"codebook semantic dim {stack.desc.shape[2]} != model C_e {model.C_e}")
    if cfg.loss.regime == "ysample" and len(seen) - 1 < cfg.loss.n_neg:
        raise InsufficientNegativesError(
            f"insufficient negative pool: {len(seen) - 1} other seen classes, need {cfg.loss.n_neg}")
    if cfg.loss.regime == "xsample" and len(present) < 2:
        raise InsufficientNegativesError("insufficient negative pool: only one seen class has samples")

    model = model.copy()
    model.a_inv_until = cfg.n_ep if cfg.a_inv else 0
    params = model.params()
    state = AdamState()
    rng = np.random.default_rng(cfg.seed)
    n = U.shape[0]
    n_batches = max(1, math.ceil(n / cfg.batch_size))
    report = TrainReport()
    t0 = time.perf_counter()

    for epoch in range(cfg.epochs):
        lr = lr_at(epoch, cfg)
        inverted = cfg.inverted_at(epoch)
        order = rng.permutation(n)
        losses = []
        for b, idx in enumerate(np.array_split(order, n_batches)):
            loss, grads = batch_loss_and_grads(model, U[idx], labels[idx], stack, cfg.loss,
                                               inverted, rng)
            if not np.isfinite(loss):
                raise TrainingError(f"non-finite loss at epoch {epoch}, batch {b}")
            adam_step(params, grads, state, lr)
            losses.append(loss)
        report.epochs.append(EpochRecord(epoch, float(np.mean(losses)), lr, inverted))
        log.debug("epoch %d loss %.6f lr %.3g inverted %s", epoch, report.epochs[-1].loss, lr, inverted)
        if checkpoint_dir is not None and cfg.checkpoint_every_epoch:
            save_checkpoint(model, Path(checkpoint_dir) / f"epoch_{epoch:03d}")

    report.wall_time = time.perf_counter() - t0
    if checkpoint_dir is not None:
        report.checkpoint = str(save_checkpoint(model, checkpoint_dir).parent)
    return model, report


def write_report(report: TrainReport, out_dir) -> None:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    body = report.to_json(include_wall_time=False)
    if report.checkpoint is not None:
        # relative paths keep reports byte-identical across output locations
        ckpt = Path(report.checkpoint).resolve()
        if ckpt.is_relative_to(out.resolve()):
            body["checkpoint"] = str(ckpt.relative_to(out.resolve()))
    with open(out / "train_report.json", "w") as fh:
        json.dump(body, fh, indent=2, sort_keys=True)
    report.write_csv(out / "train_epochs.csv")
