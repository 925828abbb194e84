"""Zero-shot inference over unseen classes, fold and tri-split reports, ablation drivers."""

from __future__ import annotations

import csv
import io
import json
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Dict, Iterable, List, Optional, Sequence

import numpy as np

from .data import EmbeddingSet, Fold, SemanticCodebook, SplitSpec, SyntheticWorldConfig, gen_synthetic_world
from .losses import LossConfig
from .mla import MlaModel, parse_k_schedule, score_matrix
from .trainer import TrainConfig, train


def predict(model: MlaModel, U, unseen: Sequence[int], codebook: SemanticCodebook) -> np.ndarray:
    """Highest-scoring unseen class for each row of ``U``; ties go to the lowest class id."""
    ids = sorted(int(c) for c in unseen)
    if not ids:
        raise ValueError("candidate class set is empty")
    U = np.atleast_2d(np.asarray(U, dtype=np.float64))
    scores = score_matrix(model, U, codebook, ids)
    return np.asarray(ids)[np.argmax(scores, axis=1)]


@dataclass
class FoldResult:
    accuracy: float
    confusion: np.ndarray
    classes: List[int]

    @property
    def per_class(self) -> Dict[int, float]:
        totals = self.confusion.sum(axis=1)
        return {c: (float(self.confusion[i, i] / totals[i]) if totals[i] else float("nan"))
                for i, c in enumerate(self.classes)}


def evaluate_fold(model: MlaModel, data: EmbeddingSet, fold: Fold,
                  codebook: SemanticCodebook) -> FoldResult:
    """Accuracy and confusion matrix over the fold's unseen classes only."""
    classes = sorted(int(c) for c in fold.unseen)
    U, y = data.select(classes)
    if U.shape[0] == 0:
        raise ValueError("no test samples for the fold's unseen classes")
    pred = predict(model, U, classes, codebook)
    pos = {c: i for i, c in enumerate(classes)}
    conf = np.zeros((len(classes), len(classes)), dtype=np.int64)
    for t, p in zip(y, pred):
        conf[pos[int(t)], pos[int(p)]] += 1
    return FoldResult(float(np.mean(pred == y)), conf, classes)


@dataclass
class EvalReport:
    folds: List[FoldResult]

    @property
    def fold_accuracies(self) -> List[float]:
        return [f.accuracy for f in self.folds]

    @property
    def mean_accuracy(self) -> float:
        return float(np.mean(self.fold_accuracies))

    def to_json(self) -> dict:
        return {
            "mean_accuracy": self.mean_accuracy,
            "folds": [{"accuracy": f.accuracy, "classes": f.classes,
                       "confusion": f.confusion.tolist(),
                       "per_class_accuracy": {str(c): a for c, a in f.per_class.items()}}
                      for f in self.folds],
        }

    def write(self, out_dir, prefix: str = "eval") -> None:
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        with open(out / f"{prefix}_report.json", "w") as fh:
            json.dump(self.to_json(), fh, indent=2, sort_keys=True)
        for i, f in enumerate(self.folds):
            with open(out / f"{prefix}_confusion_fold{i}.csv", "w", newline="") as fh:
                w = csv.writer(fh)
                w.writerow(["true\\pred"] + f.classes)
                for c, row in zip(f.classes, f.confusion):
                    w.writerow([c] + row.tolist())
        with open(out / f"{prefix}_per_class.csv", "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["fold", "class_id", "accuracy", "n_samples"])
            for i, f in enumerate(self.folds):
                totals = f.confusion.sum(axis=1)
                for (c, acc), n in zip(f.per_class.items(), totals):
                    w.writerow([i, c, repr(acc), int(n)])


def tri_split_evaluate(models: Sequence[MlaModel], data: EmbeddingSet, splits: SplitSpec,
                       codebook: SemanticCodebook) -> EvalReport:
    if len(models) != len(splits):
        raise ValueError(f"{len(models)} models for {len(splits)} folds")
    return EvalReport([evaluate_fold(m, data, splits.fold(i), codebook)
                       for i, m in enumerate(models)])


# ---------------------------------------------------------------------------
# Ablations
# ---------------------------------------------------------------------------


@dataclass
class Variant:
    """One ablation arm: overrides applied on top of a base training setup."""

    name: str
    loss: Optional[str] = None
    n_neg: Optional[int] = None
    aggregation: str = "topk"
    k_schedule: Optional[str] = None
    a_inv: Optional[bool] = None


PRESET_VARIANTS = {
    "xsample": Variant("xsample", loss="xsample", n_neg=8),
    "ysample": Variant("ysample", loss="ysample", n_neg=8),
    "single_avg": Variant("single_avg", aggregation="avg", k_schedule="1", a_inv=False),
    "single_att": Variant("single_att", k_schedule="1000", a_inv=False),
    "single_topk": Variant("single_topk", k_schedule="5", a_inv=False),
    "single_topk_ainv": Variant("single_topk_ainv", k_schedule="5", a_inv=True),
    "mla": Variant("mla"),
    "ainv_on": Variant("ainv_on", a_inv=True),
    "ainv_off": Variant("ainv_off", a_inv=False),
}


@dataclass
class AblationSetup:
    """Base model/training setup shared by all arms of an ablation."""

    k_schedule: str = "1,5,10"
    hidden: tuple = (64, 32)
    train: TrainConfig = field(default_factory=lambda: TrainConfig(
        epochs=100, batch_size=128, lr_max=1e-3, warmup_epochs=15))


@dataclass
class AblationTable:
    variants: List[str]
    seeds: List[int]
    accuracy: np.ndarray  # (n_variants, n_seeds)

    def mean(self, variant: str) -> float:
        return float(self.accuracy[self.variants.index(variant)].mean())

    def row(self, variant: str) -> np.ndarray:
        return self.accuracy[self.variants.index(variant)]

    def wins(self, better: str, worse: str, strict: bool = False) -> int:
        a, b = self.row(better), self.row(worse)
        return int(np.sum(a > b) if strict else np.sum(a >= b))

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf)
        w.writerow(["variant"] + [f"seed_{s}" for s in self.seeds] + ["mean"])
        for v, row in zip(self.variants, self.accuracy):
            w.writerow([v] + [f"{a:.4f}" for a in row] + [f"{row.mean():.4f}"])
        return buf.getvalue()


def _resolve(variants: Iterable) -> List[Variant]:
    out = []
    for v in variants:
        if isinstance(v, Variant):
            out.append(v)
        elif v in PRESET_VARIANTS:
            out.append(PRESET_VARIANTS[v])
        else:
            raise ValueError(f"unknown variant {v!r}; known: {sorted(PRESET_VARIANTS)}")
    if not out:
        raise ValueError("empty variant list")
    return out


def run_variant(variant: Variant, setup: AblationSetup, data: EmbeddingSet,
                codebook: SemanticCodebook, fold: Fold, seed: int) -> float:
    cfg = setup.train
    loss = LossConfig(variant.loss or cfg.loss.kind,
                      variant.n_neg or cfg.loss.n_neg, cfg.loss.temperature)
    a_inv = cfg.a_inv if variant.a_inv is None else variant.a_inv
    tcfg = replace(cfg, loss=loss, a_inv=a_inv, seed=seed)
    ks = parse_k_schedule(variant.k_schedule or setup.k_schedule)
    model = MlaModel.build(data.visual_dim, codebook.semantic_dim, ks, setup.hidden, seed=seed,
                           aggregation=variant.aggregation)
    trained, _ = train(model, data, codebook, fold, tcfg)
    return evaluate_fold(trained, data, fold, codebook).accuracy


def run_ablation(worlds, variants, setup: Optional[AblationSetup] = None) -> AblationTable:
    """Train and evaluate every variant on every world.

    ``worlds`` is a list of SyntheticWorldConfig, or of ``(data, codebook, fold)``
    triples. Synthetic worlds are evaluated on ``synthetic_fold(cfg)``.
    """
    vs = _resolve(variants)
    setup = setup or AblationSetup()
    prepared, seeds = [], []
    for i, w in enumerate(worlds):
        if isinstance(w, SyntheticWorldConfig):
            data, codebook, _ = gen_synthetic_world(w)
            prepared.append((data, codebook, synthetic_fold(w)))
            seeds.append(w.seed)
        else:
            prepared.append(tuple(w))
            seeds.append(i)
    acc = np.zeros((len(vs), len(prepared)))
    for j, (data, codebook, fold) in enumerate(prepared):
        for i, v in enumerate(vs):
            acc[i, j] = run_variant(v, setup, data, codebook, fold, seeds[j])
    return AblationTable([v.name for v in vs], seeds, acc)


AMBIGUOUS_WORLD = dict(n_classes=16, n_unseen=4, N_d=20, ambiguity_pairs=2, visual_noise=0.05)


def ambiguous_worlds(seeds: Iterable[int], **overrides) -> List[SyntheticWorldConfig]:
    """The seeded ambiguous worlds used for variant comparisons."""
    params = dict(AMBIGUOUS_WORLD, **overrides)
    return [SyntheticWorldConfig(seed=int(s), **params) for s in seeds]


def synthetic_fold(cfg: SyntheticWorldConfig) -> Fold:
    """Hold out the first ambiguous pair (if any) plus the highest class ids.

    The remaining pairs stay on the seen side, so training still has to
    separate near-identical classes.
    """
    paired = [0, 1] if cfg.ambiguity_pairs else []
    rest = [c for c in range(cfg.n_classes) if c not in paired]
    unseen = (paired + rest[::-1])[:cfg.n_unseen]
    seen = [c for c in range(cfg.n_classes) if c not in unseen]
    return Fold(sorted(seen), sorted(unseen))
