"""scikit-learn style wrapper around the multi-branch aligner."""

from __future__ import annotations

import numpy as np
from sklearn.base import BaseEstimator, ClassifierMixin
from sklearn.utils.validation import check_array, check_is_fitted, check_X_y

from .data import EmbeddingSet, Fold, SemanticCodebook
from .losses import LossConfig
from .mla import MlaModel, parse_k_schedule, score_matrix
from .numeric import l2_normalize
from .trainer import TrainConfig, train


class ZeroShotAligner(ClassifierMixin, BaseEstimator):
    """Zero-shot classifier scoring (visual feature, class descriptions) pairs.

    ``fit(X, y)`` trains on the classes present in ``y``; ``predict`` then
    ranks the codebook classes that were *not* seen during fit, unless an
    explicit candidate list is passed.

    Parameters
    ----------
    codebook : SemanticCodebook
        Description embeddings for every class that may appear in ``y`` or
        be predicted.
    k_schedule : str or list of int
        One branch per k, e.g. ``"1_60_5"`` or ``"1,5,10"``.
    hidden : tuple of int
        Hidden widths of each branch's scoring head.
    loss : {"xsample", "ysample", "softmax_ce", "jsd"}
    aggregation : {"topk", "avg"}
        ``"avg"`` replaces attention with the uniform mean of descriptions.
    """

    def __init__(self, codebook=None, k_schedule="1_15_5", hidden=(1024, 512), epochs=100,
                 batch_size=128, lr=1e-5, warmup_epochs=15, a_inv=True, n_ep=None,
                 loss="xsample", n_neg=8, temperature=1.0, aggregation="topk", random_state=0):
        self.codebook = codebook
        self.k_schedule = k_schedule
        self.hidden = hidden
        self.epochs = epochs
        self.batch_size = batch_size
        self.lr = lr
        self.warmup_epochs = warmup_epochs
        self.a_inv = a_inv
        self.n_ep = n_ep
        self.loss = loss
        self.n_neg = n_neg
        self.temperature = temperature
        self.aggregation = aggregation
        self.random_state = random_state

    def _train_config(self) -> TrainConfig:
        return TrainConfig(epochs=self.epochs, batch_size=self.batch_size, lr_max=self.lr,
                           warmup_epochs=self.warmup_epochs, a_inv=self.a_inv, n_ep=self.n_ep,
                           loss=LossConfig(self.loss, self.n_neg, self.temperature),
                           seed=self.random_state)

    def fit(self, X, y):
        if not isinstance(self.codebook, SemanticCodebook):
            raise TypeError("codebook must be a SemanticCodebook")
        X, y = check_X_y(X, y, dtype=np.float64)
        y = y.astype(np.int64)
        unknown = sorted(set(y.tolist()) - set(self.codebook.class_ids))
        if unknown:
            raise ValueError(f"labels not in codebook: {unknown}")
        data = EmbeddingSet([str(i) for i in range(len(y))], y, X)
        seen = sorted(set(y.tolist()))
        model = MlaModel.build(X.shape[1], self.codebook.semantic_dim,
                               parse_k_schedule(self.k_schedule), tuple(self.hidden),
                               seed=self.random_state, aggregation=self.aggregation)
        unseen = [c for c in self.codebook.class_ids if c not in seen]
        self.model_, self.report_ = train(model, data, self.codebook, Fold(seen, unseen),
                                          self._train_config())
        self.seen_classes_ = np.asarray(seen)
        self.classes_ = np.asarray(unseen or self.codebook.class_ids)
        self.n_features_in_ = X.shape[1]
        return self

    def decision_function(self, X, classes=None):
        """Ensemble scores, shape (n_samples, n_candidates), columns in ascending class id."""
        check_is_fitted(self, "model_")
        X = l2_normalize(check_array(X, dtype=np.float64))
        ids = self.classes_ if classes is None else np.asarray(sorted(classes))
        return score_matrix(self.model_, X, self.codebook, [int(c) for c in ids])

    def predict(self, X, classes=None):
        check_is_fitted(self, "model_")
        ids = self.classes_ if classes is None else np.asarray(sorted(classes))
        return ids[np.argmax(self.decision_function(X, ids), axis=1)]
