"""scikit-learn wrapper around a trained in-context model."""
from __future__ import annotations

import numpy as np
from sklearn.base import BaseEstimator, ClassifierMixin
from sklearn.utils.multiclass import check_classification_targets
from sklearn.utils.validation import check_array, check_is_fitted, check_X_y

from .checkpoint import load_checkpoint
from .config import CapacityError
from .model import IclModel, predict


class DriftPFNClassifier(ClassifierMixin, BaseEstimator):
    """In-context classifier for data with temporal domain indices.

    ``fit`` only stores the labeled rows; all learning happened during prior
    fitting. Pass ``domains`` (one real index per row) to ``fit`` and to the
    prediction methods; without them every row sits in domain 0.

    Parameters
    ----------
    checkpoint : str or path, optional
        Checkpoint file to load the network from.
    model : IclModel, optional
        An already loaded network; takes precedence over ``checkpoint``.
    max_context : int, optional
        Cap on the number of stored rows fed as context.
    use_domains : bool
        If False, domain indices are replaced by a constant.
    random_state : int
        Seed of the context subsample.
    """

    def __init__(self, checkpoint=None, model=None, max_context=300, use_domains=True, random_state=0):
        self.checkpoint = checkpoint
        self.model = model
        self.max_context = max_context
        self.use_domains = use_domains
        self.random_state = random_state

    def _network(self) -> IclModel:
        if self.model is not None:
            return self.model
        if self.checkpoint is None:
            raise ValueError("set either `model` or `checkpoint`")
        return load_checkpoint(self.checkpoint)[0]

    def _domains(self, domains, n):
        if domains is None or not self.use_domains:
            return np.zeros(n)
        c = check_array(np.asarray(domains, dtype=float).reshape(-1, 1), ensure_2d=True).ravel()
        if len(c) != n:
            raise ValueError(f"got {len(c)} domain values for {n} rows")
        return c

    def fit(self, X, y, domains=None):
        X, y = check_X_y(X, y)
        check_classification_targets(y)
        self.network_ = self._network()
        self.classes_, encoded = np.unique(y, return_inverse=True)
        if len(self.classes_) > self.network_.max_classes:
            raise CapacityError(f"{len(self.classes_)} classes exceed model capacity {self.network_.max_classes}")
        if X.shape[1] > self.network_.max_features:
            raise CapacityError(f"{X.shape[1]} features exceed model capacity {self.network_.max_features}")
        self.n_features_in_ = X.shape[1]
        self.X_, self.y_ = X, encoded
        self.domains_ = self._domains(domains, len(X))
        return self

    def predict_proba(self, X, domains=None):
        check_is_fitted(self, "X_")
        X = check_array(X)
        if X.shape[1] != self.n_features_in_:
            raise ValueError(f"X has {X.shape[1]} features, expected {self.n_features_in_}")
        probs = predict(self.network_, self.X_, self.y_, self.domains_, X, self._domains(domains, len(X)),
                        max_context=self.max_context, seed=self.random_state)
        return probs[:, : len(self.classes_)]

    def predict(self, X, domains=None):
        return self.classes_[self.predict_proba(X, domains).argmax(axis=1)]

    def score(self, X, y, sample_weight=None, domains=None):
        from sklearn.metrics import accuracy_score

        return accuracy_score(y, self.predict(X, domains), sample_weight=sample_weight)
