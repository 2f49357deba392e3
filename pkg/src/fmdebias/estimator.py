"""scikit-learn compatible front end for the convex head."""

from __future__ import annotations

import numpy as np
from sklearn.base import BaseEstimator, ClassifierMixin
from sklearn.utils.multiclass import check_classification_targets
from sklearn.utils.validation import check_is_fitted, validate_data

from .dataset import CounterfactualSet, Dataset
from .exceptions import InputError
from .model import FeatureMap, TrainConfig, hessian, predict_proba, train_head
from .unlearn import UnlearnConfig, run_fmd


class HeadClassifier(ClassifierMixin, BaseEstimator):
    """L2-regularized softmax head with Newton training.

    Parameters
    ----------
    l2 : float
        Ridge strength on the weights; intercepts are not penalized.
    feature_map : FeatureMap or None
        Frozen map applied before the head. ``None`` uses the raw features.
    attribute_column : int or None
        Column of ``X`` holding the integer protected attribute. It is split off
        from the features and handed to the feature map, which decides whether
        the head sees it.
    max_iters, grad_tol, optimizer, random_state
        Forwarded to the trainer.

    Notes
    -----
    ``sample_weight`` rescales each row's loss while the ridge share stays tied
    to the row count, so a zero weight is not the same as dropping the row
    (the ridge penalty per sample is ``l2 / (2 n)`` with ``n`` the rows passed).
    """

    def __init__(self, l2=0.01, feature_map=None, attribute_column=None, max_iters=100,
                 grad_tol=1e-10, optimizer="newton", random_state=0):
        self.l2 = l2
        self.feature_map = feature_map
        self.attribute_column = attribute_column
        self.max_iters = max_iters
        self.grad_tol = grad_tol
        self.optimizer = optimizer
        self.random_state = random_state

    def _split(self, X):
        if self.attribute_column is None:
            return X, np.zeros(len(X), dtype=np.int64)
        col = self.attribute_column
        a = X[:, col]
        if not np.all(a == np.round(a)) or np.any(a < 0):
            raise InputError("attribute column must hold non-negative integer codes")
        return np.delete(X, col, axis=1), a.astype(np.int64)

    def _dataset(self, X, y_codes):
        feats, attrs = self._split(X)
        n_attr = max(self.n_attribute_values_, int(attrs.max(initial=0)) + 1)
        return Dataset(feats, attrs, y_codes, max(2, len(self.classes_)), n_attr)

    def fit(self, X, y, sample_weight=None):
        X, y = validate_data(self, X, y, dtype=float)
        check_classification_targets(y)
        self.classes_, codes = np.unique(y, return_inverse=True)
        if len(self.classes_) < 2:
            raise ValueError(f"need samples of at least two classes, got 1 class ({self.classes_[0]!r})")
        _, attrs = self._split(X)
        fmap = self.feature_map or FeatureMap()
        self.n_attribute_values_ = max(int(attrs.max(initial=0)) + 1, fmap.n_attribute_values, 1)
        data = self._dataset(X, codes)
        config = TrainConfig(self.max_iters, self.grad_tol, self.random_state, self.optimizer)
        self.head_ = train_head(data, config, l2=self.l2, feature_map=fmap,
                                sample_weight=sample_weight, n_classes=len(self.classes_))
        self._train = data
        self._weight = sample_weight
        return self

    def _check(self, X):
        check_is_fitted(self, "head_")
        return validate_data(self, X, dtype=float, reset=False)

    def predict_proba(self, X):
        X = self._check(X)
        return predict_proba(self.head_, self._dataset(X, np.zeros(len(X), dtype=np.int64)))

    def predict(self, X):
        check_is_fitted(self, "head_")
        return self.classes_[np.argmax(self.predict_proba(X), axis=1)]

    def debias(self, X_factual, X_counterfactual, y, delta=0.0, config: UnlearnConfig | None = None):
        """Unlearn the bias exposed by counterfactual pairs and update the fitted head.

        Row ``i`` of the two matrices is one pair sharing label ``y[i]``.
        Returns the unlearning outcome.
        """
        Xf, Xc = self._check(X_factual), self._check(X_counterfactual)
        if Xf.shape != Xc.shape:
            raise ValueError("factual and counterfactual matrices differ in shape")
        y = np.asarray(y)
        lookup = {c: i for i, c in enumerate(self.classes_)}
        try:
            codes = np.array([lookup[v] for v in y], dtype=np.int64)
        except KeyError as exc:
            raise ValueError(f"unknown label {exc.args[0]!r}") from None
        dex = CounterfactualSet(self._dataset(Xf, codes), self._dataset(Xc, codes), "matched")
        config = config or UnlearnConfig(k=len(codes))
        op = hessian(self.head_, self._train, sample_weight=self._weight)
        outcome = run_fmd(self.head_, dex, delta, config, op=op)
        self.head_ = outcome.head_after
        return outcome
