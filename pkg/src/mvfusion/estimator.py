"""Scikit-learn style estimator over the fusion architectures.

``X`` is a mapping from view name to array: ``[N, T, C]`` for temporal
views, ``[N, C]`` for static views (dict order fixes the view order).
``fit`` standardizes with train statistics, carves a validation subset
when none is supplied, trains with Adam and early stopping, and restores
the best-validation parameters.  The ``ensemble`` method trains one
single-view model per view and averages their probabilities at predict
time.
"""

from __future__ import annotations

import numpy as np
from sklearn.base import BaseEstimator, ClassifierMixin
from sklearn.exceptions import NotFittedError

from .data import ViewSpec, compute_view_stats, split_train_val
from .errors import ConfigurationError, SchemaError, ShapeError
from .fusion import ModelConfig, branch_seed, build_model, ensemble_predict
from .training import TrainConfig, bce_numpy, evaluate_loss, fit_model, predict_in_chunks

_SHUFFLE_OFFSET = 0x9E3779B9  # decorrelates shuffle stream from init stream


def validate_views(X):
    """Check a view mapping and derive (specs, num_samples, timesteps)."""
    if not hasattr(X, "items") or not len(X):
        raise SchemaError("X must be a non-empty mapping of view name -> array")
    specs, n, timesteps = [], None, 0
    for name, arr in X.items():
        arr = np.asarray(arr)
        if arr.ndim == 2:
            spec = ViewSpec(name=str(name), channels=arr.shape[1], timesteps=0, static=True)
        elif arr.ndim == 3:
            if timesteps and arr.shape[1] != timesteps:
                raise ShapeError("temporal views disagree on the number of timesteps")
            timesteps = arr.shape[1]
            spec = ViewSpec(name=str(name), channels=arr.shape[2], timesteps=arr.shape[1], static=False)
        else:
            raise ShapeError(f"view {name!r}: expected rank 2 or 3, got {arr.ndim}")
        if not np.all(np.isfinite(arr)):
            raise SchemaError(f"view {name!r} contains non-finite values")
        if n is None:
            n = arr.shape[0]
        elif arr.shape[0] != n:
            raise ShapeError("views disagree on the number of samples")
        specs.append(spec)
    if timesteps == 0:
        raise ShapeError("at least one temporal view is required")
    return specs, n, timesteps


def validate_labels(y, n):
    y = np.asarray(y).reshape(-1)
    if y.shape[0] != n:
        raise ShapeError(f"y has {y.shape[0]} entries for {n} samples")
    if not np.isin(y, (0, 1)).all():
        raise SchemaError("labels must be binary (0/1)")
    return y.astype(np.uint8)


class MultiViewClassifier(BaseEstimator, ClassifierMixin):
    """Binary classifier over multi-view time series.

    Parameters mirror the architecture and protocol knobs: `method`
    selects the fusion strategy; `merge` is honoured by feature-s and
    `gate` by feature-g only.  `random_state` seeds initialization,
    validation carving, batch shuffling, and dropout.
    """

    def __init__(self, method="feature-s", merge="average", gate="gatedf-a",
                 aux_weight=0.3, hidden_units=64, gru_layers=2, dense_hidden=64,
                 dropout=0.2, batchnorm=True, standardize=True,
                 learning_rate=1e-3, batch_size=256, max_epochs=1000,
                 patience=5, min_delta=0.01, val_fraction=0.1,
                 threshold=0.5, random_state=0):
        self.method = method
        self.merge = merge
        self.gate = gate
        self.aux_weight = aux_weight
        self.hidden_units = hidden_units
        self.gru_layers = gru_layers
        self.dense_hidden = dense_hidden
        self.dropout = dropout
        self.batchnorm = batchnorm
        self.standardize = standardize
        self.learning_rate = learning_rate
        self.batch_size = batch_size
        self.max_epochs = max_epochs
        self.patience = patience
        self.min_delta = min_delta
        self.val_fraction = val_fraction
        self.threshold = threshold
        self.random_state = random_state

    # -- config assembly ----------------------------------------------------

    def _model_config(self, seed) -> ModelConfig:
        return ModelConfig(
            method=self.method,
            merge=self.merge if self.method == "feature-s" else None,
            gate=self.gate if self.method == "feature-g" else None,
            aux_weight=self.aux_weight,
            hidden_units=self.hidden_units,
            gru_layers=self.gru_layers,
            dense_hidden=self.dense_hidden,
            dropout=self.dropout,
            batchnorm=self.batchnorm,
            seed=seed,
        )

    def _train_config(self) -> TrainConfig:
        return TrainConfig(
            batch_size=self.batch_size,
            max_epochs=self.max_epochs,
            patience=self.patience,
            min_delta=self.min_delta,
            learning_rate=self.learning_rate,
            val_fraction=self.val_fraction,
            threshold=self.threshold,
        )

    # -- fitting ------------------------------------------------------------

    def fit(self, X, y, X_val=None, y_val=None):
        specs, n, timesteps = validate_views(X)
        y = validate_labels(y, n)
        if np.unique(y).size < 2:
            raise ConfigurationError("training labels must contain both classes")

        if X_val is None:
            train_idx, val_idx = split_train_val(np.arange(n), self.val_fraction, self.random_state)
            X_train = {k: np.asarray(v)[train_idx] for k, v in X.items()}
            y_train = y[train_idx]
            X_val = {k: np.asarray(v)[val_idx] for k, v in X.items()}
            y_val = y[val_idx]
        else:
            val_specs, n_val, _ = validate_views(X_val)
            if [s.name for s in val_specs] != [s.name for s in specs]:
                raise SchemaError("validation views must match training views")
            X_train, y_train = {k: np.asarray(v) for k, v in X.items()}, y
            y_val = validate_labels(y_val, n_val)
            X_val = {k: np.asarray(v) for k, v in X_val.items()}

        if self.standardize:
            self.stats_ = {name: compute_view_stats(arr) for name, arr in X_train.items()}
            X_train = {k: self.stats_[k].apply(v) for k, v in X_train.items()}
            X_val = {k: self.stats_[k].apply(v) for k, v in X_val.items()}
        else:
            self.stats_ = None

        self.view_specs_ = specs
        self.timesteps_ = timesteps
        self.classes_ = np.array([0, 1], dtype=np.uint8)
        train_cfg = self._train_config()

        if self.method == "ensemble":
            self._fit_ensemble(specs, X_train, y_train, X_val, y_val, train_cfg)
        else:
            config = self._model_config(self.random_state)
            self.model_ = build_model(config, specs, timesteps)
            result = fit_model(
                self.model_, X_train, y_train, X_val, y_val, train_cfg,
                shuffle_seed=self.random_state + _SHUFFLE_OFFSET,
            )
            self.models_ = None
            self.n_epochs_ = result.epochs_trained
            self.best_val_loss_ = result.best_val_loss
            self.history_ = result.history
        return self

    def _fit_ensemble(self, specs, X_train, y_train, X_val, y_val, train_cfg):
        """Two-step fusion: fit one single-view model per view."""
        self.model_ = None
        self.models_ = []
        epochs, histories = [], []
        for index, spec in enumerate(specs):
            seed = branch_seed(self.random_state, index)
            config = ModelConfig(
                method="single",
                aux_weight=self.aux_weight,
                hidden_units=self.hidden_units,
                gru_layers=self.gru_layers,
                dense_hidden=self.dense_hidden,
                dropout=self.dropout,
                batchnorm=self.batchnorm,
                seed=seed,
            )
            model = build_model(config, [spec], self.timesteps_)
            result = fit_model(
                model,
                {spec.name: X_train[spec.name]}, y_train,
                {spec.name: X_val[spec.name]}, y_val,
                train_cfg,
                shuffle_seed=seed + _SHUFFLE_OFFSET,
            )
            self.models_.append(model)
            epochs.append(result.epochs_trained)
            histories.append(result.history)
        self.n_epochs_ = max(epochs)
        self.history_ = histories
        probs = ensemble_predict(self.models_, X_val)
        self.best_val_loss_ = bce_numpy(probs, y_val)

    # -- inference ----------------------------------------------------------

    def _check_fitted(self):
        if not hasattr(self, "classes_"):
            raise NotFittedError("this MultiViewClassifier instance is not fitted yet")

    def _prepare(self, X):
        self._check_fitted()
        specs, _, timesteps = validate_views(X)
        expected = [s.name for s in self.view_specs_]
        missing = [name for name in expected if name not in X]
        if missing:
            raise SchemaError(f"X is missing views {missing}")
        if timesteps != self.timesteps_:
            raise ShapeError(f"expected {self.timesteps_} timesteps, got {timesteps}")
        out = {name: np.asarray(X[name]) for name in expected}
        if self.stats_ is not None:
            out = {name: self.stats_[name].apply(arr) for name, arr in out.items()}
        return out

    def positive_proba(self, X) -> np.ndarray:
        """P(y=1) per sample as a flat vector."""
        views = self._prepare(X)
        if self.models_ is not None:
            return ensemble_predict(self.models_, views)
        return predict_in_chunks(self.model_, views)

    def predict_proba(self, X) -> np.ndarray:
        p = self.positive_proba(X)
        return np.column_stack([1.0 - p, p])

    def predict(self, X) -> np.ndarray:
        return (self.positive_proba(X) >= self.threshold).astype(np.uint8)

    def validation_loss(self, X, y) -> float:
        """BCE of the fitted model on the given arrays (eval mode)."""
        views = self._prepare(X)
        if self.models_ is not None:
            return bce_numpy(ensemble_predict(self.models_, views), y)
        return evaluate_loss(self.model_, views, y)
