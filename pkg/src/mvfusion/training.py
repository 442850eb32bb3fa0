"""Loss, Adam optimizer, and the early-stopped mini-batch training loop.

The loop contract: shuffled mini-batches per epoch (seeded), one
validation evaluation per epoch, an epoch "improves" when its validation
loss beats the running best by more than ``min_delta``, training stops
after ``patience`` consecutive non-improving epochs, and the
best-validation parameters (including batch-norm statistics) are restored
at the end.  The validation evaluator is injectable so stopping behaviour
can be tested against crafted loss trajectories.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from .autodiff import Value
from .errors import ConfigurationError, NumericError
from .fusion import multiloss_total  # re-exported: the loss-combination op
from .layers import TRAIN, ParameterSet

__all__ = [
    "TrainConfig",
    "bce_loss",
    "multiloss_total",
    "adam_update",
    "Adam",
    "EarlyStopping",
    "FitResult",
    "fit_model",
    "evaluate_loss",
    "predict_in_chunks",
]

_BCE_EPS = 1e-7
_EVAL_CHUNK = 1024


@dataclass(frozen=True)
class TrainConfig:
    """Optimization protocol: Adam, batch 256, early stopping with
    patience 5 and an absolute validation-loss delta of 0.01."""

    batch_size: int = 256
    max_epochs: int = 1000
    patience: int = 5
    min_delta: float = 0.01
    learning_rate: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    epsilon: float = 1e-8
    runs: int = 10
    base_seed: int = 0
    val_fraction: float = 0.1
    threshold: float = 0.5

    def __post_init__(self):
        if self.batch_size < 2:
            raise ConfigurationError("batch_size must be >= 2 (batch norm)")
        if self.patience < 1:
            raise ConfigurationError("patience must be >= 1")
        if self.min_delta < 0:
            raise ConfigurationError("min_delta must be >= 0")
        if self.max_epochs < 1:
            raise ConfigurationError("max_epochs must be >= 1")
        if self.runs < 1:
            raise ConfigurationError("runs must be >= 1")
        if not 0.0 < self.val_fraction < 1.0:
            raise ConfigurationError("val_fraction must lie in (0, 1)")
        if self.learning_rate <= 0:
            raise ConfigurationError("learning_rate must be positive")


def bce_loss(probabilities, labels) -> Value:
    """Mean binary cross-entropy as a graph node (see autodiff.bce)."""
    return ad.bce(probabilities, labels)


def bce_numpy(probabilities, labels) -> float:
    """Plain-array BCE with the same clamp as the graph op."""
    p = np.clip(np.asarray(probabilities, dtype=np.float64), _BCE_EPS, 1.0 - _BCE_EPS)
    y = np.asarray(labels, dtype=np.float64)
    return float(-(y * np.log(p) + (1.0 - y) * np.log1p(-p)).mean())


# ---------------------------------------------------------------------------
# Adam
# ---------------------------------------------------------------------------

def adam_update(theta, grad, m, v, t, learning_rate, beta1, beta2, epsilon):
    """One bias-corrected Adam step; returns (theta, m, v) as new arrays."""
    if t < 1:
        raise ConfigurationError("Adam step index starts at 1")
    if not np.all(np.isfinite(grad)):
        raise NumericError("non-finite gradient in Adam update")
    m = beta1 * m + (1.0 - beta1) * grad
    v = beta2 * v + (1.0 - beta2) * grad * grad
    m_hat = m / (1.0 - beta1**t)
    v_hat = v / (1.0 - beta2**t)
    theta = theta - learning_rate * m_hat / (np.sqrt(v_hat) + epsilon)
    return theta, m, v


class Adam:
    """Adam over a ParameterSet; state keyed by parameter path."""

    def __init__(self, params: ParameterSet, learning_rate=1e-3, beta1=0.9,
                 beta2=0.999, epsilon=1e-8):
        self.params = params
        self.learning_rate = learning_rate
        self.beta1, self.beta2, self.epsilon = beta1, beta2, epsilon
        self.t = 0
        self.m = {name: np.zeros_like(p.data) for name, p in params.items()}
        self.v = {name: np.zeros_like(p.data) for name, p in params.items()}

    def zero_grad(self):
        self.params.zero_grad()

    def step(self):
        self.t += 1
        for name, p in self.params.items():
            try:
                p.data, self.m[name], self.v[name] = adam_update(
                    p.data, p.grad, self.m[name], self.v[name], self.t,
                    self.learning_rate, self.beta1, self.beta2, self.epsilon,
                )
            except NumericError as exc:
                raise NumericError(f"parameter {name!r}: {exc}") from exc


# ---------------------------------------------------------------------------
# early stopping
# ---------------------------------------------------------------------------

class EarlyStopping:
    """Counts consecutive epochs whose validation loss fails to beat the
    best by more than `min_delta`."""

    def __init__(self, patience, min_delta):
        self.patience = patience
        self.min_delta = min_delta
        self.best = np.inf
        self.best_epoch = 0
        self.bad_epochs = 0

    def update(self, val_loss, epoch) -> bool:
        if val_loss < self.best - self.min_delta:
            self.best = val_loss
            self.best_epoch = epoch
            self.bad_epochs = 0
            return True
        self.bad_epochs += 1
        return False

    @property
    def should_stop(self) -> bool:
        return self.bad_epochs >= self.patience


# ---------------------------------------------------------------------------
# fitting
# ---------------------------------------------------------------------------

@dataclass
class FitResult:
    epochs_trained: int
    best_epoch: int
    best_val_loss: float
    history: list = field(default_factory=list)


def predict_in_chunks(model, views, chunk=_EVAL_CHUNK) -> np.ndarray:
    """Eval-mode probabilities over a full array set, bounded memory."""
    n = next(iter(views.values())).shape[0]
    out = np.empty(n, dtype=np.float64)
    for start in range(0, n, chunk):
        sl = slice(start, min(start + chunk, n))
        out[sl] = model.predict_proba({k: v[sl] for k, v in views.items()})
    return out


def evaluate_loss(model, views, labels) -> float:
    return bce_numpy(predict_in_chunks(model, views), labels)


def _batches(order, batch_size):
    for start in range(0, order.size, batch_size):
        idx = order[start:start + batch_size]
        # Keep a short tail only if batch norm can still operate on it.
        if idx.size >= 2:
            yield idx


def fit_model(model, train_views, train_labels, val_views=None, val_labels=None,
              config: TrainConfig = None, shuffle_seed=0, val_loss_fn=None) -> FitResult:
    """Train `model` in place and restore its best-validation state.

    `val_loss_fn(model, epoch) -> float` overrides the standard validation
    evaluation (used to exercise the stopping rule on crafted
    trajectories); otherwise `val_views`/`val_labels` are required.
    """
    config = config or TrainConfig()
    if val_loss_fn is None and (val_views is None or val_labels is None):
        raise ConfigurationError("fit_model needs validation data or a val_loss_fn")
    labels = np.asarray(train_labels)
    n = labels.shape[0]
    if n < 2:
        raise ConfigurationError("training needs at least two samples")

    rng = np.random.default_rng(shuffle_seed)
    optimizer = Adam(
        model.params,
        learning_rate=config.learning_rate,
        beta1=config.beta1,
        beta2=config.beta2,
        epsilon=config.epsilon,
    )
    stopper = EarlyStopping(config.patience, config.min_delta)
    best_state = None
    history = []
    epochs_trained = 0

    for epoch in range(1, config.max_epochs + 1):
        epochs_trained = epoch
        order = rng.permutation(n)
        seen = 0
        sums = {"total": 0.0, "main": 0.0}
        aux_sums = None
        for idx in _batches(order, config.batch_size):
            batch_views = {k: v[idx] for k, v in train_views.items()}
            loss, parts = model.loss(batch_views, labels[idx], TRAIN, rng)
            optimizer.zero_grad()
            ad.backward(loss)
            optimizer.step()
            w = idx.size
            seen += w
            sums["total"] += parts["total"] * w
            sums["main"] += parts["main"] * w
            if parts["aux"]:
                if aux_sums is None:
                    aux_sums = np.zeros(len(parts["aux"]))
                aux_sums += np.asarray(parts["aux"]) * w

        if val_loss_fn is not None:
            val_loss = float(val_loss_fn(model, epoch))
        else:
            val_loss = evaluate_loss(model, val_views, val_labels)

        record = {
            "epoch": epoch,
            "train_loss": sums["total"] / max(seen, 1),
            "train_main": sums["main"] / max(seen, 1),
            "val_loss": val_loss,
        }
        if aux_sums is not None:
            record["train_aux"] = (aux_sums / max(seen, 1)).tolist()
        history.append(record)

        if stopper.update(val_loss, epoch):
            best_state = model.snapshot()
        if stopper.should_stop:
            break

    if best_state is None:
        raise NumericError("validation loss never improved; training diverged")
    model.restore(best_state)
    return FitResult(
        epochs_trained=epochs_trained,
        best_epoch=stopper.best_epoch,
        best_val_loss=float(stopper.best),
        history=history,
    )
