"""The six fusion strategies and their merge/gate ablation switches.

Every trainable method produces a crop probability per sample from a
multi-view batch:

* ``input``      - channel-concatenate all (time-aligned) views, one
                   encoder, one head.
* ``feature-s``  - per-view encoders, a fixed merge function
                   (average / maximum / product / concatenate), one head.
* ``feature-g``  - per-view encoders, a learned gate (gated-c / gated-a /
                   gatedf-a) producing per-sample view weights for a
                   weighted sum, one head.
* ``decision``   - independent per-view encoder+head branches whose
                   probabilities are averaged, trained jointly.
* ``multiloss``  - feature fusion (average merge) plus per-view auxiliary
                   heads whose losses are added with a fixed weight.
* ``ensemble``   - not a trainable forward: single-view models are trained
                   separately and their probabilities averaged at test
                   time via :func:`ensemble_predict`.

``single`` (one encoder + head on one view) backs the per-view baselines
and the ensemble/decision branches.
"""

from __future__ import annotations

from dataclasses import dataclass, replace

import numpy as np

from . import autodiff as ad
from .autodiff import Value
from .data import ViewSpec
from .errors import ConfigurationError, GraphError, ShapeError
from .layers import (
    EVAL,
    TRAIN,
    BufferSet,
    DenseHead,
    ParameterSet,
    ViewEncoder,
    init_parameters,
    load_state,
    save_state,
    tile_static,
)

METHODS = ("input", "feature-s", "feature-g", "decision", "multiloss", "ensemble", "single")
MERGES = ("average", "maximum", "product", "concatenate")
GATES = ("gated-c", "gated-a", "gatedf-a")

DEFAULT_MERGE = "average"
DEFAULT_GATE = "gatedf-a"


@dataclass(frozen=True)
class ModelConfig:
    """Architecture description; `merge` applies only to feature-s and
    `gate` only to feature-g."""

    method: str
    merge: str | None = None
    gate: str | None = None
    aux_weight: float = 0.3
    hidden_units: int = 64
    gru_layers: int = 2
    dense_hidden: int = 64
    dropout: float = 0.2
    batchnorm: bool = True
    bn_momentum: float = 0.1
    bn_eps: float = 1e-5
    seed: int = 0
    dtype: str = "float32"  # training default; grad checks build float64

    def __post_init__(self):
        if self.method not in METHODS:
            raise ConfigurationError(f"unknown method {self.method!r}")
        if self.merge is not None and self.method != "feature-s":
            raise ConfigurationError("merge applies to the feature-s method only")
        if self.method == "feature-s" and self.merge not in MERGES:
            raise ConfigurationError(f"feature-s requires a merge from {MERGES}")
        if self.gate is not None and self.method != "feature-g":
            raise ConfigurationError("gate applies to the feature-g method only")
        if self.method == "feature-g" and self.gate not in GATES:
            raise ConfigurationError(f"feature-g requires a gate from {GATES}")
        if self.aux_weight < 0:
            raise ConfigurationError("aux_weight must be >= 0")
        if not 0.0 <= self.dropout < 1.0:
            raise ConfigurationError("dropout must lie in [0, 1)")
        if min(self.hidden_units, self.gru_layers, self.dense_hidden) < 1:
            raise ConfigurationError("layer sizes must be positive")
        if self.dtype not in ("float32", "float64"):
            raise ConfigurationError("dtype must be 'float32' or 'float64'")
        if not 0.0 < self.bn_momentum < 1.0:
            raise ConfigurationError("bn_momentum must lie in (0, 1)")
        if self.bn_eps <= 0.0:
            raise ConfigurationError("bn_eps must be positive")

    @property
    def np_dtype(self):
        return np.float32 if self.dtype == "float32" else np.float64


# ---------------------------------------------------------------------------
# merge functions and gate modules
# ---------------------------------------------------------------------------

def _stack_views(reps):
    b, d = reps[0].shape
    return ad.concat([ad.reshape(r, (b, 1, d)) for r in reps], 1)  # [B, V, D]


def _check_reps(reps):
    if len(reps) < 2:
        raise ConfigurationError("merging needs at least two views")
    shape = reps[0].shape
    for r in reps[1:]:
        if r.shape != shape:
            raise ShapeError(f"view representations disagree: {shape} vs {r.shape}")


def merge_simple(reps, merge) -> Value:
    """Elementwise mean/max/product across views, or feature concatenation."""
    _check_reps(reps)
    if merge == "average":
        return ad.reduce_mean(_stack_views(reps), 1)
    if merge == "maximum":
        return ad.reduce_max(_stack_views(reps), 1)
    if merge == "product":
        return ad.reduce_prod(_stack_views(reps), 1)
    if merge == "concatenate":
        return ad.concat(reps, 1)
    raise ConfigurationError(f"unknown merge {merge!r}")


class GateModule:
    """Per-sample attention weights over views.

    The context is the concatenation (gated-c) or average (gated-a,
    gatedf-a) of the view-representations; a linear projection and a
    softmax across the view axis yield weights on the simplex, per view
    or per (view, feature) pair for the feature-specific variant.
    """

    def __init__(self, params: ParameterSet, name, gate, num_views, dim, init):
        if gate not in GATES:
            raise ConfigurationError(f"unknown gate {gate!r}")
        self.gate = gate
        self.num_views = num_views
        self.dim = dim
        self.w = params.add(f"{name}.w", init[f"{name}.w"])
        self.b = params.add(f"{name}.b", init[f"{name}.b"])

    @staticmethod
    def param_spec(name, gate, num_views, dim):
        in_dim = num_views * dim if gate == "gated-c" else dim
        out_dim = num_views * dim if gate == "gatedf-a" else num_views
        return {
            f"{name}.w": ("weight", (in_dim, out_dim)),
            f"{name}.b": ("bias", (out_dim,)),
        }

    def _context(self, reps) -> Value:
        if self.gate == "gated-c":
            return ad.concat(reps, 1)
        total = reps[0]
        for r in reps[1:]:
            total = ad.add(total, r)
        return ad.scale(total, 1.0 / len(reps))

    def weights(self, reps) -> Value:
        """[B, V] weights, or [B, V, D] for the feature-specific gate."""
        _check_reps(reps)
        if len(reps) != self.num_views:
            raise ConfigurationError(f"gate built for {self.num_views} views, got {len(reps)}")
        logits = ad.add(ad.matmul(self._context(reps), self.w), self.b)
        if self.gate == "gatedf-a":
            b = reps[0].shape[0]
            return ad.softmax(ad.reshape(logits, (b, self.num_views, self.dim)), 1)
        return ad.softmax(logits, 1)

    def fuse(self, reps) -> Value:
        """Weighted sum of representations under the gate weights."""
        w = self.weights(reps)
        if self.gate == "gatedf-a":
            weighted = ad.mul(w, _stack_views(reps))  # [B, V, D]
            return ad.scale(ad.reduce_mean(weighted, 1), float(len(reps)))
        b = reps[0].shape[0]
        total = None
        for v, rep in enumerate(reps):
            w_v = ad.reshape(ad.narrow(w, 1, v, 1), (b, 1))
            term = ad.mul(w_v, rep)
            total = term if total is None else ad.add(total, term)
        return total


def gate_weights(gate: GateModule, reps) -> Value:
    return gate.weights(reps)


def fuse_gated(gate: GateModule, reps) -> Value:
    return gate.fuse(reps)


# ---------------------------------------------------------------------------
# models
# ---------------------------------------------------------------------------

class FusionModel:
    """Shared plumbing: parameter/buffer registry, view validation,
    forward/loss entry points."""

    def __init__(self, config: ModelConfig, view_specs, timesteps):
        if not view_specs:
            raise ConfigurationError("a model needs at least one view")
        names = [s.name for s in view_specs]
        if len(set(names)) != len(names):
            raise ConfigurationError("duplicate view names")
        self.config = config
        self.view_specs = tuple(view_specs)
        self.timesteps = int(timesteps)
        if self.timesteps < 1:
            raise ConfigurationError("timesteps must be >= 1")
        self.params = ParameterSet()
        self.buffers = BufferSet()

    @property
    def view_names(self):
        return [s.name for s in self.view_specs]

    def _wrap_views(self, views):
        wrapped = []
        batch = None
        for spec in self.view_specs:
            if spec.name not in views:
                raise ConfigurationError(f"batch is missing view {spec.name!r}")
            arr = views[spec.name]
            value = arr if isinstance(arr, Value) else Value(arr)
            expected = 2 if spec.static else 3
            if value.data.ndim != expected:
                raise ShapeError(f"view {spec.name!r}: expected rank {expected}")
            if value.shape[-1] != spec.channels:
                raise ShapeError(
                    f"view {spec.name!r}: {value.shape[-1]} channels, expected {spec.channels}"
                )
            if not spec.static and value.shape[1] != self.timesteps:
                raise ShapeError(f"view {spec.name!r}: expected {self.timesteps} timesteps")
            if batch is None:
                batch = value.shape[0]
            elif value.shape[0] != batch:
                raise ShapeError("views disagree on batch size")
            wrapped.append(value)
        return wrapped

    def forward(self, views, mode=EVAL, rng=None) -> Value:
        raise NotImplementedError

    def loss(self, views, labels, mode=TRAIN, rng=None):
        """Scalar training loss plus logged components."""
        prob = self.forward(views, mode, rng)
        total = ad.bce(prob, np.asarray(labels, dtype=prob.data.dtype))
        return total, {"main": float(total.data), "aux": [], "total": float(total.data)}

    def predict_proba(self, views) -> np.ndarray:
        """Deterministic eval-mode positive-class probability [B]."""
        return self.forward(views, EVAL).data.copy()

    def snapshot(self):
        return {"params": self.params.snapshot(), "buffers": self.buffers.snapshot()}

    def restore(self, state):
        self.params.restore(state["params"])
        self.buffers.restore(state["buffers"])

    def save(self, out_dir):
        return save_state(self.params, self.buffers, out_dir)

    def load(self, state_dir):
        load_state(self.params, self.buffers, state_dir)

    def _encoder_kwargs(self):
        cfg = self.config
        return dict(
            hidden_units=cfg.hidden_units,
            num_layers=cfg.gru_layers,
            dropout_rate=cfg.dropout,
            batchnorm=cfg.batchnorm,
            bn_momentum=cfg.bn_momentum,
            bn_eps=cfg.bn_eps,
        )

    def _head_kwargs(self):
        cfg = self.config
        return dict(
            hidden_units=cfg.dense_hidden,
            dropout_rate=cfg.dropout,
            batchnorm=cfg.batchnorm,
            bn_momentum=cfg.bn_momentum,
            bn_eps=cfg.bn_eps,
        )


class InputFusionModel(FusionModel):
    """Channelwise concatenation of the time-aligned views, single model."""

    def __init__(self, config, view_specs, timesteps):
        super().__init__(config, view_specs, timesteps)
        cfg = self.config
        self.total_channels = sum(s.channels for s in self.view_specs)
        spec = {}
        merged_spec = _merged_view_spec(self.view_specs, self.total_channels, timesteps)
        spec.update(
            ViewEncoder.param_spec("enc", merged_spec, cfg.hidden_units, cfg.gru_layers, cfg.batchnorm)
        )
        spec.update(DenseHead.param_spec("head", cfg.hidden_units, cfg.dense_hidden, cfg.batchnorm))
        init = init_parameters(spec, cfg.seed, dtype=cfg.np_dtype)
        self.encoder = ViewEncoder(
            self.params, self.buffers, "enc", merged_spec, timesteps, init=init,
            **self._encoder_kwargs(),
        )
        self.head = DenseHead(
            self.params, self.buffers, "head", cfg.hidden_units, init=init,
            **self._head_kwargs(),
        )

    def forward(self, views, mode=EVAL, rng=None) -> Value:
        wrapped = self._wrap_views(views)
        channels = [
            v if not spec.static else tile_static(v, self.timesteps)
            for spec, v in zip(self.view_specs, wrapped)
        ]
        merged = ad.concat(channels, 2) if len(channels) > 1 else channels[0]
        rep = self.encoder.forward(merged, mode, rng)
        return ad.sigmoid(self.head.forward(rep, mode, rng))


def _merged_view_spec(view_specs, total_channels, timesteps):
    return ViewSpec(name="merged", channels=total_channels, timesteps=timesteps, static=False)


class SingleViewModel(FusionModel):
    """One encoder and one head on a single view (per-view baselines,
    ensemble branches)."""

    def __init__(self, config, view_specs, timesteps):
        super().__init__(config, view_specs, timesteps)
        if len(self.view_specs) != 1:
            raise ConfigurationError("single-view model takes exactly one view")
        cfg = self.config
        view = self.view_specs[0]
        spec = {}
        spec.update(ViewEncoder.param_spec("enc", view, cfg.hidden_units, cfg.gru_layers, cfg.batchnorm))
        spec.update(DenseHead.param_spec("head", cfg.hidden_units, cfg.dense_hidden, cfg.batchnorm))
        init = init_parameters(spec, cfg.seed, dtype=cfg.np_dtype)
        self.encoder = ViewEncoder(
            self.params, self.buffers, "enc", view, timesteps, init=init, **self._encoder_kwargs()
        )
        self.head = DenseHead(
            self.params, self.buffers, "head", cfg.hidden_units, init=init, **self._head_kwargs()
        )

    def forward(self, views, mode=EVAL, rng=None) -> Value:
        (wrapped,) = self._wrap_views(views)
        rep = self.encoder.forward(wrapped, mode, rng)
        return ad.sigmoid(self.head.forward(rep, mode, rng))


class FeatureFusionModel(FusionModel):
    """Per-view encoders merged in feature space (feature-s, feature-g,
    multiloss)."""

    def __init__(self, config, view_specs, timesteps):
        super().__init__(config, view_specs, timesteps)
        if len(self.view_specs) < 2:
            raise ConfigurationError(f"{config.method} needs at least two views")
        cfg = self.config
        v, h = len(self.view_specs), cfg.hidden_units
        self.effective_merge = cfg.merge if cfg.method == "feature-s" else DEFAULT_MERGE
        head_in = v * h if (cfg.method == "feature-s" and cfg.merge == "concatenate") else h

        spec = {}
        for view in self.view_specs:
            spec.update(
                ViewEncoder.param_spec(f"enc.{view.name}", view, h, cfg.gru_layers, cfg.batchnorm)
            )
        if cfg.method == "feature-g":
            spec.update(GateModule.param_spec("gate", cfg.gate, v, h))
        spec.update(DenseHead.param_spec("head", head_in, cfg.dense_hidden, cfg.batchnorm))
        if cfg.method == "multiloss":
            for view in self.view_specs:
                spec.update(DenseHead.param_spec(f"aux.{view.name}", h, cfg.dense_hidden, cfg.batchnorm))
        init = init_parameters(spec, cfg.seed, dtype=cfg.np_dtype)

        self.encoders = [
            ViewEncoder(
                self.params, self.buffers, f"enc.{view.name}", view, timesteps,
                init=init, **self._encoder_kwargs(),
            )
            for view in self.view_specs
        ]
        self.gate = (
            GateModule(self.params, "gate", cfg.gate, v, h, init)
            if cfg.method == "feature-g"
            else None
        )
        self.head = DenseHead(
            self.params, self.buffers, "head", head_in, init=init, **self._head_kwargs()
        )
        self.aux_heads = (
            [
                DenseHead(
                    self.params, self.buffers, f"aux.{view.name}", h, init=init,
                    **self._head_kwargs(),
                )
                for view in self.view_specs
            ]
            if cfg.method == "multiloss"
            else []
        )

    def _representations(self, views, mode, rng):
        wrapped = self._wrap_views(views)
        return [enc.forward(v, mode, rng) for enc, v in zip(self.encoders, wrapped)]

    def _fused(self, reps):
        if self.gate is not None:
            return self.gate.fuse(reps)
        return merge_simple(reps, self.effective_merge)

    def forward(self, views, mode=EVAL, rng=None) -> Value:
        reps = self._representations(views, mode, rng)
        return ad.sigmoid(self.head.forward(self._fused(reps), mode, rng))

    def forward_with_aux(self, views, mode=EVAL, rng=None):
        """Fused probability plus one auxiliary probability per view."""
        if self.config.method != "multiloss":
            raise GraphError("auxiliary outputs exist only for the multiloss method")
        reps = self._representations(views, mode, rng)
        fused = ad.sigmoid(self.head.forward(self._fused(reps), mode, rng))
        aux = [
            ad.sigmoid(head.forward(rep, mode, rng))
            for head, rep in zip(self.aux_heads, reps)
        ]
        return fused, aux

    def loss(self, views, labels, mode=TRAIN, rng=None):
        if self.config.method != "multiloss":
            return super().loss(views, labels, mode, rng)
        labels = np.asarray(labels)
        fused, aux = self.forward_with_aux(views, mode, rng)
        main = ad.bce(fused, labels.astype(fused.data.dtype))
        aux_losses = [ad.bce(p, labels.astype(p.data.dtype)) for p in aux]
        total = multiloss_total(main, aux_losses, self.config.aux_weight)
        return total, {
            "main": float(main.data),
            "aux": [float(a.data) for a in aux_losses],
            "total": float(total.data),
        }


def multiloss_total(main: Value, aux_losses, aux_weight) -> Value:
    """total = main + aux_weight * sum(aux)."""
    if aux_weight < 0:
        raise ConfigurationError("aux_weight must be >= 0")
    if not aux_losses:
        return main
    total_aux = aux_losses[0]
    for extra in aux_losses[1:]:
        total_aux = ad.add(total_aux, extra)
    return ad.add(main, ad.scale(total_aux, float(aux_weight)))


class DecisionFusionModel(FusionModel):
    """Independent per-view branches; the prediction is the arithmetic mean
    of the per-view probabilities, trained jointly."""

    def __init__(self, config, view_specs, timesteps):
        super().__init__(config, view_specs, timesteps)
        if len(self.view_specs) < 2:
            raise ConfigurationError("decision fusion needs at least two views")
        self.branches = []
        for i, view in enumerate(self.view_specs):
            branch_cfg = replace(config, method="single", seed=branch_seed(config.seed, i))
            branch = SingleViewModel(branch_cfg, [view], timesteps)
            self.params.adopt(f"branch.{view.name}", branch.params)
            self.buffers.adopt(f"branch.{view.name}", branch.buffers)
            self.branches.append(branch)

    def forward(self, views, mode=EVAL, rng=None) -> Value:
        self._wrap_views(views)
        probs = [branch.forward(views, mode, rng) for branch in self.branches]
        total = probs[0]
        for p in probs[1:]:
            total = ad.add(total, p)
        return ad.scale(total, 1.0 / len(probs))


def branch_seed(seed, index):
    # Distinct deterministic seeds per branch.
    return (seed * 1000003 + index) % (2**63)


def build_model(config: ModelConfig, view_specs, timesteps) -> FusionModel:
    """Instantiate the architecture for `config` over the given views."""
    if config.method == "ensemble":
        raise GraphError(
            "ensemble has no trainable forward; train per-view models and use ensemble_predict"
        )
    cls = {
        "input": InputFusionModel,
        "single": SingleViewModel,
        "feature-s": FeatureFusionModel,
        "feature-g": FeatureFusionModel,
        "multiloss": FeatureFusionModel,
        "decision": DecisionFusionModel,
    }[config.method]
    return cls(config, view_specs, timesteps)


def ensemble_predict(models, views) -> np.ndarray:
    """Mean of per-model eval-mode probabilities (two-step fusion)."""
    if not models:
        raise ConfigurationError("ensemble needs at least one trained model")
    seen = set()
    for model in models:
        if len(model.view_specs) != 1:
            raise ConfigurationError("ensemble members must be single-view models")
        name = model.view_specs[0].name
        if name in seen:
            raise ConfigurationError(f"duplicate ensemble member for view {name!r}")
        seen.add(name)
        if name not in views:
            raise ConfigurationError(f"batch is missing view {name!r} for its ensemble member")
    probs = np.stack([model.predict_proba(views) for model in models])
    return probs.mean(axis=0)
