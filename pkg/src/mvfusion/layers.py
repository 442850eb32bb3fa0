"""Neural building blocks: stacked GRU view-encoders, dense heads,
dropout, batch normalization, and seeded Glorot initialization.

All parameters are `autodiff.Value` leaves registered in a
:class:`ParameterSet`; batch-norm running statistics live in a
:class:`BufferSet` so snapshots capture the full model state.
"""

from __future__ import annotations

import json
from pathlib import Path

import numpy as np

from . import autodiff as ad
from .autodiff import Value
from .errors import ConfigurationError, SchemaError, ShapeError

__all__ = [
    "ParameterSet",
    "BufferSet",
    "init_parameters",
    "dropout",
    "BatchNorm",
    "GruEncoder",
    "ViewEncoder",
    "DenseHead",
    "save_state",
    "load_state",
]

TRAIN, EVAL = "train", "eval"


def _check_mode(mode):
    if mode not in (TRAIN, EVAL):
        raise ConfigurationError(f"mode must be 'train' or 'eval', got {mode!r}")
    return mode == TRAIN


# ---------------------------------------------------------------------------
# parameter plumbing
# ---------------------------------------------------------------------------

class ParameterSet:
    """Named trainable leaves; the unit the optimizer and snapshots act on."""

    def __init__(self):
        self._params: dict[str, Value] = {}

    def add(self, name, array) -> Value:
        if name in self._params:
            raise ConfigurationError(f"duplicate parameter {name!r}")
        value = Value(np.asarray(array), requires_grad=True)
        self._params[name] = value
        return value

    def __iter__(self):
        return iter(self._params)

    def __len__(self):
        return len(self._params)

    def items(self):
        return self._params.items()

    def __getitem__(self, name) -> Value:
        return self._params[name]

    def zero_grad(self):
        for p in self._params.values():
            p.zero_grad()

    def snapshot(self):
        return {name: p.data.copy() for name, p in self._params.items()}

    def restore(self, snapshot):
        for name, p in self._params.items():
            p.data = snapshot[name].copy()

    def adopt(self, prefix, child: "ParameterSet"):
        """Re-register a child model's parameters under a name prefix."""
        for name, value in child.items():
            key = f"{prefix}.{name}"
            if key in self._params:
                raise ConfigurationError(f"duplicate parameter {key!r}")
            self._params[key] = value


class BufferSet:
    """Named non-trainable state (running statistics), updated in place."""

    def __init__(self):
        self._buffers: dict[str, np.ndarray] = {}

    def add(self, name, array) -> np.ndarray:
        if name in self._buffers:
            raise ConfigurationError(f"duplicate buffer {name!r}")
        self._buffers[name] = np.asarray(array)
        return self._buffers[name]

    def items(self):
        return self._buffers.items()

    def __getitem__(self, name):
        return self._buffers[name]

    def snapshot(self):
        return {name: b.copy() for name, b in self._buffers.items()}

    def restore(self, snapshot):
        for name, b in self._buffers.items():
            b[...] = snapshot[name]

    def adopt(self, prefix, child: "BufferSet"):
        for name, buf in child.items():
            key = f"{prefix}.{name}"
            if key in self._buffers:
                raise ConfigurationError(f"duplicate buffer {key!r}")
            self._buffers[key] = buf


def init_parameters(spec, seed, dtype=np.float32):
    """Deterministic initial arrays for a shape spec.

    ``spec`` maps a parameter path to ``(kind, shape)`` or
    ``(kind, shape, (fan_in, fan_out))``.  Weights draw from
    uniform(-a, a) with a = sqrt(6 / (fan_in + fan_out)); biases and
    shift (beta) start at zero, scale (gamma) at one.
    """
    rng = np.random.default_rng(seed)
    out = {}
    for name, entry in spec.items():
        kind, shape = entry[0], tuple(entry[1])
        if kind == "weight":
            fan_in, fan_out = entry[2] if len(entry) > 2 else (shape[0], shape[1])
            a = np.sqrt(6.0 / (fan_in + fan_out))
            arr = rng.uniform(-a, a, size=shape)
        elif kind == "bias" or kind == "beta":
            arr = np.zeros(shape)
        elif kind == "gamma":
            arr = np.ones(shape)
        else:
            raise ConfigurationError(f"unknown parameter kind {kind!r} for {name!r}")
        out[name] = arr.astype(dtype)
    return out


# ---------------------------------------------------------------------------
# regularization
# ---------------------------------------------------------------------------

def dropout(x: Value, rate, mode, rng) -> Value:
    """Inverted dropout: identity in eval mode, rescaled mask in train."""
    if not 0.0 <= rate < 1.0:
        raise ConfigurationError(f"dropout rate must lie in [0, 1), got {rate}")
    if not _check_mode(mode) or rate == 0.0:
        return x
    keep = (rng.random(x.shape) >= rate).astype(x.data.dtype)
    return ad.mul(x, Value(keep / np.asarray(1.0 - rate, dtype=x.data.dtype)))


class BatchNorm:
    """Per-feature batch normalization with running statistics."""

    def __init__(self, params: ParameterSet, buffers: BufferSet, name, dim,
                 init, momentum=0.1, eps=1e-5):
        self.gamma = params.add(f"{name}.gamma", init[f"{name}.gamma"])
        self.beta = params.add(f"{name}.beta", init[f"{name}.beta"])
        self.running_mean = buffers.add(f"{name}.running_mean", np.zeros(dim, np.float32))
        self.running_var = buffers.add(f"{name}.running_var", np.ones(dim, np.float32))
        self.momentum = momentum
        self.eps = eps

    @staticmethod
    def spec(name, dim):
        return {f"{name}.gamma": ("gamma", (dim,)), f"{name}.beta": ("beta", (dim,))}

    def __call__(self, x: Value, mode) -> Value:
        if _check_mode(mode):
            if x.shape[0] < 2:
                raise ShapeError("batch normalization needs a batch of >= 2 in train mode")
            out, mu, var = ad.batch_norm_train(x, self.gamma, self.beta, self.eps)
            m = self.momentum
            self.running_mean[...] = (1.0 - m) * self.running_mean + m * mu
            self.running_var[...] = (1.0 - m) * self.running_var + m * var
            return out
        inv = (1.0 / np.sqrt(self.running_var + self.eps)).astype(x.data.dtype)
        weight = ad.mul(self.gamma, Value(inv))
        shift = ad.sub(self.beta, ad.mul(self.gamma, Value(self.running_mean * inv)))
        return ad.add(ad.mul(x, weight), shift)


# ---------------------------------------------------------------------------
# recurrent encoder
# ---------------------------------------------------------------------------

class _GruLayer:
    """One GRU layer with packed [C, 3H] input and [H, 3H] hidden weights
    (gate order: update z | reset r | candidate n)."""

    def __init__(self, params: ParameterSet, name, input_channels, hidden_units, init):
        self.h = hidden_units
        self.c = input_channels
        self.w_x = params.add(f"{name}.w_x", init[f"{name}.w_x"])
        self.b_x = params.add(f"{name}.b_x", init[f"{name}.b_x"])
        self.w_h = params.add(f"{name}.w_h", init[f"{name}.w_h"])
        self.b_hn = params.add(f"{name}.b_hn", init[f"{name}.b_hn"])

    @staticmethod
    def spec(name, input_channels, hidden_units):
        c, h = input_channels, hidden_units
        return {
            f"{name}.w_x": ("weight", (c, 3 * h), (c, h)),
            f"{name}.b_x": ("bias", (3 * h,)),
            f"{name}.w_h": ("weight", (h, 3 * h), (h, h)),
            f"{name}.b_hn": ("bias", (h,)),
        }

    def forward(self, stacked, batch, timesteps):
        """`stacked` is the [T*B, C] concatenation of per-timestep inputs
        (t-major); returns the list of per-timestep hidden states [B, H]."""
        h_dim = self.h
        proj = ad.add(ad.matmul(stacked, self.w_x), self.b_x)  # [T*B, 3H]
        h = Value(np.zeros((batch, h_dim), dtype=stacked.data.dtype))
        states = []
        for t in range(timesteps):
            xt = ad.narrow(proj, 0, t * batch, batch)
            hp = ad.matmul(h, self.w_h)
            xz, xr, xn = (ad.narrow(xt, 1, k * h_dim, h_dim) for k in range(3))
            hz, hr = ad.narrow(hp, 1, 0, h_dim), ad.narrow(hp, 1, h_dim, h_dim)
            hn = ad.add(ad.narrow(hp, 1, 2 * h_dim, h_dim), self.b_hn)
            z = ad.sigmoid(ad.add(xz, hz))
            r = ad.sigmoid(ad.add(xr, hr))
            n = ad.tanh(ad.add(xn, ad.mul(r, hn)))
            # h' = (1 - z) * n + z * h, rewritten as n + z * (h - n)
            h = ad.add(n, ad.mul(z, ad.sub(h, n)))
            states.append(h)
        return states


class GruEncoder:
    """Stacked GRU; the view-representation is the final timestep's
    top-layer hidden state."""

    def __init__(self, params: ParameterSet, name, input_channels, hidden_units,
                 num_layers, init, dropout_rate=0.0):
        if num_layers < 1:
            raise ConfigurationError("GRU needs at least one layer")
        self.input_channels = input_channels
        self.hidden_units = hidden_units
        self.dropout_rate = dropout_rate
        self.layers = [
            _GruLayer(
                params,
                f"{name}.l{i}",
                input_channels if i == 0 else hidden_units,
                hidden_units,
                init,
            )
            for i in range(num_layers)
        ]

    @staticmethod
    def spec(name, input_channels, hidden_units, num_layers):
        out = {}
        for i in range(num_layers):
            c = input_channels if i == 0 else hidden_units
            out.update(_GruLayer.spec(f"{name}.l{i}", c, hidden_units))
        return out

    def forward(self, sequence: Value, mode, rng=None) -> Value:
        if sequence.data.ndim != 3:
            raise ShapeError(f"expected [B, T, C] input, got {sequence.shape}")
        batch, timesteps, channels = sequence.shape
        if channels != self.input_channels:
            raise ShapeError(f"encoder expects {self.input_channels} channels, got {channels}")
        if timesteps < 1:
            raise ShapeError("sequence must have at least one timestep")

        # t-major stack [T*B, C] so each layer runs one input projection.
        steps = [
            ad.reshape(ad.narrow(sequence, 1, t, 1), (batch, channels))
            for t in range(timesteps)
        ]
        stacked = ad.concat(steps, 0) if timesteps > 1 else steps[0]
        for i, layer in enumerate(self.layers):
            if i > 0:
                stacked = dropout(stacked, self.dropout_rate, mode, rng)
            states = layer.forward(stacked, batch, timesteps)
            if i + 1 < len(self.layers):
                stacked = ad.concat(states, 0) if timesteps > 1 else states[0]
        return states[-1]


class ViewEncoder:
    """Maps one view (temporal or static) to its representation [B, H]."""

    def __init__(self, params, buffers, name, view_spec, timesteps, hidden_units,
                 num_layers, init, dropout_rate=0.0, batchnorm=True,
                 bn_momentum=0.1, bn_eps=1e-5):
        self.spec = view_spec
        self.timesteps = timesteps
        self.gru = GruEncoder(
            params, f"{name}.gru", view_spec.channels, hidden_units, num_layers,
            init, dropout_rate=dropout_rate,
        )
        self.bn = (
            BatchNorm(params, buffers, f"{name}.bn", hidden_units, init,
                      momentum=bn_momentum, eps=bn_eps)
            if batchnorm
            else None
        )

    @staticmethod
    def param_spec(name, view_spec, hidden_units, num_layers, batchnorm=True):
        out = GruEncoder.spec(f"{name}.gru", view_spec.channels, hidden_units, num_layers)
        if batchnorm:
            out.update(BatchNorm.spec(f"{name}.bn", hidden_units))
        return out

    def forward(self, view: Value, mode, rng=None) -> Value:
        if self.spec.static:
            view = tile_static(view, self.timesteps)
        rep = self.gru.forward(view, mode, rng)
        if self.bn is not None:
            rep = self.bn(rep, mode)
        return rep


def tile_static(view: Value, timesteps) -> Value:
    """Repeat a static [B, C] view across time into [B, T, C]; gradients
    to the static input sum over timesteps."""
    if view.data.ndim != 2:
        raise ShapeError(f"static view must be [B, C], got {view.shape}")
    b, c = view.shape
    row = ad.reshape(view, (b, 1, c))
    if timesteps == 1:
        return row
    return ad.concat([row] * timesteps, 1)


# ---------------------------------------------------------------------------
# dense head
# ---------------------------------------------------------------------------

class DenseHead:
    """One hidden relu layer then a single logit per sample."""

    def __init__(self, params, buffers, name, in_dim, hidden_units, init,
                 dropout_rate=0.0, batchnorm=True, bn_momentum=0.1, bn_eps=1e-5):
        self.w1 = params.add(f"{name}.w1", init[f"{name}.w1"])
        self.b1 = params.add(f"{name}.b1", init[f"{name}.b1"])
        self.w2 = params.add(f"{name}.w2", init[f"{name}.w2"])
        self.b2 = params.add(f"{name}.b2", init[f"{name}.b2"])
        self.dropout_rate = dropout_rate
        self.bn = (
            BatchNorm(params, buffers, f"{name}.bn", hidden_units, init,
                      momentum=bn_momentum, eps=bn_eps)
            if batchnorm
            else None
        )

    @staticmethod
    def param_spec(name, in_dim, hidden_units, batchnorm=True):
        out = {
            f"{name}.w1": ("weight", (in_dim, hidden_units)),
            f"{name}.b1": ("bias", (hidden_units,)),
            f"{name}.w2": ("weight", (hidden_units, 1)),
            f"{name}.b2": ("bias", (1,)),
        }
        if batchnorm:
            out.update(BatchNorm.spec(f"{name}.bn", hidden_units))
        return out

    def forward(self, x: Value, mode, rng=None) -> Value:
        hidden = ad.add(ad.matmul(x, self.w1), self.b1)
        if self.bn is not None:
            hidden = self.bn(hidden, mode)
        hidden = ad.relu(hidden)
        hidden = dropout(hidden, self.dropout_rate, mode, rng)
        logit = ad.add(ad.matmul(hidden, self.w2), self.b2)
        return ad.reshape(logit, (x.shape[0],))


# ---------------------------------------------------------------------------
# checkpoints
# ---------------------------------------------------------------------------

def save_state(params: ParameterSet, buffers: BufferSet, out_dir) -> Path:
    """Write all arrays as flat float32 into one binary plus a manifest
    keyed by parameter path; load_state inverts it bit-exactly."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    entries = {}
    offset = 0
    with open(out_dir / "checkpoint.bin", "wb") as fh:
        for kind, items in (("param", params.items()), ("buffer", buffers.items())):
            for name, value in items:
                arr = (value.data if kind == "param" else value).astype("<f4")
                fh.write(arr.tobytes())
                entries[name] = {
                    "kind": kind,
                    "shape": list(arr.shape),
                    "offset": offset,
                }
                offset += arr.nbytes
    manifest = out_dir / "checkpoint.json"
    manifest.write_text(json.dumps({"arrays": entries, "total_bytes": offset}, indent=2))
    return manifest


def load_state(params: ParameterSet, buffers: BufferSet, state_dir):
    """Restore arrays saved by `save_state` into an existing model."""
    state_dir = Path(state_dir)
    manifest = json.loads((state_dir / "checkpoint.json").read_text())
    blob = (state_dir / "checkpoint.bin").read_bytes()
    if len(blob) != manifest["total_bytes"]:
        raise SchemaError("checkpoint binary size does not match its manifest")

    def read(name):
        entry = manifest["arrays"].get(name)
        if entry is None:
            raise SchemaError(f"checkpoint missing array {name!r}")
        shape = tuple(entry["shape"])
        count = int(np.prod(shape)) if shape else 1
        arr = np.frombuffer(blob, dtype="<f4", count=count, offset=entry["offset"])
        return arr.reshape(shape)

    for name, value in params.items():
        value.data = read(name).astype(value.data.dtype)
    for name, buf in buffers.items():
        buf[...] = read(name)
