"""Multi-view dataset schema, on-disk format, and preprocessing.

On-disk layout: a ``manifest.json`` describing shapes and split indices,
one headerless raw binary per view (little-endian IEEE-754 float32,
row-major ``[N, T, C]`` for temporal views, ``[N, C]`` for static views),
and a labels file with one unsigned byte per sample.  Round-trips are
bit-exact.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .errors import (
    ConfigurationError,
    DataCorruptionError,
    PartitionError,
    RangeError,
    SchemaError,
)

ARRAY_DTYPE = np.dtype("<f4")
LABEL_DTYPE = np.dtype("u1")
SPLIT_NAMES = ("train", "val", "test")
CANONICAL_TIMESTEPS = 12


@dataclass(frozen=True)
class ViewSpec:
    """Shape metadata for one view; `timesteps` is 0 for static views."""

    name: str
    channels: int
    timesteps: int
    static: bool
    file: str = ""

    def __post_init__(self):
        if not self.name:
            raise SchemaError("view name must be non-empty")
        if self.channels < 1:
            raise SchemaError(f"view {self.name!r}: channels must be >= 1")
        if self.static != (self.timesteps == 0):
            raise SchemaError(f"view {self.name!r}: static flag must match timesteps == 0")


class MultiViewDataset:
    """Immutable collection of per-view arrays, labels, and split indices.

    Every sample carries every view; temporal views share one time axis.
    Arrays are marked read-only so a dataset can be shared across
    concurrent training runs.
    """

    def __init__(self, views, labels, splits, name="dataset"):
        if not views:
            raise SchemaError("dataset needs at least one view")
        names = [spec.name for spec, _ in views]
        if len(set(names)) != len(names):
            raise SchemaError(f"duplicate view names in {names}")

        labels = np.ascontiguousarray(labels, dtype=LABEL_DTYPE)
        if labels.ndim != 1:
            raise SchemaError("labels must be one-dimensional")
        if labels.size and not np.isin(labels, (0, 1)).all():
            raise SchemaError("labels must contain only 0 or 1")
        n = labels.shape[0]

        timesteps = 0
        specs, arrays = [], {}
        for spec, arr in views:
            arr = np.ascontiguousarray(arr, dtype=np.float32)
            expected_ndim = 2 if spec.static else 3
            if arr.ndim != expected_ndim:
                raise SchemaError(f"view {spec.name!r}: expected rank {expected_ndim}, got {arr.ndim}")
            if arr.shape[0] != n:
                raise SchemaError(f"view {spec.name!r}: {arr.shape[0]} samples, labels have {n}")
            if arr.shape[-1] != spec.channels:
                raise SchemaError(f"view {spec.name!r}: channel axis {arr.shape[-1]} != {spec.channels}")
            if not spec.static:
                if spec.timesteps != arr.shape[1]:
                    raise SchemaError(f"view {spec.name!r}: time axis {arr.shape[1]} != {spec.timesteps}")
                if timesteps and arr.shape[1] != timesteps:
                    raise SchemaError("all temporal views must share the same number of timesteps")
                timesteps = arr.shape[1]
            arr.flags.writeable = False
            specs.append(spec)
            arrays[spec.name] = arr

        cleaned = {}
        seen = np.zeros(n, dtype=bool)
        for split in SPLIT_NAMES:
            idx = np.asarray(splits.get(split, []), dtype=np.int64).reshape(-1)
            if idx.size:
                if idx.min() < 0 or idx.max() >= n:
                    raise RangeError(f"split {split!r} has indices outside [0, {n})")
                if np.unique(idx).size != idx.size or seen[idx].any():
                    raise SchemaError(f"split {split!r} overlaps another split or repeats indices")
                seen[idx] = True
            idx.flags.writeable = False
            cleaned[split] = idx

        labels.flags.writeable = False
        self.name = name
        self.specs = tuple(specs)
        self.views = arrays
        self.labels = labels
        self.splits = cleaned
        self.timesteps = timesteps

    @property
    def num_samples(self):
        return self.labels.shape[0]

    @property
    def view_names(self):
        return [spec.name for spec in self.specs]

    def spec(self, name) -> ViewSpec:
        for spec in self.specs:
            if spec.name == name:
                return spec
        raise KeyError(name)

    def take(self, indices):
        """Materialize ``{view: array[indices]}`` plus labels for a split."""
        indices = np.asarray(indices, dtype=np.int64)
        views = {name: arr[indices] for name, arr in self.views.items()}
        return views, self.labels[indices]

    def with_views(self, new_views, name=None):
        """Copy of this dataset with replaced view arrays (same splits/labels)."""
        pairs = [(spec, new_views[spec.name]) for spec in self.specs]
        return MultiViewDataset(pairs, self.labels, dict(self.splits), name or self.name)


# ---------------------------------------------------------------------------
# on-disk format
# ---------------------------------------------------------------------------

def write_dataset(dataset: MultiViewDataset, out_dir) -> Path:
    """Write manifest + per-view binaries; `load_dataset` inverts exactly."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)

    entries = []
    for spec in dataset.specs:
        fname = spec.file or f"{spec.name}.bin"
        dataset.views[spec.name].astype(ARRAY_DTYPE, copy=False).tofile(out_dir / fname)
        entries.append(
            {"name": spec.name, "channels": spec.channels, "static": spec.static, "file": fname}
        )
    dataset.labels.astype(LABEL_DTYPE, copy=False).tofile(out_dir / "labels.bin")

    manifest = {
        "name": dataset.name,
        "num_samples": dataset.num_samples,
        "timesteps": dataset.timesteps,
        "views": entries,
        "labels_file": "labels.bin",
        "splits": {k: v.tolist() for k, v in dataset.splits.items()},
    }
    path = out_dir / "manifest.json"
    path.write_text(json.dumps(manifest, indent=2))
    return path


def _require(manifest, key, kind):
    if key not in manifest:
        raise SchemaError(f"manifest missing {key!r}")
    value = manifest[key]
    if not isinstance(value, kind):
        raise SchemaError(f"manifest field {key!r} has wrong type {type(value).__name__}")
    return value


def load_dataset(manifest_path) -> MultiViewDataset:
    """Load a dataset directory via its manifest, validating sizes exactly."""
    manifest_path = Path(manifest_path)
    try:
        manifest = json.loads(manifest_path.read_text())
    except (OSError, json.JSONDecodeError) as exc:
        raise SchemaError(f"cannot parse manifest {manifest_path}: {exc}") from exc
    if not isinstance(manifest, dict):
        raise SchemaError("manifest root must be an object")

    base = manifest_path.parent
    n = _require(manifest, "num_samples", int)
    timesteps = _require(manifest, "timesteps", int)
    if n < 0 or timesteps < 0:
        raise SchemaError("num_samples and timesteps must be non-negative")

    views = []
    for entry in _require(manifest, "views", list):
        if not isinstance(entry, dict):
            raise SchemaError("view entries must be objects")
        static = bool(_require(entry, "static", bool))
        spec = ViewSpec(
            name=_require(entry, "name", str),
            channels=_require(entry, "channels", int),
            timesteps=0 if static else timesteps,
            static=static,
            file=_require(entry, "file", str),
        )
        shape = (n, spec.channels) if static else (n, timesteps, spec.channels)
        expected = int(np.prod(shape)) * ARRAY_DTYPE.itemsize
        path = base / spec.file
        if not path.exists():
            raise SchemaError(f"view file {spec.file!r} missing")
        actual = path.stat().st_size
        if actual != expected:
            raise DataCorruptionError(
                f"view {spec.name!r}: file is {actual} bytes, expected {expected}"
            )
        arr = np.fromfile(path, dtype=ARRAY_DTYPE).reshape(shape).astype(np.float32, copy=False)
        views.append((spec, arr))

    labels_file = base / _require(manifest, "labels_file", str)
    if not labels_file.exists():
        raise SchemaError("labels file missing")
    if labels_file.stat().st_size != n:
        raise DataCorruptionError(
            f"labels file is {labels_file.stat().st_size} bytes, expected {n}"
        )
    labels = np.fromfile(labels_file, dtype=LABEL_DTYPE)

    splits = _require(manifest, "splits", dict)
    return MultiViewDataset(views, labels, splits, name=manifest.get("name", "dataset"))


# ---------------------------------------------------------------------------
# preprocessing
# ---------------------------------------------------------------------------

def temporal_average(raw, target_timesteps, bin_edges):
    """Average a [N, T_raw, C] series into `target_timesteps` bins."""
    raw = np.asarray(raw)
    if raw.ndim != 3:
        raise PartitionError("temporal_average expects a [N, T, C] array")
    t_raw = raw.shape[1]
    edges = [int(e) for e in bin_edges]
    if len(edges) != target_timesteps + 1 or edges[0] != 0 or edges[-1] != t_raw:
        raise PartitionError(
            f"bin edges must run 0..{t_raw} with {target_timesteps + 1} entries, got {edges}"
        )
    if any(b <= a for a, b in zip(edges, edges[1:])):
        raise PartitionError(f"empty or reversed bin in edges {edges}")
    out = np.stack(
        [raw[:, a:b, :].mean(axis=1) for a, b in zip(edges, edges[1:])], axis=1
    )
    return out.astype(raw.dtype, copy=False)


@dataclass(frozen=True)
class ViewStats:
    """Per-channel train statistics for one view; reusable at inference."""

    mean: np.ndarray
    std: np.ndarray
    constant: np.ndarray  # bool per channel; constant channels map to 0

    def apply(self, arr):
        out = (np.asarray(arr, dtype=np.float64) - self.mean) / np.where(self.constant, 1.0, self.std)
        out[..., self.constant] = 0.0
        return out.astype(np.float32)


def compute_view_stats(arr) -> ViewStats:
    """Population mean/std per channel, over samples (and timesteps)."""
    arr = np.asarray(arr, dtype=np.float64)
    axes = tuple(range(arr.ndim - 1))
    mean = arr.mean(axis=axes)
    std = arr.std(axis=axes)
    constant = std == 0.0
    return ViewStats(mean=mean, std=std, constant=constant)


def standardize(dataset: MultiViewDataset):
    """Standardize every channel to train-split mean 0 / std 1.

    Returns ``(new dataset, {view: ViewStats})``; constant channels are
    flagged and mapped to zero.
    """
    train_idx = dataset.splits["train"]
    if train_idx.size == 0:
        raise ConfigurationError("standardize requires a non-empty train split")
    stats, transformed = {}, {}
    for spec in dataset.specs:
        arr = dataset.views[spec.name]
        view_stats = compute_view_stats(arr[train_idx])
        stats[spec.name] = view_stats
        transformed[spec.name] = view_stats.apply(arr)
    return dataset.with_views(transformed), stats


def split_train_val(train_indices, val_fraction, seed):
    """Split an index list into (train, val); |val| = round(f * n), >= 1."""
    indices = np.asarray(train_indices, dtype=np.int64).reshape(-1)
    n = indices.size
    if n < 2:
        raise ConfigurationError("need at least 2 indices to split")
    if not 0.0 < val_fraction < 1.0:
        raise ConfigurationError("val_fraction must lie in (0, 1)")
    n_val = max(int(np.floor(val_fraction * n + 0.5)), 1)
    if n_val >= n:
        raise ConfigurationError(
            f"val_fraction {val_fraction} leaves no training data for {n} indices"
        )
    perm = np.random.default_rng(seed).permutation(n)
    val = np.sort(indices[perm[:n_val]])
    train = np.sort(indices[perm[n_val:]])
    return train, val
