"""The repeated-runs experiment harness: seeded training runs, test-set
metrics, per-run JSON-lines records, and the all-methods comparison.

Splits are fixed once per experiment (validation carved from the train
split when the dataset does not provide one), so repeated runs differ only
in weight initialization and batch shuffling.  Run ``i`` of an experiment
uses seed ``base_seed + i``; ensemble members and single-view baselines
derive per-view seeds from the run seed.
"""

from __future__ import annotations

import json
import os
import time
from dataclasses import dataclass, replace
from pathlib import Path

import numpy as np

from .data import MultiViewDataset, compute_view_stats, split_train_val
from .errors import ConfigurationError, MvfusionError, RunFailedError
from .fusion import (
    DEFAULT_GATE,
    DEFAULT_MERGE,
    ModelConfig,
    branch_seed,
    build_model,
)
from .metrics import compute_all
from .training import TrainConfig, bce_numpy, fit_model, predict_in_chunks

_SHUFFLE_OFFSET = 0x9E3779B9

RESULT_KEYS = ("method", "merge", "gate", "seed", "epochs", "val_loss", "metrics", "wall_time_s")


@dataclass
class TrainRunResult:
    """One seeded run: provenance, stopping point, and test metrics."""

    method: str
    merge: str | None
    gate: str | None
    seed: int
    epochs: int
    val_loss: float
    metrics: dict
    wall_time_s: float
    note: str | None = None
    failed: bool = False
    error: str | None = None

    def to_json(self) -> dict:
        row = {
            "method": self.method,
            "merge": self.merge,
            "gate": self.gate,
            "seed": self.seed,
            "epochs": self.epochs,
            "val_loss": self.val_loss,
            "metrics": self.metrics,
            "wall_time_s": self.wall_time_s,
        }
        if self.note:
            row["note"] = self.note
        if self.failed:
            row["failed"] = True
            row["error"] = self.error
        return row


@dataclass
class PreparedData:
    """Standardized split arrays shared by every run of an experiment."""

    specs: tuple
    timesteps: int
    train_views: dict
    train_labels: np.ndarray
    val_views: dict
    val_labels: np.ndarray
    test_views: dict
    test_labels: np.ndarray


def prepare_dataset(dataset: MultiViewDataset, val_fraction=0.1, seed=0,
                    standardize=True) -> PreparedData:
    """Resolve splits (carving validation out of train when absent) and
    standardize every view with statistics from the final train portion."""
    train_idx = dataset.splits["train"]
    val_idx = dataset.splits["val"]
    test_idx = dataset.splits["test"]
    if train_idx.size == 0:
        raise ConfigurationError("dataset has an empty train split")
    if test_idx.size == 0:
        raise ConfigurationError("dataset has an empty test split")
    if val_idx.size == 0:
        train_idx, val_idx = split_train_val(train_idx, val_fraction, seed)

    train_views, train_labels = dataset.take(train_idx)
    val_views, val_labels = dataset.take(val_idx)
    test_views, test_labels = dataset.take(test_idx)

    if standardize:
        stats = {name: compute_view_stats(arr) for name, arr in train_views.items()}
        train_views = {k: stats[k].apply(v) for k, v in train_views.items()}
        val_views = {k: stats[k].apply(v) for k, v in val_views.items()}
        test_views = {k: stats[k].apply(v) for k, v in test_views.items()}

    return PreparedData(
        specs=dataset.specs,
        timesteps=dataset.timesteps,
        train_views=train_views,
        train_labels=train_labels,
        val_views=val_views,
        val_labels=val_labels,
        test_views=test_views,
        test_labels=test_labels,
    )


def _method_label(config: ModelConfig, view_name=None):
    if config.method == "single":
        return f"single:{view_name}"
    return config.method


def _run_once(model_config: ModelConfig, train_config: TrainConfig,
              prepared: PreparedData, view_subset=None):
    """Train one model and evaluate it on the test split."""
    specs = prepared.specs if view_subset is None else tuple(
        s for s in prepared.specs if s.name in view_subset
    )
    start = time.perf_counter()
    model = build_model(model_config, specs, prepared.timesteps)
    fit = fit_model(
        model,
        {s.name: prepared.train_views[s.name] for s in specs},
        prepared.train_labels,
        {s.name: prepared.val_views[s.name] for s in specs},
        prepared.val_labels,
        train_config,
        shuffle_seed=model_config.seed + _SHUFFLE_OFFSET,
    )
    probs = predict_in_chunks(model, {s.name: prepared.test_views[s.name] for s in specs})
    metrics = compute_all(probs, prepared.test_labels, train_config.threshold)
    elapsed = time.perf_counter() - start
    view_name = specs[0].name if model_config.method == "single" else None
    result = TrainRunResult(
        method=_method_label(model_config, view_name),
        merge=model_config.merge,
        gate=model_config.gate,
        seed=model_config.seed,
        epochs=fit.epochs_trained,
        val_loss=fit.best_val_loss,
        metrics=metrics,
        wall_time_s=round(elapsed, 3),
    )
    return model, result


def _ensemble_proba(models, views):
    return np.mean([predict_in_chunks(m, views) for m in models], axis=0)


def train_ensemble(model_config: ModelConfig, train_config: TrainConfig,
                   prepared: PreparedData):
    """Two-step training: one single-view model per view, then averaged
    test-time prediction.  Returns (models, ensemble result, member results)."""
    if model_config.method != "ensemble":
        raise ConfigurationError("train_ensemble requires method 'ensemble'")
    start = time.perf_counter()
    models, member_results = [], []
    for index, spec in enumerate(prepared.specs):
        member_cfg = replace(
            model_config,
            method="single",
            merge=None,
            gate=None,
            seed=branch_seed(model_config.seed, index),
        )
        model, result = _run_once(member_cfg, train_config, prepared, view_subset={spec.name})
        models.append(model)
        member_results.append(result)

    val_loss = bce_numpy(_ensemble_proba(models, prepared.val_views), prepared.val_labels)
    probs = _ensemble_proba(models, prepared.test_views)
    metrics = compute_all(probs, prepared.test_labels, train_config.threshold)
    result = TrainRunResult(
        method="ensemble",
        merge=None,
        gate=None,
        seed=model_config.seed,
        epochs=max(r.epochs for r in member_results),
        val_loss=val_loss,
        metrics=metrics,
        wall_time_s=round(time.perf_counter() - start, 3),
    )
    return models, result, member_results


def ensemble_result_from_models(models, run_seed, train_config, prepared,
                                note="reused single-view checkpoints"):
    """Ensemble evaluation over already-trained members (no retraining)."""
    start = time.perf_counter()
    val_loss = bce_numpy(_ensemble_proba(models, prepared.val_views), prepared.val_labels)
    probs = _ensemble_proba(models, prepared.test_views)
    metrics = compute_all(probs, prepared.test_labels, train_config.threshold)
    return TrainRunResult(
        method="ensemble",
        merge=None,
        gate=None,
        seed=run_seed,
        epochs=0,
        val_loss=val_loss,
        metrics=metrics,
        wall_time_s=round(time.perf_counter() - start, 3),
        note=note,
    )


def train_model(model_config: ModelConfig, train_config: TrainConfig,
                dataset: MultiViewDataset):
    """Single seeded run on a dataset (ensemble delegates to its two-step
    trainer); returns (model or models, TrainRunResult)."""
    prepared = prepare_dataset(dataset, train_config.val_fraction, train_config.base_seed)
    if model_config.method == "ensemble":
        models, result, _ = train_ensemble(model_config, train_config, prepared)
        return models, result
    return _run_once(model_config, train_config, prepared)


def _failed_result(model_config, seed, error):
    return TrainRunResult(
        method=_method_label(model_config),
        merge=model_config.merge,
        gate=model_config.gate,
        seed=seed,
        epochs=0,
        val_loss=float("nan"),
        metrics={},
        wall_time_s=0.0,
        failed=True,
        error=str(error),
    )


def run_experiment(model_config: ModelConfig, train_config: TrainConfig,
                   dataset: MultiViewDataset, runs=None, prepared=None,
                   keep_models=False):
    """`runs` independent training runs with seeds base_seed + run index.

    Individual run failures are recorded, not fatal, provided at least
    one run succeeds.  Results are ordered by run index.
    """
    runs = train_config.runs if runs is None else runs
    if runs < 1:
        raise ConfigurationError("runs must be >= 1")
    if prepared is None:
        prepared = prepare_dataset(dataset, train_config.val_fraction, train_config.base_seed)
    results, models = [], []
    for run in range(runs):
        seed = train_config.base_seed + run
        cfg = replace(model_config, seed=seed)
        try:
            if cfg.method == "ensemble":
                run_models, result, _ = train_ensemble(cfg, train_config, prepared)
            else:
                run_models, result = _run_once(cfg, train_config, prepared)
        except MvfusionError as exc:
            result, run_models = _failed_result(cfg, seed, exc), None
        results.append(result)
        if keep_models:
            models.append(run_models)
    if all(r.failed for r in results):
        errors = "; ".join(str(r.error) for r in results)
        raise RunFailedError(f"every run failed: {errors}")
    return (results, models) if keep_models else results


ALL_TRAINABLE_METHODS = ("input", "feature-s", "feature-g", "decision", "multiloss")


def run_comparison(train_config: TrainConfig, dataset: MultiViewDataset,
                   merge=DEFAULT_MERGE, gate=DEFAULT_GATE, runs=None,
                   progress=None, model_overrides=None,
                   methods=ALL_TRAINABLE_METHODS):
    """Single-view baselines plus the fusion methods on one dataset.

    The ensemble section reuses the single-view models trained for the
    baselines (the two-step protocol) instead of retraining them;
    `methods` narrows the jointly-trained methods that follow.
    """
    runs = train_config.runs if runs is None else runs
    prepared = prepare_dataset(dataset, train_config.val_fraction, train_config.base_seed)
    overrides = model_overrides or {}

    def say(message):
        if progress:
            progress(message)

    results = []
    # Per-view baselines; member seeds match what train_ensemble would use.
    singles_by_run = {run: [] for run in range(runs)}
    for index, spec in enumerate(prepared.specs):
        for run in range(runs):
            run_seed = train_config.base_seed + run
            cfg = ModelConfig(method="single", seed=branch_seed(run_seed, index), **overrides)
            say(f"single:{spec.name} run {run}")
            model, result = _run_once(cfg, train_config, prepared, view_subset={spec.name})
            results.append(result)
            singles_by_run[run].append(model)

    for run in range(runs):
        run_seed = train_config.base_seed + run
        say(f"ensemble run {run} (reusing single-view models)")
        results.append(
            ensemble_result_from_models(singles_by_run[run], run_seed, train_config, prepared)
        )

    builders = {
        "input": lambda: ModelConfig(method="input", **overrides),
        "feature-s": lambda: ModelConfig(method="feature-s", merge=merge, **overrides),
        "feature-g": lambda: ModelConfig(method="feature-g", gate=gate, **overrides),
        "decision": lambda: ModelConfig(method="decision", **overrides),
        "multiloss": lambda: ModelConfig(method="multiloss", **overrides),
    }
    unknown = set(methods) - set(builders)
    if unknown:
        raise ConfigurationError(f"unknown methods {sorted(unknown)}")
    method_configs = [builders[m]() for m in methods]
    for config in method_configs:
        for run in range(runs):
            cfg = replace(config, seed=train_config.base_seed + run)
            say(f"{cfg.method} run {run}")
            try:
                _, result = _run_once(cfg, train_config, prepared)
            except MvfusionError as exc:
                result = _failed_result(cfg, cfg.seed, exc)
            results.append(result)
    return results


# ---------------------------------------------------------------------------
# results files
# ---------------------------------------------------------------------------

def write_atomic(path, text):
    """Write via a temp file in the same directory, then rename."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    tmp = path.with_name(path.name + ".tmp")
    tmp.write_text(text)
    os.replace(tmp, path)
    return path


def write_results(path, results) -> Path:
    lines = [json.dumps(r.to_json() if isinstance(r, TrainRunResult) else r) for r in results]
    return write_atomic(path, "\n".join(lines) + "\n")


def read_results(path):
    rows = []
    for line in Path(path).read_text().splitlines():
        line = line.strip()
        if line:
            rows.append(json.loads(line))
    return rows
