"""Acceptance suite: one test per criterion, each printing a PASS/FAIL line.

Run with ``pytest tests/test_acceptance.py -v -s``.  The end-to-end study
(criteria 5 and 6) trains at full architecture scale on a seeded synthetic
dataset and takes a few minutes per execution.
"""

import json
import time
from contextlib import contextmanager

import numpy as np
import pytest

from mvfusion import autodiff as ad
from mvfusion.autodiff import Value
from mvfusion.data import ViewSpec, load_dataset, write_dataset
from mvfusion.experiment import prepare_dataset, read_results, run_comparison, write_results
from mvfusion.fusion import (
    GateModule,
    ModelConfig,
    build_model,
    branch_seed,
    ensemble_predict,
    fuse_gated,
    gate_weights,
    merge_simple,
)
from mvfusion.layers import (
    EVAL,
    BufferSet,
    DenseHead,
    GruEncoder,
    ParameterSet,
    ViewEncoder,
    init_parameters,
)
from mvfusion.metrics import (
    aggregate,
    auc,
    average_accuracy,
    binary_f1,
    prediction_entropy,
    relative_improvement,
    round_half_up,
)
from mvfusion.synth import SynthConfig, SynthViewConfig, synth_generate
from mvfusion.training import TrainConfig, fit_model, predict_in_chunks

from conftest import assert_datasets_identical, make_random_dataset
from gradtools import full_model_grad_check


@contextmanager
def criterion(number, description):
    try:
        yield
    except Exception:
        print(f"\nACCEPTANCE {number} FAIL: {description}", flush=True)
        raise
    print(f"\nACCEPTANCE {number} PASS: {description}", flush=True)


# ===========================================================================
# criterion 1: gradient correctness, < 2 minutes
# ===========================================================================

def _scalarize(v, weights):
    out = ad.mul(v, Value(weights))
    while out.data.ndim > 0:
        out = ad.reduce_mean(out, 0)
    return out


def _primitive_cases(rng):
    def shape():
        return tuple(int(rng.integers(1, 5)) for _ in range(int(rng.integers(1, 4))))

    def strict_max(x, axis=0):
        order = np.argsort(np.argsort(x, axis=axis), axis=axis)
        return x + 0.15 * order

    sh = shape()
    return {
        "matmul": (lambda x, b=rng.normal(size=(3, 2)): ad.matmul(x, Value(b)), rng.normal(size=(2, 3))),
        "add": (lambda x, b=rng.normal(size=sh[-1:]): ad.add(x, Value(b)), rng.normal(size=sh)),
        "mul": (lambda x, b=rng.normal(size=sh): ad.mul(x, Value(b)), rng.normal(size=sh)),
        "scale": (lambda x: ad.scale(x, -2.3), rng.normal(size=shape())),
        "sigmoid": (ad.sigmoid, rng.normal(size=shape())),
        "tanh": (ad.tanh, rng.normal(size=shape())),
        "relu": (ad.relu, np.where(np.abs(z := rng.normal(size=shape())) < 0.02, z + 0.05, z)),
        "softmax": (lambda x: ad.softmax(x, 0), rng.normal(size=shape()) * 2),
        "concat": (lambda x, b=rng.normal(size=sh): ad.concat([x, Value(b)], 0), rng.normal(size=sh)),
        "slice": (lambda x: ad.narrow(x, 0, 0, max(1, x.shape[0] - 1)), rng.normal(size=shape())),
        "reshape": (lambda x: ad.reshape(x, (x.data.size,)), rng.normal(size=shape())),
        "reduce-mean": (lambda x: ad.reduce_mean(x, 0), rng.normal(size=shape())),
        "reduce-max": (lambda x: ad.reduce_max(x, 0), strict_max(rng.normal(size=shape()))),
        "reduce-prod": (lambda x: ad.reduce_prod(x, 0), rng.normal(size=shape())),
        "bce": (
            lambda x, y=(rng.random(6) > 0.5).astype(float): ad.bce(ad.sigmoid(x), y),
            rng.normal(size=6),
        ),
    }


TINY_VIEWS = [
    ViewSpec("a", 2, 4, False),
    ViewSpec("b", 1, 4, False),
    ViewSpec("c", 2, 0, True),
]

TRAINABLE_METHODS = [
    ("input", {}),
    ("feature-s", {"merge": "average"}),
    ("feature-g", {"gate": "gatedf-a"}),
    ("decision", {}),
    ("multiloss", {}),
]


def _tiny_model(method, **kw):
    cfg = ModelConfig(
        method=method, hidden_units=3, gru_layers=2, dense_hidden=3,
        dropout=0.0, batchnorm=True, seed=18, dtype="float64", **kw,
    )
    return build_model(cfg, TINY_VIEWS, 4)


def test_criterion_1_gradient_correctness():
    start = time.perf_counter()
    with criterion(1, "grad_check passes for every primitive, layer, and method loss"):
        # every diffcore primitive, >= 50 random shapes/points each
        for name_seed, (name, _) in enumerate(sorted(_primitive_cases(np.random.default_rng(0)).items())):
            rng = np.random.default_rng(1000 + name_seed)
            for _ in range(50):
                fn, point = _primitive_cases(rng)[name]
                weights = np.random.default_rng(7).normal(size=fn(Value(point)).data.shape)
                report = ad.grad_check(lambda x: _scalarize(fn(x), weights), point, step=1e-3, tolerance=1e-4)
                assert report.passed, f"primitive {name}: {report.max_rel_error:.2e}"

        # every layer (dropout disabled, batch norm in eval for input checks)
        rng = np.random.default_rng(2)

        def through_encoder(x):
            params = ParameterSet()
            init = init_parameters(GruEncoder.spec("g", 3, 3, 2), 5, dtype=np.float64)
            enc = GruEncoder(params, "g", 3, 3, 2, init)
            return _scalarize(enc.forward(x, EVAL), enc_w)

        enc_w = rng.normal(size=(2, 3))
        assert ad.grad_check(through_encoder, rng.normal(size=(2, 4, 3))).passed

        def through_static_view(x):
            params, buffers = ParameterSet(), BufferSet()
            spec = ViewSpec("s", 2, 0, True)
            init = init_parameters(ViewEncoder.param_spec("e", spec, 3, 2), 6, dtype=np.float64)
            enc = ViewEncoder(params, buffers, "e", spec, 4, hidden_units=3, num_layers=2, init=init)
            return _scalarize(enc.forward(x, EVAL), enc_w)

        assert ad.grad_check(through_static_view, rng.normal(size=(2, 2))).passed

        def through_head(x):
            params, buffers = ParameterSet(), BufferSet()
            init = init_parameters(DenseHead.param_spec("h", 3, 3), 7, dtype=np.float64)
            head = DenseHead(params, buffers, "h", 3, 3, init)
            return _scalarize(head.forward(x, EVAL), head_w)

        head_w = rng.normal(size=2)
        assert ad.grad_check(through_head, rng.normal(size=(2, 3))).passed

        bn_w = rng.normal(size=(4, 3))

        def through_batchnorm_train(x):
            out, _, _ = ad.batch_norm_train(x, Value(rng_gamma), Value(rng_beta))
            return _scalarize(out, bn_w)

        rng_gamma, rng_beta = rng.normal(size=3) + 1.2, rng.normal(size=3)
        assert ad.grad_check(through_batchnorm_train, rng.normal(size=(4, 3)), step=1e-4, tolerance=1e-4).passed

        # End-to-end loss of all five trainable methods (H=3, T=4, V=3, B=2).
        # The check point keeps every relu pre-activation farther than the
        # FD step from its kink, where central differences are valid.
        rng = np.random.default_rng(5)
        batch = {
            "a": rng.normal(size=(2, 4, 2)),
            "b": rng.normal(size=(2, 4, 1)),
            "c": rng.normal(size=(2, 2)),
        }
        labels = np.array([1.0, 0.0])
        for method, kw in TRAINABLE_METHODS:
            worst = full_model_grad_check(_tiny_model(method, **kw), batch, labels, step=1e-3)
            assert worst < 1e-4, f"{method}: max rel error {worst:.2e}"

        elapsed = time.perf_counter() - start
        assert elapsed < 120.0, f"gradient suite took {elapsed:.1f}s"


# ===========================================================================
# criterion 2: metric oracles
# ===========================================================================

def _brute_force_auc(scores, labels):
    pos = scores[labels == 1]
    neg = scores[labels == 0]
    greater = (pos[:, None] > neg[None, :]).sum()
    ties = (pos[:, None] == neg[None, :]).sum()
    stat = greater + 0.5 * ties
    return 100.0 * stat / (pos.size * neg.size)


def test_criterion_2_metric_oracles():
    with criterion(2, "metrics match brute-force oracles exactly"):
        rng = np.random.default_rng(20)
        checked = 0
        while checked < 1000:
            n = int(rng.integers(2, 201))
            labels = rng.integers(0, 2, size=n)
            if labels.min() == labels.max():
                continue
            # Mix continuous and heavily-tied score patterns.
            scores = rng.random(n) if checked % 2 else np.round(rng.random(n), 2)
            assert auc(scores, labels) == _brute_force_auc(scores, labels)
            checked += 1

        for _ in range(300):
            n = int(rng.integers(3, 100))
            labels = rng.integers(0, 2, size=n)
            scores = rng.random(n)
            preds = scores >= 0.5
            tp = int(np.sum(preds & (labels == 1)))
            fp = int(np.sum(preds & (labels == 0)))
            fn = int(np.sum(~preds & (labels == 1)))
            tn = int(np.sum(~preds & (labels == 0)))
            if tp + fn > 0 and tn + fp > 0:
                assert average_accuracy(scores, labels) == 100.0 * (tp / (tp + fn) + tn / (tn + fp)) / 2.0
            if tp + fn > 0:
                expected = 0.0 if tp == 0 else 100.0 * 2 * tp / (2 * tp + fp + fn)
                assert binary_f1(scores, labels) == pytest.approx(expected, abs=1e-12)

        assert prediction_entropy(np.full(17, 0.5)) == 100.0
        assert prediction_entropy(np.array([0.0, 1.0, 0.0, 1.0])) == 0.0

        report = aggregate([{"aa": 60.0}, {"aa": 70.0}])
        assert abs(report["aa"].mean - 65.0) < 0.01
        assert abs(report["aa"].std - 7.07) < 0.01


# ===========================================================================
# criterion 3: relative-improvement arithmetic on reference values
# ===========================================================================

def test_criterion_3_relative_improvement_reference_values():
    with criterion(3, "relative improvement matches the reference-table arithmetic"):
        cases = [
            ((66.5, 63.0), 6),
            ((82.1, 78.7), 4),
            ((66.5, 48.0), 39),
            ((82.1, 64.9), 27),
        ]
        for (a, b), expected in cases:
            got = round_half_up(relative_improvement(a, b))
            assert got == expected, f"({a}, {b}) -> {got}, expected {expected}"


# ===========================================================================
# criterion 4: fusion invariants
# ===========================================================================

def test_criterion_4_fusion_invariants():
    with criterion(4, "gate simplex, merge invariance, gated identity, ensemble equivalences"):
        rng = np.random.default_rng(40)
        v, d = 4, 5
        for gate_type in ("gated-c", "gated-a", "gatedf-a"):
            params = ParameterSet()
            init = init_parameters(GateModule.param_spec("g", gate_type, v, d), 3, dtype=np.float64)
            gate = GateModule(params, "g", gate_type, v, d, init)
            for _ in range(100):
                reps = [Value(rng.normal(size=(6, d)) * 2) for _ in range(v)]
                w = gate_weights(gate, reps).data
                assert np.all(w >= 0)
                np.testing.assert_allclose(w.sum(axis=1), 1.0, atol=1e-6)
            rep = Value(rng.normal(size=(5, d)))
            fused = fuse_gated(gate, [rep] * v).data
            np.testing.assert_allclose(fused, rep.data, atol=1e-6)

        reps = [Value(rng.normal(size=(4, 6))) for _ in range(3)]
        perm = [1, 2, 0]
        for merge in ("average", "maximum", "product"):
            np.testing.assert_allclose(
                merge_simple([reps[i] for i in perm], merge).data,
                merge_simple(reps, merge).data,
                rtol=1e-12,
            )

        decision = _tiny_model("decision")
        singles = []
        for i, spec in enumerate(TINY_VIEWS):
            cfg = ModelConfig(
                method="single", hidden_units=3, gru_layers=2, dense_hidden=3,
                dropout=0.0, seed=branch_seed(17, i), dtype="float64",
            )
            single = build_model(cfg, [spec], 4)
            for name, p in single.params.items():
                p.data = decision.params[f"branch.{spec.name}.{name}"].data.copy()
            singles.append(single)
        batch = {
            "a": rng.normal(size=(6, 4, 2)),
            "b": rng.normal(size=(6, 4, 1)),
            "c": rng.normal(size=(6, 2)),
        }
        fused = ensemble_predict(singles, batch)
        member = np.stack([m.predict_proba(batch) for m in singles])
        np.testing.assert_allclose(fused, member.mean(axis=0), atol=1e-9)
        np.testing.assert_allclose(fused, decision.forward(batch, EVAL).data, atol=1e-9)


# ===========================================================================
# criteria 5 and 6: end-to-end synthetic study and its determinism
# ===========================================================================

STUDY_SEED = 2024
STUDY_BASE_SEED = 1000


def _study_dataset():
    return synth_generate(
        SynthConfig(
            num_samples=2000,
            views=(
                SynthViewConfig("optical", 11, informativeness=0.8),
                SynthViewConfig("radar", 2, informativeness=0.5),
                SynthViewConfig("dem", 2, informativeness=0.0, static=True),
            ),
            timesteps=12,
            positive_fraction=0.5,
            seed=STUDY_SEED,
        )
    )


def _run_study(out_path):
    train_cfg = TrainConfig(runs=3, base_seed=STUDY_BASE_SEED)
    results = run_comparison(
        train_cfg,
        _study_dataset(),
        merge="average",
        gate="gatedf-a",
        methods=("feature-s", "feature-g", "multiloss"),
    )
    write_results(out_path, results)
    return read_results(out_path)


def _mean_aa(rows, method):
    matching = [r["metrics"]["aa"] for r in rows if r["method"] == method and not r.get("failed")]
    assert len(matching) == 3, f"{method}: expected 3 runs, got {len(matching)}"
    return float(np.mean(matching))


@pytest.fixture(scope="module")
def study(tmp_path_factory):
    out = tmp_path_factory.mktemp("study") / "results.jsonl"
    start = time.perf_counter()
    rows = _run_study(out)
    elapsed = time.perf_counter() - start
    return rows, elapsed, out


def test_criterion_5_end_to_end_study(study):
    rows, elapsed, _ = study
    with criterion(5, "synthetic study reproduces the fusion-beats-single-view phenomenon"):
        assert elapsed <= 1800.0, f"study took {elapsed:.0f}s"

        dem_aa = _mean_aa(rows, "single:dem")
        singles = {v: _mean_aa(rows, f"single:{v}") for v in ("optical", "radar", "dem")}
        best_single = max(singles.values())
        fusions = {
            "feature-s": _mean_aa(rows, "feature-s"),
            "feature-g": _mean_aa(rows, "feature-g"),
            "multiloss": _mean_aa(rows, "multiloss"),
            "ensemble": _mean_aa(rows, "ensemble"),
        }
        print(f"\n  singles: { {k: round(v, 2) for k, v in singles.items()} }")
        print(f"  fusions: { {k: round(v, 2) for k, v in fusions.items()} } (elapsed {elapsed:.0f}s)")

        assert 45.0 <= dem_aa <= 55.0, f"(a) zero-informativeness view AA {dem_aa:.2f}"
        assert best_single >= 80.0, f"(b) best single view AA {best_single:.2f}"
        for name, value in fusions.items():
            assert value >= best_single - 2.0, f"(c) {name} AA {value:.2f} vs best single {best_single:.2f}"
        assert max(fusions.values()) > best_single, "(d) no fusion strictly beats the best single view"


def test_criterion_6_determinism(study, tmp_path):
    rows_first, _, _ = study
    with criterion(6, "repeating the study with identical seeds is bitwise identical"):
        rows_second = _run_study(tmp_path / "results.jsonl")
        assert len(rows_first) == len(rows_second)
        for a, b in zip(rows_first, rows_second):
            assert a["method"] == b["method"] and a["seed"] == b["seed"]
            assert json.dumps(a["metrics"]) == json.dumps(b["metrics"]), a["method"]
            assert a["val_loss"] == b["val_loss"]
            assert a["epochs"] == b["epochs"]


# ===========================================================================
# criterion 7: early-stopping protocol fidelity
# ===========================================================================

def _simulate_stopping_rule(trajectory, patience, min_delta, max_epochs):
    """Independent oracle: per-epoch improvement flags and the stop point."""
    best, best_epoch, bad = np.inf, 0, 0
    improved = []
    for epoch in range(1, max_epochs + 1):
        val = trajectory[epoch - 1]
        if val < best - min_delta:
            best, best_epoch, bad = val, epoch, 0
            improved.append(True)
        else:
            bad += 1
            improved.append(False)
        if bad >= patience:
            return epoch, best_epoch, best, improved
    return max_epochs, best_epoch, best, improved


def test_criterion_7_protocol_fidelity():
    with criterion(7, "patience-5/delta-0.01 stopping and best-epoch restoration"):
        # Plateaus, a last-moment genuine improvement, then five failures.
        trajectory = [0.70, 0.69, 0.695, 0.66, 0.655, 0.652, 0.651, 0.6505,
                      0.64, 0.639, 0.638, 0.637, 0.6355, 0.633] + [0.7] * 986
        patience, min_delta, max_epochs = 5, 0.01, 1000
        expected_stop, expected_best_epoch, expected_best, improved = _simulate_stopping_rule(
            trajectory, patience, min_delta, max_epochs
        )
        # E is the first epoch whose trailing window of `patience` epochs all
        # fail to improve the best by more than min_delta.
        assert not any(improved[expected_stop - patience: expected_stop])
        for e in range(patience, expected_stop):
            assert any(improved[e - patience: e]), f"earlier window ending at {e} would stop"

        rng = np.random.default_rng(70)
        views = {"v": rng.normal(size=(64, 3, 2)).astype(np.float32)}
        labels = rng.integers(0, 2, size=64).astype(np.uint8)
        model = build_model(
            ModelConfig(method="single", hidden_units=4, gru_layers=1,
                        dense_hidden=4, dropout=0.2, seed=7),
            [ViewSpec("v", 2, 3, False)], 3,
        )
        seen = {}

        def stub(m, epoch):
            seen[epoch] = m.params["head.w1"].data.copy()
            return trajectory[epoch - 1]

        result = fit_model(
            model, views, labels,
            config=TrainConfig(batch_size=256, max_epochs=max_epochs,
                               patience=patience, min_delta=min_delta),
            shuffle_seed=1,
            val_loss_fn=stub,
        )
        assert result.epochs_trained == expected_stop == 14
        assert result.best_epoch == expected_best_epoch == 9
        assert result.best_val_loss == expected_best == 0.64
        np.testing.assert_array_equal(model.params["head.w1"].data, seen[expected_best_epoch])
        assert not np.array_equal(seen[expected_best_epoch], seen[expected_stop])


# ===========================================================================
# criterion 8: format round-trip
# ===========================================================================

def test_criterion_8_format_round_trip(tmp_path):
    with criterion(8, "write/load identity on 100 random datasets plus byte-offset fixture"):
        rng = np.random.default_rng(80)
        for trial in range(100):
            ds = make_random_dataset(rng)
            manifest = write_dataset(ds, tmp_path / f"trial{trial}")
            assert_datasets_identical(ds, load_dataset(manifest))

        # Hand-computed fixture: value == flat row-major index.
        n, t, c = 3, 2, 2
        fixture = tmp_path / "fixture"
        fixture.mkdir()
        (fixture / "temporal.bin").write_bytes(np.arange(n * t * c, dtype="<f4").tobytes())
        (fixture / "static.bin").write_bytes(np.array([5, 6, 7, 8, 9, 10], dtype="<f4").tobytes())
        (fixture / "labels.bin").write_bytes(bytes([0, 1, 1]))
        manifest = {
            "name": "fixture",
            "num_samples": n,
            "timesteps": t,
            "views": [
                {"name": "temporal", "channels": c, "static": False, "file": "temporal.bin"},
                {"name": "static", "channels": 2, "static": True, "file": "static.bin"},
            ],
            "labels_file": "labels.bin",
            "splits": {"train": [0, 1], "val": [], "test": [2]},
        }
        (fixture / "manifest.json").write_text(json.dumps(manifest))
        ds = load_dataset(fixture / "manifest.json")
        # temporal[n, t, c] lives at byte offset 4 * (n*T*C + t*C + c)
        assert ds.views["temporal"][1, 1, 0] == 6.0  # offset 24 bytes
        assert ds.views["temporal"][2, 0, 1] == 9.0  # offset 36 bytes
        assert ds.views["static"][2, 1] == 10.0      # offset 20 bytes
        np.testing.assert_array_equal(ds.labels, [0, 1, 1])
        np.testing.assert_array_equal(ds.splits["train"], [0, 1])


# ===========================================================================
# supplementary end-to-end check from the data-model contract
# ===========================================================================

def test_high_informativeness_single_view_reaches_aa_90():
    # informativeness 1.0 with noise 0.1 must be solidly learnable.
    ds = synth_generate(
        SynthConfig(
            num_samples=2000,
            views=(SynthViewConfig("optical", 11, informativeness=1.0, noise_scale=0.1),),
            timesteps=12,
            positive_fraction=0.5,
            seed=9,
        )
    )
    prepared = prepare_dataset(ds, val_fraction=0.1, seed=9)
    est_views = {"optical": prepared.train_views["optical"]}
    model = build_model(ModelConfig(method="single", seed=1), [prepared.specs[0]], 12)
    fit_model(
        model, est_views, prepared.train_labels,
        {"optical": prepared.val_views["optical"]}, prepared.val_labels,
        TrainConfig(base_seed=9),
        shuffle_seed=5,
    )
    probs = predict_in_chunks(model, {"optical": prepared.test_views["optical"]})
    aa = average_accuracy(probs, prepared.test_labels)
    assert aa >= 90.0, f"AA {aa:.2f}"
