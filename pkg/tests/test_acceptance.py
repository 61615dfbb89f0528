"""End-to-end acceptance checks; each prints one PASS/FAIL line.

Run with ``pytest tests/test_acceptance.py -v``. The CIFAR-10 comparison needs the
binary dataset in the directory named by ORTHOGRAD_CIFAR10_DIR and fails without it.
"""
import os
import statistics
import time

import numpy as np
import pytest

from orthograd.diagnostics import random_cosine_study
from orthograd.experiment import RunConfig, load_datasets, metrics_body, read_metrics, run_experiment
from orthograd.linalg import nearest_orthonormal, svd
from orthograd.nn import BatchNorm2d, Conv2d, Dense, Flatten, ReLU, softmax_cross_entropy
from oracles import (
    central_difference,
    jacobi_eigvalsh,
    layer_gradient_errors,
    orthogonal_grid_2x2,
    rel_error,
)

CIFAR_ENV = "ORTHOGRAD_CIFAR10_DIR"


@pytest.fixture
def report(capsys):
    def emit(number, ok, detail):
        with capsys.disabled():
            print(f"\nacceptance {number}: {'PASS' if ok else 'FAIL'} - {detail}")
        assert ok, detail

    return emit


def random_case(rng, i):
    """Shapes up to 512x64, a quarter of them rank-deficient, a tenth wide."""
    rows, cols = (512, 64) if i < 10 else (int(rng.integers(1, 513)), int(rng.integers(1, 65)))
    if i % 4 == 1:
        r = int(rng.integers(0, min(rows, cols) + 1))
        g = rng.standard_normal((rows, r)) @ rng.standard_normal((r, cols))
    else:
        g = rng.standard_normal((rows, cols))
    return g.T if i % 10 == 3 else g


def test_orthonormality_suite(report):
    rng = np.random.default_rng(2024)
    start = time.perf_counter()
    worst_orth = worst_resid = 0.0
    mismatches = 0
    for i in range(1000):
        g = random_case(rng, i)
        res = svd(g)
        o = res.u @ res.vt
        gram = o.T @ o if g.shape[0] >= g.shape[1] else o @ o.T
        worst_orth = max(worst_orth, np.abs(gram - np.eye(min(g.shape))).max())
        norm = np.linalg.norm(g)
        if norm > 0:
            worst_resid = max(worst_resid, np.linalg.norm(res.reconstruct() - g) / norm)
            # the public projection is the same product; spot-check it bit for bit
            if i % 20 == 0:
                mismatches += nearest_orthonormal(g).tobytes() != o.tobytes()
    elapsed = time.perf_counter() - start
    ok = worst_orth <= 1e-8 and worst_resid <= 1e-9 and mismatches == 0 and elapsed < 60
    report(1, ok, f"max|OtO-I|={worst_orth:.2e}, max residual/||G||={worst_resid:.2e}, "
                  f"projection mismatches={mismatches}, {elapsed:.1f}s")


def test_polar_factor_oracle(report):
    rng = np.random.default_rng(7)
    start = time.perf_counter()
    worst_sym = 0.0
    min_eig = np.inf
    for _ in range(200):
        g = rng.standard_normal((4, 3))
        h = nearest_orthonormal(g).T @ g
        worst_sym = max(worst_sym, np.abs(h - h.T).max())
        min_eig = min(min_eig, jacobi_eigvalsh((h + h.T) / 2).min())
    grid = orthogonal_grid_2x2(10_000)
    worst_gap = -np.inf
    for _ in range(200):
        g = rng.standard_normal((2, 2))
        best = np.sqrt(((grid - g) ** 2).sum(axis=(1, 2))).min()
        worst_gap = max(worst_gap, np.linalg.norm(nearest_orthonormal(g) - g) - best)
    elapsed = time.perf_counter() - start
    ok = worst_sym <= 1e-8 and min_eig >= -1e-8 and worst_gap <= 1e-9 and elapsed < 60
    report(2, ok, f"asymmetry={worst_sym:.1e}, min eigenvalue={min_eig:.3f}, "
                  f"distance minus grid best={worst_gap:.1e}, {elapsed:.1f}s")


def test_gradient_correctness(report):
    rng = np.random.default_rng(3)
    f64 = np.float64
    start = time.perf_counter()
    errors = {}

    def randomise(layer):
        for p in layer.params:
            p.data = rng.standard_normal(p.data.shape)
        return layer

    errors["conv"] = layer_gradient_errors(
        randomise(Conv2d("c", 3, 4, 3, 2, 1, dtype=f64)), rng.standard_normal((2, 3, 7, 7)), rng)
    errors["conv_s1"] = layer_gradient_errors(
        randomise(Conv2d("c", 2, 3, 3, 1, 0, dtype=f64)), rng.standard_normal((2, 2, 5, 5)), rng)
    errors["batchnorm"] = layer_gradient_errors(
        randomise(BatchNorm2d("bn", 3, dtype=f64)), rng.standard_normal((4, 3, 3, 3)) * 2 + 1, rng)
    errors["dense"] = layer_gradient_errors(
        randomise(Dense("fc", 6, 5, dtype=f64)), rng.standard_normal((3, 6)), rng)
    x = rng.standard_normal((2, 3, 4, 4))
    x[np.abs(x) < 1e-2] = 0.5
    errors["relu"] = layer_gradient_errors(ReLU(), x, rng)
    errors["flatten"] = layer_gradient_errors(Flatten(), x, rng)
    logits, labels = rng.standard_normal((5, 10)), rng.integers(0, 10, 5)
    _, grad = softmax_cross_entropy(logits, labels)
    numeric = central_difference(lambda: softmax_cross_entropy(logits, labels)[0], logits)
    errors["softmax_ce"] = {"input": rel_error(grad, numeric)}
    worst = {k: max(v.values()) for k, v in errors.items()}
    elapsed = time.perf_counter() - start
    ok = max(worst.values()) <= 1e-4 and elapsed < 60
    report(3, ok, ", ".join(f"{k}={v:.1e}" for k, v in worst.items()) + f", {elapsed:.1f}s")


def synthetic_config(out, **kw):
    base = dict(
        name="acc", model="basic_cnn", classes=10, image_size=32, synthetic_train_per_class=16,
        synthetic_test_per_class=8, batch_size=32, epochs=3, seeds=[0], out=str(out),
        eval_batch_size=100,
    )
    base.update(kw)
    return RunConfig(**base)


def test_identity_composition(report, tmp_path):
    same = {}
    for optimiser in ("sgdm", "adam", "lars"):
        a = run_experiment(synthetic_config(tmp_path / f"{optimiser}-id", optimiser=optimiser,
                                            transform="identity"))[0]
        b = run_experiment(synthetic_config(tmp_path / f"{optimiser}-plain", optimiser=optimiser,
                                            transform="none"))[0]
        same[optimiser] = metrics_body(a.metrics_path) == metrics_body(b.metrics_path)
    report(4, all(same.values()), ", ".join(f"{k} identical={v}" for k, v in same.items()))


# ---------------------------------------------------------------- CIFAR-10 comparison


@pytest.fixture(scope="module")
def cifar_comparison(tmp_path_factory):
    """SGDM vs OSGDM on a 5,000-image CIFAR-10 subset; None when the data is absent."""
    data_dir = os.environ.get(CIFAR_ENV)
    if not data_dir or not os.path.isdir(data_dir):
        return None
    out = tmp_path_factory.mktemp("cifar")
    runs = {}
    datasets = None
    for label, transform in (("sgdm", "none"), ("osgdm", "orth")):
        config = RunConfig(
            name=label, model="basic_cnn", dataset="cifar10", data_dir=data_dir, train_subset=5000,
            optimiser="sgdm", transform=transform, lr=1e-2, momentum=0.9, weight_decay=5e-4,
            batch_size=256, epochs=20, seeds=[0, 1, 2], out=str(out / label),
        )
        datasets = datasets or load_datasets(config)
        runs[label] = [read_metrics(r.metrics_path)[1] for r in run_experiment(config, datasets)]
    return runs


def row_for_epoch(rows, epoch=None):
    tests = [r for r in rows if r["split"] == "test"]
    return tests[-1] if epoch is None else next(r for r in tests if int(r["epoch"]) == epoch)


def missing_data_message():
    return f"CIFAR-10 binaries not found; set {CIFAR_ENV} to the cifar-10-batches-bin directory"


def test_cifar_speed_up_scaled(report, cifar_comparison):
    if cifar_comparison is None:
        report(5, False, missing_data_message())
    final = {k: statistics.median(float(row_for_epoch(r)["accuracy"]) for r in v)
             for k, v in cifar_comparison.items()}
    early = {k: statistics.median(float(row_for_epoch(r, 5)["accuracy"]) for r in v)
             for k, v in cifar_comparison.items()}
    gap = final["osgdm"] - final["sgdm"]
    ok = gap >= 2.0 and early["osgdm"] > early["sgdm"]
    report(5, ok, f"median final accuracy sgdm={final['sgdm']:.2f}% osgdm={final['osgdm']:.2f}% "
                  f"(gap {gap:+.2f}pp), epoch 5 sgdm={early['sgdm']:.2f}% osgdm={early['osgdm']:.2f}%")


def test_representation_diversity(report, cifar_comparison):
    if cifar_comparison is None:
        report(6, False, missing_data_message())
    r_means = {
        k: np.median([[float(x) for x in row_for_epoch(r)["r_mean"].split(";")] for r in v], axis=0)
        for k, v in cifar_comparison.items()
    }
    lower = int(np.sum(r_means["osgdm"] < r_means["sgdm"]))
    report(6, lower >= 2, f"OSGDM mean |cosine| lower on {lower}/3 conv layers "
                          f"(sgdm {np.round(r_means['sgdm'], 4).tolist()}, "
                          f"osgdm {np.round(r_means['osgdm'], 4).tolist()})")


# ---------------------------------------------------------------- statistics and regimes


def test_random_cosine_statistics(report):
    start = time.perf_counter()
    parts = []
    ok = True
    for n in (16, 256, 4096):
        std, frac = random_cosine_study(n, pairs=100_000, seed=n)
        rel = abs(std * np.sqrt(n) - 1.0)
        ok &= rel <= 0.10 and frac < 1e-3
        parts.append(f"N={n}: std*sqrt(N)={std * np.sqrt(n):.4f}, exceed={frac:.1e}")
    elapsed = time.perf_counter() - start
    ok &= elapsed < 60
    report(7, bool(ok), "; ".join(parts) + f", {elapsed:.1f}s")


def test_small_batch_regime(report, tmp_path):
    details = []
    ok = True
    for label, transform in (("sgdm", "none"), ("osgdm", "orth")):
        result = run_experiment(synthetic_config(tmp_path / label, name=label, transform=transform,
                                                 batch_size=4, epochs=2, synthetic_train_per_class=4))[0]
        _, rows = read_metrics(result.metrics_path)
        _, timing = read_metrics(result.timing_path)
        tests = [r for r in rows if r["split"] == "test"]
        trains = [r for r in rows if r["split"] == "train"]
        complete = (
            result.status == "completed"
            and len(tests) == len(trains) == 2
            and all(len(r["r_mean"].split(";")) == 3 for r in tests)
            and all(r["dead_params"].isdigit() for r in trains)
            and len(timing) == len(rows)
            and all((float(t["svd_time"]) > 0) == (transform == "orth") for t in timing)
        )
        ok &= complete
        details.append(f"{label} final accuracy {float(tests[-1]['accuracy']):.1f}% complete={complete}")
    report(8, bool(ok), "; ".join(details))


def test_reproducibility(report, tmp_path):
    cases = {
        "sgdm": dict(optimiser="sgdm", transform="none"),
        "osgdm": dict(optimiser="sgdm", transform="orth", seeds=[1, 2]),
        "oadam": dict(optimiser="adam", transform="orth", skip_dense=True),
        "cnlars": dict(optimiser="lars", transform="colnorm"),
    }
    same = {}
    for label, kw in cases.items():
        first = run_experiment(synthetic_config(tmp_path / f"{label}-a", epochs=2, **kw))
        second = run_experiment(synthetic_config(tmp_path / f"{label}-b", epochs=2, **kw))
        same[label] = all(
            metrics_body(a.metrics_path) == metrics_body(b.metrics_path)
            and metrics_body(a.timing_path).count("\n") == metrics_body(b.timing_path).count("\n")
            for a, b in zip(first, second)
        )
    report(9, all(same.values()), ", ".join(f"{k} byte-identical={v}" for k, v in same.items()))
