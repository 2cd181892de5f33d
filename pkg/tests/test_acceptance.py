"""Acceptance criteria, one test each; every test prints a PASS/FAIL line.

Criteria 6 and 7 share one fixture that runs the complete synthetic
pipeline (synth -> ingest -> train -> extract -> classify x3 -> report)
twice with identical seeds, which takes a few minutes on one core.
"""

import json
import time
from pathlib import Path

import numpy as np
import pytest

from reshape_transfer import cli
from reshape_transfer import cnn_model as cm
from reshape_transfer import tensor_core as tc
from reshape_transfer.audio_ingest import AudioSegment, reshape_to_matrix
from reshape_transfer.classifiers import knn_fit, knn_predict, svm_fit, svm_predict, tree_fit
from reshape_transfer.evaluation import ConfusionMatrix, EvalReport, metrics, report_table

GOLDEN = Path(__file__).parent / "golden"


@pytest.fixture
def verdict(capsys):
    def emit(number: int, title: str, ok: bool, detail: str = ""):
        with capsys.disabled():
            print(f"\n[{'PASS' if ok else 'FAIL'}] criterion {number}: {title}" + (f" ({detail})" if detail else ""))
        assert ok, f"criterion {number} failed: {detail}"
    return emit


# 1 -----------------------------------------------------------------------------

def test_criterion_1_geometry(verdict):
    t0 = time.perf_counter()
    m = reshape_to_matrix(AudioSegment(np.arange(44100, dtype=np.float32), 0), 210)
    model = cm.CNN(seed=0)
    fv = model.extract_features(m)
    elapsed = time.perf_counter() - t0
    ok = (m.data.shape == (210, 210) and m.data[1, 0] == 210 and fv.values.shape == (7744,)
          and cm.Architecture().flatten_width == 7744 and elapsed < 1.0)
    verdict(1, "44100 samples -> 210x210 matrix -> 7744 features", ok,
            f"matrix {m.data.shape}, features {fv.values.shape[0]}, {elapsed:.3f} s")


# 2 -----------------------------------------------------------------------------

def _layer_errors(seed):
    rng = np.random.default_rng(seed)
    errs = {}

    for method in ("cols", "fft"):
        layer = tc.ConvLayer(rng.normal(size=(2, 2, 3, 3)), rng.normal(size=2))
        x = rng.normal(size=(2, 6, 6))
        r = rng.normal(size=(2, 4, 4))
        f = lambda: float(np.sum(tc.conv2d_forward(x, layer, method) * r))
        dx, dk, db = tc.conv2d_backward(layer, x, r, method)
        errs[f"conv[{method}]"] = max(tc.gradient_check(f, x, dx), tc.gradient_check(f, layer.kernels, dk),
                                      tc.gradient_check(f, layer.bias, db))

    x = rng.permutation(16).reshape(1, 4, 4).astype(np.float64)
    r = rng.normal(size=(1, 2, 2))
    pool = tc.PoolLayer(2)
    _, mask = tc.maxpool_forward(x, pool)
    errs["maxpool"] = tc.gradient_check(lambda: float(np.sum(tc.maxpool_forward(x, pool)[0] * r)), x,
                                        tc.maxpool_backward(mask, r))

    x = rng.normal(size=12)
    x[np.abs(x) < 1e-3] = 0.5
    r = rng.normal(size=12)
    errs["relu"] = tc.gradient_check(lambda: float(np.sum(tc.relu(x) * r)), x, tc.relu_backward(x, r))

    dense = tc.DenseLayer(rng.normal(size=(4, 6)), rng.normal(size=4))
    x, r = rng.normal(size=6), rng.normal(size=4)
    f = lambda: float(tc.dense_forward(x, dense) @ r)
    dx, dw, db = tc.dense_backward(dense, x, r)
    errs["dense"] = max(tc.gradient_check(f, x, dx), tc.gradient_check(f, dense.weights, dw),
                        tc.gradient_check(f, dense.bias, db))

    z = rng.normal(size=3)
    t = int(rng.integers(3))
    errs["softmax_xent"] = tc.gradient_check(lambda: tc.softmax_cross_entropy(z, t)[0], z,
                                             tc.softmax_cross_entropy(z, t)[2])

    arch = cm.Architecture([{"type": "conv", "filters": 2, "kernel": 3}, {"type": "relu"},
                            {"type": "pool", "window": 2}, {"type": "flatten"},
                            {"type": "dense", "units": 4}, {"type": "relu"}, {"type": "dense", "units": 3}],
                           input_width=8, feature_length=18)
    net = cm.CNN(arch, seed=seed, dtype=np.float64)
    for p in net.parameters():
        p[...] = rng.normal(scale=0.5, size=p.shape)
    x = rng.normal(size=(1, 8, 8))
    y = rng.integers(0, 3, size=1)
    _, _, grads = net.loss_and_grads(x, y)
    errs["network"] = max(tc.gradient_check(lambda: net.loss_and_grads(x, y)[0], p, g)
                          for p, g in zip(net.parameters(), grads))
    return errs


def test_criterion_2_gradients(verdict):
    t0 = time.perf_counter()
    worst = {}
    for seed in range(5):
        for name, e in _layer_errors(seed).items():
            worst[name] = max(worst.get(name, 0.0), e)
    elapsed = time.perf_counter() - t0
    ok = all(e < 1e-4 for e in worst.values()) and elapsed < 60
    verdict(2, "finite-difference gradient checks, 5 seeds per layer", ok,
            ", ".join(f"{k} {v:.1e}" for k, v in worst.items()) + f"; {elapsed:.1f} s")


# 3 -----------------------------------------------------------------------------

def _knn_scan(x, y, q, k):
    out = []
    for row in q:
        order = sorted(range(len(x)), key=lambda i: (float(np.sum((x[i] - row) ** 2)), i))[:k]
        labels = [int(y[i]) for i in order]
        top = max(labels.count(c) for c in labels)
        out.append(next(c for c in labels if labels.count(c) == top))
    return out


def test_criterion_3_oracles(verdict):
    knn_ok = True
    for seed in range(3):
        rng = np.random.default_rng(seed)
        x, y, q = rng.normal(size=(200, 5)), rng.integers(0, 3, 200), rng.normal(size=(50, 5))
        knn_ok &= knn_predict(knn_fit(x, y, 3), q).tolist() == _knn_scan(x, y, q, 3)

    # candidates 1.5 / 2.5 / 3.5 give weighted Gini 1/3, 0, 1/3
    root = tree_fit(np.array([[1.0], [2.0], [3.0], [4.0]]), [0, 0, 1, 1]).root
    tree_ok = (root.feature, root.threshold) == (0, 2.5)

    xor_x = np.array([[0.0, 0], [1, 1], [0, 1], [1, 0]])
    xor_y = np.array([0, 0, 1, 1])
    rbf_hits = int((svm_predict(svm_fit(xor_x, xor_y, "rbf", C=10.0, gamma=1.0), xor_x) == xor_y).sum())
    lin_hits = int((svm_predict(svm_fit(xor_x, xor_y, "linear", C=10.0), xor_x) == xor_y).sum())
    svm_ok = rbf_hits == 4 and lin_hits <= 3

    verdict(3, "KNN/DT/SVM oracle equivalence", knn_ok and tree_ok and svm_ok,
            f"knn exact={knn_ok}, root split {root.threshold}, xor rbf {rbf_hits}/4, linear {lin_hits}/4")


# 4 -----------------------------------------------------------------------------

def test_criterion_4_metric_identities(verdict):
    rng = np.random.default_rng(0)
    worst = 0.0
    for _ in range(100):
        counts = rng.integers(0, 30, size=(3, 3))
        counts[0, 0] += 1
        m = metrics(ConfusionMatrix(counts))
        worst = max(worst, abs(m.recall - m.accuracy))
    diag = metrics(ConfusionMatrix(np.diag([4, 9, 1])))
    hand = metrics(ConfusionMatrix(np.array([[8, 2], [3, 7]])))
    p0, r0, p1, r1 = 8 / 11, 8 / 10, 7 / 9, 7 / 10
    f0, f1 = 2 * p0 * r0 / (p0 + r0), 2 * p1 * r1 / (p1 + r1)
    hand_ok = (abs(hand.accuracy - 0.75) < 1e-12 and abs(hand.precision - (p0 + p1) / 2) < 1e-12
               and abs(hand.recall - (r0 + r1) / 2) < 1e-12 and abs(hand.f1 - (f0 + f1) / 2) < 1e-12)
    ok = worst <= 1e-12 and tuple(diag[:4]) == (1.0, 1.0, 1.0, 1.0) and hand_ok
    verdict(4, "weighted recall == accuracy; diagonal all-ones; [[8,2],[3,7]]", ok,
            f"max |recall-acc| {worst:.1e}, hand case {hand_ok}")


# 5 -----------------------------------------------------------------------------

TABLE1 = [("CNN", 0.966, 0.869, 0.869, 0.869, 0.869),
          ("KNN", 0.895, 0.801, 0.814, 0.801, 0.797),
          ("SVM", 0.965, 0.85, 0.848, 0.85, 0.847),
          ("DT", 1, 0.762, 0.759, 0.762, 0.761)]


def test_criterion_5_table_rendering(verdict):
    reports = [EvalReport(name, *vals, ConfusionMatrix(np.eye(3, dtype=int))) for name, *vals in TABLE1]
    text, csv_text = report_table(reports)
    ok = (text.encode() == (GOLDEN / "table1.txt").read_bytes()
          and csv_text.encode() == (GOLDEN / "table1.csv").read_bytes())
    verdict(5, "reference comparison table byte-for-byte vs golden", ok)


# 6 / 7 -------------------------------------------------------------------------

def _run_pipeline(out: Path) -> float:
    t0 = time.perf_counter()
    o = ["--out", str(out), "--seed", "0"]
    steps = [["synth", "--n-per-class", "50", "--noise", "0.1", "--freqs", "200,400,800"] + o,
             ["ingest", str(out / "manifest.csv")] + o,
             ["train", "--epochs", "10"] + o,
             ["extract"] + o]
    steps += [["classify", "--method", m] + o for m in ("knn", "svm", "dt")]
    steps.append(["report"] + [str(out / f"report_{m}.json") for m in ("cnn", "knn", "svm", "dt")]
                 + ["--out", str(out)])
    for argv in steps:
        code = cli.main(argv)
        if code != 0:
            raise RuntimeError(f"{argv[0]} exited with {code}")
    return time.perf_counter() - t0


@pytest.fixture(scope="module")
def pipeline_runs(tmp_path_factory):
    root = tmp_path_factory.mktemp("acceptance")
    return [(root / tag, _run_pipeline(root / tag)) for tag in ("run1", "run2")]


@pytest.mark.slow
def test_criterion_6_end_to_end(pipeline_runs, verdict):
    out, elapsed = pipeline_runs[0]
    reports = {m: json.loads((out / f"report_{m}.json").read_text()) for m in ("cnn", "knn", "svm", "dt")}
    n_segments = sum(1 for _ in open(out / "split.csv")) - 1
    test_acc = {m: r["test_accuracy"] for m, r in reports.items()}
    ok = (n_segments == 150 and all(a >= 0.95 for a in test_acc.values())
          and reports["dt"]["train_accuracy"] == 1.0 and reports["dt"]["params"]["prune"] is False
          and elapsed < 600)
    verdict(6, "synthetic end-to-end, every classifier >= 0.95, DT train == 1.0, < 10 min", ok,
            ", ".join(f"{m} {a:.3f}" for m, a in test_acc.items())
            + f", DT train {reports['dt']['train_accuracy']:.3f}, {elapsed:.0f} s")


@pytest.mark.slow
def test_criterion_7_determinism(pipeline_runs, verdict):
    (a, _), (b, _) = pipeline_runs
    names = ["checkpoint.rsck", "features.rsft", "history.csv", "split.csv", "segments.rsht",
             "table.txt", "table.csv"] + [f"report_{m}.json" for m in ("cnn", "knn", "svm", "dt")] \
        + [f"model_{m}.rscl" for m in ("knn", "svm", "dt")]
    differing = [n for n in names if (a / n).read_bytes() != (b / n).read_bytes()]
    verdict(7, "two seeded runs give bit-identical checkpoints, features and reports", not differing,
            f"{len(names)} artifacts compared" + (f"; differ: {differing}" if differing else ""))
