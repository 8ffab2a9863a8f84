"""Exit criteria for the package, one test per criterion.

Each test records a PASS/FAIL line that is printed in the pytest terminal
summary under "acceptance criteria". Run alone with::

    pytest tests/test_acceptance.py
"""

import contextlib
import math
import re
import time
from pathlib import Path

import numpy as np
import pytest

from conftest import (ACCEPTANCE_RESULTS, make_two_class_images, max_rel_error, numeric_grad,
                      random_conv, random_dense, random_pool)
from slimcnn import layers as L
from slimcnn.cli import run
from slimcnn.data import DatasetIndex, SplitSpec, split_folders
from slimcnn.gradcam import gradcam_heatmap, jet, superimpose
from slimcnn.metrics import classification_report
from slimcnn.model import Model, build_slim_cnn, predict_from_logits
from slimcnn.training import evaluate, fit, init_weights, softmax_ce_from_logits

GRAD_TOL = 1e-3
N_INSTANCES = 100


@contextlib.contextmanager
def criterion(name):
    start = time.perf_counter()
    try:
        yield
    except BaseException as exc:
        ACCEPTANCE_RESULTS.append(f"FAIL  {name}  ({type(exc).__name__}: {str(exc).splitlines()[0][:100]})")
        raise
    ACCEPTANCE_RESULTS.append(f"PASS  {name}  ({time.perf_counter() - start:.2f}s)")


# ---------------------------------------------------------------- layer table

LAYER_ROWS = [
    ("(None, 128, 128, 1)", "0"),
    ("(None, 126, 126, 128)", "1,280"),
    ("(None, 63, 63, 128)", "0"),
    ("(None, 61, 61, 256)", "295,168"),
    ("(None, 30, 30, 256)", "0"),
    ("(None, 28, 28, 256)", "590,080"),
    ("(None, 200704)", "0"),
    ("(None, 256)", "51,380,480"),
    ("(None, 4)", "1,028"),
]


def test_layer_table_parity(capsys):
    with criterion("Layer table parity: nine shapes/param counts, 52,268,036 (199.39 MB), < 1 s"):
        t0 = time.perf_counter()
        assert run(["summary"]) == 0
        elapsed = time.perf_counter() - t0
        out = capsys.readouterr().out
        rows = re.findall(r"(\(None(?:, \d+)+\))\s+([\d,]+)\s*$", out, flags=re.M)
        assert rows == LAYER_ROWS
        assert "Total (trainable) params: 52,268,036 (199.39 MB)" in out
        assert elapsed < 1.0, f"summary took {elapsed:.2f}s"


# ---------------------------------------------------------------- worked example


def test_worked_example():
    with criterion("Worked example: conv, max pool, flatten, dense within 1e-4; class index 1"):
        x = np.arange(10, 35, dtype=np.float32).reshape(5, 5, 1)
        k = (np.arange(1, 10, dtype=np.float32) / 10).reshape(3, 3, 1, 1)
        conv = L.conv2d_forward(x, L.ConvParams(k, np.zeros(1, np.float32)))
        np.testing.assert_allclose(conv[:, :, 0], [[81.6, 86.1, 90.6], [104.1, 108.6, 113.1],
                                                   [126.6, 131.1, 135.6]], atol=1e-4, rtol=0)
        pooled, _ = L.maxpool_forward(L.relu(conv), L.PoolParams((2, 2), (1, 1)))
        np.testing.assert_allclose(pooled[:, :, 0], [[108.6, 113.1], [131.1, 135.6]], atol=1e-4, rtol=0)
        flat = L.flatten(pooled)
        np.testing.assert_allclose(flat, [108.6, 113.1, 131.1, 135.6], atol=1e-4, rtol=0)
        w = np.array([[0.3, 0.2, 0.4, 0.1], [0.2, 0.2, 0.5, 0.1]], dtype=np.float32).T
        out = L.dense_forward(flat, L.DenseParams(w, np.zeros(2, np.float32)))
        np.testing.assert_allclose(out, [121.2, 123.45], atol=1e-4, rtol=0)
        assert predict_from_logits(out) == 1


# ---------------------------------------------------------------- gradients


def _conv_errors(rng):
    x, p = random_conv(rng)
    dy = rng.standard_normal(L.conv2d_forward(x, p).shape)
    dx, dk, db = L.conv2d_backward(x, p, dy)

    def with_params(k=p.kernels, b=p.bias):
        return L.ConvParams(k, b, p.stride, p.padding)

    return max(
        max_rel_error(dx, numeric_grad(lambda v: np.sum(dy * L.conv2d_forward(v, p)), x)),
        max_rel_error(dk, numeric_grad(lambda v: np.sum(dy * L.conv2d_forward(x, with_params(k=v))), p.kernels)),
        max_rel_error(db, numeric_grad(lambda v: np.sum(dy * L.conv2d_forward(x, with_params(b=v))), p.bias)),
    )


def _pool_errors(rng):
    x, p = random_pool(rng)
    y, argmax = L.maxpool_forward(x, p)
    dy = rng.standard_normal(y.shape)
    dx = L.maxpool_backward(argmax, dy, x.shape)
    return max_rel_error(dx, numeric_grad(lambda v: np.sum(dy * L.maxpool_forward(v, p)[0]), x))


def _dense_errors(rng):
    x, p = random_dense(rng)
    dy = rng.standard_normal(p.weights.shape[1])
    dx, dw, db = L.dense_backward(x, p, dy)
    return max(
        max_rel_error(dx, numeric_grad(lambda v: dy @ L.dense_forward(v, p), x)),
        max_rel_error(dw, numeric_grad(lambda v: dy @ L.dense_forward(x, L.DenseParams(v, p.bias)), p.weights)),
        max_rel_error(db, numeric_grad(lambda v: dy @ L.dense_forward(x, L.DenseParams(p.weights, v)), p.bias)),
    )


def _relu_errors(rng):
    shape = tuple(rng.integers(1, 5, size=3))
    x = rng.standard_normal(shape)
    # keep every point at least 0.01 from the kink so the step never crosses it
    x = np.where(np.abs(x) < 0.01, 0.01 * np.sign(x) + 0.01 * (x == 0), x)
    dy = rng.standard_normal(shape)
    return max_rel_error(L.relu_grad(x, dy), numeric_grad(lambda v: np.sum(dy * L.relu(v)), x))


def _softmax_ce_errors(rng):
    b, k = int(rng.integers(1, 6)), int(rng.integers(2, 6))
    logits = rng.standard_normal((b, k)) * 2
    y = np.zeros((b, k))
    y[np.arange(b), rng.integers(0, k, b)] = 1
    _, d = softmax_ce_from_logits(logits, y)
    return max_rel_error(d, numeric_grad(lambda v: softmax_ce_from_logits(v, y)[0], logits))


def test_gradient_suite():
    with criterion(f"Gradient suite: 5 layers x {N_INSTANCES} instances, rel err <= {GRAD_TOL}, < 30 s"):
        t0 = time.perf_counter()
        rng = np.random.default_rng(2024)
        worst = {}
        for name, check in [("conv2d", _conv_errors), ("maxpool", _pool_errors), ("dense", _dense_errors),
                            ("relu", _relu_errors), ("softmax_ce", _softmax_ce_errors)]:
            worst[name] = max(check(rng) for _ in range(N_INSTANCES))
        elapsed = time.perf_counter() - t0
        bad = {k: v for k, v in worst.items() if not v <= GRAD_TOL}
        assert not bad, f"relative errors above tolerance: {bad}"
        assert elapsed < 30, f"gradient suite took {elapsed:.1f}s"


# ---------------------------------------------------------------- split

SPLIT_COUNTS = {
    # class folder: (train, val, test); folder names sort as Mild, Moderate, Non, Very_Mild
    "Mild_Demented": (716, 89, 91),
    "Moderate_Demented": (51, 6, 7),
    "Non_Demented": (2560, 320, 320),
    "Very_Mild_Demented": (1792, 224, 224),
}
SOURCE_SIZES = {"Non_Demented": 3200, "Very_Mild_Demented": 2240, "Mild_Demented": 896, "Moderate_Demented": 64}


def _assignment(root):
    return sorted(str(p.relative_to(root)) for p in Path(root).rglob("*") if p.is_file())


def test_split_parity(tmp_path, capsys):
    with criterion("Split parity: 12 per-class counts, totals 5119/639/642, seed 888 repeatable"):
        src = tmp_path / "src"
        for name, n in SOURCE_SIZES.items():
            d = src / name
            d.mkdir(parents=True)
            for i in range(n):
                (d / f"{name.lower()}_{i}.jpg").write_bytes(b"")
        counts = split_folders(src, tmp_path / "a", SplitSpec((0.8, 0.1, 0.1), 888))
        assert counts == SPLIT_COUNTS
        totals = [sum(c[i] for c in counts.values()) for i in range(3)]
        assert totals == [5119, 639, 642]
        for subset, i in (("train", 0), ("val", 1), ("test", 2)):
            for name, c in SPLIT_COUNTS.items():
                assert len(list((tmp_path / "a" / subset / name).iterdir())) == c[i]
        assert run(["split", "--src", str(src), "--dst", str(tmp_path / "b"), "--seed", "888"]) == 0
        out = capsys.readouterr().out
        assert "5119 (80%)" in out and "639 (10%)" in out and "642 (10%)" in out
        assert _assignment(tmp_path / "a") == _assignment(tmp_path / "b")


# ---------------------------------------------------------------- overfit


def test_overfit_convergence(tmp_path):
    with criterion("Overfit: reduced slim CNN on 60 images hits 100% train acc within 30 epochs, "
                   "final loss < 0.05, < 2 min"):
        t0 = time.perf_counter()
        src = make_two_class_images(tmp_path / "imgs", n=60, size=16, seed=7)
        ds = DatasetIndex.from_directory(src, (16, 16))
        assert len(ds) == 60
        # 16x16 inputs need padding 1 for the third 3x3 conv to have a non-empty output
        m = init_weights(build_slim_cnn((16, 16, 1), (8, 16, 16), 32, 2, (1, 1)), 888)
        h = fit(m, ds, ds, epochs=30, seed=888)
        assert 1.0 in h.train_acc, f"train accuracy peaked at {max(h.train_acc)}"
        assert h.train_loss[-1] < 0.05, f"final train loss {h.train_loss[-1]:.4f}"
        _, acc, _ = evaluate(m, ds)
        assert acc == 1.0
        elapsed = time.perf_counter() - t0
        assert elapsed < 120, f"took {elapsed:.1f}s"


# ---------------------------------------------------------------- Grad-CAM


def test_gradcam_suite():
    with criterion("Grad-CAM: 28x28 full-model map in [0,1] with max 1, toy exact, jet anchors, "
                   "(151,100,100) blend"):
        m = init_weights(build_slim_cnn(), 888)
        x = np.random.default_rng(0).random((128, 128, 1), dtype=np.float32)
        hm = gradcam_heatmap(m, x, "lastConv")
        assert hm.shape == (28, 28)
        assert hm.min() >= 0 and hm.max() == 1.0
        del m

        toy = (Model((4, 4, 1)).add_conv(2, (1, 1), relu=True, name="lastConv")
               .add_flatten().add_dense(2, name="output_layer"))
        toy.layer("lastConv").params.kernels[0, 0, 0] = [1.0, -1.0]
        toy.layer("lastConv").params.bias[:] = [-0.3, 0.8]
        toy.layer("output_layer").params.weights[0::2, 0] = 1.0
        img = np.arange(16, dtype=np.float32).reshape(4, 4, 1) / 15
        a0 = np.maximum(img[:, :, 0] + np.float32(-0.3), 0).astype(np.float64)
        assert np.array_equal(gradcam_heatmap(toy, img), a0 / a0.max())

        assert jet(0.0).tolist() == [0, 0, 128]
        assert jet(0.5).tolist() == [128, 255, 128]
        assert jet(1.0).tolist() == [128, 0, 0]

        blend = superimpose(np.ones((8, 8)), np.full((8, 8, 1), 100 / 255, np.float32), 0.4)
        assert np.all(blend == [151, 100, 100])


# ---------------------------------------------------------------- metrics


def test_metrics_suite():
    with criterion("Metrics: weighted recall == accuracy on 1,000 matrices, 2x2 report, 640/642 -> 0.9969"):
        rng = np.random.default_rng(99)
        for _ in range(1000):
            k = int(rng.integers(2, 7))
            cm = rng.integers(0, 40, (k, k))
            cm[0, 0] += 1
            r = classification_report(cm, [str(i) for i in range(k)])
            assert abs(r.weighted[1] - r.accuracy) <= 1e-9

        r = classification_report(np.array([[2, 1], [0, 3]]), ["a", "b"])
        np.testing.assert_allclose(r.precision, [1.0, 0.75], atol=1e-4)
        np.testing.assert_allclose(r.recall, [0.6667, 1.0], atol=1e-4)
        np.testing.assert_allclose(r.f1, [0.8, 0.8571], atol=1e-4)
        assert r.accuracy == pytest.approx(0.8333, abs=1e-4)

        cm = np.diag([319, 224, 90, 7])
        cm[1, 2] = 2  # two off-diagonal cases: trace 640, total 642
        r = classification_report(cm, ["None", "Very Mild", "Mild", "Moderate"])
        assert (r.correct, r.total) == (640, 642)
        assert "0.9969" in r.to_text()


# ---------------------------------------------------------------- determinism

PIPELINE_MODEL = ["--image-size", "20", "20", "--filters", "8", "16", "16", "--dense", "32"]


def _pipeline(root: Path, src: Path) -> dict[str, bytes]:
    data, ckpt, expl = root / "data", root / "ckpt", root / "explain"
    assert run(["split", "--src", str(src), "--dst", str(data), "--seed", "888"]) == 0
    assert run(["train", "--data", str(data), "--epochs", "2", "--seed", "888", "--out", str(ckpt),
                *PIPELINE_MODEL]) == 0
    assert run(["evaluate", "--data", str(data), "--ckpt", str(ckpt / "epoch_2.scnn"),
                "--report-csv", str(root / "report.csv")]) == 0
    assert run(["explain", "--ckpt", str(ckpt / "epoch_2.scnn"), "--data", str(data), "--m", "4",
                "--seed", "888", "--out", str(expl)]) == 0
    files = {}
    for p in sorted(root.rglob("*")):
        if p.is_file() and p.suffix in (".scnn", ".csv", ".png") and "data" not in p.relative_to(root).parts[:1]:
            files[str(p.relative_to(root))] = p.read_bytes()
    return files


def test_pipeline_determinism(tmp_path, capsys):
    with criterion("Determinism: split->train(2 epochs, 60 images)->evaluate->explain twice, bit-identical"):
        src = make_two_class_images(tmp_path / "src", n=60, size=20, seed=3)
        first = _pipeline(tmp_path / "run1", src)
        out1 = capsys.readouterr().out.replace(str(tmp_path / "run1"), "<root>")
        second = _pipeline(tmp_path / "run2", src)
        out2 = capsys.readouterr().out.replace(str(tmp_path / "run2"), "<root>")
        assert {"ckpt/epoch_1.scnn", "ckpt/epoch_2.scnn", "ckpt/history.csv",
                "explain/cases_grid.png"} <= set(first)
        assert sum(k.endswith("_gradcam.png") for k in first) == 4
        assert first.keys() == second.keys()
        differing = [k for k in first if first[k] != second[k]]
        assert not differing, f"files differ between runs: {differing}"
        assert out1 == out2


if __name__ == "__main__":
    raise SystemExit(pytest.main([__file__, "-q"]))
