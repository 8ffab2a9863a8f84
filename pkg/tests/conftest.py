from pathlib import Path

import numpy as np
import pytest
from PIL import Image

from slimcnn.layers import ConvParams, DenseParams, PoolParams


# ---------------------------------------------------------------- oracles


def numeric_grad(f, x, h=1e-3):
    """Central differences of scalar ``f`` at float64 array ``x``."""
    x = np.array(x, dtype=np.float64)
    g = np.zeros_like(x)
    it = np.nditer(x, flags=["multi_index"])
    for _ in it:
        i = it.multi_index
        old = x[i]
        x[i] = old + h
        fp = f(x)
        x[i] = old - h
        fm = f(x)
        x[i] = old
        g[i] = (fp - fm) / (2 * h)
    return g


def max_rel_error(a, b, floor=1e-6):
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    return float(np.max(np.abs(a - b) / np.maximum(np.maximum(np.abs(a), np.abs(b)), floor)))


def conv_loop(x, kernels, bias, stride=(1, 1), padding=(0, 0)):
    """Direct quadruple-loop convolution (cross-correlation), float64."""
    x = np.pad(np.asarray(x, np.float64), ((padding[0],) * 2, (padding[1],) * 2, (0, 0)))
    kh, kw, c_in, c_out = kernels.shape
    oh = (x.shape[0] - kh) // stride[0] + 1
    ow = (x.shape[1] - kw) // stride[1] + 1
    out = np.zeros((oh, ow, c_out))
    for i in range(oh):
        for j in range(ow):
            for f in range(c_out):
                s = float(bias[f])
                for a in range(kh):
                    for b in range(kw):
                        for c in range(c_in):
                            s += x[i * stride[0] + a, j * stride[1] + b, c] * kernels[a, b, c, f]
                out[i, j, f] = s
    return out


def maxpool_loop(x, pool, stride):
    h, w, c = x.shape
    oh = (h - pool[0]) // stride[0] + 1
    ow = (w - pool[1]) // stride[1] + 1
    out = np.zeros((oh, ow, c), dtype=x.dtype)
    for i in range(oh):
        for j in range(ow):
            for k in range(c):
                best = None
                for a in range(pool[0]):
                    for b in range(pool[1]):
                        v = x[i * stride[0] + a, j * stride[1] + b, k]
                        if best is None or v > best:
                            best = v
                out[i, j, k] = best
    return out


def dense_loop(x, w, b):
    out = []
    for j in range(w.shape[1]):
        s = float(b[j])
        for i in range(w.shape[0]):
            s += float(x[i]) * float(w[i, j])
        out.append(s)
    return np.array(out)


# ---------------------------------------------------------------- random instances


def random_conv(rng, h=None, w=None, c_in=None, c_out=None, k=None, dtype=np.float64):
    k = k or int(rng.integers(1, 4))
    h = h or int(rng.integers(k, k + 4))
    w = w or int(rng.integers(k, k + 4))
    c_in = c_in or int(rng.integers(1, 4))
    c_out = c_out or int(rng.integers(1, 4))
    stride = (int(rng.integers(1, 3)), int(rng.integers(1, 3)))
    padding = (int(rng.integers(0, 2)), int(rng.integers(0, 2)))
    x = rng.standard_normal((h, w, c_in)).astype(dtype)
    p = ConvParams(rng.standard_normal((k, k, c_in, c_out)).astype(dtype),
                   rng.standard_normal(c_out).astype(dtype), stride, padding)
    return x, p


def distinct_values(rng, shape, gap=0.05):
    """Values whose pairwise gaps exceed ``gap`` (keeps max-pool off ties under FD steps)."""
    n = int(np.prod(shape))
    return (rng.permutation(n) * gap + rng.uniform(0, gap / 10)).reshape(shape) - n * gap / 2


def random_pool(rng):
    pool = (int(rng.integers(1, 4)), int(rng.integers(1, 4)))
    stride = (int(rng.integers(1, 4)), int(rng.integers(1, 4)))
    h = int(rng.integers(pool[0], pool[0] + 4))
    w = int(rng.integers(pool[1], pool[1] + 4))
    c = int(rng.integers(1, 4))
    return distinct_values(rng, (h, w, c)), PoolParams(pool, stride)


def random_dense(rng, dtype=np.float64):
    n_in, n_out = int(rng.integers(1, 7)), int(rng.integers(1, 7))
    x = rng.standard_normal(n_in).astype(dtype)
    return x, DenseParams(rng.standard_normal((n_in, n_out)).astype(dtype), rng.standard_normal(n_out).astype(dtype))


# ---------------------------------------------------------------- synthetic images


def make_two_class_images(root, n=60, size=16, seed=0):
    """``n`` grayscale PNGs in two folders: a bright 4x4 patch top-left vs bottom-right."""
    rng = np.random.default_rng(seed)
    root = Path(root)
    q = size // 2
    for i in range(n):
        label = i % 2
        img = rng.integers(0, 60, (size, size))
        r0, c0 = rng.integers(0, q - 4 + 1, size=2)
        if label == 1:
            r0, c0 = r0 + q, c0 + q
        img[r0:r0 + 4, c0:c0 + 4] = 220
        d = root / f"class_{'ab'[label]}"
        d.mkdir(parents=True, exist_ok=True)
        Image.fromarray(img.astype(np.uint8)).save(d / f"img{i:03d}.png")
    return root


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


@pytest.fixture
def two_class_dir(tmp_path):
    return make_two_class_images(tmp_path / "src")


# ---------------------------------------------------------------- acceptance reporting

ACCEPTANCE_RESULTS: list[str] = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_RESULTS:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE_RESULTS:
            terminalreporter.write_line(line)
