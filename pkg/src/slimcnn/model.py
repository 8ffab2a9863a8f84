"""Sequential model graph, the slim CNN builder, summary table and checkpoints."""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import layers as L
from .tensor import DTYPE, check_shape

_KIND_LABEL = {
    "input": "InputLayer",
    "conv2d": "Conv2D",
    "maxpool": "MaxPooling2D",
    "flatten": "Flatten",
    "dense": "Dense",
}
_AUTO_PREFIX = {
    "input": "input",
    "conv2d": "conv2d",
    "maxpool": "max_pooling2d",
    "flatten": "flatten",
    "dense": "dense",
}


@dataclass
class LayerNode:
    kind: str
    out_shape: tuple[int, ...]
    name: str
    params: L.ConvParams | L.PoolParams | L.DenseParams | None = None
    relu: bool = False

    @property
    def n_params(self) -> int:
        return 0 if self.params is None else self.params.n_params

    def weights(self) -> list[np.ndarray]:
        if isinstance(self.params, L.ConvParams):
            return [self.params.kernels, self.params.bias]
        if isinstance(self.params, L.DenseParams):
            return [self.params.weights, self.params.bias]
        return []


class Model:
    """An ordered stack of layers starting with an input node.

    Layers are appended with the ``add_*`` methods, which infer output shapes
    and allocate zero-valued float32 weights. ReLU is a flag on conv and dense
    nodes rather than a node of its own.
    """

    def __init__(self, input_shape, classes: list[str] | None = None):
        shape = check_shape(input_shape)
        if len(shape) != 3:
            raise ValueError(f"input shape must be (h, w, c), got {shape}")
        self.layers: list[LayerNode] = [LayerNode("input", shape, "input")]
        self.classes = list(classes) if classes is not None else None

    # ------------------------------------------------------------ building

    @property
    def input_shape(self) -> tuple[int, ...]:
        return self.layers[0].out_shape

    @property
    def output_shape(self) -> tuple[int, ...]:
        return self.layers[-1].out_shape

    def _name(self, kind: str, name: str | None) -> str:
        taken = {n.name for n in self.layers}
        if name is not None:
            if name in taken:
                raise ValueError(f"duplicate layer name {name!r}")
            return name
        base = _AUTO_PREFIX[kind]
        candidate, i = base, 0
        while candidate in taken:
            i += 1
            candidate = f"{base}_{i}"
        return candidate

    def add_conv(self, filters: int, kernel=(3, 3), relu: bool = True, name: str | None = None,
                 stride=(1, 1), padding=(0, 0)) -> "Model":
        prev = self.output_shape
        if len(prev) != 3:
            raise ValueError(f"conv2d needs a (h, w, c) input, got {prev}")
        kh, kw = L._pair(kernel)
        p = L.ConvParams(np.zeros((kh, kw, prev[2], filters), DTYPE), np.zeros(filters, DTYPE),
                         stride, padding)
        oh, ow = L.conv2d_out_shape(prev[:2], (kh, kw), p.padding, p.stride)
        self.layers.append(LayerNode("conv2d", (oh, ow, filters), self._name("conv2d", name), p, relu))
        return self

    def add_maxpool(self, pool=(2, 2), stride=None, name: str | None = None) -> "Model":
        prev = self.output_shape
        if len(prev) != 3:
            raise ValueError(f"max pooling needs a (h, w, c) input, got {prev}")
        p = L.PoolParams(pool, stride)
        oh, ow = L.maxpool_out_shape(prev[:2], p)
        self.layers.append(LayerNode("maxpool", (oh, ow, prev[2]), self._name("maxpool", name), p))
        return self

    def add_flatten(self, name: str | None = None) -> "Model":
        n = int(np.prod(self.output_shape))
        self.layers.append(LayerNode("flatten", (n,), self._name("flatten", name)))
        return self

    def add_dense(self, units: int, relu: bool = False, name: str | None = None) -> "Model":
        prev = self.output_shape
        if len(prev) != 1:
            raise ValueError(f"dense needs a flat input, got {prev}; add a flatten layer first")
        p = L.DenseParams(np.zeros((prev[0], units), DTYPE), np.zeros(units, DTYPE))
        self.layers.append(LayerNode("dense", (units,), self._name("dense", name), p, relu))
        return self

    # ------------------------------------------------------------ introspection

    def index_of(self, name: str) -> int:
        for i, node in enumerate(self.layers):
            if node.name == name:
                return i
        raise KeyError(f"no layer named {name!r}")

    def layer(self, name: str) -> LayerNode:
        return self.layers[self.index_of(name)]

    def parameters(self) -> list[np.ndarray]:
        """Weight arrays in layer order, kernels before biases."""
        return [w for node in self.layers for w in node.weights()]

    @property
    def n_params(self) -> int:
        return sum(node.n_params for node in self.layers)

    def astype(self, dtype) -> "Model":
        """Cast all weights in place (float64 copies are handy for gradient checks)."""
        for node in self.layers:
            p = node.params
            if isinstance(p, L.ConvParams):
                p.kernels, p.bias = p.kernels.astype(dtype), p.bias.astype(dtype)
            elif isinstance(p, L.DenseParams):
                p.weights, p.bias = p.weights.astype(dtype), p.bias.astype(dtype)
        return self

    # ------------------------------------------------------------ execution

    def _check_batch(self, batch: np.ndarray) -> None:
        if batch.ndim != 4 or tuple(batch.shape[1:]) != self.input_shape:
            raise ValueError(f"batch shape {batch.shape} does not match (b, {', '.join(map(str, self.input_shape))})")

    def _run(self, x: np.ndarray, start: int, caches: list | None = None, capture: int | None = None):
        captured = None
        for i in range(start, len(self.layers)):
            node = self.layers[i]
            cache = None
            if node.kind == "conv2d":
                cache = x
                x = L.conv2d_forward(x, node.params)
                if node.relu:
                    x = L.relu(x)
            elif node.kind == "maxpool":
                in_shape = x.shape
                x, argmax = L.maxpool_forward(x, node.params)
                cache = (argmax, in_shape)
            elif node.kind == "flatten":
                cache = x.shape
                x = L.flatten(x)
            elif node.kind == "dense":
                cache = x
                x = L.dense_forward(x, node.params)
                if node.relu:
                    x = L.relu(x)
            if caches is not None:
                caches.append((i, cache, x))
            if capture == i:
                captured = x
        return x, captured

    def forward(self, batch: np.ndarray, capture: str | None = None):
        """Raw class scores for ``batch`` (b, h, w, c).

        Returns ``(logits, captured)`` where ``captured`` is the post-activation
        output of the layer named ``capture`` (None when not requested).
        """
        self._check_batch(batch)
        cap = self.index_of(capture) if capture is not None else None
        logits, captured = self._run(batch, 1, capture=cap)
        return logits, captured

    def forward_from(self, name: str, activation: np.ndarray) -> np.ndarray:
        """Run the layers after ``name`` on a given output of that layer."""
        return self._run(activation, self.index_of(name) + 1)[0]

    def forward_train(self, batch: np.ndarray):
        """Forward pass keeping the per-layer caches needed by :meth:`backward`."""
        self._check_batch(batch)
        caches: list = []
        logits, _ = self._run(batch, 1, caches=caches)
        return logits, caches

    def backward(self, caches: list, dlogits: np.ndarray, stop_at: str | None = None,
                 param_grads: bool = True, input_grad: bool = False):
        """Backpropagate ``dlogits`` through the cached forward pass.

        Returns ``(grads, dout)``. ``grads`` lines up with :meth:`parameters`
        (empty when ``param_grads`` is false). When ``stop_at`` names a layer,
        propagation ends there and ``dout`` is the gradient with respect to
        that layer's post-activation output; otherwise it is the gradient with
        respect to the input batch when ``input_grad`` is set, else None.
        """
        stop = self.index_of(stop_at) if stop_at is not None else 0
        grads: dict[int, list[np.ndarray]] = {}
        dy = dlogits
        for i, cache, out in reversed(caches):
            if i == stop:
                break
            node = self.layers[i]
            if node.kind in ("conv2d", "dense") and node.relu:
                dy = L.relu_grad(out, dy)
            need_dx = i > 1 or stop != 0 or input_grad
            if node.kind == "conv2d":
                dy, dk, db = L.conv2d_backward(cache, node.params, dy, need_dx=need_dx)
                grads[i] = [dk, db]
            elif node.kind == "dense":
                dy, dw, db = L.dense_backward(cache, node.params, dy, need_dx=need_dx)
                grads[i] = [dw, db]
            elif node.kind == "maxpool":
                argmax, in_shape = cache
                dy = L.maxpool_backward(argmax, dy, in_shape)
            elif node.kind == "flatten":
                dy = dy.reshape(cache)
        flat = []
        if param_grads:
            for i, node in enumerate(self.layers):
                if node.weights():
                    if i not in grads:
                        raise ValueError(f"no gradient reached layer {node.name!r}")
                    flat.extend(grads[i])
        return flat, dy

    def predict(self, batch: np.ndarray) -> np.ndarray:
        logits, _ = self.forward(batch)
        return predict_from_logits(logits)

    # ------------------------------------------------------------ reporting

    def summary(self) -> str:
        rows = []
        for node in self.layers:
            label = f"{node.name} ({_KIND_LABEL[node.kind]})"
            shape = "(None, " + ", ".join(str(d) for d in node.out_shape) + ")"
            rows.append((label, shape, f"{node.n_params:,}"))
        w0 = max(28, *(len(r[0]) for r in rows)) + 2
        w1 = max(24, *(len(r[1]) for r in rows)) + 2
        rule = "=" * (w0 + w1 + 12)
        lines = [f"{'Layer (type)':<{w0}}{'Output Shape':<{w1}}Param #", rule]
        lines += [f"{a:<{w0}}{b:<{w1}}{c}" for a, b, c in rows]
        lines.append(rule)
        total = self.n_params
        lines.append(f"Total (trainable) params: {total:,} ({total * 4 / 2**20:.2f} MB)")
        return "\n".join(lines)


def predict_from_logits(logits: np.ndarray) -> np.ndarray:
    """Index of the largest score per row; ties resolve to the lowest index."""
    logits = np.asarray(logits)
    if logits.ndim == 1:
        return np.argmax(logits)
    return np.argmax(logits, axis=1)


def build_slim_cnn(input_shape=(128, 128, 1), filters=(128, 256, 256), dense_units: int = 256,
                   n_classes: int = 4, padding=(0, 0), classes: list[str] | None = None) -> Model:
    """The nine-layer slim CNN; the defaults give the 52,268,036-parameter network.

    ``filters``, ``dense_units``, ``padding`` and ``input_shape`` exist so that
    reduced copies of the same topology can be trained quickly.
    """
    f1, f2, f3 = filters
    return (Model(input_shape, classes)
            .add_conv(f1, (3, 3), relu=True, padding=padding)
            .add_maxpool((2, 2))
            .add_conv(f2, (3, 3), relu=True, padding=padding)
            .add_maxpool((2, 2))
            .add_conv(f3, (3, 3), relu=True, padding=padding, name="lastConv")
            .add_flatten()
            .add_dense(dense_units, relu=True)
            .add_dense(n_classes, name="output_layer"))


# ---------------------------------------------------------------- checkpoints

MAGIC = b"SCNN"
FORMAT_VERSION = 1
_HEADER = struct.Struct("<4sII")  # magic, version, manifest byte length


class CheckpointError(ValueError):
    pass


def _manifest(m: Model) -> dict:
    entries = []
    for node in m.layers:
        e = {"kind": node.kind, "name": node.name, "out_shape": list(node.out_shape)}
        p = node.params
        if isinstance(p, L.ConvParams):
            e.update(filters=p.kernels.shape[3], kernel=list(p.kernels.shape[:2]),
                     stride=list(p.stride), padding=list(p.padding), relu=node.relu)
        elif isinstance(p, L.PoolParams):
            e.update(pool=list(p.pool), stride=list(p.stride))
        elif isinstance(p, L.DenseParams):
            e.update(units=p.weights.shape[1], relu=node.relu)
        e["weights"] = [list(w.shape) for w in node.weights()]
        entries.append(e)
    return {"input_shape": list(m.input_shape), "classes": m.classes, "layers": entries}


def save_checkpoint(m: Model, path) -> None:
    """Write magic, version, a JSON manifest, then little-endian float32 weights."""
    manifest = json.dumps(_manifest(m), sort_keys=True, separators=(",", ":")).encode("utf-8")
    with open(path, "wb") as fh:
        fh.write(_HEADER.pack(MAGIC, FORMAT_VERSION, len(manifest)))
        fh.write(manifest)
        for w in m.parameters():
            fh.write(np.ascontiguousarray(w, dtype="<f4").tobytes())


def _model_from_manifest(man: dict) -> Model:
    m = Model(man["input_shape"], man.get("classes"))
    entries = man["layers"]
    if not entries or entries[0]["kind"] != "input":
        raise CheckpointError("manifest must start with the input layer")
    for e in entries[1:]:
        kind = e["kind"]
        if kind == "conv2d":
            m.add_conv(e["filters"], e["kernel"], e["relu"], e["name"], e["stride"], e["padding"])
        elif kind == "maxpool":
            m.add_maxpool(e["pool"], e["stride"], e["name"])
        elif kind == "flatten":
            m.add_flatten(e["name"])
        elif kind == "dense":
            m.add_dense(e["units"], e["relu"], e["name"])
        else:
            raise CheckpointError(f"unknown layer kind {kind!r}")
    for node, e in zip(m.layers, entries):
        if list(node.out_shape) != list(e["out_shape"]):
            raise CheckpointError(f"layer {node.name!r}: manifest shape {e['out_shape']} "
                                  f"disagrees with inferred {list(node.out_shape)}")
        if [list(w.shape) for w in node.weights()] != [list(s) for s in e.get("weights", [])]:
            raise CheckpointError(f"layer {node.name!r}: manifest weight shapes {e.get('weights')} "
                                  f"disagree with the architecture")
    return m


def load_checkpoint(path) -> Model:
    data = Path(path).read_bytes()
    if len(data) < _HEADER.size:
        raise CheckpointError("truncated header")
    magic, version, n = _HEADER.unpack_from(data)
    if magic != MAGIC:
        raise CheckpointError(f"bad magic {magic!r}")
    if version != FORMAT_VERSION:
        raise CheckpointError(f"unsupported format version {version}")
    start = _HEADER.size + n
    if len(data) < start:
        raise CheckpointError("truncated manifest")
    try:
        man = json.loads(data[_HEADER.size:start].decode("utf-8"))
        m = _model_from_manifest(man)
    except (KeyError, TypeError, ValueError) as exc:
        if isinstance(exc, CheckpointError):
            raise
        raise CheckpointError(f"malformed manifest: {exc}") from exc
    params = m.parameters()
    expected = sum(w.size for w in params) * 4
    payload = len(data) - start
    if payload < expected:
        raise CheckpointError(f"truncated weights: {payload} bytes, manifest needs {expected}")
    if payload > expected:
        raise CheckpointError(f"{payload - expected} unexpected trailing bytes")
    values = np.frombuffer(data, dtype="<f4", offset=start)
    pos = 0
    for w in params:
        w[...] = values[pos:pos + w.size].reshape(w.shape)
        pos += w.size
    return m
