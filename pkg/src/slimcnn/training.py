"""Softmax cross-entropy, Adam, Glorot initialisation and the fit loop."""

from __future__ import annotations

import csv
import logging
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import layers as L
from .data import DatasetIndex, batches
from .model import Model, predict_from_logits, save_checkpoint

log = logging.getLogger(__name__)

HISTORY_FIELDS = ("epoch", "train_loss", "train_acc", "val_loss", "val_acc")


class TrainingDiverged(FloatingPointError):
    pass


def softmax(logits: np.ndarray) -> np.ndarray:
    z = logits - logits.max(axis=-1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=-1, keepdims=True)


def softmax_ce_from_logits(logits: np.ndarray, onehot: np.ndarray) -> tuple[float, np.ndarray]:
    """Mean categorical cross-entropy on raw scores and its gradient.

    Returns ``(loss, dlogits)`` with ``dlogits = (softmax - onehot) / b``.
    """
    if logits.shape != onehot.shape or logits.ndim != 2:
        raise ValueError(f"logits {logits.shape} and labels {onehot.shape} must both be (b, k)")
    if not (np.all((onehot == 0) | (onehot == 1)) and np.all(onehot.sum(axis=1) == 1)):
        raise ValueError("labels must be one-hot rows")
    b = logits.shape[0]
    z = logits - logits.max(axis=1, keepdims=True)
    log_z = np.log(np.exp(z).sum(axis=1))
    true = np.argmax(onehot, axis=1)
    per_row = log_z - z[np.arange(b), true]
    loss = float(np.mean(per_row, dtype=np.float64))
    dlogits = (softmax(logits) - onehot) / b
    return loss, dlogits.astype(logits.dtype, copy=False)


@dataclass
class AdamState:
    lr: float = 0.001
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-7
    t: int = 0
    m: list[np.ndarray] = field(default_factory=list)
    v: list[np.ndarray] = field(default_factory=list)


def adam_step(state: AdamState, weights: list[np.ndarray], grads: list[np.ndarray]):
    """One Adam update, applied to ``weights`` in place."""
    if len(weights) != len(grads):
        raise ValueError("weights and grads must align")
    if not state.m:
        state.m = [np.zeros_like(w) for w in weights]
        state.v = [np.zeros_like(w) for w in weights]
    state.t += 1
    b1, b2 = state.beta1, state.beta2
    c1 = 1.0 - b1 ** state.t
    c2 = 1.0 - b2 ** state.t
    for w, g, m, v in zip(weights, grads, state.m, state.v):
        if g.shape != w.shape:
            raise ValueError(f"gradient shape {g.shape} does not match weight {w.shape}")
        m *= b1
        m += (1 - b1) * g
        v *= b2
        v += (1 - b2) * np.square(g)
        w -= (state.lr * (m / c1) / (np.sqrt(v / c2) + state.eps)).astype(w.dtype, copy=False)
    return weights, state


def glorot_limit(node_params) -> float:
    if isinstance(node_params, L.ConvParams):
        kh, kw, c_in, c_out = node_params.kernels.shape
        fan_in, fan_out = kh * kw * c_in, kh * kw * c_out
    else:
        fan_in, fan_out = node_params.weights.shape
    return math.sqrt(6.0 / (fan_in + fan_out))


def init_weights(m: Model, seed: int) -> Model:
    """Glorot-uniform kernels and dense weights, zero biases; in place."""
    rng = np.random.default_rng(seed)
    for node in m.layers:
        ws = node.weights()
        if not ws:
            continue
        limit = glorot_limit(node.params)
        kernel, bias = ws
        kernel[...] = limit * (2 * rng.random(kernel.shape, dtype=np.float32) - 1)
        bias[...] = 0
    return m


@dataclass
class History:
    train_loss: list[float] = field(default_factory=list)
    train_acc: list[float] = field(default_factory=list)
    val_loss: list[float] = field(default_factory=list)
    val_acc: list[float] = field(default_factory=list)

    def __len__(self) -> int:
        return len(self.train_loss)

    def append(self, train_loss, train_acc, val_loss, val_acc):
        self.train_loss.append(train_loss)
        self.train_acc.append(train_acc)
        self.val_loss.append(val_loss)
        self.val_acc.append(val_acc)

    def row(self, i: int) -> list:
        return [i + 1, self.train_loss[i], self.train_acc[i], self.val_loss[i], self.val_acc[i]]


def evaluate(m: Model, ds: DatasetIndex, batch_size: int = 32):
    """Mean loss, accuracy and the per-sample predictions with weights frozen."""
    total_loss, preds = 0.0, []
    for x, y in batches(ds, batch_size):
        logits, _ = m.forward(x)
        loss, _ = softmax_ce_from_logits(logits, y)
        total_loss += loss * len(x)
        preds.append(predict_from_logits(logits))
    preds = np.concatenate(preds) if preds else np.zeros(0, dtype=np.int64)
    correct = int(np.sum(preds == ds.labels))
    return total_loss / len(ds), correct / len(ds), preds


def epoch_seed(seed: int, epoch: int) -> int:
    return int(np.random.SeedSequence([seed, epoch]).generate_state(1)[0])


def fit(m: Model, train: DatasetIndex, val: DatasetIndex, epochs: int = 50, seed: int = 888,
        checkpoint_dir=None, batch_size: int = 32, lr: float = 0.001,
        state: AdamState | None = None) -> History:
    """Train ``m`` in place.

    Training loss/accuracy are averaged over the forward passes that produced
    each batch's gradient (weights before that batch's update). Validation is
    evaluated after the epoch. With ``checkpoint_dir`` set, ``epoch_<n>.scnn``
    and ``history.csv`` are written there after each epoch.
    """
    if epochs < 0:
        raise ValueError("epochs must be >= 0")
    if len(train) == 0 or len(val) == 0:
        raise ValueError("train and validation sets must be non-empty")
    state = state or AdamState(lr=lr)
    params = m.parameters()
    history = History()
    out = Path(checkpoint_dir) if checkpoint_dir is not None else None
    if out is not None:
        out.mkdir(parents=True, exist_ok=True)
        with open(out / "history.csv", "w", newline="") as fh:
            csv.writer(fh).writerow(HISTORY_FIELDS)

    for epoch in range(epochs):
        loss_sum, correct = 0.0, 0
        for x, y in batches(train, batch_size, epoch_seed(seed, epoch)):
            logits, caches = m.forward_train(x)
            if not np.all(np.isfinite(logits)):
                raise TrainingDiverged(f"non-finite logits in epoch {epoch + 1}")
            loss, dlogits = softmax_ce_from_logits(logits, y)
            if not math.isfinite(loss):
                raise TrainingDiverged(f"non-finite loss {loss} in epoch {epoch + 1}")
            loss_sum += loss * len(x)
            correct += int(np.sum(predict_from_logits(logits) == np.argmax(y, axis=1)))
            grads, _ = m.backward(caches, dlogits)
            adam_step(state, params, grads)
        val_loss, val_acc, _ = evaluate(m, val, batch_size)
        if not math.isfinite(val_loss):
            raise TrainingDiverged(f"non-finite validation loss in epoch {epoch + 1}")
        history.append(loss_sum / len(train), correct / len(train), val_loss, val_acc)
        log.info("epoch %d/%d loss %.4f acc %.4f val_loss %.4f val_acc %.4f",
                 epoch + 1, epochs, *history.row(epoch)[1:])
        if out is not None:
            save_checkpoint(m, out / f"epoch_{epoch + 1}.scnn")
            with open(out / "history.csv", "a", newline="") as fh:
                csv.writer(fh).writerow(history.row(epoch))
    return history
