"""Dense ReLU network with masked weights, exact gradients and plain SGD.

Masks apply to weights only. A masked weight keeps its stored value but is
multiplied by zero at forward time and always receives a zero gradient.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import List, Optional, Sequence

import numpy as np

Mask = List[np.ndarray]


class ShapeError(ValueError):
    pass


class DivergenceError(RuntimeError):
    pass


@dataclass
class NetworkParams:
    layer_dims: List[int]
    weights: List[np.ndarray]
    biases: List[np.ndarray]

    def __post_init__(self):
        self.layer_dims = [int(d) for d in self.layer_dims]
        if len(self.weights) != len(self.layer_dims) - 1 or len(self.biases) != len(self.weights):
            raise ShapeError("expected one weight matrix and bias vector per layer")
        for l, (w, b) in enumerate(zip(self.weights, self.biases)):
            shape = (self.layer_dims[l], self.layer_dims[l + 1])
            if w.shape != shape or b.shape != (shape[1],):
                raise ShapeError(f"layer {l}: got W{w.shape}, b{b.shape}, expected W{shape}")

    @property
    def n_layers(self) -> int:
        return len(self.weights)

    @property
    def n_weights(self) -> int:
        return sum(w.size for w in self.weights)

    def copy(self) -> "NetworkParams":
        return NetworkParams(list(self.layer_dims), [w.copy() for w in self.weights],
                             [b.copy() for b in self.biases])

    def equals(self, other: "NetworkParams") -> bool:
        """Bit-exact equality of dims and all arrays."""
        return (self.layer_dims == other.layer_dims
                and all(np.array_equal(a, b) for a, b in zip(self.weights, other.weights))
                and all(np.array_equal(a, b) for a, b in zip(self.biases, other.biases)))


@dataclass
class GradientSet:
    weights: List[np.ndarray]
    biases: List[np.ndarray]

    def norm(self) -> float:
        """Flat l2 norm over all layers, weights and biases jointly."""
        sq = sum(float(np.sum(w * w)) for w in self.weights)
        sq += sum(float(np.sum(b * b)) for b in self.biases)
        return float(np.sqrt(sq))

    def scaled(self, factor: float) -> "GradientSet":
        return GradientSet([w * factor for w in self.weights], [b * factor for b in self.biases])

    def __add__(self, other: "GradientSet") -> "GradientSet":
        return GradientSet([a + b for a, b in zip(self.weights, other.weights)],
                           [a + b for a, b in zip(self.biases, other.biases)])

    def flat(self) -> np.ndarray:
        return np.concatenate([a.ravel() for a in self.weights] + [b.ravel() for b in self.biases])

    @classmethod
    def zeros_like(cls, params: NetworkParams) -> "GradientSet":
        return cls([np.zeros_like(w) for w in params.weights],
                   [np.zeros_like(b) for b in params.biases])


@dataclass
class LabeledBatch:
    features: np.ndarray
    labels: np.ndarray

    def __post_init__(self):
        self.features = np.asarray(self.features, dtype=np.float64)
        self.labels = np.asarray(self.labels, dtype=np.int64)
        if self.features.ndim != 2 or self.labels.ndim != 1:
            raise ShapeError("features must be 2-D and labels 1-D")
        if len(self.features) != len(self.labels):
            raise ShapeError(f"{len(self.features)} feature rows but {len(self.labels)} labels")

    def __len__(self) -> int:
        return len(self.labels)

    def subset(self, idx) -> "LabeledBatch":
        return LabeledBatch(self.features[idx], self.labels[idx])


@dataclass
class ForwardCache:
    inputs: List[np.ndarray]      # input to each layer (h_0 = X, then ReLU outputs)
    preacts: List[np.ndarray]     # pre-activation of each layer
    effective: List[np.ndarray] = field(default_factory=list)  # mask * W


def init_network(layer_dims: Sequence[int], seed: int) -> NetworkParams:
    """Glorot-uniform weights, zero biases.

    Weights are rounded to float32-representable values so that stored
    initialisations survive a 32-bit serialisation round trip bit-exactly.
    """
    dims = [int(d) for d in layer_dims]
    if len(dims) < 2 or any(d < 1 for d in dims):
        raise ValueError(f"layer_dims must have >=2 positive entries, got {list(layer_dims)}")
    rng = np.random.default_rng(seed)
    weights, biases = [], []
    for fan_in, fan_out in zip(dims[:-1], dims[1:]):
        limit = np.sqrt(6.0 / (fan_in + fan_out))
        w = rng.uniform(-limit, limit, size=(fan_in, fan_out))
        weights.append(w.astype(np.float32).astype(np.float64))
        biases.append(np.zeros(fan_out))
    return NetworkParams(dims, weights, biases)


def full_mask(params_or_dims) -> Mask:
    dims = params_or_dims.layer_dims if isinstance(params_or_dims, NetworkParams) else list(params_or_dims)
    return [np.ones((a, b), dtype=bool) for a, b in zip(dims[:-1], dims[1:])]


def mask_fraction(mask: Mask) -> float:
    """Surviving weights divided by total weights."""
    kept = sum(int(np.count_nonzero(m)) for m in mask)
    return kept / sum(m.size for m in mask)


def _check(params: NetworkParams, mask: Mask, batch: Optional[LabeledBatch] = None):
    if len(mask) != params.n_layers:
        raise ShapeError(f"mask has {len(mask)} layers, network has {params.n_layers}")
    for l, (m, w) in enumerate(zip(mask, params.weights)):
        if m.shape != w.shape:
            raise ShapeError(f"mask layer {l} shape {m.shape} != weight shape {w.shape}")
    if batch is not None:
        if batch.features.shape[1] != params.layer_dims[0]:
            raise ShapeError(f"batch has {batch.features.shape[1]} features, network expects "
                             f"{params.layer_dims[0]}")
        if len(batch) and (batch.labels.min() < 0 or batch.labels.max() >= params.layer_dims[-1]):
            raise ShapeError("labels out of range for output layer")


def forward(params: NetworkParams, mask: Mask, batch: LabeledBatch):
    """Return (logits, cache). Hidden layers use ReLU; the last layer is linear."""
    _check(params, mask, batch)
    h = batch.features
    cache = ForwardCache([], [], [])
    for l, (w, b, m) in enumerate(zip(params.weights, params.biases, mask)):
        we = w * m
        z = h @ we + b
        cache.inputs.append(h)
        cache.preacts.append(z)
        cache.effective.append(we)
        h = np.maximum(z, 0.0) if l < params.n_layers - 1 else z
    return h, cache


def _log_softmax(logits: np.ndarray) -> np.ndarray:
    shifted = logits - logits.max(axis=1, keepdims=True)
    return shifted - np.log(np.exp(shifted).sum(axis=1, keepdims=True))


def per_example_losses(logits: np.ndarray, labels: np.ndarray) -> np.ndarray:
    return -_log_softmax(logits)[np.arange(len(labels)), labels]


def _output_deltas(logits: np.ndarray, labels: np.ndarray) -> np.ndarray:
    # d loss_i / d logits_i, unscaled by batch size
    probs = np.exp(_log_softmax(logits))
    probs[np.arange(len(labels)), labels] -= 1.0
    return probs


def _backprop_deltas(cache: ForwardCache, out_delta: np.ndarray) -> List[np.ndarray]:
    """Per-example pre-activation deltas for every layer (rows = examples)."""
    n = len(cache.preacts)
    deltas = [None] * n
    d = out_delta
    for l in range(n - 1, -1, -1):
        deltas[l] = d
        if l > 0:
            # ReLU'(0) = 0
            d = (d @ cache.effective[l].T) * (cache.preacts[l - 1] > 0)
    return deltas


def _weighted_grads(cache: ForwardCache, deltas: List[np.ndarray], mask: Mask,
                    row_scale: np.ndarray) -> GradientSet:
    """sum_i row_scale[i] * g_i, with masked weight gradients zeroed."""
    ws, bs = [], []
    for h, d, m in zip(cache.inputs, deltas, mask):
        ds = d * row_scale[:, None]
        ws.append((h.T @ ds) * m)
        bs.append(ds.sum(axis=0))
    return GradientSet(ws, bs)


def per_example_grad_norms(cache: ForwardCache, deltas: List[np.ndarray], mask: Mask) -> np.ndarray:
    """Flat l2 norm of every example's gradient without materialising it.

    For one layer the masked per-example weight gradient is m * outer(h_i, d_i),
    whose squared norm is sum_jk m_jk h_ij^2 d_ik^2 = ((h_i^2) @ m) . d_i^2.
    """
    sq = np.zeros(len(deltas[0]))
    for h, d, m in zip(cache.inputs, deltas, mask):
        d2 = d * d
        sq += np.sum(((h * h) @ m.astype(np.float64)) * d2, axis=1)
        sq += d2.sum(axis=1)
    return np.sqrt(sq)


def loss_and_backward(params: NetworkParams, mask: Mask, batch: LabeledBatch):
    """Mean softmax cross-entropy and its exact gradient."""
    if len(batch) == 0:
        raise ValueError("empty batch")
    logits, cache = forward(params, mask, batch)
    losses = per_example_losses(logits, batch.labels)
    loss = float(losses.mean())
    if not np.isfinite(loss):
        raise DivergenceError(f"non-finite loss {loss}")
    deltas = _backprop_deltas(cache, _output_deltas(logits, batch.labels))
    total = _weighted_grads(cache, deltas, mask, np.ones(len(batch)))
    n = len(batch)
    return loss, GradientSet([w / n for w in total.weights], [b / n for b in total.biases])


def per_example_gradients(params: NetworkParams, mask: Mask, batch: LabeledBatch) -> List[GradientSet]:
    """One gradient per example, in input order. Memory is O(batch * params)."""
    if len(batch) == 0:
        raise ValueError("empty batch")
    logits, cache = forward(params, mask, batch)
    deltas = _backprop_deltas(cache, _output_deltas(logits, batch.labels))
    out = []
    for i in range(len(batch)):
        ws = [np.outer(h[i], d[i]) * m for h, d, m in zip(cache.inputs, deltas, mask)]
        bs = [d[i].copy() for d in deltas]
        out.append(GradientSet(ws, bs))
    return out


def sgd_step(params: NetworkParams, mask: Mask, grads: GradientSet, lr: float) -> NetworkParams:
    """theta - lr * grads on unmasked weights; masked weights and dims untouched."""
    _check(params, mask)
    if any(not np.all(np.isfinite(a)) for a in grads.weights + grads.biases):
        raise DivergenceError("non-finite gradient")
    new_w = [np.where(m, w - lr * g, w) for w, g, m in zip(params.weights, grads.weights, mask)]
    new_b = [b - lr * g for b, g in zip(params.biases, grads.biases)]
    return NetworkParams(list(params.layer_dims), new_w, new_b)


def predict(params: NetworkParams, mask: Mask, features: np.ndarray) -> np.ndarray:
    dummy = LabeledBatch(features, np.zeros(len(features), dtype=np.int64))
    logits, _ = forward(params, mask, dummy)
    return np.argmax(logits, axis=1)  # first max wins ties


def accuracy(params: NetworkParams, mask: Mask, dataset: LabeledBatch) -> float:
    if len(dataset) == 0:
        raise ValueError("empty dataset")
    return float(np.mean(predict(params, mask, dataset.features) == dataset.labels))
