"""
Multilayer Perceptron
ReLU MLP with manual backprop, momentum SGD, evaluation and JSON checkpoints
"""

import json
import logging
from dataclasses import dataclass
from pathlib import Path
from typing import Iterator, List, Optional, Sequence, Tuple, Union

import numpy as np
from scipy.special import logsumexp

from .config_schema import ModelSpec, TrainConfig
from .data import Dataset
from .seeding import Stream, derive_rng

logger = logging.getLogger(__name__)

CHECKPOINT_FORMAT = "distillfed-weights"
CHECKPOINT_VERSION = 1


class NonFiniteError(ArithmeticError):
    """Non-finite activations or loss during a forward pass"""

    def __init__(self, message: str, layer: int):
        super().__init__(message)
        self.layer = layer


def param_count(widths: Sequence[int]) -> int:
    return sum(fan_in * fan_out + fan_out for fan_in, fan_out in zip(widths[:-1], widths[1:]))


@dataclass(frozen=True, eq=False)
class Weights:
    """All layer parameters in one flat vector; layers are views [W1, b1, W2, b2, ...]"""
    widths: Tuple[int, ...]
    vector: np.ndarray

    def __post_init__(self):
        widths = tuple(int(w) for w in self.widths)
        vector = np.array(self.vector, dtype=np.float64).reshape(-1)
        if vector.size != param_count(widths):
            raise ValueError(f"{vector.size} parameters for widths {list(widths)}")
        vector.setflags(write=False)
        object.__setattr__(self, "widths", widths)
        object.__setattr__(self, "vector", vector)

    @property
    def param_count(self) -> int:
        return self.vector.size

    def layers(self) -> Iterator[Tuple[np.ndarray, np.ndarray]]:
        offset = 0
        for fan_in, fan_out in zip(self.widths[:-1], self.widths[1:]):
            weight = self.vector[offset:offset + fan_in * fan_out].reshape(fan_in, fan_out)
            offset += fan_in * fan_out
            bias = self.vector[offset:offset + fan_out]
            offset += fan_out
            yield weight, bias

    def with_vector(self, vector: np.ndarray) -> "Weights":
        return Weights(self.widths, vector)


@dataclass(frozen=True)
class ProxTerm:
    """FedProx proximal term (mu/2)||w - anchor||^2"""
    mu: float
    anchor: Weights


def mlp_init(spec: ModelSpec) -> Weights:
    """He-scaled Gaussian weights, zero biases"""
    rng = derive_rng(spec.seed, Stream.MODEL_INIT)
    parts = []
    for fan_in, fan_out in zip(spec.widths[:-1], spec.widths[1:]):
        parts.append(rng.normal(0.0, np.sqrt(2.0 / fan_in), size=fan_in * fan_out))
        parts.append(np.zeros(fan_out))
    return Weights(tuple(spec.widths), np.concatenate(parts))


def _forward(weights: Weights, x: np.ndarray) -> Tuple[List[np.ndarray], List[np.ndarray]]:
    inputs, pre_activations = [], []
    h = x
    layers = list(weights.layers())
    for i, (weight, bias) in enumerate(layers):
        z = h @ weight + bias
        if not np.all(np.isfinite(z)):
            raise NonFiniteError(f"non-finite activations in layer {i}", layer=i)
        inputs.append(h)
        pre_activations.append(z)
        h = np.maximum(z, 0.0) if i < len(layers) - 1 else z
    return inputs, pre_activations


def logits(weights: Weights, x: np.ndarray) -> np.ndarray:
    return _forward(weights, np.atleast_2d(x))[1][-1]


def loss_grad(weights: Weights, x_batch: np.ndarray, y_onehot: np.ndarray,
              prox: Optional[ProxTerm] = None) -> Tuple[float, Weights]:
    """Mean softmax cross-entropy over the batch and its gradient by backprop"""
    x_batch = np.atleast_2d(np.asarray(x_batch, dtype=np.float64))
    y_onehot = np.atleast_2d(np.asarray(y_onehot, dtype=np.float64))
    n = x_batch.shape[0]
    inputs, pre_activations = _forward(weights, x_batch)
    out = pre_activations[-1]
    log_norm = logsumexp(out, axis=1, keepdims=True)
    log_probs = out - log_norm
    loss = -float(np.sum(y_onehot * log_probs)) / n
    if not np.isfinite(loss):
        raise NonFiniteError("non-finite cross-entropy", layer=len(pre_activations) - 1)

    delta = (np.exp(log_probs) * y_onehot.sum(axis=1, keepdims=True) - y_onehot) / n
    layers = list(weights.layers())
    grads: List[np.ndarray] = []
    for i in range(len(layers) - 1, -1, -1):
        weight, _ = layers[i]
        grads.append(delta.sum(axis=0))
        grads.append((inputs[i].T @ delta).reshape(-1))
        if i > 0:
            delta = (delta @ weight.T) * (pre_activations[i - 1] > 0.0)
    grad = np.concatenate(grads[::-1])

    if prox is not None and prox.mu != 0.0:
        offset = weights.vector - prox.anchor.vector
        loss += 0.5 * prox.mu * float(offset @ offset)
        grad = grad + prox.mu * offset
    return loss, weights.with_vector(grad)


def sgd_train(weights: Weights, features: np.ndarray, targets: np.ndarray, cfg: TrainConfig,
              prox: Optional[ProxTerm] = None,
              correction: Optional[np.ndarray] = None,
              gradient_sum: Optional[np.ndarray] = None) -> Tuple[Weights, List[float]]:
    """
    Momentum SGD over seeded per-epoch shuffles

    correction is added to every minibatch gradient (the SCAFFOLD c - c_k term).
    gradient_sum, when given, accumulates the uncorrected minibatch gradients in place.
    The returned loss trace has one entry per step, so its length is the local step count.
    """
    features = np.atleast_2d(np.asarray(features, dtype=np.float64))
    targets = np.atleast_2d(np.asarray(targets, dtype=np.float64))
    n = features.shape[0]
    if n == 0:
        raise ValueError("cannot train on an empty dataset")
    rng = derive_rng(cfg.seed, Stream.LOCAL_TRAIN)
    current = weights
    velocity = np.zeros(weights.param_count)
    trace: List[float] = []
    for _ in range(cfg.epochs):
        perm = rng.permutation(n)
        for lo in range(0, n, cfg.batch_size):
            idx = perm[lo:lo + cfg.batch_size]
            loss, grad = loss_grad(current, features[idx], targets[idx], prox)
            if gradient_sum is not None:
                gradient_sum += grad.vector
            step = grad.vector if correction is None else grad.vector + correction
            velocity = cfg.momentum * velocity + step
            current = current.with_vector(current.vector - cfg.lr * velocity)
            trace.append(loss)
    return current, trace


def accuracy(weights: Weights, features: np.ndarray, labels: np.ndarray) -> float:
    labels = np.asarray(labels)
    if labels.size == 0:
        raise ValueError("cannot evaluate on an empty test set")
    predictions = np.argmax(logits(weights, features), axis=1)
    return float(np.mean(predictions == labels))


def evaluate(weights: Weights, dataset: Dataset) -> float:
    """Fraction of points whose argmax logit equals the label"""
    return accuracy(weights, dataset.features, dataset.labels)


def save_weights(weights: Weights, path: Union[str, Path]) -> None:
    """JSON checkpoint: layer shapes plus row-major coefficients (lossless for float64)"""
    layers = [{"weight_shape": list(w.shape), "weight": w.reshape(-1).tolist(), "bias": b.tolist()}
              for w, b in weights.layers()]
    document = {"format": CHECKPOINT_FORMAT, "version": CHECKPOINT_VERSION,
                "widths": list(weights.widths), "layers": layers}
    Path(path).write_text(json.dumps(document))


def load_weights(path: Union[str, Path]) -> Weights:
    document = json.loads(Path(path).read_text())
    if document.get("format") != CHECKPOINT_FORMAT or document.get("version") != CHECKPOINT_VERSION:
        raise ValueError(f"{path}: not a {CHECKPOINT_FORMAT} v{CHECKPOINT_VERSION} checkpoint")
    widths = document["widths"]
    parts = []
    for layer, fan_in, fan_out in zip(document["layers"], widths[:-1], widths[1:]):
        if layer["weight_shape"] != [fan_in, fan_out]:
            raise ValueError(f"{path}: layer shape {layer['weight_shape']} does not match widths")
        parts.append(np.asarray(layer["weight"], dtype=np.float64))
        parts.append(np.asarray(layer["bias"], dtype=np.float64))
    return Weights(tuple(widths), np.concatenate(parts))
