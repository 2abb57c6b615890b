"""
Multilayer Perceptron - deterministic sigmoid MLP with mask-aware forward,
backward and evaluation
"""
import logging
import warnings
from dataclasses import dataclass, field
from enum import Enum
from pathlib import Path
from typing import List, Optional, Sequence, Tuple

import numpy as np
from scipy.special import expit, logsumexp, softmax
from sklearn.metrics import accuracy_score, f1_score

from common.errors import DimensionMismatchError, InvalidSpecError
from common.protocol import (DEFAULT_BATCH_SIZE, DEFAULT_CONVERGENCE_TOL, DEFAULT_INIT_K,
                             DEFAULT_INIT_SIGMA, DEFAULT_LEARNING_RATE, DEFAULT_MAX_EPOCHS,
                             DEFAULT_PATIENCE, DEFAULT_PERTURBATION, pack_mask, pack_params,
                             unpack_mask, unpack_params)

log = logging.getLogger("Network")

# Seed-sequence stream ids; init and batch order never share a generator
INIT_STREAM = 0
SHUFFLE_STREAM = 1


class Activation(Enum):
    SIGMOID = "sigmoid"


class OutputHead(Enum):
    SIGMOID_BCE = "sigmoid_bce"
    SOFTMAX_CE = "softmax_ce"


class InitScheme(Enum):
    UNIFORM = "uniform"
    GAUSSIAN = "gaussian"


@dataclass(frozen=True)
class LayerSpec:
    """Layer widths [h_0, ..., h_l] plus activation and output head"""
    sizes: Tuple[int, ...]
    hidden_activation: Activation = Activation.SIGMOID
    output_head: OutputHead = OutputHead.SIGMOID_BCE

    def __post_init__(self):
        object.__setattr__(self, 'sizes', tuple(int(s) for s in self.sizes))
        if len(self.sizes) < 2:
            raise InvalidSpecError(f"LayerSpec needs at least 2 widths, got {self.sizes}")
        if any(s < 1 for s in self.sizes):
            raise InvalidSpecError(f"All layer widths must be >= 1, got {self.sizes}")
        if self.output_head is OutputHead.SIGMOID_BCE and self.sizes[-1] != 1:
            raise InvalidSpecError("SigmoidBCE head requires exactly one output")
        if self.output_head is OutputHead.SOFTMAX_CE and self.sizes[-1] < 2:
            raise InvalidSpecError("SoftmaxCE head requires at least two outputs")

    @classmethod
    def for_classes(cls, n_features, hidden, n_classes):
        """Binary problems get one sigmoid output, multiclass a softmax head"""
        if n_classes <= 2:
            return cls((n_features, *hidden, 1), output_head=OutputHead.SIGMOID_BCE)
        return cls((n_features, *hidden, n_classes), output_head=OutputHead.SOFTMAX_CE)

    @property
    def n_layers(self):
        return len(self.sizes) - 1

    @property
    def shapes(self):
        """weights[i] has shape (h_{i+1}, h_i) in 0-based layer indexing"""
        return [(self.sizes[i + 1], self.sizes[i]) for i in range(self.n_layers)]

    @property
    def n_connections(self):
        return sum(r * c for r, c in self.shapes)

    @property
    def n_classes(self):
        return 2 if self.output_head is OutputHead.SIGMOID_BCE else self.sizes[-1]

    def label(self):
        return "-".join(str(s) for s in self.sizes)


@dataclass
class DenseParams:
    weights: List[np.ndarray]
    biases: List[np.ndarray]

    def copy(self):
        return DenseParams([w.copy() for w in self.weights], [b.copy() for b in self.biases])

    def check(self, spec: LayerSpec):
        if len(self.weights) != spec.n_layers or len(self.biases) != spec.n_layers:
            raise DimensionMismatchError(
                f"Expected {spec.n_layers} layers, got {len(self.weights)} weights")
        for i, shape in enumerate(spec.shapes):
            if self.weights[i].shape != shape or self.biases[i].shape != (shape[0],):
                raise DimensionMismatchError(
                    f"Layer {i + 1}: weights {self.weights[i].shape} / biases "
                    f"{self.biases[i].shape} do not match {shape}")
            if not (np.all(np.isfinite(self.weights[i])) and np.all(np.isfinite(self.biases[i]))):
                raise InvalidSpecError(f"Layer {i + 1} has non-finite parameters")

    def save(self, path):
        Path(path).write_bytes(pack_params(self.weights, self.biases))

    @classmethod
    def load(cls, path):
        weights, biases = unpack_params(Path(path).read_bytes())
        return cls(weights, biases)

    def to_csv(self, directory, prefix="layer"):
        """One CSV per layer, row-major, biases in a trailing column"""
        directory = Path(directory)
        directory.mkdir(parents=True, exist_ok=True)
        for i, (w, b) in enumerate(zip(self.weights, self.biases), start=1):
            np.savetxt(directory / f"{prefix}{i}.csv", np.column_stack([w, b]),
                       delimiter=",", fmt="%.17g")


@dataclass
class Mask:
    keep: List[np.ndarray]

    @classmethod
    def ones(cls, spec: LayerSpec):
        return cls([np.ones(shape, dtype=np.uint8) for shape in spec.shapes])

    def copy(self):
        return Mask([k.copy() for k in self.keep])

    def check(self, spec: LayerSpec):
        if len(self.keep) != spec.n_layers:
            raise DimensionMismatchError(f"Mask has {len(self.keep)} layers, spec {spec.n_layers}")
        for i, shape in enumerate(spec.shapes):
            if self.keep[i].shape != shape:
                raise DimensionMismatchError(
                    f"Mask layer {i + 1} shape {self.keep[i].shape} != {shape}")
            if not np.all((self.keep[i] == 0) | (self.keep[i] == 1)):
                raise InvalidSpecError(f"Mask layer {i + 1} has non-binary entries")

    @property
    def n_kept(self):
        return int(sum(np.count_nonzero(k) for k in self.keep))

    def save(self, path):
        Path(path).write_bytes(pack_mask(self.keep))

    @classmethod
    def load(cls, path):
        return cls(unpack_mask(Path(path).read_bytes()))


@dataclass
class TrainConfig:
    seed: int = 0
    learning_rate: float = DEFAULT_LEARNING_RATE
    batch_size: int = DEFAULT_BATCH_SIZE
    max_epochs: int = DEFAULT_MAX_EPOCHS
    convergence_tol: float = DEFAULT_CONVERGENCE_TOL
    patience: int = DEFAULT_PATIENCE
    init: InitScheme = InitScheme.UNIFORM
    init_sigma: float = DEFAULT_INIT_SIGMA
    perturbation_delta: float = DEFAULT_PERTURBATION

    def __post_init__(self):
        if self.learning_rate <= 0:
            raise InvalidSpecError("learning_rate must be positive")
        if self.batch_size < 1 or self.max_epochs < 1 or self.patience < 1:
            raise InvalidSpecError("batch_size, max_epochs and patience must be >= 1")
        if self.convergence_tol <= 0:
            raise InvalidSpecError("convergence_tol must be > 0")


@dataclass
class TrainResult:
    final_params: DenseParams
    epochs_run: int
    loss_history: List[float]
    accuracy: float
    f1: float
    per_class_f1: List[float] = field(default_factory=list)
    iterations: int = 0
    converged: bool = False


@dataclass(frozen=True)
class Network:
    """A (spec, params, mask) triple usable as a prediction function"""
    spec: LayerSpec
    params: DenseParams
    mask: Mask

    def predict(self, X):
        return forward(self.params, self.mask, X)

    def effective_weights(self):
        return effective_weights(self.params, self.mask)


def init_params(spec: LayerSpec, cfg: TrainConfig) -> DenseParams:
    """
    Uniform: U[-K/sqrt(max(h_i, h_{i-1})), +K/sqrt(max(h_i, h_{i-1}))] with K = 1
    Gaussian: N(0, sigma^2)
    Biases start at zero.
    """
    rng = np.random.default_rng([cfg.seed, INIT_STREAM])
    weights, biases = [], []
    for rows, cols in spec.shapes:
        if cfg.init is InitScheme.UNIFORM:
            bound = DEFAULT_INIT_K / np.sqrt(max(rows, cols))
            w = rng.uniform(-bound, bound, size=(rows, cols))
        else:
            w = rng.normal(0.0, cfg.init_sigma, size=(rows, cols))
        weights.append(w)
        biases.append(np.zeros(rows))
    return DenseParams(weights, biases)


def effective_weights(params: DenseParams, mask: Optional[Mask]):
    if mask is None:
        return params.weights
    return [w * k for w, k in zip(params.weights, mask.keep)]


def _as_batch(x, n_inputs):
    X = np.asarray(x, dtype=np.float64)
    single = X.ndim == 1
    if single:
        X = X[np.newaxis, :]
    if X.ndim != 2 or X.shape[1] != n_inputs:
        raise DimensionMismatchError(f"Expected inputs of length {n_inputs}, got shape {np.shape(x)}")
    return X, single


def _head(spec, z):
    if spec.output_head is OutputHead.SIGMOID_BCE:
        return expit(z)
    return softmax(z, axis=1)


def forward_pass(spec: LayerSpec, params: DenseParams, mask: Optional[Mask], X):
    """
    Returns (activations, logits) for a batch; activations[0] is the input,
    activations[i] the sigmoid output of hidden layer i.
    """
    weights = effective_weights(params, mask)
    activations = [X]
    a = X
    for i in range(spec.n_layers - 1):
        a = expit(a @ weights[i].T + params.biases[i])
        activations.append(a)
    logits = a @ weights[-1].T + params.biases[-1]
    return activations, logits


def spec_from_params(params: DenseParams):
    sizes = [params.weights[0].shape[1]] + [w.shape[0] for w in params.weights]
    head = OutputHead.SIGMOID_BCE if sizes[-1] == 1 else OutputHead.SOFTMAX_CE
    return LayerSpec(tuple(sizes), output_head=head)


def forward(params: DenseParams, mask: Optional[Mask], x, spec: Optional[LayerSpec] = None):
    """Network output for one input vector or a batch (rows are samples)"""
    spec = spec or spec_from_params(params)
    X, single = _as_batch(x, spec.sizes[0])
    if mask is not None:
        mask.check(spec)
    _, logits = forward_pass(spec, params, mask, X)
    out = _head(spec, logits)
    return out[0] if single else out


def loss_from_logits(spec: LayerSpec, logits, labels):
    """Mean cross-entropy computed from logits"""
    labels = np.asarray(labels)
    if spec.output_head is OutputHead.SIGMOID_BCE:
        z = logits[:, 0]
        return float(np.mean(np.logaddexp(0.0, z) - labels * z))
    picked = logits[np.arange(len(labels)), labels]
    return float(np.mean(logsumexp(logits, axis=1) - picked))


def one_hot_targets(spec: LayerSpec, labels):
    labels = np.asarray(labels)
    if spec.output_head is OutputHead.SIGMOID_BCE:
        return labels.astype(np.float64)[:, np.newaxis]
    targets = np.zeros((len(labels), spec.sizes[-1]))
    targets[np.arange(len(labels)), labels] = 1.0
    return targets


def gradients(spec: LayerSpec, params: DenseParams, mask: Optional[Mask], X, labels):
    """
    Backpropagation of the mean cross-entropy.
    Returns (loss, weight_grads, bias_grads); weight grads are zero wherever
    the mask prunes.
    """
    activations, logits = forward_pass(spec, params, mask, X)
    weights = effective_weights(params, mask)
    probs = _head(spec, logits)
    delta = (probs - one_hot_targets(spec, labels)) / X.shape[0]

    grad_w = [None] * spec.n_layers
    grad_b = [None] * spec.n_layers
    for i in reversed(range(spec.n_layers)):
        grad_w[i] = delta.T @ activations[i]
        grad_b[i] = delta.sum(axis=0)
        if mask is not None:
            grad_w[i] = grad_w[i] * mask.keep[i]
        if i > 0:
            a = activations[i]
            delta = (delta @ weights[i]) * a * (1.0 - a)
    return loss_from_logits(spec, logits, labels), grad_w, grad_b


def predict_labels(spec: LayerSpec, params: DenseParams, mask: Optional[Mask], X):
    """Threshold 0.5 for binary heads, argmax (lowest index wins ties) otherwise"""
    out = forward(params, mask, X, spec=spec)
    if spec.output_head is OutputHead.SIGMOID_BCE:
        return (out[:, 0] >= 0.5).astype(np.int64)
    return np.argmax(out, axis=1)


def classification_scores(labels, predictions, n_classes):
    """(accuracy, macro f1, per-class f1) over classes 0..n_classes-1"""
    labels = np.asarray(labels)
    predictions = np.asarray(predictions)
    classes = np.arange(n_classes)
    absent = [c for c in classes if not np.any(labels == c) and not np.any(predictions == c)]
    if absent:
        msg = f"Classes {absent} absent from labels and predictions; their F1 counts as 0"
        log.warning(msg)
        warnings.warn(msg, RuntimeWarning, stacklevel=2)
    per_class = f1_score(labels, predictions, labels=classes, average=None, zero_division=0)
    accuracy = accuracy_score(labels, predictions)
    return float(accuracy), float(np.mean(per_class)), [float(v) for v in per_class]


def evaluate(params: DenseParams, mask: Optional[Mask], data, spec: Optional[LayerSpec] = None):
    """Returns (accuracy, macro f1, per-class f1) of the network on a Dataset"""
    if len(data.labels) == 0:
        raise InvalidSpecError("Cannot evaluate on an empty dataset")
    spec = spec or spec_from_params(params)
    preds = predict_labels(spec, params, mask, data.features)
    return classification_scores(data.labels, preds, max(spec.n_classes, data.n_classes))


def sigmoid_derivative(x):
    s = expit(x)
    return s * (1.0 - s)


def sigmoid_lipschitz_check(n_samples=100001, low=-50.0, high=50.0):
    """Largest observed |sigma'(x)| on an even grid; analytically bounded by 1/4"""
    if n_samples < 1000:
        raise InvalidSpecError("sigmoid_lipschitz_check needs at least 1000 samples")
    grid = np.linspace(low, high, n_samples)
    grid = np.union1d(grid, [0.0])
    return float(np.max(sigmoid_derivative(grid)))


def numeric_gradients(spec: LayerSpec, params: DenseParams, X, labels, step=1e-5):
    """Central finite differences of the loss w.r.t. every weight (test oracle)"""
    grads = []
    for i, w in enumerate(params.weights):
        g = np.zeros_like(w)
        for idx in np.ndindex(w.shape):
            original = w[idx]
            w[idx] = original + step
            plus = loss_from_logits(spec, forward_pass(spec, params, None, X)[1], labels)
            w[idx] = original - step
            minus = loss_from_logits(spec, forward_pass(spec, params, None, X)[1], labels)
            w[idx] = original
            g[idx] = (plus - minus) / (2.0 * step)
        grads.append(g)
    return grads


def connection_count(sizes: Sequence[int]):
    return sum(sizes[i] * sizes[i + 1] for i in range(len(sizes) - 1))
