import json
import logging
import sys
from dataclasses import dataclass

import numpy as np
from scipy.special import log_softmax, softmax

from fedfed_sim.errors import DimensionError, DomainError, FormatError, NumericError

logger = logging.getLogger(__name__)
logger.setLevel(logging.INFO)
logger.addHandler(logging.StreamHandler(sys.stderr))

RELU = "relu"
SOFTMAX = "softmax"
IDENTITY = "identity"
CROSS_ENTROPY = "cross_entropy"
SQUARED_ERROR = "squared_error"


@dataclass(frozen=True)
class ArchSpec:
    """
    Dense network shape: layer_sizes[0] is the input dim, layer_sizes[-1] the output dim.
    Hidden layers use the rectifier; the head is either a softmax classifier or an identity regressor
    """

    layer_sizes: tuple
    activation: str = RELU
    output_kind: str = SOFTMAX

    def __post_init__(self):
        sizes = tuple(int(s) for s in self.layer_sizes)
        object.__setattr__(self, "layer_sizes", sizes)
        if len(sizes) < 2:
            raise DomainError(f"An architecture needs at least 2 layers, got {sizes}")
        if any(s < 1 for s in sizes):
            raise DomainError(f"Layer sizes must be >= 1, got {sizes}")
        if self.activation != RELU:
            raise DomainError(f"Unsupported activation: {self.activation}")
        if self.output_kind not in (SOFTMAX, IDENTITY):
            raise DomainError(f"Unsupported output kind: {self.output_kind}")

    @property
    def input_dim(self):
        return self.layer_sizes[0]

    @property
    def output_dim(self):
        return self.layer_sizes[-1]

    @property
    def num_layers(self):
        return len(self.layer_sizes) - 1

    def segment_shapes(self):
        shapes = []
        for i in range(self.num_layers):
            fan_in, fan_out = self.layer_sizes[i], self.layer_sizes[i + 1]
            shapes.append((f"W{i}", (fan_in, fan_out)))
            shapes.append((f"b{i}", (fan_out,)))
        return shapes

    @property
    def num_params(self):
        return sum(int(np.prod(shape)) for _, shape in self.segment_shapes())

    def to_dict(self):
        return {
            "layer_sizes": list(self.layer_sizes),
            "activation": self.activation,
            "output_kind": self.output_kind,
        }

    @classmethod
    def from_dict(cls, d):
        return cls(
            layer_sizes=tuple(d["layer_sizes"]),
            activation=d.get("activation", RELU),
            output_kind=d.get("output_kind", SOFTMAX),
        )


class _SegmentedVector:
    """
    Flat float64 vector laid out as W0, b0, W1, b1, ... for an ArchSpec.
    Arithmetic returns new objects of the same class; the flat buffer is never mutated in place
    """

    def __init__(self, arch, flat):
        flat = np.asarray(flat, dtype=np.float64)
        if flat.shape != (arch.num_params,):
            raise DimensionError(
                f"Expected {arch.num_params} values for layers {arch.layer_sizes}, got shape {flat.shape}"
            )
        self.arch = arch
        self.flat = flat

    @classmethod
    def zeros(cls, arch):
        return cls(arch, np.zeros(arch.num_params))

    @classmethod
    def zeros_like(cls, other):
        return cls.zeros(other.arch)

    def segments(self):
        """
        Returns list of (name, shape, view) in layout order
        """
        out = []
        offset = 0
        for name, shape in self.arch.segment_shapes():
            size = int(np.prod(shape))
            out.append((name, shape, self.flat[offset : offset + size].reshape(shape)))
            offset += size
        return out

    def layers(self):
        segs = self.segments()
        return [(segs[i][2], segs[i + 1][2]) for i in range(0, len(segs), 2)]

    def copy(self):
        return type(self)(self.arch, self.flat.copy())

    def is_finite(self):
        return bool(np.all(np.isfinite(self.flat)))

    def norm_sq(self):
        return float(np.dot(self.flat, self.flat))

    def _check_congruent(self, other):
        if self.arch != other.arch:
            raise DimensionError(
                f"Architecture mismatch: {self.arch.layer_sizes} vs {other.arch.layer_sizes}"
            )

    def __add__(self, other):
        self._check_congruent(other)
        return type(self)(self.arch, self.flat + other.flat)

    def __sub__(self, other):
        self._check_congruent(other)
        return type(self)(self.arch, self.flat - other.flat)

    def __mul__(self, scalar):
        return type(self)(self.arch, self.flat * float(scalar))

    __rmul__ = __mul__

    def __repr__(self):
        return f"{type(self).__name__}(layers={self.arch.layer_sizes}, norm={np.sqrt(self.norm_sq()):.6g})"


class ParamSet(_SegmentedVector):
    pass


class GradSet(_SegmentedVector):
    @classmethod
    def from_layers(cls, arch, layer_grads):
        flat = np.concatenate([np.concatenate([gW.ravel(), gb.ravel()]) for gW, gb in layer_grads])
        return cls(arch, flat)


def init_params(arch, rng):
    """
    Glorot-uniform weights, zero biases
    :param ArchSpec arch: network shape
    :param numpy.random.Generator rng: seeded stream
    """
    parts = []
    for i in range(arch.num_layers):
        fan_in, fan_out = arch.layer_sizes[i], arch.layer_sizes[i + 1]
        limit = np.sqrt(6.0 / (fan_in + fan_out))
        parts.append(rng.uniform(-limit, limit, size=(fan_in, fan_out)).ravel())
        parts.append(np.zeros(fan_out))
    return ParamSet(arch, np.concatenate(parts))


def _check_batch(params, batch):
    batch = np.asarray(batch, dtype=np.float64)
    if batch.ndim != 2 or batch.shape[1] != params.arch.input_dim:
        raise DimensionError(
            f"Batch of shape {batch.shape} does not match input dim {params.arch.input_dim}"
        )
    return batch


def _forward_layers(params, batch):
    activations = [batch]
    pre_activations = []
    layers = params.layers()
    a = batch
    for i, (W, b) in enumerate(layers):
        z = a @ W + b
        pre_activations.append(z)
        if i < len(layers) - 1:
            a = np.maximum(z, 0.0)
            activations.append(a)
    return activations, pre_activations


def _backward(params, activations, pre_activations, d_last):
    """
    Backpropagates d_last (gradient w.r.t. the last pre-activation) and returns (GradSet, d_input)
    """
    layers = params.layers()
    layer_grads = [None] * len(layers)
    delta = d_last
    for i in reversed(range(len(layers))):
        W, _ = layers[i]
        layer_grads[i] = (activations[i].T @ delta, delta.sum(axis=0))
        delta = delta @ W.T
        if i > 0:
            delta = delta * (pre_activations[i - 1] > 0.0)
    return GradSet.from_layers(params.arch, layer_grads), delta


def forward(params, batch):
    batch = _check_batch(params, batch)
    _, pre_activations = _forward_layers(params, batch)
    logits = pre_activations[-1]
    if params.arch.output_kind == SOFTMAX:
        out = softmax(logits, axis=1)
    else:
        out = logits
    if not np.all(np.isfinite(out)):
        raise NumericError("Network output contains non-finite values")
    return out


def predict(params, batch):
    return np.argmax(forward(params, batch), axis=1)


def accuracy(params, features, labels):
    labels = np.asarray(labels)
    if len(labels) == 0:
        return 0.0
    return float(np.mean(predict(params, features) == labels))


def _loss_terms(params, batch, labels, loss_kind):
    batch = _check_batch(params, batch)
    n = batch.shape[0]
    activations, pre_activations = _forward_layers(params, batch)
    logits = pre_activations[-1]
    if loss_kind == CROSS_ENTROPY:
        labels = np.asarray(labels)
        num_classes = params.arch.output_dim
        if labels.shape != (n,):
            raise DimensionError(f"Expected {n} labels, got shape {labels.shape}")
        if n > 0 and (labels.min() < 0 or labels.max() >= num_classes):
            raise DomainError(f"Labels must lie in [0, {num_classes})")
        labels = labels.astype(np.int64)
        log_probs = log_softmax(logits, axis=1)
        rows = np.arange(n)
        loss = -float(np.mean(log_probs[rows, labels]))
        d_last = np.exp(log_probs)
        d_last[rows, labels] -= 1.0
        d_last /= n
    elif loss_kind == SQUARED_ERROR:
        if params.arch.output_kind != IDENTITY:
            raise DomainError("Squared-error loss requires an identity-regressor head")
        targets = np.asarray(labels, dtype=np.float64)
        if targets.shape != logits.shape:
            raise DimensionError(f"Targets of shape {targets.shape} do not match outputs {logits.shape}")
        residual = logits - targets
        loss = 0.5 * float(np.sum(residual * residual)) / n
        d_last = residual / n
    else:
        raise DomainError(f"Unknown loss kind: {loss_kind}")
    return loss, d_last, activations, pre_activations


def _loss_and_all_grads(params, batch, labels, loss_kind):
    loss, d_last, activations, pre_activations = _loss_terms(params, batch, labels, loss_kind)
    grads, d_input = _backward(params, activations, pre_activations, d_last)
    return loss, grads, d_input


def loss_and_grad(params, batch, labels, loss_kind=CROSS_ENTROPY, proximal=None):
    """
    Mean loss over the batch and its gradient.
    :param proximal: optional (mu, anchor ParamSet); adds mu/2*||params - anchor||^2 to the loss
    """
    loss, grads, _ = _loss_and_all_grads(params, batch, labels, loss_kind)
    if proximal is not None:
        mu, anchor = proximal
        if mu < 0:
            raise DomainError(f"Proximal coefficient must be >= 0, got {mu}")
        if mu > 0:
            params._check_congruent(anchor)
            diff = params.flat - anchor.flat
            loss += 0.5 * mu * float(np.dot(diff, diff))
            grads = GradSet(params.arch, grads.flat + mu * diff)
    if not np.isfinite(loss) or not grads.is_finite():
        raise NumericError(f"Non-finite loss or gradient (loss={loss})")
    return loss, grads


def loss_and_input_grad(params, batch, labels, loss_kind=CROSS_ENTROPY):
    """
    Returns (loss, parameter grads, gradient of the loss w.r.t. the batch)
    """
    loss, grads, d_input = _loss_and_all_grads(params, batch, labels, loss_kind)
    if not np.isfinite(loss):
        raise NumericError(f"Non-finite loss: {loss}")
    return loss, grads, d_input


def input_grad(params, batch, labels, loss_kind=CROSS_ENTROPY):
    return loss_and_input_grad(params, batch, labels, loss_kind)[2]


def output_vjp(params, batch, d_output):
    """
    Vector-Jacobian product of the network output: returns (GradSet, d_input) for upstream gradient d_output
    """
    batch = _check_batch(params, batch)
    activations, pre_activations = _forward_layers(params, batch)
    d_output = np.asarray(d_output, dtype=np.float64)
    if d_output.shape != pre_activations[-1].shape:
        raise DimensionError(f"Upstream gradient of shape {d_output.shape} does not match output")
    if params.arch.output_kind == SOFTMAX:
        probs = softmax(pre_activations[-1], axis=1)
        d_last = probs * (d_output - np.sum(d_output * probs, axis=1, keepdims=True))
    else:
        d_last = d_output
    return _backward(params, activations, pre_activations, d_last)


def sgd_step(params, grads, lr, momentum, weight_decay, velocity):
    """
    v <- momentum * v + (g + weight_decay * p); p <- p - lr * v
    Returns (new params, new velocity)
    """
    if lr < 0:
        raise DomainError(f"Learning rate must be >= 0, got {lr}")
    if not 0 <= momentum < 1:
        raise DomainError(f"Momentum must lie in [0, 1), got {momentum}")
    if weight_decay < 0:
        raise DomainError(f"Weight decay must be >= 0, got {weight_decay}")
    params._check_congruent(grads)
    params._check_congruent(velocity)
    if not (params.is_finite() and grads.is_finite() and velocity.is_finite()):
        raise NumericError("Non-finite values entering the SGD step")
    v = momentum * velocity.flat + (grads.flat + weight_decay * params.flat)
    p = params.flat - lr * v
    return ParamSet(params.arch, p), GradSet(params.arch, v)


def weighted_param_sum(entries):
    """
    Componentwise sum of weight_i * params_i, accumulated in entry order.
    :param entries: list of (ParamSet or GradSet, weight)
    """
    if len(entries) == 0:
        raise DomainError("weighted_param_sum needs at least one entry")
    first = entries[0][0]
    total = np.zeros(first.arch.num_params)
    for vector, weight in entries:
        first._check_congruent(vector)
        if not np.isfinite(weight):
            raise NumericError(f"Non-finite aggregation weight: {weight}")
        total = total + float(weight) * vector.flat
    return type(first)(first.arch, total)


def train_classifier(features, labels, arch, epochs, lr, batch_size, rng, momentum=0.0, weight_decay=0.0, init=None):
    """
    Plain mini-batch SGD on cross-entropy, used wherever a standalone classifier is needed
    (shadow and attack models, inversion targets, utility reports)
    """
    features = np.asarray(features, dtype=np.float64)
    labels = np.asarray(labels)
    params = init if init is not None else init_params(arch, rng)
    velocity = GradSet.zeros(arch)
    n = len(labels)
    for epoch in range(epochs):
        order = rng.permutation(n)
        for start in range(0, n, batch_size):
            idx = order[start : start + batch_size]
            _, grads = loss_and_grad(params, features[idx], labels[idx])
            params, velocity = sgd_step(params, grads, lr, momentum, weight_decay, velocity)
        logger.debug(f"train_classifier epoch {epoch + 1}/{epochs} done")
    return params


def save_params(params, path):
    """
    Checkpoint layout: one JSON header line (arch, segment names/shapes) followed by little-endian float64 values
    """
    header = {
        "arch": params.arch.to_dict(),
        "segments": [{"name": name, "shape": list(shape)} for name, shape in params.arch.segment_shapes()],
    }
    with open(path, "wb") as f:
        f.write(json.dumps(header, sort_keys=True).encode("utf-8") + b"\n")
        f.write(params.flat.astype("<f8").tobytes())


def load_params(path):
    with open(path, "rb") as f:
        header_line = f.readline()
        body = f.read()
    try:
        header = json.loads(header_line.decode("utf-8"))
        arch = ArchSpec.from_dict(header["arch"])
    except (UnicodeDecodeError, json.JSONDecodeError, KeyError, TypeError) as e:
        raise FormatError(f"Unreadable checkpoint header in {path}: {e}") from None
    if len(body) != 8 * arch.num_params:
        raise FormatError(
            f"Checkpoint {path} holds {len(body)} bytes, expected {8 * arch.num_params} for layers {arch.layer_sizes}"
        )
    return ParamSet(arch, np.frombuffer(body, dtype="<f8").astype(np.float64))
