"""Fully-connected locally competitive networks.

Supports ReLU, LWTA, maxout, and sigmoid hidden layers with a softmax
output, inverted dropout, and minibatch SGD with momentum. All arithmetic
is float64 and every training run is bit-reproducible from
(seed, data, config).
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, field, replace

import numpy as np

from .errors import ConfigurationError, DimensionError, FormatError, NumericError
from .io import atomic_write_bytes

RELU = "relu"
LWTA = "lwta"
MAXOUT = "maxout"
SIGMOID = "sigmoid"
_KINDS = (RELU, LWTA, MAXOUT, SIGMOID)
_BLOCK_KINDS = (LWTA, MAXOUT)


@dataclass(frozen=True)
class ActivationKind:
    """Activation selector; LWTA and maxout carry their block size."""

    kind: str
    block_size: int = 0

    def __post_init__(self):
        if self.kind not in _KINDS:
            raise ConfigurationError(f"unknown activation kind {self.kind!r}")
        if self.kind in _BLOCK_KINDS:
            if self.block_size < 2:
                raise ConfigurationError(
                    f"{self.kind} needs block_size >= 2, got {self.block_size}"
                )
        elif self.block_size not in (0, 1):
            raise ConfigurationError(f"{self.kind} takes no block_size")

    @classmethod
    def relu(cls) -> "ActivationKind":
        return cls(RELU)

    @classmethod
    def lwta(cls, block_size: int) -> "ActivationKind":
        return cls(LWTA, block_size)

    @classmethod
    def maxout(cls, block_size: int) -> "ActivationKind":
        return cls(MAXOUT, block_size)

    @classmethod
    def sigmoid(cls) -> "ActivationKind":
        return cls(SIGMOID)


@dataclass(frozen=True)
class LayerSpec:
    """One hidden layer: width counts presynaptic units, not block outputs."""

    input_dim: int
    width: int
    activation: ActivationKind
    dropout_keep_prob: float = 1.0

    def __post_init__(self):
        if self.input_dim < 1 or self.width < 1:
            raise ConfigurationError("layer dimensions must be positive")
        kind = self.activation
        if kind.kind in _BLOCK_KINDS and self.width % kind.block_size != 0:
            raise ConfigurationError(
                f"width {self.width} is not a multiple of "
                f"block_size {kind.block_size} for {kind.kind}"
            )
        if not 0.0 < self.dropout_keep_prob <= 1.0:
            raise ConfigurationError("dropout_keep_prob must be in (0, 1]")

    @property
    def output_dim(self) -> int:
        if self.activation.kind == MAXOUT:
            return self.width // self.activation.block_size
        return self.width


@dataclass
class NetworkParams:
    """Hidden layer parameters plus the softmax output layer.

    weights[i] has shape (width_i, input_dim_i); z = W @ x + b.
    """

    specs: list[LayerSpec]
    weights: list[np.ndarray]
    biases: list[np.ndarray]
    out_weight: np.ndarray
    out_bias: np.ndarray

    @property
    def class_count(self) -> int:
        return self.out_weight.shape[0]

    @property
    def layer_count(self) -> int:
        return len(self.specs)

    def parameters(self) -> list[np.ndarray]:
        """Flat parameter list in update order: W0, b0, ..., Wout, bout."""
        out: list[np.ndarray] = []
        for w, b in zip(self.weights, self.biases):
            out.extend((w, b))
        out.extend((self.out_weight, self.out_bias))
        return out

    def copy(self) -> "NetworkParams":
        return NetworkParams(
            specs=list(self.specs),
            weights=[w.copy() for w in self.weights],
            biases=[b.copy() for b in self.biases],
            out_weight=self.out_weight.copy(),
            out_bias=self.out_bias.copy(),
        )


@dataclass(frozen=True)
class TrainConfig:
    learning_rate: float
    momentum: float = 0.9
    batch_size: int = 100
    max_epochs: int = 50
    rng_seed: int = 0
    early_stop_patience: int = 5
    input_keep_prob: float = 1.0
    # stop as soon as validation error reaches this rate (dropout-matching
    # protocol); None disables
    target_val_error: float | None = None

    def __post_init__(self):
        if self.learning_rate <= 0:
            raise ConfigurationError("learning_rate must be positive")
        if not 0.0 <= self.momentum < 1.0:
            raise ConfigurationError("momentum must be in [0, 1)")
        if self.batch_size < 1 or self.max_epochs < 1:
            raise ConfigurationError("batch_size and max_epochs must be positive")
        if self.early_stop_patience < 0:
            raise ConfigurationError("early_stop_patience must be non-negative")
        if not 0.0 < self.input_keep_prob <= 1.0:
            raise ConfigurationError("input_keep_prob must be in (0, 1]")


@dataclass
class ForwardTrace:
    """Everything one forward pass produced, batch-major.

    inputs[i] is what hidden layer i consumed (post-dropout); inputs[-1]
    feeds the output layer. presyn and postact are per hidden layer;
    postact is pre-dropout. drop_masks entries are None when unused.
    """

    inputs: list[np.ndarray]
    presyn: list[np.ndarray]
    postact: list[np.ndarray]
    drop_masks: list[np.ndarray | None]
    logits: np.ndarray
    probs: np.ndarray


@dataclass(frozen=True)
class EpochStats:
    epoch: int
    train_loss: float
    val_errors: int
    val_error_rate: float


def init_network(
    specs: list[LayerSpec], class_count: int, seed: int
) -> NetworkParams:
    """Glorot-uniform weights, zero biases, reproducible from seed."""
    if not specs:
        raise ConfigurationError("at least one hidden layer is required")
    if class_count < 2:
        raise ConfigurationError("class_count must be at least 2")
    for i in range(len(specs) - 1):
        if specs[i].output_dim != specs[i + 1].input_dim:
            raise ConfigurationError(
                f"layer {i} output dim {specs[i].output_dim} does not match "
                f"layer {i + 1} input dim {specs[i + 1].input_dim}"
            )
    rng = np.random.default_rng(seed)
    weights, biases = [], []
    for spec in specs:
        limit = np.sqrt(6.0 / (spec.input_dim + spec.width))
        weights.append(rng.uniform(-limit, limit, size=(spec.width, spec.input_dim)))
        biases.append(np.zeros(spec.width))
    fan_in = specs[-1].output_dim
    limit = np.sqrt(6.0 / (fan_in + class_count))
    out_weight = rng.uniform(-limit, limit, size=(class_count, fan_in))
    return NetworkParams(list(specs), weights, biases, out_weight, np.zeros(class_count))


def affine_forward(W: np.ndarray, b: np.ndarray, x: np.ndarray) -> np.ndarray:
    """z = W x + b for a single vector or a batch of row vectors."""
    x = np.asarray(x, dtype=np.float64)
    if x.shape[-1] != W.shape[1]:
        raise DimensionError(
            f"input dim {x.shape[-1]} does not match weight columns {W.shape[1]}"
        )
    return x @ W.T + b


def block_winners(z: np.ndarray, block_size: int) -> np.ndarray:
    """Argmax unit index inside each block; ties go to the lowest index.

    z: (n, width) with width a multiple of block_size -> (n, blocks) ints.
    """
    n, width = z.shape
    if width % block_size != 0:
        raise DimensionError(
            f"length {width} is not a multiple of block_size {block_size}"
        )
    return np.argmax(z.reshape(n, width // block_size, block_size), axis=2)


def activate(z: np.ndarray, kind: ActivationKind) -> np.ndarray:
    """Apply local competition to presynaptic activations.

    ReLU and sigmoid are elementwise. LWTA keeps the winner's own z per
    block (zero elsewhere) and preserves width; maxout emits each block's
    maximum, dividing width by block_size.
    """
    z = np.asarray(z, dtype=np.float64)
    single = z.ndim == 1
    z2 = np.atleast_2d(z)
    if kind.kind == RELU:
        out = np.maximum(z2, 0.0)
    elif kind.kind == SIGMOID:
        out = _sigmoid(z2)
    else:
        n, width = z2.shape
        winners = block_winners(z2, kind.block_size)
        blocks = winners.shape[1]
        zb = z2.reshape(n, blocks, kind.block_size)
        if kind.kind == MAXOUT:
            out = np.take_along_axis(zb, winners[:, :, None], axis=2)[:, :, 0]
        else:
            onehot = winners[:, :, None] == np.arange(kind.block_size)
            out = np.where(onehot, zb, 0.0).reshape(n, width)
    return out[0] if single else out


def _sigmoid(z: np.ndarray) -> np.ndarray:
    out = np.empty_like(z)
    pos = z >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-z[pos]))
    ez = np.exp(z[~pos])
    out[~pos] = ez / (1.0 + ez)
    return out


def _softmax(logits: np.ndarray) -> np.ndarray:
    shifted = logits - logits.max(axis=1, keepdims=True)
    e = np.exp(shifted)
    return e / e.sum(axis=1, keepdims=True)


def forward(
    net: NetworkParams,
    x: np.ndarray,
    mode: str = "infer",
    rng: np.random.Generator | None = None,
    input_keep_prob: float = 1.0,
) -> ForwardTrace:
    """Run the network over a vector or batch, recording the full trace.

    In train mode, inverted dropout scales kept activations by 1/keep_prob
    so inference needs no rescaling; rng is required whenever any keep
    probability is below 1.
    """
    if mode not in ("train", "infer"):
        raise ConfigurationError(f"unknown forward mode {mode!r}")
    x = np.atleast_2d(np.asarray(x, dtype=np.float64))
    if x.shape[1] != net.specs[0].input_dim:
        raise DimensionError(
            f"input dim {x.shape[1]} does not match first layer "
            f"input_dim {net.specs[0].input_dim}"
        )
    train = mode == "train"
    needs_rng = train and (
        input_keep_prob < 1.0 or any(s.dropout_keep_prob < 1.0 for s in net.specs)
    )
    if needs_rng and rng is None:
        raise ConfigurationError("train-mode dropout requires an rng")

    a = x
    if train and input_keep_prob < 1.0:
        mask = rng.random(a.shape) < input_keep_prob
        a = a * mask / input_keep_prob

    inputs = [a]
    presyn: list[np.ndarray] = []
    postact: list[np.ndarray] = []
    drop_masks: list[np.ndarray | None] = []
    for i, spec in enumerate(net.specs):
        z = affine_forward(net.weights[i], net.biases[i], a)
        if not np.all(np.isfinite(z)):
            raise NumericError(f"non-finite activation in layer {i}")
        act = activate(z, spec.activation)
        if train and spec.dropout_keep_prob < 1.0:
            mask = rng.random(act.shape) < spec.dropout_keep_prob
            a = act * mask / spec.dropout_keep_prob
        else:
            mask = None
            a = act
        presyn.append(z)
        postact.append(act)
        drop_masks.append(mask)
        inputs.append(a)
    logits = affine_forward(net.out_weight, net.out_bias, a)
    if not np.all(np.isfinite(logits)):
        raise NumericError(f"non-finite activation in layer {len(net.specs)}")
    return ForwardTrace(inputs, presyn, postact, drop_masks, logits, _softmax(logits))


def loss_and_backward(
    net: NetworkParams, trace: ForwardTrace, labels: np.ndarray
) -> tuple[float, list[np.ndarray]]:
    """Mean cross-entropy over the batch and gradients for net.parameters().

    Error flows only through active units: past positive z for ReLU, to the
    block winner for LWTA/maxout, and through the dropout masks recorded in
    the trace.
    """
    labels = np.atleast_1d(np.asarray(labels))
    n, c = trace.probs.shape
    if labels.shape[0] != n:
        raise DimensionError("label count does not match batch size")
    if labels.min() < 0 or labels.max() >= c:
        raise ConfigurationError(f"labels must lie in [0, {c})")
    rows = np.arange(n)
    # clip only guards log(0) from underflowed probabilities
    loss = float(-np.mean(np.log(np.maximum(trace.probs[rows, labels], 1e-300))))

    dlogits = trace.probs.copy()
    dlogits[rows, labels] -= 1.0
    dlogits /= n
    grads_rev: list[np.ndarray] = [dlogits.sum(axis=0), dlogits.T @ trace.inputs[-1]]
    da = dlogits @ net.out_weight
    for i in reversed(range(net.layer_count)):
        spec = net.specs[i]
        mask = trace.drop_masks[i]
        if mask is not None:
            da = da * mask / spec.dropout_keep_prob
        z = trace.presyn[i]
        kind = spec.activation
        if kind.kind == RELU:
            dz = da * (z > 0)
        elif kind.kind == SIGMOID:
            s = trace.postact[i]
            dz = da * s * (1.0 - s)
        else:
            winners = block_winners(z, kind.block_size)
            blocks = winners.shape[1]
            onehot = winners[:, :, None] == np.arange(kind.block_size)
            if kind.kind == MAXOUT:
                dz = (onehot * da[:, :, None]).reshape(z.shape)
            else:
                dz = np.where(onehot.reshape(z.shape), da, 0.0)
        grads_rev.append(dz.sum(axis=0))
        grads_rev.append(dz.T @ trace.inputs[i])
        if i > 0:
            da = dz @ net.weights[i]
    return loss, grads_rev[::-1]


def sgd_momentum_step(
    params: list[np.ndarray],
    velocity: list[np.ndarray],
    grads: list[np.ndarray],
    lr: float,
    momentum: float,
) -> tuple[list[np.ndarray], list[np.ndarray]]:
    """In-place update: v <- momentum*v - lr*g; theta <- theta + v."""
    if not (len(params) == len(velocity) == len(grads)):
        raise DimensionError("parameter, velocity, and gradient counts differ")
    for p, v, g in zip(params, velocity, grads):
        if p.shape != g.shape or p.shape != v.shape:
            raise DimensionError("parameter/velocity/gradient shapes differ")
        v *= momentum
        v -= lr * g
        p += v
    return params, velocity


def predict(net: NetworkParams, features: np.ndarray, chunk: int = 4096) -> np.ndarray:
    """Argmax class per row; softmax ties resolve to the lowest class index."""
    features = np.atleast_2d(np.asarray(features, dtype=np.float64))
    preds = np.empty(features.shape[0], dtype=np.int64)
    for start in range(0, features.shape[0], chunk):
        stop = min(start + chunk, features.shape[0])
        probs = forward(net, features[start:stop]).probs
        preds[start:stop] = np.argmax(probs, axis=1)
    return preds


def resolve_layer(net: NetworkParams, layer_index: int) -> int:
    """Normalize a (possibly negative) hidden-layer index, validating range."""
    count = net.layer_count
    idx = layer_index + count if layer_index < 0 else layer_index
    if not 0 <= idx < count:
        raise ConfigurationError(
            f"layer index {layer_index} out of range for {count} hidden layers"
        )
    return idx


def layer_signals(
    net: NetworkParams, features: np.ndarray, layer_index: int, chunk: int = 8192
) -> tuple[np.ndarray, np.ndarray]:
    """Postsynaptic and presynaptic activations of one hidden layer.

    Runs infer-mode forward passes in chunks; returns (postact, presyn)
    stacked over all rows.
    """
    idx = resolve_layer(net, layer_index)
    features = np.atleast_2d(np.asarray(features, dtype=np.float64))
    post_parts, pre_parts = [], []
    for start in range(0, features.shape[0], chunk):
        trace = forward(net, features[start : start + chunk])
        post_parts.append(trace.postact[idx])
        pre_parts.append(trace.presyn[idx])
    return np.concatenate(post_parts), np.concatenate(pre_parts)


def test_error(net: NetworkParams, dataset) -> tuple[int, float]:
    """Misclassification count and rate of the softmax head on a dataset."""
    if len(dataset) == 0:
        raise ConfigurationError("dataset is empty")
    preds = predict(net, dataset.features)
    errors = int(np.count_nonzero(preds != dataset.labels))
    return errors, errors / len(dataset)


def train(
    net: NetworkParams,
    train_set,
    val_set,
    config: TrainConfig,
    hooks=None,
) -> tuple[NetworkParams, list[EpochStats]]:
    """Minibatch SGD with momentum, early stopping on validation error.

    Examples are reshuffled every epoch from the config seed. Stops at
    max_epochs, when validation error has not improved for more than
    early_stop_patience consecutive epochs, or when target_val_error is
    reached. Returns the parameters of the best validation epoch; hooks
    are called as hook(epoch, net) on the live network after every epoch.
    """
    if len(train_set) == 0 or len(val_set) == 0:
        raise ConfigurationError("train and validation sets must be non-empty")
    if train_set.features.shape[1] != net.specs[0].input_dim:
        raise DimensionError("dataset dimension does not match network input")
    net = net.copy()
    shuffle_rng, dropout_rng = [
        np.random.default_rng(s)
        for s in np.random.SeedSequence(config.rng_seed).spawn(2)
    ]
    params = net.parameters()
    velocity = [np.zeros_like(p) for p in params]
    features, labels = train_set.features, train_set.labels
    n = len(train_set)

    best = net.copy()
    best_rate = np.inf
    bad_epochs = 0
    log: list[EpochStats] = []
    for epoch in range(1, config.max_epochs + 1):
        order = shuffle_rng.permutation(n)
        total = 0.0
        for start in range(0, n, config.batch_size):
            batch = order[start : start + config.batch_size]
            trace = forward(
                net,
                features[batch],
                mode="train",
                rng=dropout_rng,
                input_keep_prob=config.input_keep_prob,
            )
            loss, grads = loss_and_backward(net, trace, labels[batch])
            sgd_momentum_step(
                params, velocity, grads, config.learning_rate, config.momentum
            )
            total += loss * batch.shape[0]
        val_errors, val_rate = test_error(net, val_set)
        log.append(EpochStats(epoch, total / n, val_errors, val_rate))
        if hooks:
            for hook in hooks:
                hook(epoch, net)
        if val_rate < best_rate:
            best_rate = val_rate
            best = net.copy()
            bad_epochs = 0
        else:
            bad_epochs += 1
        if config.target_val_error is not None and val_rate <= config.target_val_error:
            best = net.copy()
            break
        if bad_epochs > config.early_stop_patience:
            break
    return best, log


# ---------------------------------------------------------------------------
# checkpoint format: magic "SNCM", version u32 LE, layer count u32 LE, then
# per layer: tag u32, block_size u32, width u32, input_dim u32, W then b as
# raw float64 LE. The softmax output layer is written last with its own tag.

CHECKPOINT_MAGIC = b"SNCM"
CHECKPOINT_VERSION = 1
_TAG_BY_KIND = {RELU: 0, LWTA: 1, MAXOUT: 2, SIGMOID: 3}
_KIND_BY_TAG = {v: k for k, v in _TAG_BY_KIND.items()}
_OUTPUT_TAG = 4


def save_checkpoint(net: NetworkParams, path) -> None:
    parts = [
        CHECKPOINT_MAGIC,
        struct.pack("<II", CHECKPOINT_VERSION, net.layer_count + 1),
    ]
    for spec, w, b in zip(net.specs, net.weights, net.biases):
        tag = _TAG_BY_KIND[spec.activation.kind]
        parts.append(
            struct.pack("<IIII", tag, spec.activation.block_size, spec.width, spec.input_dim)
        )
        parts.append(np.ascontiguousarray(w, dtype="<f8").tobytes())
        parts.append(np.ascontiguousarray(b, dtype="<f8").tobytes())
    c, fan_in = net.out_weight.shape
    parts.append(struct.pack("<IIII", _OUTPUT_TAG, 0, c, fan_in))
    parts.append(np.ascontiguousarray(net.out_weight, dtype="<f8").tobytes())
    parts.append(np.ascontiguousarray(net.out_bias, dtype="<f8").tobytes())
    atomic_write_bytes(path, b"".join(parts))


def load_checkpoint(path) -> NetworkParams:
    """Parse a checkpoint; any truncation or bad field raises FormatError."""
    with open(path, "rb") as fh:
        data = fh.read()

    def need(offset: int, count: int) -> None:
        if offset + count > len(data):
            raise FormatError(
                f"truncated checkpoint: need {count} bytes at offset {offset}, "
                f"have {len(data) - offset}"
            )

    need(0, 12)
    if data[:4] != CHECKPOINT_MAGIC:
        raise FormatError(f"bad checkpoint magic {data[:4]!r} at offset 0")
    version, layer_count = struct.unpack_from("<II", data, 4)
    if version != CHECKPOINT_VERSION:
        raise FormatError(f"unsupported checkpoint version {version}")
    if layer_count < 2:
        raise FormatError(f"checkpoint must hold at least 2 layers, got {layer_count}")

    offset = 12
    layers = []
    for i in range(layer_count):
        need(offset, 16)
        tag, block, width, input_dim = struct.unpack_from("<IIII", data, offset)
        offset += 16
        if width < 1 or input_dim < 1:
            raise FormatError(f"layer {i} has invalid dims at offset {offset - 8}")
        count = width * input_dim
        need(offset, 8 * (count + width))
        w = np.frombuffer(data, dtype="<f8", count=count, offset=offset)
        w = w.reshape(width, input_dim).astype(np.float64)
        offset += 8 * count
        b = np.frombuffer(data, dtype="<f8", count=width, offset=offset).astype(
            np.float64
        )
        offset += 8 * width
        layers.append((tag, block, w, b))
    if offset != len(data):
        raise FormatError(f"{len(data) - offset} trailing bytes at offset {offset}")
    if layers[-1][0] != _OUTPUT_TAG:
        raise FormatError("final checkpoint layer is not a softmax output layer")
    specs, weights, biases = [], [], []
    for i, (tag, block, w, b) in enumerate(layers[:-1]):
        if tag == _OUTPUT_TAG:
            raise FormatError(f"unexpected output layer at position {i}")
        if tag not in _KIND_BY_TAG:
            raise FormatError(f"unknown activation tag {tag} in layer {i}")
        kind = ActivationKind(_KIND_BY_TAG[tag], block)
        # dropout settings are not persisted; checkpoints are inference-ready
        specs.append(LayerSpec(w.shape[1], w.shape[0], kind))
        weights.append(w)
        biases.append(b)
    _, _, out_w, out_b = layers[-1]
    net = NetworkParams(specs, weights, biases, out_w, out_b)
    for i in range(len(specs) - 1):
        if specs[i].output_dim != specs[i + 1].input_dim:
            raise FormatError(f"layer {i}/{i + 1} dimension chain broken")
    if out_w.shape[1] != specs[-1].output_dim:
        raise FormatError("output layer does not match final hidden width")
    return net
