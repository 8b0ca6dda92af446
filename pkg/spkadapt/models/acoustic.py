#   Copyright 2024 The spkadapt Authors
#   Licensed under the Apache License, Version 2.0 (the "License");
#   you may not use this file except in compliance with the License.
#   You may obtain a copy of the License at
#       http://www.apache.org/licenses/LICENSE-2.0
#   Unless required by applicable law or agreed to in writing, software
#   distributed under the License is distributed on an "AS IS" BASIS,
#   WITHOUT WARRANTIES OR CONDITIONS OF ANY KIND, either express or implied.
#   See the License for the specific language governing permissions and
#   limitations under the License.

import logging
from dataclasses import dataclass, field

import numpy as np
import pandas as pd
from scipy.special import expit, log_softmax
from tqdm import tqdm

from spkadapt.exceptions import (DataError, DimensionMismatchError, DuplicateSlotError, InvalidParameterError,
                                 NonFiniteDataError, TrainingError)
from spkadapt.features.frontend import FeatureMatrix
from spkadapt.models.lstm import lstm_backward, lstm_forward
from spkadapt.models.model import Model, array_fingerprint

logger = logging.getLogger(__name__)

MIN_LEARNING_RATE = 1e-8
NOISE_ANNEALING = 0.55
DIRECTIONS = ("fwd", "bwd")
AT_ACTIVATIONS = ("identity", "sigmoid", "relu")
OPTIMIZERS = ("sgd", "momentum", "rmsprop", "nadam")
LOG_COLUMNS = ["Layers", "Train_Loss", "CVFA", "Learning_Rate"]


@dataclass
class TrainConfig:
    """Full-model training recipe.

    Attributes:
        initial_lr (float)
        dropout_prob (float): Dropout on every layer output, train mode only.
        l2_scale (float): 0.5 * l2_scale * sum of squared weights is added to the loss.
        grad_noise_variance (float): Gaussian gradient noise variance at step 0, annealed by 1 / (1 + t)^0.55.
        focal_gamma (float): 0 gives plain cross-entropy.
        lr_decay_factor (float): Learning-rate divisor applied when the CV frame accuracy stalls.
        pretrain (bool): Layer-wise pretraining, one more layer per epoch.
        seed (int)
        max_epochs (int)
        optimizer (str): sgd, momentum, rmsprop or nadam.
        momentum (float): Used by the momentum optimizer.
    """
    initial_lr: float = 0.0005
    dropout_prob: float = 0.1
    l2_scale: float = 0.01
    grad_noise_variance: float = 0.3
    focal_gamma: float = 2.0
    lr_decay_factor: float = float(np.sqrt(2.0))
    pretrain: bool = True
    seed: int = 0
    max_epochs: int = 10
    optimizer: str = "nadam"
    momentum: float = 0.9

    def __post_init__(self):
        if min(self.initial_lr, self.l2_scale, self.grad_noise_variance, self.focal_gamma) < 0:
            raise InvalidParameterError("Learning rate, L2 scale, gradient noise variance and focal gamma must be non-negative.")
        if not 0.0 <= self.dropout_prob < 1.0:
            raise InvalidParameterError(f"dropout_prob must be in [0, 1), got {self.dropout_prob}.")
        if self.lr_decay_factor <= 1.0:
            raise InvalidParameterError(f"lr_decay_factor is a divisor and must exceed 1, got {self.lr_decay_factor}.")
        if self.max_epochs < 0:
            raise InvalidParameterError(f"max_epochs can't be negative, got {self.max_epochs}.")
        if self.optimizer not in OPTIMIZERS:
            raise InvalidParameterError(f"Unknown optimizer '{self.optimizer}'. Use one of {OPTIMIZERS}.")


@dataclass
class AffineTransform:
    """An identity-initialized affine layer, y = act(x W + b), for one (position, partition) slot.

    Position 0 transforms the frame input and has a single weight/bias pair (stored as the "fwd"
    pair, bwd left as None). Every other position holds one pair per direction.
    """
    position: int
    partition_key: str
    weight_fwd: np.ndarray
    bias_fwd: np.ndarray
    weight_bwd: np.ndarray = None
    bias_bwd: np.ndarray = None
    activation: str = "identity"

    @classmethod
    def identity(cls, position, partition_key, size, activation="identity"):
        pair = {"weight_fwd": np.eye(size), "bias_fwd": np.zeros(size)}
        if position > 0:
            pair.update(weight_bwd=np.eye(size), bias_bwd=np.zeros(size))
        return cls(position, partition_key, activation=activation, **pair)

    @property
    def directions(self):
        return ("fwd",) if self.weight_bwd is None else DIRECTIONS

    def pair(self, direction):
        return (self.weight_fwd, self.bias_fwd) if direction == "fwd" else (self.weight_bwd, self.bias_bwd)

    def parameter_names(self):
        prefix = f"affine/{self.position}/{self.partition_key}"
        names = {}
        for direction in self.directions:
            weight, bias = self.pair(direction)
            names[f"{prefix}/{direction}/weight"] = weight
            names[f"{prefix}/{direction}/bias"] = bias
        return names

    def distance_from_identity(self):
        """sum ||W - I||^2 + ||b||^2 over directions."""
        total = 0.0
        for direction in self.directions:
            weight, bias = self.pair(direction)
            total += np.sum((weight - np.eye(weight.shape[0])) ** 2) + np.sum(bias ** 2)
        return float(total)


class BlstmAcousticModel(Model):
    """
    Stacked bidirectional LSTM frame classifier with optional i-vector input augmentation
    and insertable affine-transform slots.

    Slot 0 transforms the frame input, slot k (1 <= k < L) sits between layers k and k + 1
    and slot L transforms the last layer output before the softmax.

    Attributes:
        input_dim (int): Feature dimension.
        ivector_dim (int): i-vector dimension appended to every frame, 0 for none.
        layer_sizes (list of int): Hidden size per direction of each layer.
        output_dim (int): Number of target states.
        params (dict): Parameter name -> array for everything except the affine transforms.
        at_slots (dict): (position, slot key) -> AffineTransform. The adaptation harness prefixes keys with the partition type.
        training_log (pandas.DataFrame): One row per training epoch.
    """

    kind = "AM"

    def __init__(self, input_dim, ivector_dim, layer_sizes, output_dim, params, at_slots=None, training_log=None):
        self.input_dim = int(input_dim)
        self.ivector_dim = int(ivector_dim)
        self.layer_sizes = [int(size) for size in layer_sizes]
        self.output_dim = int(output_dim)
        self.params = params
        self.at_slots = dict(at_slots or {})
        self.training_log = training_log if training_log is not None else _empty_log()
        for name, value in params.items():
            if not np.all(np.isfinite(value)):
                raise NonFiniteDataError(f"Acoustic model parameter {name} has non-finite values.")

    @property
    def num_layers(self):
        return len(self.layer_sizes)

    @property
    def frame_input_dim(self):
        return self.input_dim + self.ivector_dim

    def slot_size(self, position):
        """Width of the activations an affine transform at `position` sees (per direction)."""
        if position == 0:
            return self.frame_input_dim
        return self.layer_sizes[position - 1]

    def parameters(self, trainable="all"):
        """Parameter name -> array (live references). 'affine' returns only the transforms."""
        names = {} if trainable == "affine" else dict(self.params)
        for key in sorted(self.at_slots):
            names.update(self.at_slots[key].parameter_names())
        return names

    def fingerprint(self):
        """Hash of every non-affine parameter."""
        return array_fingerprint(*(self.params[name] for name in sorted(self.params)))

    def to_payload(self):
        slots = [{"position": pos, "partition": key, "activation": self.at_slots[(pos, key)].activation}
                 for pos, key in sorted(self.at_slots)]
        meta = {
            "input_dim": self.input_dim,
            "ivector_dim": self.ivector_dim,
            "layer_sizes": self.layer_sizes,
            "output_dim": self.output_dim,
            "at_slots": slots,
            "log_epochs": len(self.training_log),
        }
        arrays = {f"params/{name}": value for name, value in self.params.items()}
        for slot in self.at_slots.values():
            arrays.update(slot.parameter_names())
        arrays["log/Epoch"] = self.training_log.index.to_numpy(dtype=np.int64)
        for column in LOG_COLUMNS:
            arrays[f"log/{column}"] = self.training_log[column].to_numpy(dtype=np.float64)
        return meta, arrays

    @classmethod
    def from_payload(cls, meta, arrays):
        params = cls._nested_arrays("params", arrays)
        slots = {}
        for entry in meta["at_slots"]:
            position, key = entry["position"], entry["partition"]
            prefix = f"affine/{position}/{key}"
            bwd = arrays.get(f"{prefix}/bwd/weight")
            slots[(position, key)] = AffineTransform(position, key, arrays[f"{prefix}/fwd/weight"], arrays[f"{prefix}/fwd/bias"],
                                                     bwd, arrays.get(f"{prefix}/bwd/bias"), entry["activation"])
        log = pd.DataFrame({column: arrays[f"log/{column}"] for column in LOG_COLUMNS}, index=pd.Index(arrays["log/Epoch"], name="Epoch"))
        log["Layers"] = log["Layers"].astype(np.int64)
        log.columns.name = "Name"
        return cls(meta["input_dim"], meta["ivector_dim"], meta["layer_sizes"], meta["output_dim"], params, slots, log)


def _empty_log():
    log = pd.DataFrame({column: pd.Series(dtype=np.int64 if column == "Layers" else np.float64) for column in LOG_COLUMNS},
                       index=pd.Index([], dtype=np.int64, name="Epoch"))
    log.columns.name = "Name"
    return log


def _glorot(rng, fan_in, fan_out, shape):
    limit = np.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-limit, limit, size=shape)


def build_model(input_dim, ivector_dim, layer_sizes, output_dim, seed=0) -> BlstmAcousticModel:
    """Create a BLSTM with seeded Glorot-uniform weights and forget-gate biases of 1.

    Parameters:
    input_dim (int): Feature dimension D.
    ivector_dim (int): i-vector dimension R appended to each frame; 0 for none.
    layer_sizes (list of int): Per-direction hidden size of each layer.
    output_dim (int): Number of target states, at least 2.
    seed (int)

    Returns:
    BlstmAcousticModel: No affine-transform slots populated.
    """
    layer_sizes = list(layer_sizes)
    if not layer_sizes or min(layer_sizes) < 1:
        raise InvalidParameterError("layer_sizes must be a non-empty list of positive sizes.")
    if output_dim < 2:
        raise InvalidParameterError(f"output_dim must be at least 2, got {output_dim}.")
    if input_dim < 1 or ivector_dim < 0:
        raise InvalidParameterError("input_dim must be positive and ivector_dim non-negative.")

    rng = np.random.default_rng(seed)
    params = {}
    in_size = input_dim + ivector_dim
    for index, size in enumerate(layer_sizes):
        for direction in DIRECTIONS:
            prefix = f"layer/{index}/{direction}"
            bias = np.zeros(4 * size)
            bias[2 * size:3 * size] = 1.0
            params[f"{prefix}/w_input"] = _glorot(rng, in_size, size, (in_size, 4 * size))
            params[f"{prefix}/w_hidden"] = _glorot(rng, size, size, (size, 4 * size))
            params[f"{prefix}/bias"] = bias
        in_size = 2 * size
    params["output/weight"] = _glorot(rng, in_size, output_dim, (in_size, output_dim))
    params["output/bias"] = np.zeros(output_dim)
    logger.debug("Built BLSTM %d+%d -> %s -> %d", input_dim, ivector_dim, layer_sizes, output_dim)
    return BlstmAcousticModel(input_dim, ivector_dim, layer_sizes, output_dim, params)


def insert_affine(m: BlstmAcousticModel, position, partition_key, activation="identity") -> AffineTransform:
    """Register an identity-initialized affine transform at (position, partition_key).

    Positions run from 0 (input) to the layer count (last layer output).
    """
    if not isinstance(position, (int, np.integer)) or not 0 <= position <= m.num_layers:
        raise InvalidParameterError(f"Affine position must be an integer between 0 and {m.num_layers}, got {position!r}.")
    partition_key = str(partition_key)
    if "/" in partition_key or not partition_key:
        raise InvalidParameterError(f"Partition key '{partition_key}' must be non-empty and can't contain '/'.")
    if activation not in AT_ACTIVATIONS:
        raise InvalidParameterError(f"Unknown affine activation '{activation}'. Use one of {AT_ACTIVATIONS}.")
    if (position, partition_key) in m.at_slots:
        raise DuplicateSlotError(f"An affine transform for '{partition_key}' already sits at position {position}.")
    transform = AffineTransform.identity(int(position), partition_key, m.slot_size(position), activation)
    m.at_slots[(int(position), partition_key)] = transform
    return transform


def frame_inputs(m: BlstmAcousticModel, f: FeatureMatrix, iv=None):
    """The T x (D + R) network input: features with the utterance i-vector appended to every frame."""
    if f.dim != m.input_dim:
        raise DimensionMismatchError(f"'{f.utterance_id}' has feature dimension {f.dim}; the model expects {m.input_dim}.")
    if m.ivector_dim == 0:
        if iv is not None:
            raise DimensionMismatchError("This model was built without i-vector input, but an i-vector was supplied.")
        return f.frames
    if iv is None:
        raise DimensionMismatchError(f"This model needs a {m.ivector_dim}-dim i-vector for '{f.utterance_id}'.")
    values = np.asarray(getattr(iv, "values", iv), dtype=np.float64).ravel()
    if values.size != m.ivector_dim:
        raise DimensionMismatchError(f"i-vector has dimension {values.size}; the model expects {m.ivector_dim}.")
    return np.hstack([f.frames, np.tile(values, (f.num_frames, 1))])


def _activate(pre, activation):
    if activation == "sigmoid":
        return expit(pre)
    if activation == "relu":
        return np.maximum(pre, 0.0)
    return pre


def _activation_grad(pre, out, activation):
    if activation == "sigmoid":
        return out * (1.0 - out)
    if activation == "relu":
        return (pre > 0).astype(np.float64)
    return 1.0


def _active_transforms(m, position, partitions):
    return [m.at_slots[(position, key)] for key in partitions if (position, key) in m.at_slots]


def _apply_transforms(m, position, partitions, values, direction, trace):
    for transform in _active_transforms(m, position, partitions):
        weight, bias = transform.pair(direction)
        pre = values @ weight + bias
        out = _activate(pre, transform.activation)
        trace.append((transform, direction, values, pre, out))
        values = out
    return values


@dataclass
class _ForwardTrace:
    logits: np.ndarray
    top: np.ndarray
    depth: int
    inputs_trace: list = field(default_factory=list)
    layers: list = field(default_factory=list)


def _run(m, f, iv, train, seed, partitions, depth, dropout_prob):
    depth = m.num_layers if depth is None else depth
    if not 1 <= depth <= m.num_layers:
        raise InvalidParameterError(f"depth must be between 1 and {m.num_layers}, got {depth}.")
    if depth < m.num_layers and 2 * m.layer_sizes[depth - 1] != m.params["output/weight"].shape[0]:
        raise InvalidParameterError("Running a partial stack needs equal layer sizes so the output layer fits.")
    partitions = tuple(str(key) for key in partitions)
    rng = np.random.default_rng(seed) if train and dropout_prob > 0 else None

    inputs_trace = []
    values = _apply_transforms(m, 0, partitions, frame_inputs(m, f, iv), "fwd", inputs_trace)
    trace = _ForwardTrace(None, None, depth, inputs_trace)
    for index in range(depth):
        layer = {"input": values, "caches": {}, "at_trace": [], "mask": None}
        outputs = []
        for direction in DIRECTIONS:
            prefix = f"layer/{index}/{direction}"
            hidden, cache = lstm_forward(values, m.params[f"{prefix}/w_input"], m.params[f"{prefix}/w_hidden"],
                                         m.params[f"{prefix}/bias"], reverse=direction == "bwd")
            layer["caches"][direction] = cache
            outputs.append(_apply_transforms(m, index + 1, partitions, hidden, direction, layer["at_trace"]))
        values = np.hstack(outputs)
        if rng is not None:
            mask = (rng.random(values.shape) >= dropout_prob) / (1.0 - dropout_prob)
            layer["mask"] = mask
            values = values * mask
        trace.layers.append(layer)
    trace.top = values
    trace.logits = values @ m.params["output/weight"] + m.params["output/bias"]
    return trace


def forward(m: BlstmAcousticModel, f: FeatureMatrix, iv=None, mode="eval", seed=0, partitions=(), depth=None,
            dropout_prob=TrainConfig.dropout_prob):
    """Frame posteriors of an utterance.

    Parameters:
    m (BlstmAcousticModel)
    f (FeatureMatrix)
    iv (IVector, optional): Required exactly when the model is i-vector augmented.
    mode (str): "eval" (deterministic) or "train" (dropout drawn from `seed`).
    seed (int)
    partitions (tuple of str): Partition keys whose affine transforms are active, applied in this order at a shared position.
    depth (int, optional): Use only the first `depth` layers (pretraining).
    dropout_prob (float): Train mode only.

    Returns:
    numpy.ndarray: T x output_dim, rows summing to 1.
    """
    if mode not in ("eval", "train"):
        raise InvalidParameterError(f"mode must be 'eval' or 'train', got '{mode}'.")
    trace = _run(m, f, iv, mode == "train", seed, partitions, depth, dropout_prob)
    return np.exp(log_softmax(trace.logits, axis=1))


def predict_labels(m: BlstmAcousticModel, f: FeatureMatrix, iv=None, partitions=()):
    """Per-frame argmax of the eval-mode posteriors."""
    return np.argmax(forward(m, f, iv, "eval", partitions=partitions), axis=1)


def _check_targets(targets, num_frames, num_classes):
    targets = np.asarray(targets).ravel().astype(np.int64)
    if targets.size != num_frames:
        raise DimensionMismatchError(f"Got {targets.size} targets for {num_frames} frames.")
    if targets.size and (targets.min() < 0 or targets.max() >= num_classes):
        raise InvalidParameterError(f"Target ids must lie in [0, {num_classes}).")
    return targets


def focal_loss(posteriors, targets, gamma=2.0):
    """Mean over frames of -(1 - p_t)^gamma * log p_t, p_t the target-class posterior."""
    posteriors = np.atleast_2d(np.asarray(posteriors, dtype=np.float64))
    if gamma < 0:
        raise InvalidParameterError(f"gamma must be non-negative, got {gamma}.")
    targets = _check_targets(targets, posteriors.shape[0], posteriors.shape[1])
    p_target = posteriors[np.arange(targets.size), targets]
    log_p = np.log(np.maximum(p_target, np.finfo(np.float64).tiny))
    return float(np.mean(-((1.0 - p_target) ** gamma) * log_p))


def _focal_from_logits(logits, targets, gamma):
    """Focal loss and its gradient with respect to the logits."""
    num_frames = logits.shape[0]
    log_probs = log_softmax(logits, axis=1)
    probs = np.exp(log_probs)
    rows = np.arange(num_frames)
    log_p = log_probs[rows, targets]
    p = probs[rows, targets]
    weight = (1.0 - p) ** gamma
    loss = float(np.mean(-weight * log_p))

    # dL/dz_k = [gamma (1-p)^(gamma-1) p log p - (1-p)^gamma] (delta_k - p_k)
    if gamma == 0:
        coefficient = -np.ones(num_frames)
    else:
        with np.errstate(divide="ignore", invalid="ignore"):
            slope = np.where(p < 1.0, gamma * (1.0 - p) ** (gamma - 1.0) * p * log_p, 0.0)
        coefficient = slope - weight
    one_hot = np.zeros_like(probs)
    one_hot[rows, targets] = 1.0
    d_logits = coefficient[:, None] * (one_hot - probs) / num_frames
    return loss, d_logits


def _is_weight(name):
    return name.endswith("w_input") or name.endswith("w_hidden") or name == "output/weight"


def _used_layer(name, depth):
    return not name.startswith("layer/") or int(name.split("/")[1]) < depth


def backward(m: BlstmAcousticModel, f: FeatureMatrix, iv, targets, config: TrainConfig, partitions=(), seed=0,
             trainable="all", at_l2=0.0, depth=None, data_weight=1.0):
    """Loss and gradients of every parameter, by backpropagation through time.

    The loss is data_weight * focal loss (config.focal_gamma, train-mode dropout config.dropout_prob)
    plus 0.5 * config.l2_scale * sum of squared base weights when trainable == "all", plus
    at_l2 * (||W - I||^2 + ||b||^2) over the active affine transforms.

    Parameters:
    trainable (str): "all", or "affine" to freeze the base network. Frozen parameters get a
        zero-length gradient.

    Returns:
    tuple: (loss, dict of parameter name -> gradient)
    """
    if trainable not in ("all", "affine"):
        raise InvalidParameterError(f"trainable must be 'all' or 'affine', got '{trainable}'.")
    trace = _run(m, f, iv, config.dropout_prob > 0, seed, partitions, depth, config.dropout_prob)
    targets = _check_targets(targets, trace.logits.shape[0], m.output_dim)
    data_loss, d_logits = _focal_from_logits(trace.logits, targets, config.focal_gamma)
    loss = data_weight * data_loss
    d_logits = data_weight * d_logits

    grads = {name: np.zeros_like(value) for name, value in m.parameters("all").items()}
    grads["output/weight"] = trace.top.T @ d_logits
    grads["output/bias"] = d_logits.sum(axis=0)
    d_values = d_logits @ m.params["output/weight"].T

    for index in range(trace.depth - 1, -1, -1):
        layer = trace.layers[index]
        if layer["mask"] is not None:
            d_values = d_values * layer["mask"]
        size = m.layer_sizes[index]
        d_input = np.zeros_like(layer["input"])
        for offset, direction in enumerate(DIRECTIONS):
            d_hidden = _backprop_transforms([step for step in layer["at_trace"] if step[1] == direction],
                                            d_values[:, offset * size:(offset + 1) * size], grads)
            prefix = f"layer/{index}/{direction}"
            dx, dw_input, dw_hidden, db = lstm_backward(d_hidden, m.params[f"{prefix}/w_input"], m.params[f"{prefix}/w_hidden"],
                                                        layer["caches"][direction])
            grads[f"{prefix}/w_input"] = dw_input
            grads[f"{prefix}/w_hidden"] = dw_hidden
            grads[f"{prefix}/bias"] = db
            d_input += dx
        d_values = d_input
    _backprop_transforms(trace.inputs_trace, d_values, grads)

    if trainable == "all" and config.l2_scale > 0:
        for name, value in m.params.items():
            if _is_weight(name) and _used_layer(name, trace.depth):
                loss += 0.5 * config.l2_scale * float(np.sum(value ** 2))
                grads[name] = grads[name] + config.l2_scale * value
    if at_l2 > 0:
        active = []
        for step in trace.inputs_trace + [s for layer in trace.layers for s in layer["at_trace"]]:
            if not any(step[0] is seen for seen in active):
                active.append(step[0])
        for transform in active:
            loss += at_l2 * transform.distance_from_identity()
            for name, value in transform.parameter_names().items():
                target = np.eye(value.shape[0]) if name.endswith("weight") else 0.0
                grads[name] = grads[name] + 2.0 * at_l2 * (value - target)
    if trainable == "affine":
        for name in m.params:
            grads[name] = np.zeros(0)
    return loss, grads


def _backprop_transforms(steps, d_out, grads):
    """Walk applied transforms in reverse, accumulating their gradients. Returns d(input)."""
    for transform, direction, inputs, pre, out in reversed(steps):
        d_pre = d_out * _activation_grad(pre, out, transform.activation)
        prefix = f"affine/{transform.position}/{transform.partition_key}/{direction}"
        grads[f"{prefix}/weight"] = grads[f"{prefix}/weight"] + inputs.T @ d_pre
        grads[f"{prefix}/bias"] = grads[f"{prefix}/bias"] + d_pre.sum(axis=0)
        weight, _ = transform.pair(direction)
        d_out = d_pre @ weight.T
    return d_out


def loss_value(m: BlstmAcousticModel, f, iv, targets, config: TrainConfig, partitions=(), seed=0, trainable="all",
               at_l2=0.0, depth=None, data_weight=1.0):
    """The scalar backward() differentiates."""
    return backward(m, f, iv, targets, config, partitions, seed, trainable, at_l2, depth, data_weight)[0]


class Optimizer:
    """Per-parameter update rules; state is keyed by parameter name and updates are in place."""

    def __init__(self, name="sgd", momentum=0.9, beta2=0.999, epsilon=1e-8):
        if name not in OPTIMIZERS:
            raise InvalidParameterError(f"Unknown optimizer '{name}'. Use one of {OPTIMIZERS}.")
        self.name = name
        self.momentum = momentum
        self.beta2 = beta2
        self.epsilon = epsilon
        self.steps = 0
        self.state = {}

    def step(self, params, grads, lr):
        self.steps += 1
        for name, value in params.items():
            grad = grads.get(name)
            if grad is None or grad.size == 0:
                continue
            if self.name == "sgd":
                value -= lr * grad
            elif self.name == "momentum":
                velocity = self.state.setdefault(name, np.zeros_like(value))
                velocity *= self.momentum
                velocity -= lr * grad
                value += velocity
            elif self.name == "rmsprop":
                square = self.state.setdefault(name, np.zeros_like(value))
                square *= 0.9
                square += 0.1 * grad ** 2
                value -= lr * grad / (np.sqrt(square) + self.epsilon)
            else:
                first, second = self.state.setdefault(name, (np.zeros_like(value), np.zeros_like(value)))
                beta1 = self.momentum
                first *= beta1
                first += (1.0 - beta1) * grad
                second *= self.beta2
                second += (1.0 - self.beta2) * grad ** 2
                first_hat = first / (1.0 - beta1 ** (self.steps + 1))
                second_hat = second / (1.0 - self.beta2 ** self.steps)
                nesterov = beta1 * first_hat + (1.0 - beta1) * grad / (1.0 - beta1 ** self.steps)
                value -= lr * nesterov / (np.sqrt(second_hat) + self.epsilon)


def frame_accuracy(m: BlstmAcousticModel, dataset, partitions=(), depth=None):
    """Fraction of frames whose eval-mode argmax matches the target, over (features, i-vector, targets) triples."""
    correct = 0
    total = 0
    for f, iv, targets in dataset:
        trace = _run(m, f, iv, False, 0, partitions, depth, 0.0)
        correct += int(np.sum(np.argmax(trace.logits, axis=1) == np.asarray(targets).ravel()))
        total += f.num_frames
    return correct / total if total else 0.0


def train_model(m: BlstmAcousticModel, train_set, cv_set, config: TrainConfig = None, verbose=False):
    """Train the whole network with the CVFA-controlled recipe.

    Parameters:
    m (BlstmAcousticModel): Trained in place.
    train_set (list of tuples): (FeatureMatrix, IVector or None, target ids) per utterance.
    cv_set (list of tuples): Same shape; drives learning-rate decay.
    config (TrainConfig, optional)
    verbose (bool, optional): Progress bar over epochs.

    Returns:
    tuple: (the model, per-epoch pandas.DataFrame with Layers, Train_Loss, CVFA and Learning_Rate, indexed by Epoch)
    """
    config = config or TrainConfig()
    train_set = list(train_set)
    cv_set = list(cv_set)
    if not train_set or not cv_set:
        raise DataError("Acoustic model training needs non-empty train and cross-validation sets.")
    if config.pretrain and len(set(m.layer_sizes)) > 1:
        raise InvalidParameterError("Layer-wise pretraining needs every layer to have the same size.")

    rng = np.random.default_rng(config.seed)
    optimizer = Optimizer(config.optimizer, momentum=config.momentum)
    lr = config.initial_lr
    best_cvfa = -np.inf
    rows = []
    step = 0
    for epoch in tqdm(range(1, config.max_epochs + 1), desc="Training", disable=not verbose):
        depth = min(epoch, m.num_layers) if config.pretrain else m.num_layers
        losses = []
        for index in rng.permutation(len(train_set)):
            f, iv, targets = train_set[index]
            loss, grads = backward(m, f, iv, targets, config, seed=int(rng.integers(2 ** 31)), depth=depth)
            if not np.isfinite(loss):
                raise TrainingError(f"Training loss diverged at epoch {epoch} (utterance '{f.utterance_id}').")
            if config.grad_noise_variance > 0:
                sigma = np.sqrt(config.grad_noise_variance / (1.0 + step) ** NOISE_ANNEALING)
                grads = {name: grad + rng.normal(0.0, sigma, size=grad.shape) if _used_layer(name, depth) else grad
                         for name, grad in grads.items()}
            optimizer.step(m.params, {name: grad for name, grad in grads.items() if _used_layer(name, depth)}, lr)
            losses.append(loss)
            step += 1

        cvfa = frame_accuracy(m, cv_set, depth=depth)
        rows.append({"Epoch": epoch, "Layers": depth, "Train_Loss": float(np.mean(losses)), "CVFA": cvfa, "Learning_Rate": lr})
        logger.info("Epoch %d: %d layer(s), loss %.5f, CVFA %.4f, lr %.3g", epoch, depth, rows[-1]["Train_Loss"], cvfa, lr)
        if cvfa > best_cvfa:
            best_cvfa = cvfa
        else:
            lr /= config.lr_decay_factor
        if lr < MIN_LEARNING_RATE:
            logger.info("Learning rate fell below %g; stopping after epoch %d", MIN_LEARNING_RATE, epoch)
            break

    log = pd.DataFrame(rows, columns=["Epoch"] + LOG_COLUMNS).set_index("Epoch") if rows else _empty_log()
    log.columns.name = "Name"
    m.training_log = log
    return m, log
