"""Deterministic toy learning substrate: synthetic regression data and a ReLU MLP.

Only +, -, *, / and sqrt are used, so results depend on IEEE-754 semantics
alone. Per-sample SGD (batch size 1) visits rows in order; every reduction is a
numpy ``sum`` over a contiguous axis, which has a fixed evaluation order.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from . import prng
from .errors import ConfigError, ModelError
from .params import ParameterSet


@dataclass(frozen=True)
class ModelSpec:
    layer_sizes: tuple[int, ...]

    def __post_init__(self):
        sizes = tuple(self.layer_sizes)
        object.__setattr__(self, "layer_sizes", sizes)
        if len(sizes) < 2:
            raise ConfigError(f"a model needs at least 2 layers, got {list(sizes)}")
        if any(not isinstance(s, int) or isinstance(s, bool) or s < 1 for s in sizes):
            raise ConfigError(f"layer sizes must be positive integers, got {list(sizes)}")

    @property
    def num_transitions(self) -> int:
        return len(self.layer_sizes) - 1

    @property
    def num_parameters(self) -> int:
        return sum(o * i + o for i, o in zip(self.layer_sizes, self.layer_sizes[1:]))


@dataclass(frozen=True)
class DatasetSpec:
    num_samples: int
    input_dim: int
    output_dim: int
    seed: int = 0

    def __post_init__(self):
        if self.num_samples < 0:
            raise ConfigError(f"num_samples must be non-negative, got {self.num_samples}")
        if self.input_dim < 1 or self.output_dim < 1:
            raise ConfigError("input_dim and output_dim must be positive")
        if not 0 <= self.seed <= prng.MASK64:
            raise ConfigError(f"seed must be an unsigned 64-bit integer, got {self.seed}")


@dataclass(frozen=True)
class Dataset:
    inputs: np.ndarray
    targets: np.ndarray = field(repr=False)

    def __post_init__(self):
        if self.inputs.ndim != 2 or self.targets.ndim != 2:
            raise ModelError("inputs and targets must be 2-D")
        if self.inputs.shape[0] != self.targets.shape[0]:
            raise ModelError(
                f"row count mismatch: {self.inputs.shape[0]} inputs, {self.targets.shape[0]} targets"
            )

    def __len__(self) -> int:
        return self.inputs.shape[0]


def weight_name(i: int) -> str:
    return f"L{i}.w"


def bias_name(i: int) -> str:
    return f"L{i}.b"


def init_model(spec: ModelSpec, seed: int) -> ParameterSet:
    """Weights uniform on [-1/sqrt(fan_in), 1/sqrt(fan_in)), biases zero.

    Weights are drawn from one stream in layer order, each matrix row-major.
    """
    if not isinstance(spec, ModelSpec):
        raise ConfigError(f"expected ModelSpec, got {type(spec).__name__}")
    rng = prng.SplitMix64(prng.derive_seed(seed, prng.TAG_MODEL_INIT))
    tensors = {}
    for i, (fan_in, fan_out) in enumerate(zip(spec.layer_sizes, spec.layer_sizes[1:])):
        bound = 1.0 / math.sqrt(fan_in)
        tensors[weight_name(i)] = rng.symmetric(fan_out * fan_in, bound).reshape(fan_out, fan_in)
        tensors[bias_name(i)] = np.zeros(fan_out)
    return ParameterSet(tensors)


def matvec(w: np.ndarray, x: np.ndarray) -> np.ndarray:
    """``w @ x`` with a fixed summation order (row-wise numpy reduction)."""
    return (w * x).sum(axis=1)


def gen_dataset(spec: DatasetSpec) -> Dataset:
    """Inputs uniform on [-1, 1); targets = fixed random linear map of inputs + noise."""
    n, d_in, d_out = spec.num_samples, spec.input_dim, spec.output_dim
    inputs = prng.SplitMix64(prng.derive_seed(spec.seed, prng.TAG_DATA_INPUTS)).symmetric(n * d_in, 1.0)
    inputs = inputs.reshape(n, d_in)
    mapping = prng.SplitMix64(prng.derive_seed(spec.seed, prng.TAG_DATA_MAP)).symmetric(d_out * d_in, 1.0)
    mapping = mapping.reshape(d_out, d_in)
    noise = prng.SplitMix64(prng.derive_seed(spec.seed, prng.TAG_DATA_NOISE)).symmetric(n * d_out, 0.1)
    noise = noise.reshape(n, d_out)
    targets = np.empty((n, d_out))
    for row in range(n):
        targets[row] = matvec(mapping, inputs[row]) + noise[row]
    return Dataset(inputs, targets)


def partition_shards(data: Dataset, num_clients: int) -> list[Dataset]:
    """Contiguous equal row blocks; client ``k`` (0-based) gets block ``k``."""
    if num_clients < 1:
        raise ConfigError(f"num_clients must be positive, got {num_clients}")
    n = len(data)
    if n % num_clients:
        raise ConfigError(f"{n} samples cannot be split evenly across {num_clients} clients")
    size = n // num_clients
    return [
        Dataset(data.inputs[k * size : (k + 1) * size], data.targets[k * size : (k + 1) * size])
        for k in range(num_clients)
    ]


def _layers(params: ParameterSet) -> tuple[list[np.ndarray], list[np.ndarray]]:
    weights, biases = [], []
    i = 0
    while weight_name(i) in params:
        if bias_name(i) not in params:
            raise ModelError(f"layer {i} has no bias tensor")
        w, b = params[weight_name(i)], params[bias_name(i)]
        if w.ndim != 2 or b.shape != (w.shape[0],):
            raise ModelError(f"layer {i} is malformed")
        if weights and w.shape[1] != weights[-1].shape[0]:
            raise ModelError(f"layer {i} expects {w.shape[1]} inputs, previous layer gives {weights[-1].shape[0]}")
        weights.append(w)
        biases.append(b)
        i += 1
    if not weights or len(params) != 2 * len(weights):
        raise ModelError(f"not a feed-forward parameter set: {params.names}")
    return weights, biases


def _check_dims(weights: list[np.ndarray], data: Dataset) -> None:
    if data.inputs.shape[1] != weights[0].shape[1] or data.targets.shape[1] != weights[-1].shape[0]:
        raise ModelError(
            f"model maps {weights[0].shape[1]} -> {weights[-1].shape[0]}, "
            f"shard has {data.inputs.shape[1]} -> {data.targets.shape[1]}"
        )


def _forward(weights, biases, x):
    acts, pre = [x], []
    last = len(weights) - 1
    for i, (w, b) in enumerate(zip(weights, biases)):
        z = matvec(w, acts[-1]) + b
        pre.append(z)
        acts.append(z if i == last else np.maximum(z, 0.0))
    return acts, pre


def _backward(weights, acts, pre, target):
    """Gradients of sum((y - t)^2) / out_dim, last layer first."""
    y = acts[-1]
    delta = 2.0 * (y - target) / y.shape[0]
    grads = []
    for i in range(len(weights) - 1, -1, -1):
        grads.append((np.outer(delta, acts[i]), delta))
        if i:
            delta = (weights[i] * delta[:, None]).sum(axis=0) * (pre[i - 1] > 0.0)
    grads.reverse()
    return grads


def loss_and_grads(params: ParameterSet, x, target) -> tuple[float, dict[str, np.ndarray]]:
    """Per-sample MSE loss and its analytic gradient for every tensor."""
    weights, biases = _layers(params)
    x = np.asarray(x, dtype=np.float64)
    target = np.asarray(target, dtype=np.float64)
    acts, pre = _forward(weights, biases, x)
    diff = acts[-1] - target
    loss = float((diff * diff).sum() / diff.shape[0])
    out = {}
    for i, (gw, gb) in enumerate(_backward(weights, acts, pre, target)):
        out[weight_name(i)] = gw
        out[bias_name(i)] = gb
    return loss, out


def loss(params: ParameterSet, x, target) -> float:
    weights, biases = _layers(params)
    acts, _ = _forward(weights, biases, np.asarray(x, dtype=np.float64))
    diff = acts[-1] - np.asarray(target, dtype=np.float64)
    return float((diff * diff).sum() / diff.shape[0])


def train_epoch(model: ParameterSet, shard: Dataset, lr: float) -> ParameterSet:
    """One pass over ``shard`` in row order with per-sample SGD; returns a new set."""
    if not lr >= 0:
        raise ConfigError(f"learning rate must be non-negative, got {lr}")
    weights, biases = _layers(model)
    _check_dims(weights, shard)
    if len(shard) == 0 or lr == 0:
        return model
    weights = [w.copy() for w in weights]
    biases = [b.copy() for b in biases]
    # divergence is reported below as a ModelError, not as numpy warnings
    with np.errstate(over="ignore", invalid="ignore"):
        for row in range(len(shard)):
            acts, pre = _forward(weights, biases, shard.inputs[row])
            for i, (gw, gb) in enumerate(_backward(weights, acts, pre, shard.targets[row])):
                weights[i] -= lr * gw
                biases[i] -= lr * gb
    out = {}
    for i, (w, b) in enumerate(zip(weights, biases)):
        out[weight_name(i)] = w
        out[bias_name(i)] = b
    result = ParameterSet(out)
    if not result.is_finite():
        raise ModelError("training produced non-finite parameters")
    return result
