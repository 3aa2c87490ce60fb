"""Minimal fully-differentiable MLP classifier over flat parameter vectors.

All parameters of a network live in one float64 vector with a named block
partition (one block per layer by default). Forward pass, mean cross-entropy
loss, and exact backpropagation gradients are plain numpy; everything is a
pure function of its inputs, so results are bit-reproducible.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import NamedTuple, Sequence

import numpy as np

from .errors import ConfigError, ShapeError
from .rng import RngSeed

ACTIVATIONS = ("relu", "tanh")


class Block(NamedTuple):
    name: str
    offset: int
    length: int


def validate_block_spec(blocks: Sequence[Block], total: int) -> tuple[Block, ...]:
    """Check contiguity/coverage and return the spec as a tuple."""
    blocks = tuple(Block(str(n), int(o), int(l)) for n, o, l in blocks)
    if not blocks:
        raise ShapeError("block spec is empty")
    pos = 0
    for b in blocks:
        if b.offset != pos or b.length <= 0:
            raise ShapeError(
                f"block {b.name!r} at offset {b.offset} breaks contiguity "
                f"(expected offset {pos})"
            )
        pos += b.length
    if pos != total:
        raise ShapeError(f"blocks cover {pos} values, vector has {total}")
    return blocks


@dataclass(frozen=True)
class ParamVector:
    """A flat float64 parameter vector plus its block partition.

    Instances are immutable: ``values`` is stored as a read-only copy.
    """

    values: np.ndarray
    block_spec: tuple[Block, ...]

    def __post_init__(self) -> None:
        vals = np.array(self.values, dtype=np.float64, copy=True).reshape(-1)
        if not np.isfinite(vals).all():
            raise ShapeError("parameter vector contains NaN or Inf")
        vals.setflags(write=False)
        object.__setattr__(self, "values", vals)
        object.__setattr__(
            self, "block_spec", validate_block_spec(self.block_spec, vals.size)
        )

    def __len__(self) -> int:
        return self.values.size

    @property
    def num_blocks(self) -> int:
        return len(self.block_spec)

    def block(self, name: str) -> np.ndarray:
        for b in self.block_spec:
            if b.name == name:
                return self.values[b.offset : b.offset + b.length]
        raise ShapeError(f"no block named {name!r}")

    def block_slices(self) -> list[slice]:
        return [slice(b.offset, b.offset + b.length) for b in self.block_spec]

    def with_values(self, values: np.ndarray) -> "ParamVector":
        return ParamVector(values, self.block_spec)


def block_index_of_coordinate(block_spec: Sequence[Block], total: int) -> np.ndarray:
    """Length-``total`` array mapping each coordinate to its block index."""
    idx = np.empty(total, dtype=np.int64)
    for i, b in enumerate(block_spec):
        idx[b.offset : b.offset + b.length] = i
    return idx


@dataclass(frozen=True)
class MlpSpec:
    """Architecture of the classifier: layer sizes, activation, and the
    block granularity of the induced parameter vector."""

    layer_sizes: tuple[int, ...]
    activation: str = "relu"
    blocks: str = "per_layer"  # "per_layer" or "single"

    def __post_init__(self) -> None:
        sizes = tuple(int(s) for s in self.layer_sizes)
        object.__setattr__(self, "layer_sizes", sizes)
        if len(sizes) < 2:
            raise ConfigError("need at least input and output layer sizes")
        if any(s <= 0 for s in sizes):
            raise ConfigError("layer sizes must be positive")
        if sizes[-1] < 2:
            raise ConfigError("need at least 2 classes")
        if self.activation not in ACTIVATIONS:
            raise ConfigError(f"activation must be one of {ACTIVATIONS}")
        if self.blocks not in ("per_layer", "single"):
            raise ConfigError("blocks must be 'per_layer' or 'single'")

    @property
    def input_dim(self) -> int:
        return self.layer_sizes[0]

    @property
    def num_classes(self) -> int:
        return self.layer_sizes[-1]

    @property
    def num_layers(self) -> int:
        return len(self.layer_sizes) - 1

    def layer_dims(self) -> list[tuple[int, int]]:
        return list(zip(self.layer_sizes[:-1], self.layer_sizes[1:]))

    @property
    def param_count(self) -> int:
        return sum((n_in + 1) * n_out for n_in, n_out in self.layer_dims())

    def default_blocks(self) -> tuple[Block, ...]:
        """Per the configured granularity: one block per layer's weights and
        bias, or the whole network as a single block."""
        if self.blocks == "single":
            return (Block("all", 0, self.param_count),)
        out = []
        offset = 0
        for i, (n_in, n_out) in enumerate(self.layer_dims()):
            length = (n_in + 1) * n_out
            out.append(Block(f"layer{i}", offset, length))
            offset += length
        return tuple(out)


@dataclass(frozen=True)
class Batch:
    """A batch of samples: features (n, input_dim) and integer labels."""

    features: np.ndarray
    labels: np.ndarray

    def __post_init__(self) -> None:
        feats = np.asarray(self.features, dtype=np.float64)
        labels = np.asarray(self.labels, dtype=np.int64)
        if feats.ndim != 2 or feats.shape[0] < 1:
            raise ShapeError("features must be a non-empty (n, d) matrix")
        if labels.shape != (feats.shape[0],):
            raise ShapeError("labels must be a length-n vector")
        object.__setattr__(self, "features", feats)
        object.__setattr__(self, "labels", labels)

    def __len__(self) -> int:
        return self.features.shape[0]


def _unpack(spec: MlpSpec, values: np.ndarray) -> list[tuple[np.ndarray, np.ndarray]]:
    """Views of (W, b) per layer; W has shape (n_in, n_out), row-major."""
    layers = []
    offset = 0
    for n_in, n_out in spec.layer_dims():
        w = values[offset : offset + n_in * n_out].reshape(n_in, n_out)
        offset += n_in * n_out
        b = values[offset : offset + n_out]
        offset += n_out
        layers.append((w, b))
    return layers


def _check_params(spec: MlpSpec, params: ParamVector) -> None:
    if len(params) != spec.param_count:
        raise ShapeError(
            f"parameter vector has {len(params)} values, "
            f"spec {spec.layer_sizes} needs {spec.param_count}"
        )


def _check_batch(spec: MlpSpec, batch: Batch) -> None:
    if batch.features.shape[1] != spec.input_dim:
        raise ShapeError(
            f"batch features have dim {batch.features.shape[1]}, "
            f"spec input block expects {spec.input_dim}"
        )
    if batch.labels.min() < 0 or batch.labels.max() >= spec.num_classes:
        raise ShapeError(f"labels must lie in [0, {spec.num_classes})")


def init_params(spec: MlpSpec, seed: RngSeed | np.random.Generator) -> ParamVector:
    """Glorot-uniform weights, zero biases; deterministic given the seed."""
    rng = seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)
    chunks = []
    for n_in, n_out in spec.layer_dims():
        s = np.sqrt(6.0 / (n_in + n_out))
        chunks.append(rng.uniform(-s, s, size=n_in * n_out))
        chunks.append(np.zeros(n_out))
    return ParamVector(np.concatenate(chunks), spec.default_blocks())


def _activate(spec: MlpSpec, z: np.ndarray) -> np.ndarray:
    if spec.activation == "relu":
        return np.maximum(z, 0.0)
    return np.tanh(z)


def _activation_grad(spec: MlpSpec, z: np.ndarray, h: np.ndarray) -> np.ndarray:
    # h is the already-computed activation of z (reused for tanh).
    if spec.activation == "relu":
        return (z > 0.0).astype(np.float64)
    return 1.0 - h * h


def _forward(spec: MlpSpec, values: np.ndarray, x: np.ndarray):
    """Logits plus the per-layer caches backprop needs."""
    layers = _unpack(spec, values)
    h = x
    pre, post = [], [x]
    for i, (w, b) in enumerate(layers):
        z = h @ w + b
        if i < len(layers) - 1:
            pre.append(z)
            h = _activate(spec, z)
            post.append(h)
        else:
            h = z
    return h, pre, post


def _loss_from_logits(logits: np.ndarray, labels: np.ndarray) -> float:
    n = logits.shape[0]
    zmax = logits.max(axis=1, keepdims=True)
    lse = zmax[:, 0] + np.log(np.exp(logits - zmax).sum(axis=1))
    return float(np.sum(lse - logits[np.arange(n), labels]) / n)


def loss_values(
    spec: MlpSpec, values: np.ndarray, features: np.ndarray, labels: np.ndarray
) -> float:
    """Loss only, from raw arrays."""
    logits, _, _ = _forward(spec, values, features)
    return _loss_from_logits(logits, labels)


def loss_and_grad_values(
    spec: MlpSpec, values: np.ndarray, features: np.ndarray, labels: np.ndarray
) -> tuple[float, np.ndarray]:
    """Loss and flat gradient from raw arrays (inner-loop form, no checks)."""
    logits, pre, post = _forward(spec, values, features)
    n = features.shape[0]
    zmax = logits.max(axis=1, keepdims=True)
    ez = np.exp(logits - zmax)
    probs = ez / ez.sum(axis=1, keepdims=True)
    loss = _loss_from_logits(logits, labels)

    delta = probs.copy()
    delta[np.arange(n), labels] -= 1.0
    delta /= n

    layers = _unpack(spec, values)
    grad = np.empty_like(values)
    g_layers = _unpack(spec, grad)
    for i in range(len(layers) - 1, -1, -1):
        w, _ = layers[i]
        gw, gb = g_layers[i]
        np.matmul(post[i].T, delta, out=gw)
        np.sum(delta, axis=0, out=gb)
        if i > 0:
            delta = (delta @ w.T) * _activation_grad(spec, pre[i - 1], post[i])
    return loss, grad


def forward_loss(
    spec: MlpSpec, params: ParamVector, batch: Batch
) -> tuple[float, np.ndarray]:
    """Mean cross-entropy (log-sum-exp stabilized) and raw logits."""
    _check_params(spec, params)
    _check_batch(spec, batch)
    logits, _, _ = _forward(spec, params.values, batch.features)
    return _loss_from_logits(logits, batch.labels), logits


def grad_params(spec: MlpSpec, params: ParamVector, batch: Batch) -> ParamVector:
    """Exact backpropagation gradient of the mean cross-entropy."""
    _check_params(spec, params)
    _check_batch(spec, batch)
    _, grad = loss_and_grad_values(spec, params.values, batch.features, batch.labels)
    return ParamVector(grad, params.block_spec)


def predict(spec: MlpSpec, values: np.ndarray, features: np.ndarray) -> np.ndarray:
    """Argmax class predictions from raw parameter values."""
    logits, _, _ = _forward(spec, values, np.asarray(features, dtype=np.float64))
    return np.argmax(logits, axis=1)
