"""Minimal dense-network engine: flat parameter vectors, forward pass,
cross-entropy loss with exact analytic gradients, and plain SGD steps."""
from __future__ import annotations

import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .data import DatasetSlice


class ShapeMismatchError(ValueError):
    """Arithmetic between parameter vectors with different layer shapes."""


class NonFiniteError(FloatingPointError):
    """A public operation produced or received NaN/Inf values."""


_PARAM_MAGIC = b"FUPV"
_PARAM_VERSION = 1

ACTIVATIONS = ("relu", "tanh")


@dataclass(frozen=True)
class MlpArchitecture:
    input_dim: int
    hidden_dims: tuple[int, ...]
    num_classes: int
    activation: str = "relu"

    def __post_init__(self):
        object.__setattr__(self, "hidden_dims", tuple(int(h) for h in self.hidden_dims))
        if self.input_dim < 1:
            raise ValueError("input_dim must be positive")
        if len(self.hidden_dims) < 1 or any(h < 1 for h in self.hidden_dims):
            raise ValueError("need at least one positive hidden layer")
        if self.num_classes < 2:
            raise ValueError("num_classes must be >= 2")
        if self.activation not in ACTIVATIONS:
            raise ValueError(f"unknown activation {self.activation!r}")

    def layer_shapes(self) -> tuple[tuple[int, ...], ...]:
        dims = (self.input_dim, *self.hidden_dims, self.num_classes)
        shapes: list[tuple[int, ...]] = []
        for fan_in, fan_out in zip(dims[:-1], dims[1:]):
            shapes.append((fan_in, fan_out))
            shapes.append((fan_out,))
        return tuple(shapes)

    def param_count(self) -> int:
        return sum(int(np.prod(s)) for s in self.layer_shapes())


class ParamVector:
    """Flat float64 parameter vector plus layer-shape metadata.

    Arithmetic is defined only between vectors with identical shapes, and
    every public operation checks for non-finite values.
    """

    __slots__ = ("values", "shapes")

    def __init__(self, values: np.ndarray, shapes: tuple[tuple[int, ...], ...]):
        values = np.ascontiguousarray(values, dtype=np.float64)
        shapes = tuple(tuple(int(d) for d in s) for s in shapes)
        expected = sum(int(np.prod(s)) for s in shapes)
        if values.ndim != 1 or values.size != expected:
            raise ShapeMismatchError(
                f"value count {values.size} does not match shapes (expected {expected})"
            )
        if not np.all(np.isfinite(values)):
            raise NonFiniteError("parameter vector contains NaN/Inf")
        values.setflags(write=False)
        self.values = values
        self.shapes = shapes

    def __len__(self) -> int:
        return self.values.size

    def __repr__(self) -> str:
        return f"ParamVector(len={len(self)}, shapes={self.shapes})"

    def _check_compatible(self, other: "ParamVector") -> None:
        if self.shapes != other.shapes:
            raise ShapeMismatchError(f"shape mismatch: {self.shapes} vs {other.shapes}")

    def add(self, other: "ParamVector") -> "ParamVector":
        self._check_compatible(other)
        return ParamVector(self.values + other.values, self.shapes)

    def sub(self, other: "ParamVector") -> "ParamVector":
        self._check_compatible(other)
        return ParamVector(self.values - other.values, self.shapes)

    def scale(self, factor: float) -> "ParamVector":
        return ParamVector(self.values * float(factor), self.shapes)

    def mul(self, other: "ParamVector") -> "ParamVector":
        self._check_compatible(other)
        return ParamVector(self.values * other.values, self.shapes)

    def l1_norm(self) -> float:
        return float(np.sum(np.abs(self.values)))

    def l2_norm(self) -> float:
        return float(np.linalg.norm(self.values))

    def with_values(self, values: np.ndarray) -> "ParamVector":
        return ParamVector(values, self.shapes)

    @classmethod
    def zeros(cls, shapes: tuple[tuple[int, ...], ...]) -> "ParamVector":
        total = sum(int(np.prod(s)) for s in shapes)
        return cls(np.zeros(total), shapes)

    def unflatten(self) -> list[np.ndarray]:
        out = []
        offset = 0
        for shape in self.shapes:
            size = int(np.prod(shape))
            out.append(self.values[offset : offset + size].reshape(shape))
            offset += size
        return out

    # checkpoint wire format: magic, version byte, layer count, then per layer
    # the rank and little-endian u32 dims, then little-endian f64 values
    def to_bytes(self) -> bytes:
        parts = [_PARAM_MAGIC, struct.pack("<BI", _PARAM_VERSION, len(self.shapes))]
        for shape in self.shapes:
            parts.append(struct.pack("<B", len(shape)))
            parts.append(struct.pack(f"<{len(shape)}I", *shape))
        parts.append(self.values.astype("<f8").tobytes())
        return b"".join(parts)

    @classmethod
    def from_bytes(cls, raw: bytes) -> "ParamVector":
        if raw[:4] != _PARAM_MAGIC:
            raise ValueError("not a parameter checkpoint")
        version, count = struct.unpack_from("<BI", raw, 4)
        if version != _PARAM_VERSION:
            raise ValueError(f"unsupported checkpoint version {version}")
        off = 4 + struct.calcsize("<BI")
        shapes = []
        for _ in range(count):
            (rank,) = struct.unpack_from("<B", raw, off)
            off += 1
            dims = struct.unpack_from(f"<{rank}I", raw, off)
            off += 4 * rank
            shapes.append(dims)
        total = sum(int(np.prod(s)) for s in shapes)
        values = np.frombuffer(raw, dtype="<f8", count=total, offset=off)
        return cls(values.copy(), tuple(shapes))

    def save(self, path: str | Path) -> None:
        Path(path).write_bytes(self.to_bytes())

    @classmethod
    def load(cls, path: str | Path) -> "ParamVector":
        return cls.from_bytes(Path(path).read_bytes())


@dataclass(frozen=True)
class GradResult:
    loss: float
    grad: ParamVector


def init_params(arch: MlpArchitecture, seed: int) -> ParamVector:
    """Fan-in scaled uniform weights, zero biases; deterministic per seed."""
    rng = np.random.default_rng(seed)
    chunks = []
    for shape in arch.layer_shapes():
        if len(shape) == 2:
            limit = np.sqrt(6.0 / shape[0])
            chunks.append(rng.uniform(-limit, limit, size=int(np.prod(shape))))
        else:
            chunks.append(np.zeros(int(np.prod(shape))))
    return ParamVector(np.concatenate(chunks), arch.layer_shapes())


def _activation_fns(arch: MlpArchitecture):
    if arch.activation == "relu":
        return (lambda z: np.maximum(z, 0.0), lambda z, a: (z > 0).astype(np.float64))
    return (np.tanh, lambda z, a: 1.0 - a * a)


def _forward(params: ParamVector, arch: MlpArchitecture, x: np.ndarray):
    """Return (logits, per-layer pre-activations, per-layer activations)."""
    if x.shape[1] != arch.input_dim:
        raise ShapeMismatchError(
            f"feature dim {x.shape[1]} does not match input_dim {arch.input_dim}"
        )
    if params.shapes != arch.layer_shapes():
        raise ShapeMismatchError("parameter shapes do not match architecture")
    act, _ = _activation_fns(arch)
    layers = params.unflatten()
    pre, post = [], [x]
    h = x
    n_layers = len(layers) // 2
    for i in range(n_layers):
        w, b = layers[2 * i], layers[2 * i + 1]
        z = h @ w + b
        if i < n_layers - 1:
            h = act(z)
            pre.append(z)
            post.append(h)
        else:
            logits = z
    if not np.all(np.isfinite(logits)):
        raise NonFiniteError("non-finite logits in forward pass")
    return logits, pre, post


def _log_softmax(logits: np.ndarray) -> np.ndarray:
    shifted = logits - logits.max(axis=1, keepdims=True)
    return shifted - np.log(np.exp(shifted).sum(axis=1, keepdims=True))


def forward_loss_grad(
    params: ParamVector, arch: MlpArchitecture, batch: DatasetSlice
) -> GradResult:
    """Mean cross-entropy over the batch and its exact analytic gradient."""
    if len(batch) == 0:
        raise ValueError("empty batch")
    x, y = batch.features, batch.labels
    logits, pre, post = _forward(params, arch, x)
    logp = _log_softmax(logits)
    n = x.shape[0]
    loss = -float(np.mean(logp[np.arange(n), y]))

    _, act_grad = _activation_fns(arch)
    layers = params.unflatten()
    n_layers = len(layers) // 2

    delta = np.exp(logp)
    delta[np.arange(n), y] -= 1.0
    delta /= n

    grads: list[np.ndarray] = [np.empty(0)] * (2 * n_layers)
    for i in range(n_layers - 1, -1, -1):
        h_in = post[i]
        grads[2 * i] = h_in.T @ delta
        grads[2 * i + 1] = delta.sum(axis=0)
        if i > 0:
            w = layers[2 * i]
            delta = (delta @ w.T) * act_grad(pre[i - 1], post[i])

    flat = np.concatenate([g.ravel() for g in grads])
    if not (np.isfinite(loss) and np.all(np.isfinite(flat))):
        raise NonFiniteError("non-finite loss or gradient")
    return GradResult(loss, ParamVector(flat, params.shapes))


def sgd_step(params: ParamVector, grad: ParamVector, lr: float) -> ParamVector:
    if lr <= 0:
        raise ValueError("lr must be positive")
    return params.sub(grad.scale(lr))


def logits_of(params: ParamVector, arch: MlpArchitecture, features: np.ndarray) -> np.ndarray:
    logits, _, _ = _forward(params, arch, np.atleast_2d(features))
    return logits


def predict(params: ParamVector, arch: MlpArchitecture, features: np.ndarray) -> np.ndarray:
    """Argmax class labels; ties resolve to the lowest class index."""
    return np.argmax(logits_of(params, arch, features), axis=1)


def accuracy(params: ParamVector, arch: MlpArchitecture, batch: DatasetSlice) -> float:
    if len(batch) == 0:
        raise ValueError("empty slice")
    return float(np.mean(predict(params, arch, batch.features) == batch.labels))
