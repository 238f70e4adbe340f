"""Small residual dense model used as the profiling oracle.

Each layer computes ``h_p(x) = x + tanh(W_p x + b_p)``.  Layers can be run
with round-to-nearest quantized weights at 8, 4 or 3 bits.
"""
from __future__ import annotations

import enum
from dataclasses import dataclass, field
from typing import Mapping, Sequence

import numpy as np

__all__ = [
    "Precision",
    "ToyModel",
    "PrecisionConfig",
    "ActivationTrace",
    "build_model",
    "quantize_weights",
    "quantization_scale",
    "forward",
    "cosine",
    "cosine_flagged",
    "calibration_batch",
]


class Precision(str, enum.Enum):
    FULL = "FULL"
    Q8 = "Q8"
    Q4 = "Q4"
    Q3 = "Q3"

    @property
    def bits(self) -> int | None:
        return _BITS[self]

    @classmethod
    def from_bits(cls, bits: int) -> "Precision":
        for tag, b in _BITS.items():
            if b == bits:
                return tag
        raise ValueError(f"no precision tag for {bits} bits (expected 8, 4 or 3)")


_BITS = {Precision.FULL: None, Precision.Q8: 8, Precision.Q4: 4, Precision.Q3: 3}


def quantization_scale(W, bits: int) -> np.ndarray:
    """Per-row symmetric scale ``max|w_row| / (2**(bits-1) - 1)``; 1 for all-zero rows."""
    W = np.atleast_2d(np.asarray(W, dtype=float))
    qmax = 2 ** (bits - 1) - 1
    s = np.max(np.abs(W), axis=1) / qmax
    s[s == 0] = 1.0
    return s


def quantize_weights(W, bits: int) -> np.ndarray:
    """Per-row symmetric uniform round-to-nearest quantization (ties away from zero)."""
    if bits < 2:
        raise ValueError(f"bits must be >= 2, got {bits}")
    arr = np.asarray(W, dtype=float)
    W2 = np.atleast_2d(arr)
    s = quantization_scale(W2, bits)[:, None]
    r = W2 / s
    codes = np.sign(r) * np.floor(np.abs(r) + 0.5)
    out = codes * s
    return out.reshape(arr.shape)


@dataclass(frozen=True)
class ToyModel:
    num_layers: int
    hidden_dim: int
    seed: int
    weights: tuple[np.ndarray, ...] = field(repr=False)
    biases: tuple[np.ndarray, ...] = field(repr=False)
    _quantized: dict = field(default_factory=dict, repr=False, compare=False)

    def layer_weights(self, p: int, precision: Precision = Precision.FULL) -> np.ndarray:
        if precision is Precision.FULL:
            return self.weights[p]
        key = (p, precision)
        if key not in self._quantized:
            self._quantized[key] = quantize_weights(self.weights[p], precision.bits)
        return self._quantized[key]

    def layer(self, p: int, x: np.ndarray, precision: Precision = Precision.FULL) -> np.ndarray:
        """Apply layer ``p`` to a vector or a batch of row vectors."""
        W = self.layer_weights(p, precision)
        return x + np.tanh(x @ W.T + self.biases[p])


GAIN_RANGE = (0.1, 1.0)


def build_model(seed: int, num_layers: int, hidden_dim: int) -> ToyModel:
    """Deterministically generate a residual tanh model.

    Per-layer gain is log-uniform on [0.1, 1], so layers differ by an order
    of magnitude in how strongly they transform their input.  Weights are
    Gaussian with variance gain**2 / d.
    """
    if num_layers < 1:
        raise ValueError(f"num_layers must be >= 1, got {num_layers}")
    if hidden_dim < 2:
        raise ValueError(f"hidden_dim must be >= 2, got {hidden_dim}")
    rng = np.random.default_rng(seed)
    weights, biases = [], []
    for _ in range(num_layers):
        gain = np.exp(rng.uniform(np.log(GAIN_RANGE[0]), np.log(GAIN_RANGE[1])))
        weights.append(rng.standard_normal((hidden_dim, hidden_dim)) * gain / np.sqrt(hidden_dim))
        biases.append(rng.normal(0.0, 0.1 * gain, size=hidden_dim))
    return ToyModel(num_layers, hidden_dim, seed, tuple(weights), tuple(biases))


class PrecisionConfig:
    """Precision tag per layer; the quantized set is every layer not at FULL."""

    def __init__(self, num_layers: int, tags: Mapping[int, Precision] | Sequence[Precision] | None = None):
        self.num_layers = num_layers
        self._tags = [Precision.FULL] * num_layers
        if tags is None:
            return
        items = tags.items() if isinstance(tags, Mapping) else enumerate(tags)
        for p, tag in items:
            if not 0 <= p < num_layers:
                raise ValueError(f"layer index {p} out of range [0, {num_layers})")
            self._tags[p] = Precision(tag)

    @classmethod
    def full(cls, num_layers: int) -> "PrecisionConfig":
        return cls(num_layers)

    @classmethod
    def quantized(cls, num_layers: int, layers, bits: int) -> "PrecisionConfig":
        tag = Precision.from_bits(bits)
        return cls(num_layers, {p: tag for p in layers})

    def __getitem__(self, p: int) -> Precision:
        return self._tags[p]

    @property
    def tags(self) -> tuple[Precision, ...]:
        return tuple(self._tags)

    @property
    def quantized_set(self) -> frozenset[int]:
        return frozenset(p for p, t in enumerate(self._tags) if t is not Precision.FULL)

    def with_layer(self, p: int, tag: Precision) -> "PrecisionConfig":
        tags = list(self._tags)
        tags[p] = Precision(tag)
        return PrecisionConfig(self.num_layers, tags)

    def __eq__(self, other):
        return isinstance(other, PrecisionConfig) and self._tags == other._tags

    def __hash__(self):
        return hash(tuple(self._tags))

    def __repr__(self):
        q = sorted(self.quantized_set)
        return f"PrecisionConfig(L={self.num_layers}, quantized={q})"


@dataclass(frozen=True)
class ActivationTrace:
    inputs: tuple[np.ndarray, ...]   # x_p for each layer
    outputs: tuple[np.ndarray, ...]  # h_p(x_p) for each layer

    @property
    def final(self) -> np.ndarray:
        return self.outputs[-1]


def forward(model: ToyModel, config: PrecisionConfig | None, x) -> ActivationTrace:
    """Run every layer, using quantized weights where ``config`` says so.

    ``x`` may be a single vector of length ``d`` or a batch of shape ``(n, d)``.
    """
    x = np.asarray(x, dtype=float)
    if x.shape[-1] != model.hidden_dim or x.ndim not in (1, 2):
        raise ValueError(f"input has shape {x.shape}, expected (..., {model.hidden_dim})")
    if config is None:
        config = PrecisionConfig.full(model.num_layers)
    if config.num_layers != model.num_layers:
        raise ValueError(
            f"config covers {config.num_layers} layers, model has {model.num_layers}"
        )
    inputs, outputs = [], []
    h = x
    for p in range(model.num_layers):
        inputs.append(h)
        h = model.layer(p, h, config[p])
        outputs.append(h)
    return ActivationTrace(tuple(inputs), tuple(outputs))


def cosine_flagged(a, b) -> tuple[np.ndarray | float, bool]:
    """Row-wise cosine similarity plus a flag set when any row had zero norm.

    Zero-norm rows score 0.
    """
    a = np.asarray(a, dtype=float)
    b = np.asarray(b, dtype=float)
    if a.shape != b.shape:
        raise ValueError(f"shape mismatch {a.shape} vs {b.shape}")
    na = np.linalg.norm(a, axis=-1)
    nb = np.linalg.norm(b, axis=-1)
    denom = na * nb
    degenerate = denom == 0
    safe = np.where(degenerate, 1.0, denom)
    cos = np.sum(a * b, axis=-1) / safe
    cos = np.where(degenerate, 0.0, np.clip(cos, -1.0, 1.0))
    if cos.ndim == 0:
        return float(cos), bool(degenerate)
    return cos, bool(np.any(degenerate))


def cosine(a, b):
    return cosine_flagged(a, b)[0]


def calibration_batch(seed: int, n: int, d: int) -> np.ndarray:
    """``n`` pseudo-random unit vectors of dimension ``d``."""
    if n < 1:
        raise ValueError("calibration batch must be nonempty")
    rng = np.random.default_rng(seed)
    X = rng.standard_normal((n, d))
    return X / np.linalg.norm(X, axis=1, keepdims=True)
