"""Layer sensitivity scoring and swap-order construction.

Sensitivity metrics (all cosine similarities averaged over a calibration
batch, higher means safer to quantize):

* transformation score: cos(layer output, layer input), full precision
* replacement score: cos(layer output, same layer with quantized weights),
  both evaluated on the full-precision layer input
* degradation score: cos(model output with set Q quantized,
  model output with Q plus the candidate quantized)

The importance score is ``alpha1*transformation + alpha2*replacement +
beta*degradation``.  The greedy order repeatedly quantizes the unquantized
layer with the highest importance score.
"""
from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np
from sklearn.base import BaseEstimator
from sklearn.utils.validation import check_array, check_is_fitted

from .toymodel import (
    PrecisionConfig,
    Precision,
    ToyModel,
    cosine,
    forward,
)

__all__ = [
    "SensitivityScores",
    "SwapSequence",
    "SequenceFormatError",
    "LIS_GREEDY",
    "FRONT_TO_BACK",
    "BACK_TO_FRONT",
    "RANDOM",
    "lts",
    "lrs",
    "mds",
    "degradation",
    "greedy_sequence",
    "baseline_sequence",
    "evaluate_sequence",
    "persist_sequence",
    "load_sequence",
    "LayerSwapProfiler",
]

SEQUENCE_FILE_VERSION = 1

LIS_GREEDY = "LIS_GREEDY"
FRONT_TO_BACK = "FRONT_TO_BACK"
BACK_TO_FRONT = "BACK_TO_FRONT"
RANDOM = "RANDOM"


class SequenceFormatError(ValueError):
    pass


def _check_batch(model: ToyModel, X) -> np.ndarray:
    X = np.asarray(X, dtype=float)
    if X.ndim == 1:
        X = X[None, :]
    if X.ndim != 2 or X.shape[0] == 0:
        raise ValueError("calibration batch must be a nonempty (n, d) array")
    if X.shape[1] != model.hidden_dim:
        raise ValueError(f"calibration batch has d={X.shape[1]}, model has d={model.hidden_dim}")
    return X


def _check_weights(alpha1: float, alpha2: float, beta: float) -> None:
    ws = (alpha1, alpha2, beta)
    if any(w < 0 or not math.isfinite(w) for w in ws):
        raise ValueError(f"score weights must be finite and non-negative, got {ws}")
    if not any(w > 0 for w in ws):
        raise ValueError("at least one score weight must be positive")


def lts(model: ToyModel, X) -> np.ndarray:
    """Per-layer mean cos(output, input) under the full-precision forward."""
    X = _check_batch(model, X)
    tr = forward(model, None, X)
    return np.array([np.mean(cosine(tr.outputs[p], tr.inputs[p])) for p in range(model.num_layers)])


def lrs(model: ToyModel, X, bits: int) -> np.ndarray:
    """Per-layer mean cos(full layer output, quantized layer output) on full-precision inputs."""
    X = _check_batch(model, X)
    tag = Precision.from_bits(bits)
    tr = forward(model, None, X)
    out = np.empty(model.num_layers)
    for p in range(model.num_layers):
        quant = model.layer(p, tr.inputs[p], tag)
        out[p] = np.mean(cosine(tr.outputs[p], quant))
    return out


def mds(model: ToyModel, Q: Iterable[int], p: int, X, bits: int) -> float:
    """Mean cos(f^(Q)(x), f^(Q+{p})(x)) over the batch."""
    X = _check_batch(model, X)
    Q = frozenset(Q)
    if p in Q:
        raise ValueError(f"layer {p} is already in the quantized set")
    base = PrecisionConfig.quantized(model.num_layers, Q, bits)
    cand = PrecisionConfig.quantized(model.num_layers, Q | {p}, bits)
    return float(np.mean(cosine(forward(model, base, X).final, forward(model, cand, X).final)))


def degradation(model: ToyModel, Q: Iterable[int], X, bits: int) -> float:
    """``1 - mean cos(full-precision output, output with Q quantized)``."""
    X = _check_batch(model, X)
    Q = frozenset(Q)
    if not Q:
        return 0.0
    full = forward(model, None, X).final
    mixed = forward(model, PrecisionConfig.quantized(model.num_layers, Q, bits), X).final
    return float(1.0 - np.mean(cosine(full, mixed)))


@dataclass(frozen=True)
class SensitivityScores:
    lts: np.ndarray
    lrs: np.ndarray
    alpha1: float
    alpha2: float
    beta: float
    # round t -> per-layer MDS / LIS given the first t picks; NaN for layers already quantized
    mds_rounds: tuple[np.ndarray, ...] = field(default=())
    lis_rounds: tuple[np.ndarray, ...] = field(default=())

    def lis(self, p: int, mds_value: float) -> float:
        return self.alpha1 * self.lts[p] + self.alpha2 * self.lrs[p] + self.beta * mds_value


@dataclass(frozen=True)
class SwapSequence:
    order: tuple[int, ...]
    provenance: str
    per_step_lis: tuple[float, ...] = ()
    bits: int | None = None
    weights: dict | None = None

    def __post_init__(self):
        object.__setattr__(self, "order", tuple(int(i) for i in self.order))
        object.__setattr__(self, "per_step_lis", tuple(float(v) for v in self.per_step_lis))
        if sorted(self.order) != list(range(len(self.order))):
            raise SequenceFormatError(f"order {list(self.order)} is not a permutation of range({len(self.order)})")
        if self.per_step_lis and len(self.per_step_lis) != len(self.order):
            raise SequenceFormatError("per_step_lis length does not match order length")

    @property
    def num_layers(self) -> int:
        return len(self.order)

    def __len__(self):
        return len(self.order)

    def check_layers(self, num_layers: int) -> None:
        if self.num_layers != num_layers:
            raise SequenceFormatError(
                f"swap sequence covers {self.num_layers} layers but the model has {num_layers}"
            )

    def to_dict(self) -> dict:
        return {
            "version": SEQUENCE_FILE_VERSION,
            "L": self.num_layers,
            "bits": self.bits,
            "weights": self.weights,
            "provenance": self.provenance,
            "order": list(self.order),
            "per_step_lis": list(self.per_step_lis),
        }

    @classmethod
    def from_dict(cls, doc: dict) -> "SwapSequence":
        try:
            version = doc["version"]
            L = doc["L"]
            order = doc["order"]
            provenance = doc["provenance"]
        except (KeyError, TypeError) as exc:
            raise SequenceFormatError(f"sequence document missing field {exc}") from None
        if version != SEQUENCE_FILE_VERSION:
            raise SequenceFormatError(f"unsupported sequence file version {version!r}")
        if not isinstance(order, list) or not all(isinstance(i, int) for i in order):
            raise SequenceFormatError("order must be a list of integers")
        if len(order) != L:
            raise SequenceFormatError(f"order has {len(order)} entries but L={L}")
        if len(set(order)) != len(order):
            raise SequenceFormatError("order contains a repeated layer index")
        return cls(
            order=tuple(order),
            provenance=str(provenance),
            per_step_lis=tuple(doc.get("per_step_lis") or ()),
            bits=doc.get("bits"),
            weights=doc.get("weights"),
        )


def persist_sequence(seq: SwapSequence, path) -> None:
    Path(path).write_text(json.dumps(seq.to_dict(), indent=2, sort_keys=True) + "\n")


def load_sequence(path) -> SwapSequence:
    path = Path(path)
    try:
        doc = json.loads(path.read_text())
    except OSError as exc:
        raise SequenceFormatError(f"cannot read sequence file {path}: {exc}") from exc
    except json.JSONDecodeError as exc:
        raise SequenceFormatError(f"{path} is not valid JSON: {exc}") from exc
    if not isinstance(doc, dict):
        raise SequenceFormatError(f"{path}: expected a JSON object")
    return SwapSequence.from_dict(doc)


def _greedy(model: ToyModel, X: np.ndarray, alpha1, alpha2, beta, bits) -> tuple[SwapSequence, SensitivityScores]:
    L = model.num_layers
    tag = Precision.from_bits(bits)
    lts_ = lts(model, X)
    lrs_ = lrs(model, X, bits)

    quantized: list[int] = []
    picked_lis: list[float] = []
    mds_rounds, lis_rounds = [], []
    tags = [Precision.FULL] * L
    for _ in range(L):
        # activations of f^(Q); candidates re-run only the suffix from their own layer
        base_in = []
        h = X
        for p in range(L):
            base_in.append(h)
            h = model.layer(p, h, tags[p])
        base_out = h

        mds_row = np.full(L, np.nan)
        lis_row = np.full(L, np.nan)
        for j in range(L):
            if tags[j] is not Precision.FULL:
                continue
            h = model.layer(j, base_in[j], tag)
            for p in range(j + 1, L):
                h = model.layer(p, h, tags[p])
            mds_row[j] = np.mean(cosine(base_out, h))
            lis_row[j] = alpha1 * lts_[j] + alpha2 * lrs_[j] + beta * mds_row[j]
        # np.nanargmax returns the first maximum -> ties go to the lowest index
        best = int(np.nanargmax(lis_row))
        quantized.append(best)
        picked_lis.append(float(lis_row[best]))
        tags[best] = tag
        mds_rounds.append(mds_row)
        lis_rounds.append(lis_row)

    weights = {"alpha1": float(alpha1), "alpha2": float(alpha2), "beta": float(beta)}
    seq = SwapSequence(tuple(quantized), LIS_GREEDY, tuple(picked_lis), bits, weights)
    scores = SensitivityScores(lts_, lrs_, alpha1, alpha2, beta, tuple(mds_rounds), tuple(lis_rounds))
    return seq, scores


def greedy_sequence(model: ToyModel, X, alpha1: float = 0.25, alpha2: float = 0.25,
                    beta: float = 0.5, bits: int = 4) -> SwapSequence:
    """Greedy swap order: each round quantizes the candidate with the highest score."""
    X = _check_batch(model, X)
    _check_weights(alpha1, alpha2, beta)
    return _greedy(model, X, alpha1, alpha2, beta, bits)[0]


def baseline_sequence(kind: str, num_layers: int, seed: int | None = None) -> SwapSequence:
    if num_layers < 1:
        raise ValueError(f"num_layers must be >= 1, got {num_layers}")
    kind = kind.upper()
    if kind == FRONT_TO_BACK:
        return SwapSequence(tuple(range(num_layers)), FRONT_TO_BACK)
    if kind == BACK_TO_FRONT:
        return SwapSequence(tuple(reversed(range(num_layers))), BACK_TO_FRONT)
    if kind == RANDOM:
        if seed is None:
            raise ValueError("RANDOM ordering needs a seed")
        order = np.random.default_rng(seed).permutation(num_layers)
        return SwapSequence(tuple(int(i) for i in order), f"RANDOM({seed})")
    raise ValueError(f"unknown baseline kind {kind!r}")


def evaluate_sequence(model: ToyModel, seq: SwapSequence | Sequence[int], X, bits: int) -> np.ndarray:
    """Degradation after quantizing the first k layers of ``seq``, for k = 0..L."""
    X = _check_batch(model, X)
    order = seq.order if isinstance(seq, SwapSequence) else tuple(seq)
    if sorted(order) != list(range(model.num_layers)):
        raise ValueError("sequence is not a permutation of the model's layers")
    tag = Precision.from_bits(bits)
    full = forward(model, None, X).final
    curve = np.zeros(model.num_layers + 1)
    config = PrecisionConfig.full(model.num_layers)
    for k, p in enumerate(order, start=1):
        config = config.with_layer(p, tag)
        mixed = forward(model, config, X).final
        curve[k] = 1.0 - np.mean(cosine(full, mixed))
    return curve


class LayerSwapProfiler(BaseEstimator):
    """Estimator wrapper around the greedy profiler.

    Parameters
    ----------
    model : ToyModel
        Model whose layers are ranked.
    alpha1, alpha2, beta : float
        Weights of the transformation, replacement and degradation scores.
    bits : int
        Bit width of the quantized layer variants.

    Attributes
    ----------
    sequence_ : SwapSequence
    scores_ : SensitivityScores
    n_features_in_ : int

    Examples
    --------
    >>> from morphsim.toymodel import build_model, calibration_batch
    >>> model = build_model(seed=7, num_layers=4, hidden_dim=8)
    >>> prof = LayerSwapProfiler(model).fit(calibration_batch(0, 32, 8))
    >>> sorted(prof.sequence_.order)
    [0, 1, 2, 3]
    """

    def __init__(self, model=None, alpha1=0.25, alpha2=0.25, beta=0.5, bits=4):
        self.model = model
        self.alpha1 = alpha1
        self.alpha2 = alpha2
        self.beta = beta
        self.bits = bits

    def fit(self, X, y=None):
        if self.model is None:
            raise ValueError("LayerSwapProfiler needs a model")
        _check_weights(self.alpha1, self.alpha2, self.beta)
        Precision.from_bits(self.bits)
        X = check_array(X, ensure_min_samples=1)
        X = _check_batch(self.model, X)
        self.n_features_in_ = X.shape[1]
        self.sequence_, self.scores_ = _greedy(
            self.model, X, self.alpha1, self.alpha2, self.beta, self.bits
        )
        return self

    def degradation_curve(self, X) -> np.ndarray:
        check_is_fitted(self, "sequence_")
        X = check_array(X)
        return evaluate_sequence(self.model, self.sequence_, X, self.bits)

    def score(self, X, y=None) -> float:
        """Negative cumulative degradation of the fitted order (higher is better)."""
        return -float(np.sum(self.degradation_curve(X)))
