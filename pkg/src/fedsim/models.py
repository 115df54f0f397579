"""Trainable model core.

Two softmax classifiers over flat float64 parameter vectors: multinomial
logistic regression and a one-hidden-layer tanh MLP. Training is plain
minibatch SGD with seeded shuffling so that repeated calls with equal inputs
are bit-identical.

Parameter layout is canonical: layer by layer, weight matrix in row-major
order, then that layer's bias vector. All per-sample reductions (mean loss,
accuracy) accumulate strictly left to right so independent re-computation
can reproduce them.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass
from pathlib import Path
from typing import Callable, Iterable

import numpy as np

from .errors import DivergenceError

KIND_LOGISTIC = "logistic"
KIND_MLP = "mlp"
MODEL_KINDS = (KIND_LOGISTIC, KIND_MLP)

INIT_ZEROS = "zeros"
INIT_SEEDED_UNIFORM = "seeded_uniform"
INIT_SPAN = 0.05  # seeded init draws from [-INIT_SPAN, +INIT_SPAN]

_MAX_SEED = 2**64


def seq_sum(values: Iterable[float]) -> float:
    """Strict left-to-right float accumulation."""
    total = 0.0
    for v in values:
        total += v
    return total


# ---------------------------------------------------------------------------
# value types
# ---------------------------------------------------------------------------


@dataclass(frozen=True, eq=False)
class ParameterVector:
    """Immutable flat float64 parameter vector. Every entry must be finite."""

    values: np.ndarray

    def __post_init__(self) -> None:
        arr = np.asarray(self.values, dtype=np.float64)
        if arr.ndim != 1:
            raise ValueError(f"parameter vector must be 1-D, got shape {arr.shape}")
        if not np.all(np.isfinite(arr)):
            raise ValueError("parameter vector contains non-finite entries")
        arr = arr.copy()
        arr.setflags(write=False)
        object.__setattr__(self, "values", arr)

    def __len__(self) -> int:
        return int(self.values.shape[0])


@dataclass(frozen=True)
class ArchDescriptor:
    """Model shape: kind, input width, hidden width (0 for logistic), classes."""

    kind: str
    input_dim: int
    hidden_dim: int
    num_classes: int

    def __post_init__(self) -> None:
        if self.kind not in MODEL_KINDS:
            raise ValueError(f"unknown model kind {self.kind!r}")
        if self.input_dim < 1:
            raise ValueError("input_dim must be >= 1")
        if self.num_classes < 2:
            raise ValueError("num_classes must be >= 2")
        if self.kind == KIND_LOGISTIC and self.hidden_dim != 0:
            raise ValueError("logistic arch requires hidden_dim == 0")
        if self.kind == KIND_MLP and self.hidden_dim < 1:
            raise ValueError("mlp arch requires hidden_dim >= 1")

    @property
    def parameter_count(self) -> int:
        d, h, k = self.input_dim, self.hidden_dim, self.num_classes
        if self.kind == KIND_LOGISTIC:
            return d * k + k
        return d * h + h + h * k + k

    @property
    def shared_parameter_count(self) -> int:
        """Length of the leading segment that excludes the final linear layer."""
        if self.kind == KIND_LOGISTIC:
            return 0
        return self.input_dim * self.hidden_dim + self.hidden_dim


@dataclass(frozen=True)
class Hyperparameters:
    learning_rate: float
    epochs: int
    batch_size: int
    l2: float
    seed: int

    def __post_init__(self) -> None:
        # learning_rate 0 is legal: it makes training a no-op, which several
        # callers rely on as an identity check.
        if not (self.learning_rate >= 0.0 and math.isfinite(self.learning_rate)):
            raise ValueError("learning_rate must be finite and >= 0")
        if self.epochs < 1:
            raise ValueError("epochs must be >= 1")
        if self.batch_size < 1:
            raise ValueError("batch_size must be >= 1")
        if not (self.l2 >= 0.0 and math.isfinite(self.l2)):
            raise ValueError("l2 must be finite and >= 0")
        if not (0 <= self.seed < _MAX_SEED):
            raise ValueError("seed must fit in 64 bits")


@dataclass(frozen=True, eq=False)
class Dataset:
    """Feature matrix with integer labels in [0, num_classes)."""

    features: np.ndarray
    labels: np.ndarray
    num_classes: int

    def __post_init__(self) -> None:
        feats = np.asarray(self.features, dtype=np.float64)
        labs = np.asarray(self.labels, dtype=np.int64)
        if feats.ndim != 2:
            raise ValueError(f"features must be 2-D, got shape {feats.shape}")
        if labs.ndim != 1:
            raise ValueError("labels must be 1-D")
        if feats.shape[0] != labs.shape[0]:
            raise ValueError("features and labels disagree on sample count")
        if self.num_classes < 2:
            raise ValueError("num_classes must be >= 2")
        if not np.all(np.isfinite(feats)):
            raise ValueError("features contain non-finite entries")
        if labs.shape[0] and (labs.min() < 0 or labs.max() >= self.num_classes):
            raise ValueError("labels out of range")
        feats = feats.copy()
        labs = labs.copy()
        feats.setflags(write=False)
        labs.setflags(write=False)
        object.__setattr__(self, "features", feats)
        object.__setattr__(self, "labels", labs)

    def __len__(self) -> int:
        return int(self.labels.shape[0])


@dataclass(frozen=True)
class EvalReport:
    loss: float
    accuracy: float
    n_samples: int
    per_class_counts: tuple[int, ...]
    degenerate: bool = False


# ---------------------------------------------------------------------------
# parameter layout
# ---------------------------------------------------------------------------


def layer_shapes(arch: ArchDescriptor) -> list[tuple[tuple[int, int], int]]:
    """Per layer: (weight matrix shape, bias length), in canonical order."""
    if arch.kind == KIND_LOGISTIC:
        return [((arch.input_dim, arch.num_classes), arch.num_classes)]
    return [
        ((arch.input_dim, arch.hidden_dim), arch.hidden_dim),
        ((arch.hidden_dim, arch.num_classes), arch.num_classes),
    ]


def unpack(params: ParameterVector, arch: ArchDescriptor) -> list[tuple[np.ndarray, np.ndarray]]:
    """Split a flat vector into per-layer (weights, bias) read-only views."""
    if len(params) != arch.parameter_count:
        raise ValueError(
            f"parameter vector has {len(params)} entries, arch needs {arch.parameter_count}"
        )
    out = []
    flat = params.values
    pos = 0
    for (rows, cols), blen in layer_shapes(arch):
        w = flat[pos : pos + rows * cols].reshape(rows, cols)
        pos += rows * cols
        b = flat[pos : pos + blen]
        pos += blen
        out.append((w, b))
    return out


def pack(layers: list[tuple[np.ndarray, np.ndarray]]) -> ParameterVector:
    parts = []
    for w, b in layers:
        parts.append(np.asarray(w, dtype=np.float64).reshape(-1))
        parts.append(np.asarray(b, dtype=np.float64).reshape(-1))
    return ParameterVector(np.concatenate(parts))


def weight_mask(arch: ArchDescriptor) -> np.ndarray:
    """Boolean mask, True on weight-matrix coordinates, False on biases."""
    mask = np.zeros(arch.parameter_count, dtype=bool)
    pos = 0
    for (rows, cols), blen in layer_shapes(arch):
        mask[pos : pos + rows * cols] = True
        pos += rows * cols + blen
    return mask


def init_params(arch: ArchDescriptor, mode: str, seed: int = 0) -> ParameterVector:
    n = arch.parameter_count
    if mode == INIT_ZEROS:
        return ParameterVector(np.zeros(n))
    if mode == INIT_SEEDED_UNIFORM:
        rng = np.random.default_rng(seed)
        return ParameterVector(rng.uniform(-INIT_SPAN, INIT_SPAN, size=n))
    raise ValueError(f"unknown init mode {mode!r}")


# ---------------------------------------------------------------------------
# forward pass / loss / gradient
# ---------------------------------------------------------------------------


def _forward(params: ParameterVector, arch: ArchDescriptor, features: np.ndarray):
    """Returns (logits, hidden activations or None)."""
    x = np.asarray(features, dtype=np.float64)
    if x.ndim != 2 or x.shape[1] != arch.input_dim:
        raise ValueError(
            f"features shape {x.shape} incompatible with input_dim {arch.input_dim}"
        )
    layers = unpack(params, arch)
    if arch.kind == KIND_LOGISTIC:
        w, b = layers[0]
        return x @ w + b, None
    (w1, b1), (w2, b2) = layers
    hidden = np.tanh(x @ w1 + b1)
    return hidden @ w2 + b2, hidden


def predict(params: ParameterVector, arch: ArchDescriptor, features: np.ndarray) -> np.ndarray:
    """Per-row class probabilities via a max-shifted softmax."""
    logits, _ = _forward(params, arch, features)
    shifted = logits - logits.max(axis=1, keepdims=True)
    expd = np.exp(shifted)
    return expd / expd.sum(axis=1, keepdims=True)


def _per_sample_ce(params: ParameterVector, arch: ArchDescriptor, data: Dataset) -> np.ndarray:
    logits, _ = _forward(params, arch, data.features)
    m = logits.max(axis=1)
    lse = m + np.log(np.exp(logits - m[:, None]).sum(axis=1))
    true_logit = logits[np.arange(len(data)), data.labels]
    return lse - true_logit


def _penalty(params: ParameterVector, arch: ArchDescriptor, l2: float) -> float:
    if l2 == 0.0:
        return 0.0
    w = params.values[weight_mask(arch)]
    return 0.5 * l2 * float(w @ w)


def loss_and_gradient(
    params: ParameterVector,
    arch: ArchDescriptor,
    batch: Dataset,
    l2: float = 0.0,
) -> tuple[float, ParameterVector]:
    """Mean cross-entropy plus (l2/2)*||weights||^2 and its exact gradient.

    The quadratic penalty covers weight matrices only, never biases.
    """
    if len(batch) == 0:
        raise ValueError("empty batch")
    if batch.num_classes != arch.num_classes:
        raise ValueError("batch num_classes disagrees with arch")
    n = len(batch)
    x = batch.features
    logits, hidden = _forward(params, arch, x)
    shifted = logits - logits.max(axis=1, keepdims=True)
    expd = np.exp(shifted)
    probs = expd / expd.sum(axis=1, keepdims=True)

    loss = seq_sum(_per_sample_ce(params, arch, batch).tolist()) / n
    loss += _penalty(params, arch, l2)

    dlogits = probs.copy()
    dlogits[np.arange(n), batch.labels] -= 1.0
    dlogits /= n

    layers = unpack(params, arch)
    if arch.kind == KIND_LOGISTIC:
        (w, _b) = layers[0]
        gw = x.T @ dlogits
        if l2 != 0.0:
            gw = gw + l2 * w
        gb = dlogits.sum(axis=0)
        return loss, pack([(gw, gb)])

    (w1, _b1), (w2, _b2) = layers
    gw2 = hidden.T @ dlogits
    gb2 = dlogits.sum(axis=0)
    dhidden = dlogits @ w2.T
    dpre = dhidden * (1.0 - hidden * hidden)
    gw1 = x.T @ dpre
    gb1 = dpre.sum(axis=0)
    if l2 != 0.0:
        gw1 = gw1 + l2 * w1
        gw2 = gw2 + l2 * w2
    return loss, pack([(gw1, gb1), (gw2, gb2)])


def evaluate(params: ParameterVector, arch: ArchDescriptor, data: Dataset) -> EvalReport:
    """Mean cross-entropy and accuracy on the given data.

    Empty data yields a degenerate report (zero loss/accuracy) rather than an
    error. Argmax ties resolve to the lowest class index.
    """
    if data.num_classes != arch.num_classes:
        raise ValueError("data num_classes disagrees with arch")
    k = arch.num_classes
    if len(data) == 0:
        return EvalReport(0.0, 0.0, 0, tuple([0] * k), degenerate=True)
    n = len(data)
    ce = _per_sample_ce(params, arch, data)
    loss = seq_sum(ce.tolist()) / n
    logits, _ = _forward(params, arch, data.features)
    predicted = np.argmax(logits, axis=1)  # first max wins on ties
    hits = int(np.count_nonzero(predicted == data.labels))
    counts = np.bincount(data.labels, minlength=k)
    return EvalReport(loss, hits / n, n, tuple(int(c) for c in counts))


# ---------------------------------------------------------------------------
# training
# ---------------------------------------------------------------------------


def local_train(
    params: ParameterVector,
    arch: ArchDescriptor,
    data: Dataset,
    hp: Hyperparameters,
) -> ParameterVector:
    """Minibatch SGD over `data`, shuffled per epoch from hp.seed.

    Pure: equal inputs give bit-identical outputs. Batches are consecutive
    slices of the shuffled order; a short trailing batch is kept. A non-finite
    batch loss or gradient aborts with DivergenceError naming the epoch
    and batch.
    """
    n = len(data)
    if n == 0:
        raise ValueError("empty training data")
    if hp.batch_size > n:
        raise ValueError(f"batch_size {hp.batch_size} exceeds shard size {n}")
    rng = np.random.default_rng(hp.seed)
    current = params.values.copy()
    for epoch in range(hp.epochs):
        order = rng.permutation(n)
        for bi, start in enumerate(range(0, n, hp.batch_size)):
            idx = order[start : start + hp.batch_size]
            batch = Dataset(data.features[idx], data.labels[idx], data.num_classes)
            try:
                with np.errstate(over="ignore", invalid="ignore"):
                    loss, grad = loss_and_gradient(
                        ParameterVector(current), arch, batch, l2=hp.l2
                    )
            except ValueError:
                # overflowed logits poison the gradient before any check here
                raise DivergenceError(
                    f"non-finite gradient at epoch {epoch + 1} batch {bi + 1}"
                ) from None
            if not math.isfinite(loss):
                raise DivergenceError(
                    f"non-finite loss at epoch {epoch + 1} batch {bi + 1}"
                )
            with np.errstate(over="ignore", invalid="ignore"):
                current = current - hp.learning_rate * grad.values
            if not np.all(np.isfinite(current)):
                raise DivergenceError(
                    f"non-finite parameters at epoch {epoch + 1} batch {bi + 1}"
                )
    return ParameterVector(current)


# ---------------------------------------------------------------------------
# gradient checking
# ---------------------------------------------------------------------------


def central_difference(f: Callable[[np.ndarray], float], w: np.ndarray, eps: float) -> np.ndarray:
    """Central finite differences of scalar f at w: (f(w+e) - f(w-e)) / 2e."""
    if eps <= 0.0:
        raise ValueError("eps must be > 0")
    w = np.asarray(w, dtype=np.float64)
    out = np.empty_like(w)
    for i in range(w.shape[0]):
        hi = w.copy()
        lo = w.copy()
        hi[i] += eps
        lo[i] -= eps
        out[i] = (f(hi) - f(lo)) / (2.0 * eps)
    return out


def finite_difference_gradient(
    params: ParameterVector,
    arch: ArchDescriptor,
    batch: Dataset,
    eps: float,
    l2: float = 0.0,
) -> ParameterVector:
    """Numerical gradient of the training objective, for checking the exact one."""

    def objective(w: np.ndarray) -> float:
        pv = ParameterVector(w)
        ce = seq_sum(_per_sample_ce(pv, arch, batch).tolist()) / len(batch)
        return ce + _penalty(pv, arch, l2)

    if len(batch) == 0:
        raise ValueError("empty batch")
    return ParameterVector(central_difference(objective, params.values, eps))


# ---------------------------------------------------------------------------
# checkpoints
# ---------------------------------------------------------------------------


def save_checkpoint(path: str | Path, params: ParameterVector, arch: ArchDescriptor) -> None:
    """JSON checkpoint {arch, values}; floats keep shortest round-trip form."""
    doc = {
        "arch": {
            "kind": arch.kind,
            "input_dim": arch.input_dim,
            "hidden_dim": arch.hidden_dim,
            "num_classes": arch.num_classes,
        },
        "values": params.values.tolist(),
    }
    Path(path).write_text(json.dumps(doc) + "\n", encoding="utf-8")


def load_checkpoint(path: str | Path) -> tuple[ParameterVector, ArchDescriptor]:
    doc = json.loads(Path(path).read_text(encoding="utf-8"))
    arch = ArchDescriptor(
        kind=doc["arch"]["kind"],
        input_dim=int(doc["arch"]["input_dim"]),
        hidden_dim=int(doc["arch"]["hidden_dim"]),
        num_classes=int(doc["arch"]["num_classes"]),
    )
    params = ParameterVector(np.asarray(doc["values"], dtype=np.float64))
    if len(params) != arch.parameter_count:
        raise ValueError("checkpoint value count disagrees with arch")
    return params, arch
