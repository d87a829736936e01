"""Dense ReLU MLPs: forward pass, loss, SGD, particle views and checkpoints.

Conventions
-----------
* Data matrices are ``features x samples`` (a ``d0 x N`` matrix ``X``).
* Layer ``k`` (1-based, ``1 <= k <= L``) has weight matrix ``W_k`` of shape
  ``d_k x (d_{k-1} + 1)``; the last column is the bias, applied by appending
  a constant-one row to the layer input.
* A hidden neuron of layer ``k`` is a *particle* ``(b, l, c)``: its bias, its
  incoming weights (row of ``W_k`` without the bias) and its outgoing weights
  (column of ``W_{k+1}``).
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass
from pathlib import Path
from typing import Callable, Iterator, Sequence

import numpy as np

from modeconnect.ndmath import autodiff as ad
from modeconnect.ndmath.random import make_rng

CHECKPOINT_VERSION = 1


class ShapeError(ValueError):
    pass


class TrainingDivergedError(ArithmeticError):
    def __init__(self, epoch: int, loss: float):
        super().__init__(f"training diverged at epoch {epoch} (loss={loss})")
        self.epoch = epoch
        self.loss = loss


class CheckpointError(ValueError):
    def __init__(self, message: str, offset: int = 0):
        super().__init__(f"{message} (byte offset {offset})")
        self.offset = offset


@dataclass(frozen=True)
class MlpSpec:
    layer_sizes: tuple[int, ...]

    def __post_init__(self):
        sizes = tuple(int(s) for s in self.layer_sizes)
        if len(sizes) < 2:
            raise ValueError("an MLP needs at least an input and an output size")
        if min(sizes) < 1:
            raise ValueError(f"layer sizes must be positive, got {sizes}")
        object.__setattr__(self, "layer_sizes", sizes)

    @property
    def depth(self) -> int:
        """Number of weight layers ``L``."""
        return len(self.layer_sizes) - 1

    def layer_shape(self, k: int) -> tuple[int, int]:
        return self.layer_sizes[k], self.layer_sizes[k - 1] + 1


class WeightVector:
    """Immutable sequence of layer matrices ``W_1 .. W_L`` (0-based storage)."""

    __slots__ = ("_layers",)

    def __init__(self, layers: Sequence[np.ndarray]):
        mats = []
        for i, w in enumerate(layers):
            w = np.array(w, dtype=np.float64)
            if w.ndim != 2:
                raise ShapeError(f"layer {i + 1} must be a matrix, got shape {w.shape}")
            w.flags.writeable = False
            mats.append(w)
        for i in range(1, len(mats)):
            if mats[i].shape[1] != mats[i - 1].shape[0] + 1:
                raise ShapeError(
                    f"layer {i + 1} expects {mats[i].shape[1] - 1} inputs "
                    f"but layer {i} has {mats[i - 1].shape[0]} outputs"
                )
        self._layers = tuple(mats)

    @property
    def layers(self) -> tuple[np.ndarray, ...]:
        return self._layers

    def __len__(self):
        return len(self._layers)

    def __iter__(self) -> Iterator[np.ndarray]:
        return iter(self._layers)

    def layer(self, k: int) -> np.ndarray:
        """Matrix ``W_k`` for 1-based ``k``."""
        if not 1 <= k <= len(self._layers):
            raise IndexError(f"layer {k} out of range 1..{len(self._layers)}")
        return self._layers[k - 1]

    @property
    def layer_sizes(self) -> tuple[int, ...]:
        return (self._layers[0].shape[1] - 1,) + tuple(w.shape[0] for w in self._layers)

    @property
    def spec(self) -> MlpSpec:
        return MlpSpec(self.layer_sizes)

    def replace(self, **layers: np.ndarray) -> "WeightVector":
        """Copy with some layers swapped, e.g. ``w.replace(W2=m)``."""
        mats = list(self._layers)
        for name, value in layers.items():
            mats[int(name[1:]) - 1] = value
        return WeightVector(mats)

    def with_layers(self, updates: dict[int, np.ndarray]) -> "WeightVector":
        mats = list(self._layers)
        for k, value in updates.items():
            mats[k - 1] = value
        return WeightVector(mats)

    def flat(self) -> np.ndarray:
        return np.concatenate([w.ravel() for w in self._layers])

    def equals(self, other: "WeightVector") -> bool:
        """Bit-exact equality."""
        return len(self) == len(other) and all(
            a.shape == b.shape and np.array_equal(a, b) for a, b in zip(self, other)
        )

    def max_abs_diff(self, other: "WeightVector") -> float:
        return max(float(np.max(np.abs(a - b))) for a, b in zip(self, other))

    def __repr__(self):
        return f"WeightVector(layer_sizes={self.layer_sizes})"


def lerp(a: WeightVector, b: WeightVector, t: float) -> WeightVector:
    """``(1-t) a + t b`` layer by layer, exact at ``t`` in {0, 1}."""
    check_same_architecture(a, b)
    if t == 0.0:
        return a
    if t == 1.0:
        return b
    return WeightVector([(1.0 - t) * x + t * y for x, y in zip(a, b)])


def check_same_architecture(a: WeightVector, b: WeightVector) -> None:
    if a.layer_sizes != b.layer_sizes:
        raise ShapeError(f"architecture mismatch: {a.layer_sizes} vs {b.layer_sizes}")


def check_spec(spec: MlpSpec, w: WeightVector) -> None:
    if len(w) != spec.depth:
        raise ShapeError(f"spec has {spec.depth} layers, weights have {len(w)}")
    for k in range(1, spec.depth + 1):
        if w.layer(k).shape != spec.layer_shape(k):
            raise ShapeError(
                f"layer {k}: expected shape {spec.layer_shape(k)}, got {w.layer(k).shape}"
            )


@dataclass(frozen=True)
class Dataset:
    features: np.ndarray  # d0 x N
    labels: np.ndarray  # N class indices
    classes: int | None = None

    def __post_init__(self):
        x = np.asarray(self.features, dtype=np.float64)
        y = np.asarray(self.labels, dtype=np.int64)
        if x.ndim != 2 or y.ndim != 1 or x.shape[1] != y.shape[0]:
            raise ShapeError(f"features {x.shape} and labels {y.shape} disagree")
        classes = int(y.max()) + 1 if self.classes is None and y.size else self.classes
        if y.size and (y.min() < 0 or (classes is not None and y.max() >= classes)):
            raise ValueError("labels out of range")
        object.__setattr__(self, "features", x)
        object.__setattr__(self, "labels", y)
        object.__setattr__(self, "classes", classes)

    def __len__(self):
        return self.labels.shape[0]

    @property
    def dim(self) -> int:
        return self.features.shape[0]

    def subset(self, index) -> "Dataset":
        return Dataset(self.features[:, index], self.labels[index], self.classes)


# --- forward pass and loss ------------------------------------------------


def augment(x):
    """Append the constant-one bias row to a ``features x samples`` matrix."""
    n = ad._val(x).shape[1]
    return ad.concat([x, np.ones((1, n))], axis=0)


def activations(w: WeightVector, x: np.ndarray, upto: int | None = None) -> list[np.ndarray]:
    """Layer inputs ``[X_0, X_1, ..., X_upto]`` (without the bias row).

    ``X_j`` is the ReLU output of hidden layer ``j``; ``X_0`` is ``x``.
    """
    upto = len(w) - 1 if upto is None else upto
    outs = [np.asarray(x, dtype=np.float64)]
    h = outs[0]
    for k in range(1, upto + 1):
        h = np.maximum(w.layer(k) @ augment(h), 0.0)
        outs.append(h)
    return outs


def forward_from(w: WeightVector, h, start: int):
    """Run layers ``start..L`` on ``h`` (the input to layer ``start``).

    Works on arrays or autodiff values, with ``w`` given as a WeightVector or
    a plain sequence of (possibly traced) matrices.
    """
    layers = w.layers if isinstance(w, WeightVector) else tuple(w)
    depth = len(layers)
    for k in range(start, depth + 1):
        h = layers[k - 1] @ augment(h)
        if k < depth:
            h = ad.relu(h)
    return h


def forward(spec: MlpSpec, w: WeightVector, x: np.ndarray) -> np.ndarray:
    """Logits ``W_L phi(... phi(W_1 [x; 1]) ...)``, classes x samples."""
    check_spec(spec, w)
    x = np.asarray(x, dtype=np.float64)
    if x.ndim != 2 or x.shape[0] != spec.layer_sizes[0]:
        raise ShapeError(f"layer 1 expects {spec.layer_sizes[0]} input features, got {x.shape}")
    return forward_from(w, x, 1)


def cross_entropy(logits: np.ndarray, labels) -> float:
    logits = np.asarray(logits, dtype=np.float64)
    labels = np.asarray(labels, dtype=np.int64)
    classes, n = logits.shape
    if classes < 2:
        raise ValueError("cross-entropy needs at least two classes")
    if labels.shape != (n,):
        raise ShapeError(f"{n} logit columns but {labels.shape} labels")
    if labels.size and (labels.min() < 0 or labels.max() >= classes):
        raise ValueError("label out of range")
    return float(ad.cross_entropy(logits, labels))


def accuracy(logits: np.ndarray, labels) -> float:
    return float(np.mean(np.argmax(logits, axis=0) == np.asarray(labels)))


def evaluate_weights(spec: MlpSpec, w: WeightVector, data: Dataset) -> tuple[float, float]:
    """``(loss, accuracy)`` of ``w`` on ``data``."""
    logits = forward(spec, w, data.features)
    return cross_entropy(logits, data.labels), accuracy(logits, data.labels)


# --- training -------------------------------------------------------------


def init_weights(spec: MlpSpec, rng: np.random.Generator) -> WeightVector:
    """He-normal weights, zero biases."""
    layers = []
    for k in range(1, spec.depth + 1):
        rows, cols = spec.layer_shape(k)
        fan_in = cols - 1
        w = np.zeros((rows, cols))
        w[:, :-1] = rng.standard_normal((rows, fan_in)) * math.sqrt(2.0 / fan_in)
        layers.append(w)
    return WeightVector(layers)


@dataclass(frozen=True)
class SgdConfig:
    lr: float = 0.01
    batch: int = 128
    epochs: int = 30
    seed: int = 0

    def __post_init__(self):
        if self.lr < 0 or self.batch < 1 or self.epochs < 0:
            raise ValueError(f"invalid SGD config {self}")


def loss_and_grads(w: Sequence[np.ndarray], x: np.ndarray, labels: np.ndarray):
    tape = ad.Tape()
    params = [tape.leaf(m) for m in w]
    loss = ad.cross_entropy(forward_from(params, x, 1), labels)
    return float(loss.value), ad.grad(tape, loss, params)


def train_sgd(
    spec: MlpSpec,
    data: Dataset,
    config: SgdConfig,
    init: WeightVector | None = None,
    on_epoch: Callable[[int, float], None] | None = None,
) -> WeightVector:
    """Plain minibatch SGD on cross-entropy, deterministic given the seed.

    One shuffling permutation per epoch is drawn from the run's stream.
    ``on_epoch(epoch, mean_loss)`` is called after every epoch.
    """
    rng = make_rng(config.seed)
    w = init_weights(spec, rng) if init is None else init
    check_spec(spec, w)
    params = [m.copy() for m in w]
    n = len(data)
    for epoch in range(1, config.epochs + 1):
        order = rng.permutation(n)
        total = 0.0
        for start in range(0, n, config.batch):
            idx = order[start:start + config.batch]
            loss, grads = loss_and_grads(params, data.features[:, idx], data.labels[idx])
            if not math.isfinite(loss):
                raise TrainingDivergedError(epoch, loss)
            total += loss * len(idx)
            if config.lr:
                for p, g in zip(params, grads):
                    p -= config.lr * g
        if on_epoch is not None:
            on_epoch(epoch, total / n)
    return WeightVector(params)


# --- particles ------------------------------------------------------------


def _check_hidden(w: WeightVector, k: int) -> None:
    if not 1 <= k <= len(w) - 1:
        raise IndexError(f"hidden layer {k} out of range 1..{len(w) - 1}")


def particle_dim(w: WeightVector, k: int) -> int:
    _check_hidden(w, k)
    return 1 + w.layer(k).shape[1] - 1 + w.layer(k + 1).shape[0]


def split_particles(particles: np.ndarray, fan_in: int):
    """Views ``(b, l, c)`` of a particle matrix (one particle per row)."""
    return particles[:, 0], particles[:, 1:1 + fan_in], particles[:, 1 + fan_in:]


def to_particles(w: WeightVector, k: int) -> np.ndarray:
    """Particles of hidden layer ``k`` as an ``n x D`` matrix, rows ``(b, l, c)``."""
    _check_hidden(w, k)
    wk, wnext = w.layer(k), w.layer(k + 1)
    return np.hstack([wk[:, -1:], wk[:, :-1], wnext[:, :-1].T])


def from_particles(particles, template: WeightVector, k: int) -> WeightVector:
    """Inject particles into hidden layer ``k`` of ``template``.

    The bias column of ``W_{k+1}`` and all other layers come from the template.
    """
    _check_hidden(template, k)
    p = np.asarray(particles, dtype=np.float64)
    n = template.layer(k).shape[0]
    if p.ndim != 2 or p.shape[0] == 0:
        raise ShapeError("need a non-empty particle matrix")
    dim = particle_dim(template, k)
    if p.shape != (n, dim):
        raise ShapeError(f"expected {n} particles of dimension {dim}, got {p.shape}")
    fan_in = template.layer(k).shape[1] - 1
    b, l, c = split_particles(p, fan_in)
    wk = np.hstack([l, b[:, None]])
    wnext = np.hstack([c.T, template.layer(k + 1)[:, -1:]])
    return template.with_layers({k: wk, k + 1: wnext})


# --- checkpoints ----------------------------------------------------------


def weights_to_json(w: WeightVector) -> dict:
    return {
        "format_version": CHECKPOINT_VERSION,
        "layer_sizes": list(w.layer_sizes),
        # float repr is the shortest string that round-trips bit-exactly
        "layers": [m.tolist() for m in w],
    }


def weights_from_json(doc: dict) -> WeightVector:
    try:
        if doc["format_version"] != CHECKPOINT_VERSION:
            raise CheckpointError(f"unsupported format_version {doc['format_version']}")
        w = WeightVector([np.array(m, dtype=np.float64) for m in doc["layers"]])
    except (KeyError, TypeError, ValueError) as exc:
        if isinstance(exc, CheckpointError):
            raise
        raise CheckpointError(f"malformed checkpoint: {exc!r}") from exc
    if list(w.layer_sizes) != list(doc["layer_sizes"]):
        raise CheckpointError("layer_sizes do not match the stored layers")
    return w


def save_checkpoint(w: WeightVector, path) -> None:
    Path(path).write_text(json.dumps(weights_to_json(w)))


def load_checkpoint(path) -> WeightVector:
    text = Path(path).read_bytes().decode("utf-8")
    try:
        doc = json.loads(text)
    except json.JSONDecodeError as exc:
        raise CheckpointError(f"cannot parse checkpoint: {exc.msg}", len(text[:exc.pos].encode())) from exc
    return weights_from_json(doc)
