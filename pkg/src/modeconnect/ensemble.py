"""WA-ensembles: one shared backbone, per-member adjusted layer and head.

``WA(n)`` adjusts the ``n``-th layer counted from the output.  Every
member's weights for that layer are re-expressed on the backbone's features
``F_1`` by ``W_k F_k F_1^+``; predictions average the members' logits.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from modeconnect.connect_wa import adjust_layer
from modeconnect.ndmath.linalg import DEFAULT_RCOND
from modeconnect.netcore import (
    ShapeError,
    WeightVector,
    activations,
    augment,
    check_same_architecture,
    forward_from,
)

ENSEMBLE_FORMAT_VERSION = 1


@dataclass
class WaEnsemble:
    backbone: tuple[np.ndarray, ...]  # layers 1 .. split-1 of the backbone model
    split: int  # n, counted from the last layer
    adjusted: list[np.ndarray]  # per member: adjusted weights of layer L-n+1
    heads: list[tuple[np.ndarray, ...]]  # per member: layers L-n+2 .. L
    input_dim: int
    backbone_evals: int = field(default=0, compare=False)

    @property
    def members(self) -> int:
        return len(self.adjusted)

    @property
    def depth(self) -> int:
        return len(self.backbone) + 1 + len(self.heads[0])

    @property
    def adjusted_layer(self) -> int:
        """1-based index of the adjusted layer."""
        return len(self.backbone) + 1

    def features(self, x: np.ndarray) -> np.ndarray:
        """Augmented backbone output ``[F_1; 1]``."""
        x = np.asarray(x, dtype=np.float64)
        if x.ndim != 2 or x.shape[0] != self.input_dim:
            raise ShapeError(f"expected {self.input_dim} input features, got shape {x.shape}")
        self.backbone_evals += 1
        h = x
        for w in self.backbone:
            h = np.maximum(w @ augment(h), 0.0)
        return augment(h)

    def member_logits(self, x: np.ndarray) -> list[np.ndarray]:
        f = self.features(x)
        return [self._head(m, f) for m in range(self.members)]

    def _head(self, m: int, f: np.ndarray) -> np.ndarray:
        z = self.adjusted[m] @ f
        if not self.heads[m]:
            return z
        layers = (None,) * self.adjusted_layer + tuple(self.heads[m])
        return forward_from(layers, np.maximum(z, 0.0), self.adjusted_layer + 1)

    def averaged_last_layer(self) -> np.ndarray:
        """With the last layer adjusted the members collapse into one averaged matrix."""
        if self.split != 1:
            raise ValueError("weights can only be averaged when the last layer is adjusted")
        return np.mean(self.adjusted, axis=0)

    def to_json(self) -> dict:
        return {
            "format_version": ENSEMBLE_FORMAT_VERSION,
            "split": self.split,
            "input_dim": self.input_dim,
            "backbone": [w.tolist() for w in self.backbone],
            "adjusted": [w.tolist() for w in self.adjusted],
            "heads": [[w.tolist() for w in h] for h in self.heads],
        }

    @classmethod
    def from_json(cls, doc: dict) -> "WaEnsemble":
        if doc.get("format_version") != ENSEMBLE_FORMAT_VERSION:
            raise ValueError(f"unsupported ensemble format {doc.get('format_version')!r}")
        arr = lambda m: np.array(m, dtype=np.float64)  # noqa: E731
        return cls(
            backbone=tuple(arr(w) for w in doc["backbone"]),
            split=int(doc["split"]),
            adjusted=[arr(w) for w in doc["adjusted"]],
            heads=[tuple(arr(w) for w in h) for h in doc["heads"]],
            input_dim=int(doc["input_dim"]),
        )

    def save(self, path) -> None:
        Path(path).write_text(json.dumps(self.to_json()))

    @classmethod
    def load(cls, path) -> "WaEnsemble":
        return cls.from_json(json.loads(Path(path).read_text()))


def build_wa_ensemble(
    models: Sequence[WeightVector],
    split: int,
    x: np.ndarray,
    rcond: float = DEFAULT_RCOND,
    backbone_index: int = 0,
) -> WaEnsemble:
    """WA(split) ensemble with ``models[backbone_index]`` as the shared backbone."""
    if not models:
        raise ValueError("need at least one model")
    ref = models[backbone_index]
    for m in models:
        check_same_architecture(ref, m)
    depth = len(ref)
    if not 1 <= split <= depth:
        raise ValueError(f"split {split} out of range 1..{depth}")
    k = depth - split + 1  # adjusted layer
    x = np.asarray(x, dtype=np.float64)
    f_ref = augment(activations(ref, x, upto=k - 1)[-1])
    adjusted, heads = [], []
    for m in models:
        if m is ref:
            # already expressed on its own features
            adjusted.append(np.array(m.layer(k)))
        else:
            f_m = augment(activations(m, x, upto=k - 1)[-1])
            adjusted.append(adjust_layer(m.layer(k), f_m, f_ref, rcond))
        heads.append(tuple(m.layer(j) for j in range(k + 1, depth + 1)))
    return WaEnsemble(
        backbone=tuple(ref.layer(j) for j in range(1, k)),
        split=split,
        adjusted=adjusted,
        heads=heads,
        input_dim=ref.layer_sizes[0],
    )


def ensemble_predict(e: WaEnsemble, x: np.ndarray) -> np.ndarray:
    """Mean of the members' adjusted logits; the backbone runs once."""
    return np.mean(e.member_logits(x), axis=0)


def independent_predict_proba(models: Sequence[WeightVector], x: np.ndarray) -> np.ndarray:
    """Baseline ensemble: mean softmax of the unmodified members."""
    probs = []
    for m in models:
        z = forward_from(m, np.asarray(x, dtype=np.float64), 1)
        z = z - z.max(axis=0, keepdims=True)
        p = np.exp(z)
        probs.append(p / p.sum(axis=0, keepdims=True))
    return np.mean(probs, axis=0)

