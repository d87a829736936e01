"""Multi-leg connection paths in weight space and their evaluation."""

from __future__ import annotations

import csv
import json
from dataclasses import dataclass, field
from typing import Callable, Iterable, Sequence

import numpy as np

from modeconnect.netcore import (
    Dataset,
    MlpSpec,
    ShapeError,
    WeightVector,
    accuracy,
    check_same_architecture,
    check_spec,
    cross_entropy,
    forward,
    lerp,
)

DEFAULT_POINTS_PER_LEG = 25
CSV_SCHEMA = "# modeconnect path report v1"


def _check_t(t: float) -> float:
    t = float(t)
    if not 0.0 <= t <= 1.0:
        raise ValueError(f"t={t} outside [0, 1]")
    return t


class PathLeg:
    """A curve ``[0, 1] -> WeightVector`` with exact endpoints.

    Subclasses implement :meth:`_interior` for ``0 < t < 1``.
    """

    def __init__(self, start: WeightVector, end: WeightVector, method: str = "", layers: Sequence[int] = ()):
        check_same_architecture(start, end)
        self.start = start
        self.end = end
        self.method = method
        self.layers = tuple(layers)

    def at(self, t: float) -> WeightVector:
        t = _check_t(t)
        if t == 0.0:
            return self.start
        if t == 1.0:
            return self.end
        return self._interior(t)

    def _interior(self, t: float) -> WeightVector:
        raise NotImplementedError

    def logits(self, spec: MlpSpec, x: np.ndarray, ts: Iterable[float], context: dict | None = None) -> list[np.ndarray]:
        """Network outputs at each ``t``; legs may override with a cheaper route.

        ``context`` is scratch space shared by the legs of one evaluation.
        """
        return [forward(spec, self.at(t), x) for t in ts]

    def __repr__(self):
        return f"{type(self).__name__}(method={self.method!r}, layers={self.layers})"


class LinearLeg(PathLeg):
    def _interior(self, t):
        return lerp(self.start, self.end, t)


class FunctionLeg(PathLeg):
    """Closed-form leg given by an evaluator ``fn(t)``; endpoints are forced."""

    def __init__(self, fn: Callable[[float], WeightVector], start, end, method="", layers=()):
        super().__init__(start, end, method, layers)
        self.fn = fn

    def _interior(self, t):
        return self.fn(t)


class PolylineLeg(PathLeg):
    """Piecewise-linear curve through breakpoints at uniformly spaced ``t``."""

    def __init__(self, breakpoints: Sequence[WeightVector], method="", layers=()):
        if len(breakpoints) < 2:
            raise ValueError("a polyline needs at least two breakpoints")
        super().__init__(breakpoints[0], breakpoints[-1], method, layers)
        for bp in breakpoints[1:-1]:
            check_same_architecture(self.start, bp)
        self.breakpoints = tuple(breakpoints)

    @property
    def knots(self) -> np.ndarray:
        return np.linspace(0.0, 1.0, len(self.breakpoints))

    def _interior(self, t):
        segments = len(self.breakpoints) - 1
        pos = t * segments
        i = min(int(np.floor(pos)), segments - 1)
        local = pos - i
        return lerp(self.breakpoints[i], self.breakpoints[i + 1], local)


@dataclass
class ConnectionPath:
    legs: list[PathLeg]
    method: str = ""
    info: dict = field(default_factory=dict)

    def __post_init__(self):
        if not self.legs:
            raise ValueError("a path needs at least one leg")
        for i in range(len(self.legs) - 1):
            a, b = self.legs[i].end, self.legs[i + 1].start
            if a is not b and not a.equals(b):
                raise ValueError(f"legs {i} and {i + 1} are not continuous")

    @property
    def start(self) -> WeightVector:
        return self.legs[0].start

    @property
    def end(self) -> WeightVector:
        return self.legs[-1].end

    def __len__(self):
        return len(self.legs)

    def boundaries(self) -> list[WeightVector]:
        """Start point followed by the end point of every leg."""
        return [self.start] + [leg.end for leg in self.legs]


def chain(parts: Sequence[ConnectionPath | PathLeg], method: str = "") -> ConnectionPath:
    legs: list[PathLeg] = []
    for p in parts:
        legs.extend(p.legs if isinstance(p, ConnectionPath) else [p])
    return ConnectionPath(legs, method)


def eval_point(path: ConnectionPath, leg: int, t: float) -> WeightVector:
    if not 0 <= leg < len(path.legs):
        raise IndexError(f"leg {leg} out of range 0..{len(path.legs) - 1}")
    return path.legs[leg].at(t)


@dataclass(frozen=True)
class GridRow:
    leg: int
    t: float
    global_t: float
    loss: float
    accuracy: float


@dataclass
class PathReport:
    rows: list[GridRow]
    method: str = ""
    summary: dict = field(default_factory=dict)

    def __post_init__(self):
        if not self.summary:
            self.summary = self._summarize()

    def _summarize(self) -> dict:
        accs = np.array([r.accuracy for r in self.rows])
        losses = np.array([r.loss for r in self.rows])
        worst = int(np.argmin(accs))
        return {
            "method": self.method,
            "worst_accuracy": float(accs[worst]),
            "worst_loss": float(losses.max()),
            "argworst_global_t": self.rows[worst].global_t,
            "endpoints_accuracy": [self.rows[0].accuracy, self.rows[-1].accuracy],
        }

    @property
    def worst_accuracy(self) -> float:
        return self.summary["worst_accuracy"]

    @property
    def worst_loss(self) -> float:
        return self.summary["worst_loss"]

    def write_csv(self, path) -> None:
        with open(path, "w", newline="") as fh:
            fh.write(CSV_SCHEMA + "\n")
            writer = csv.writer(fh)
            writer.writerow(["leg", "t", "global_t", "loss", "accuracy"])
            for r in self.rows:
                writer.writerow([r.leg, repr(r.t), repr(r.global_t), repr(r.loss), repr(r.accuracy)])

    def write_json(self, path) -> None:
        with open(path, "w") as fh:
            json.dump(self.summary, fh, indent=2)


def evaluate(
    path: ConnectionPath,
    spec: MlpSpec,
    data: Dataset,
    points_per_leg: int = DEFAULT_POINTS_PER_LEG,
) -> PathReport:
    """Loss and accuracy on a uniform per-leg grid, shared boundaries counted once."""
    if points_per_leg < 2:
        raise ValueError("points_per_leg must be at least 2")
    try:
        check_spec(spec, path.start)
    except ShapeError as exc:
        raise ShapeError(f"path weights do not match the network spec: {exc}") from exc
    ts = np.linspace(0.0, 1.0, points_per_leg)
    rows = []
    context: dict = {}
    for i, leg in enumerate(path.legs):
        leg_ts = ts if i == 0 else ts[1:]
        for t, logits in zip(leg_ts, leg.logits(spec, data.features, leg_ts, context)):
            rows.append(GridRow(
                i, float(t), float(i + t),
                cross_entropy(logits, data.labels), accuracy(logits, data.labels),
            ))
    return PathReport(rows, path.method)
