"""Closed-form connections: Linear, Arc and the general invertible-map arc.

Each hidden neuron (particle) or weight-matrix row is treated as a sample
from a common distribution; the connection is applied row by row.
Parameters that belong to no particle (the output-layer bias column) move
linearly.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Callable, Protocol, Sequence

import numpy as np

from modeconnect.netcore import (
    ShapeError,
    WeightVector,
    check_same_architecture,
    from_particles,
    lerp,
    to_particles,
)
from modeconnect.paths import ConnectionPath, FunctionLeg, LinearLeg

Mixer = Callable[[np.ndarray, np.ndarray, float], np.ndarray]


class InvertibleMapLike(Protocol):
    def transform(self, x: np.ndarray) -> np.ndarray: ...

    def inverse(self, y: np.ndarray) -> np.ndarray: ...


@dataclass(frozen=True)
class InvertibleMap:
    """Wraps a pair of callables as a map usable by :func:`nu_connect`."""

    transform: Callable[[np.ndarray], np.ndarray]
    inverse: Callable[[np.ndarray], np.ndarray]


IDENTITY_MAP = InvertibleMap(lambda x: x, lambda y: y)


@dataclass(frozen=True)
class CenterEstimate:
    mu: np.ndarray
    source: str = "endpoint-particles"  # or "model-set", "zero"


def estimate_center(*particle_sets: np.ndarray, source: str = "endpoint-particles") -> CenterEstimate:
    """Coordinate-wise mean over the union of the given particle sets."""
    sets = [np.atleast_2d(np.asarray(s, dtype=np.float64)) for s in particle_sets]
    sets = [s for s in sets if s.size]
    if not sets:
        raise ValueError("need at least one particle")
    dims = {s.shape[1] for s in sets}
    if len(dims) != 1:
        raise ShapeError(f"particle dimensions disagree: {sorted(dims)}")
    stacked = np.vstack(sets)
    return CenterEstimate(stacked.mean(axis=0), source)


def arc_weights(t: float) -> tuple[float, float]:
    return math.cos(0.5 * math.pi * t), math.sin(0.5 * math.pi * t)


def linear_mix(x, y, t):
    return (1.0 - t) * x + t * y


def arc_mixer(mu) -> Mixer:
    mu = np.asarray(mu, dtype=np.float64)

    def mix(x, y, t):
        c, s = arc_weights(t)
        return mu + c * (x - mu) + s * (y - mu)

    return mix


def nu_mixer(nu: InvertibleMapLike) -> Mixer:
    def mix(x, y, t):
        zx, zy = nu.transform(x), nu.transform(y)
        if not (np.all(np.isfinite(zx)) and np.all(np.isfinite(zy))):
            raise FloatingPointError("invertible map produced non-finite output")
        c, s = arc_weights(t)
        out = nu.inverse(c * zx + s * zy)
        if not np.all(np.isfinite(out)):
            raise FloatingPointError("inverse map produced non-finite output")
        return out

    return mix


def particle_leg(start: WeightVector, end: WeightVector, k: int, mixer: Mixer, method: str) -> FunctionLeg:
    """Leg moving the particles of hidden layer ``k`` with ``mixer``.

    Everything outside those particles (other layers and the bias column of
    ``W_{k+1}``) is interpolated linearly.
    """
    check_same_architecture(start, end)
    pa, pb = to_particles(start, k), to_particles(end, k)

    def at(t):
        return from_particles(mixer(pa, pb, t), lerp(start, end, t), k)

    return FunctionLeg(at, start, end, method, layers=(k, k + 1))


def rows_leg(start: WeightVector, end: WeightVector, mixers: dict[int, Mixer], method: str) -> FunctionLeg:
    """Leg moving the rows of each layer ``k`` in ``mixers`` with its mixer; other layers linear."""
    check_same_architecture(start, end)

    def at(t):
        mats = []
        for k, (a, b) in enumerate(zip(start, end), start=1):
            mats.append(mixers.get(k, linear_mix)(a, b, t))
        return WeightVector(mats)

    return FunctionLeg(at, start, end, method, layers=tuple(sorted(mixers)))


def linear_connect(a: WeightVector, b: WeightVector) -> ConnectionPath:
    check_same_architecture(a, b)
    return ConnectionPath([LinearLeg(a, b, "linear", layers=range(1, len(a) + 1))], "linear")


def _resolve_mode(a: WeightVector, mode: str) -> str:
    if mode == "auto":
        return "particle" if len(a) == 2 else "rows"
    if mode not in ("particle", "rows"):
        raise ValueError(f"unknown arc mode {mode!r}")
    return mode


def arc_connect(
    a: WeightVector,
    b: WeightVector,
    mu: CenterEstimate | np.ndarray | Sequence[np.ndarray] | None = None,
    mode: str = "auto",
    k: int = 1,
) -> ConnectionPath:
    """Arc connection ``mu + cos(pi t/2)(X - mu) + sin(pi t/2)(Y - mu)``.

    ``mode="particle"`` mixes the particles of hidden layer ``k`` with one
    center; ``mode="rows"`` mixes the rows of every weight matrix with a
    per-layer center (``mu`` then is a sequence, one vector per layer).
    ``"auto"`` picks particles for one-hidden-layer nets and rows otherwise.
    """
    check_same_architecture(a, b)
    mode = _resolve_mode(a, mode)
    if mode == "particle":
        pa, pb = to_particles(a, k), to_particles(b, k)
        if mu is None:
            mu = estimate_center(pa, pb)
        center = mu.mu if isinstance(mu, CenterEstimate) else np.asarray(mu, dtype=np.float64)
        if center.shape != (pa.shape[1],):
            raise ShapeError(f"center has shape {center.shape}, particles have dimension {pa.shape[1]}")
        leg = particle_leg(a, b, k, arc_mixer(center), "arc")
        return ConnectionPath([leg], "arc")

    if mu is None:
        centers = [estimate_center(wa, wb).mu for wa, wb in zip(a, b)]
    else:
        centers = [m.mu if isinstance(m, CenterEstimate) else np.asarray(m, dtype=np.float64) for m in mu]
    if len(centers) != len(a):
        raise ShapeError(f"need one center per layer ({len(a)}), got {len(centers)}")
    for i, (c, w) in enumerate(zip(centers, a), start=1):
        if c.shape != (w.shape[1],):
            raise ShapeError(f"layer {i}: center shape {c.shape} vs row length {w.shape[1]}")
    mixers = {i: arc_mixer(c) for i, c in enumerate(centers, start=1)}
    return ConnectionPath([rows_leg(a, b, mixers, "arc-rows")], "arc")


def nu_connect(a: WeightVector, b: WeightVector, nu: InvertibleMapLike, k: int = 1) -> ConnectionPath:
    """Arc taken in the coordinates of an invertible map ``nu`` over particle space.

    The endpoints are returned as given, not via a ``nu`` round trip.
    """
    check_same_architecture(a, b)
    leg = particle_leg(a, b, k, nu_mixer(nu), "nu-arc")
    return ConnectionPath([leg], "nu-arc")
