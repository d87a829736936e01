"""Weight Adjustment (WA) and the layer-by-layer scaffold for deep nets.

A multilayer path visits the intermediate points

    Theta^A -> Theta_2^AB -> ... -> Theta_L^AB -> Theta^B

where ``Theta_k^AB`` has B's first ``k-1`` layers, an adjusted layer ``k``
and A's remaining layers.  Consecutive points differ in two layers only, so
each hop is a one-hidden-layer problem:

* WA hops move the rows of the lower layer with a base method (linear, arc
  or OT) and re-solve the upper layer by pseudo-inverse at every breakpoint;
* Butterfly hops move whole particles with the base method and skip the
  last intermediate point.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable

import numpy as np

from modeconnect.connect_direct import arc_connect, arc_mixer, estimate_center, linear_mix
from modeconnect.connect_ot import ot_connect, permutation_to_swaps, solve_assignment, swap_legs
from modeconnect.ndmath.linalg import DEFAULT_RCOND, SvdConvergenceError, pseudo_inverse
from modeconnect.netcore import (
    Dataset,
    WeightVector,
    activations,
    augment,
    check_same_architecture,
    forward,
)
from modeconnect.paths import ConnectionPath, LinearLeg, PathLeg, PolylineLeg, chain

from scipy.spatial.distance import cdist

DEFAULT_BREAKPOINTS = 16
DEFAULT_ADJUST_CAP = 4096
BASES = ("linear", "arc", "ot")
LEG_METHODS = tuple(f"{b}+{v}" for v in ("wa", "butterfly") for b in BASES)


class AdjustmentError(ArithmeticError):
    pass


@dataclass(frozen=True)
class WaConfig:
    """``features`` is the ``d0 x N`` adjustment data matrix ``X``."""

    features: np.ndarray
    breakpoints: int = DEFAULT_BREAKPOINTS
    rcond: float = DEFAULT_RCOND

    def __post_init__(self):
        if self.breakpoints < 2:
            raise ValueError("need at least two breakpoints (t=0 and t=1)")
        x = self.features.features if isinstance(self.features, Dataset) else self.features
        object.__setattr__(self, "features", np.asarray(x, dtype=np.float64))


def adjustment_features(data: Dataset, cap: int = DEFAULT_ADJUST_CAP, seed: int = 0) -> np.ndarray:
    """The adjustment matrix: all of ``data`` or a seeded subsample of ``cap`` columns."""
    if len(data) <= cap:
        return data.features
    idx = np.sort(np.random.Generator(np.random.PCG64(seed)).choice(len(data), cap, replace=False))
    return data.features[:, idx]


def adjust_layer(w_next_a: np.ndarray, x_prev_a: np.ndarray, x_prev_b: np.ndarray, rcond: float = DEFAULT_RCOND) -> np.ndarray:
    """``W^A X^A (X^B)^+``: weights that reproduce ``W^A X^A`` from features ``X^B``."""
    w_next_a, x_prev_a, x_prev_b = (np.asarray(m, dtype=np.float64) for m in (w_next_a, x_prev_a, x_prev_b))
    if x_prev_a.shape[1] != x_prev_b.shape[1]:
        raise ValueError(f"feature matrices have {x_prev_a.shape[1]} and {x_prev_b.shape[1]} columns")
    if w_next_a.shape[1] != x_prev_a.shape[0]:
        raise ValueError(f"weights {w_next_a.shape} do not act on features {x_prev_a.shape}")
    return (w_next_a @ x_prev_a) @ pseudo_inverse(x_prev_b, rcond)


class _Acts:
    """Per-model layer inputs on the adjustment set, computed once."""

    def __init__(self, x: np.ndarray):
        self.x = x
        self._cache: dict[int, tuple[WeightVector, list[np.ndarray]]] = {}

    def __call__(self, w: WeightVector, j: int) -> np.ndarray:
        """Augmented input ``[X_j; 1]`` of layer ``j + 1``."""
        hit = self._cache.get(id(w))
        if hit is None or hit[0] is not w:
            hit = (w, [augment(h) for h in activations(w, self.x)])
            self._cache[id(w)] = hit
        return hit[1][j]


@dataclass(frozen=True)
class IntermediatePoint:
    weights: WeightVector
    k: int


def build_intermediate(a: WeightVector, b: WeightVector, k: int, x: np.ndarray, rcond: float = DEFAULT_RCOND, acts: _Acts | None = None) -> IntermediatePoint:
    """``Theta_k^AB``: B's layers below ``k``, adjusted layer ``k``, A's layers above."""
    check_same_architecture(a, b)
    depth = len(a)
    if not 2 <= k <= depth:
        raise IndexError(f"intermediate layer {k} out of range 2..{depth}")
    acts = acts or _Acts(np.asarray(x, dtype=np.float64))
    adjusted = adjust_layer(a.layer(k), acts(a, k - 1), acts(b, k - 1), rcond)
    layers = [b.layer(j) for j in range(1, k)] + [adjusted] + [a.layer(j) for j in range(k + 1, depth + 1)]
    return IntermediatePoint(WeightVector(layers), k)


def _solve_next(target: np.ndarray, rows: np.ndarray, inputs: np.ndarray, rcond: float, t: float) -> np.ndarray:
    try:
        return target @ pseudo_inverse(augment(np.maximum(rows @ inputs, 0.0)), rcond)
    except (SvdConvergenceError, ValueError) as exc:
        raise AdjustmentError(f"weight adjustment failed at breakpoint t={t}: {exc}") from exc


def _wa_hop(
    start: WeightVector,
    end: WeightVector,
    k: int,
    base: str,
    a: WeightVector,
    cfg: WaConfig,
    acts: _Acts,
    method: str,
    land: WeightVector | None = None,
) -> list[PathLeg]:
    """Rows of layer ``k`` follow ``base``; layer ``k+1`` is re-solved at each breakpoint.

    The target is A's own pre-activation of layer ``k+1``, so the hop ends
    exactly at the next intermediate point.  With OT and ``land`` given,
    layer ``k+1`` moves to ``land``'s (column-permuted) before the swaps,
    which then finish at ``land`` instead.
    """
    rows_a, rows_b = start.layer(k), end.layer(k)
    inputs = acts(end, k - 1)  # layers below k are B's at both ends of the hop
    target = a.layer(k + 1) @ acts(a, k)
    ts = np.linspace(0.0, 1.0, cfg.breakpoints)

    schedule = None
    if base == "ot":
        match = solve_assignment(cdist(rows_a, rows_b, metric="sqeuclidean"))
        schedule = permutation_to_swaps(match.pi)
        goal = rows_b[match.pi]
        mix: Callable = linear_mix
    elif base == "arc":
        goal = rows_b
        mix = arc_mixer(estimate_center(rows_a, rows_b).mu)
    elif base == "linear":
        goal = rows_b
        mix = linear_mix
    else:
        raise ValueError(f"unknown base method {base!r}")

    breakpoints = [start]
    for t in ts[:-1]:
        rows = rows_a if t == 0.0 else mix(rows_a, goal, t)
        breakpoints.append(start.with_layers({k: rows, k + 1: _solve_next(target, rows, inputs, cfg.rcond, t)}))
    if not schedule:
        breakpoints.append(end)
        return [PolylineLeg(breakpoints, method, layers=(k, k + 1))]

    # Solving at the permuted rows gives the end point's layer k+1 with its
    # columns permuted the same way, so take that exactly and let the swaps
    # carry it home.
    upper = np.array(end.layer(k + 1))
    upper[:, :-1] = upper[:, :-1][:, match.pi]
    mid = start.with_layers({k: goal, k + 1: upper})
    breakpoints.append(mid)
    legs: list[PathLeg] = [PolylineLeg(breakpoints, method, layers=(k, k + 1))]
    if land is not None:
        upper = np.array(land.layer(k + 1))
        upper[:, :-1] = upper[:, :-1][:, match.pi]
        landed = mid.with_layers({k + 1: upper})
        legs.append(LinearLeg(mid, landed, method, layers=(k + 1,)))
        mid, end = landed, land
    return legs + swap_legs(mid, k, schedule, end=end)


def _butterfly_hop(start: WeightVector, end: WeightVector, k: int, base: str, method: str) -> list[PathLeg]:
    if base == "linear":
        return [LinearLeg(start, end, method, layers=(k, k + 1))]
    if base == "arc":
        leg = arc_connect(start, end, mode="particle", k=k).legs[0]
        leg.method = method
        return [leg]
    if base == "ot":
        legs = ot_connect(start, end, k).legs
        legs[0].method = method
        return legs
    raise ValueError(f"unknown base method {base!r}")


def _split_method(leg_method: str) -> tuple[str, str]:
    name = leg_method.replace("-", "+").replace("bfly", "butterfly")
    if name not in LEG_METHODS:
        raise ValueError(f"unknown leg method {leg_method!r}; expected one of {LEG_METHODS}")
    base, variant = name.split("+")
    return base, variant


def wa_connect_multilayer(a: WeightVector, b: WeightVector, leg_method: str, cfg: WaConfig) -> ConnectionPath:
    """Chain of hops through the intermediate points, joined by ``leg_method``.

    ``leg_method`` is ``"<base>+wa"`` or ``"<base>+butterfly"`` with base in
    linear / arc / ot.  WA variants end with a linear leg on the last layer;
    under OT that leg runs just before the final swaps, so the swaps carry
    B's own last layer.  Butterfly variants skip ``Theta_L^AB`` and their last hop lands on B.
    """
    check_same_architecture(a, b)
    depth = len(a)
    if depth < 2:
        raise ValueError("the scaffold needs at least one hidden layer")
    base, variant = _split_method(leg_method)
    acts = _Acts(cfg.features)
    method = f"{base}+{variant}"

    last_point = depth if variant == "wa" else depth - 1
    points = [a] + [build_intermediate(a, b, k, cfg.features, cfg.rcond, acts).weights for k in range(2, last_point + 1)]
    if variant == "butterfly":
        points.append(b)

    legs: list[PathLeg] = []
    for k in range(1, len(points)):
        if variant == "wa":
            land = b if k == len(points) - 1 else None
            legs += _wa_hop(points[k - 1], points[k], k, base, a, cfg, acts, method, land)
        else:
            legs += _butterfly_hop(points[k - 1], points[k], k, base, method)
    if variant == "wa" and legs[-1].end is not b:
        legs.append(LinearLeg(points[-1], b, method, layers=(depth,)))
    path = chain(legs, method)
    path.info["intermediate_points"] = points
    return path


def wa_connect_one_hidden(a: WeightVector, b: WeightVector, base: str, cfg: WaConfig) -> ConnectionPath:
    """WA path for a one-hidden-layer net.

    Leg 0 runs ``(W1^A, W2^A) -> (W1^A, W2(0))`` and then through the
    breakpoints ``(W1(t), Yhat^A [phi(W1(t) X); 1]^+)``; leg 1 moves the
    second layer linearly from ``W2(1)`` to ``W2^B``.  With ``base="ot"``
    the second-layer move happens at the permuted rows and swap legs
    follow it.
    """
    if len(a) != 2:
        raise ValueError(f"expected a one-hidden-layer net, got {len(a)} layers")
    return wa_connect_multilayer(a, b, f"{base}+wa", cfg)


def relative_output_deviation(w: WeightVector, reference: np.ndarray, x: np.ndarray) -> float:
    """``||f_w(X) - Y_ref||_F / ||Y_ref||_F``."""
    out = forward(w.spec, w, x)
    return float(np.linalg.norm(out - reference) / np.linalg.norm(reference))
