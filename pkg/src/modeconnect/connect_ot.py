"""Optimal-transport neuron matching and the permutation (swap) stage.

The OT leg carries every particle of network A straight to its matched
particle of network B.  The result is B with its hidden neurons permuted, so
a chain of pairwise swaps then restores B's neuron order; a completed swap
leaves the network output unchanged.
"""

from __future__ import annotations

import json
from dataclasses import dataclass

import numpy as np
from scipy.optimize import linear_sum_assignment
from scipy.spatial.distance import cdist

from modeconnect.netcore import (
    MlpSpec,
    WeightVector,
    activations,
    augment,
    check_same_architecture,
    forward_from,
    from_particles,
    to_particles,
)
from modeconnect.paths import ConnectionPath, LinearLeg, PathLeg


@dataclass(frozen=True)
class Matching:
    """Particle ``i`` of A goes to particle ``pi[i]`` of B."""

    pi: np.ndarray
    cost: float

    def to_json(self) -> str:
        return json.dumps({"pi": [int(p) for p in self.pi], "cost": self.cost})


@dataclass(frozen=True)
class SwapSchedule:
    transpositions: tuple[tuple[int, int], ...]

    def __len__(self):
        return len(self.transpositions)

    def __iter__(self):
        return iter(self.transpositions)


def solve_assignment(cost: np.ndarray) -> Matching:
    """Exact minimum-cost perfect matching of a square cost matrix."""
    cost = np.asarray(cost, dtype=np.float64)
    if cost.ndim != 2 or cost.shape[0] != cost.shape[1]:
        raise ValueError(f"cost matrix must be square, got shape {cost.shape}")
    if np.any(np.isnan(cost)) or np.any(cost == -np.inf):
        raise ValueError("cost matrix must not contain NaN or -inf")
    rows, cols = linear_sum_assignment(cost)
    pi = np.empty(cost.shape[0], dtype=np.int64)
    pi[rows] = cols
    return Matching(pi, float(cost[rows, cols].sum()))


def _check_permutation(pi) -> np.ndarray:
    pi = np.asarray(pi, dtype=np.int64)
    if pi.ndim != 1 or not np.array_equal(np.sort(pi), np.arange(pi.size)):
        raise ValueError("not a permutation")
    return pi


def permutation_to_swaps(pi) -> SwapSchedule:
    """Transpositions ``tau_1, ..., tau_m`` with ``tau_m(...tau_1(x)) = pi(x)``.

    Read as position swaps they turn the arrangement ``pi`` into the identity:
    each swap sends one element to its final slot, so there are
    ``n - cycles(pi)`` of them.  Cycles are handled in order of their
    smallest element.
    """
    arr = _check_permutation(pi).copy()
    swaps = []
    for i in range(arr.size):
        while arr[i] != i:
            j = int(arr[i])
            swaps.append((i, j))
            arr[i], arr[j] = arr[j], arr[i]
    return SwapSchedule(tuple(swaps))


def compose_swaps(n: int, schedule: SwapSchedule) -> np.ndarray:
    """The permutation ``x -> tau_m(...tau_1(x))``."""
    out = np.arange(n)
    for i, j in schedule:
        a, b = out == i, out == j
        out[a], out[b] = j, i
    return out


class _SwapChain:
    """Swaps applied one after another to hidden layer ``k`` of ``origin``.

    Intermediate weight vectors are rebuilt on demand from the running
    neuron order instead of being stored, so a chain of ``n`` swaps costs
    ``O(n)`` memory rather than ``n`` full copies of the network.
    """

    def __init__(self, origin: WeightVector, k: int, swaps, final: WeightVector | None = None):
        self.origin, self.k = origin, k
        self.swaps = [(int(i), int(j)) for i, j in swaps]
        n = origin.layer(k).shape[0]
        for i, j in self.swaps:
            if not (0 <= i < n and 0 <= j < n):
                raise IndexError(f"particle indices ({i}, {j}) out of range 0..{n - 1}")
        self.final = final
        self._last: tuple[int, WeightVector] | None = None
        self._order = (0, np.arange(n))

    def order(self, m: int) -> np.ndarray:
        """Which original neuron sits in each slot after the first ``m`` swaps."""
        done, order = self._order
        if m < done:
            done, order = 0, np.arange(order.size)
        order = order.copy()
        for i, j in self.swaps[done:m]:
            order[i], order[j] = order[j], order[i]
        self._order = (m, order)
        return order

    def point(self, m: int) -> WeightVector:
        if m == 0:
            return self.origin
        if m == len(self.swaps) and self.final is not None:
            return self.final
        if self._last is not None and self._last[0] == m:
            return self._last[1]
        order = self.order(m)
        k = self.k
        wk = self.origin.layer(k)[order]
        wn = np.array(self.origin.layer(k + 1))
        wn[:, :-1] = wn[:, :-1][:, order]
        w = self.origin.with_layers({k: wk, k + 1: wn})
        self._last = (m, w)
        return w


class SwapLeg(PathLeg):
    """Linear exchange of particles ``i`` and ``j`` of hidden layer ``k``."""

    def __init__(self, w: WeightVector, k: int, i: int, j: int):
        self._init(_SwapChain(w, k, [(i, j)]), 0)

    @classmethod
    def _in_chain(cls, chain: _SwapChain, m: int) -> "SwapLeg":
        leg = cls.__new__(cls)
        leg._init(chain, m)
        return leg

    def _init(self, chain: _SwapChain, m: int):
        self.chain, self.m = chain, m
        self.k = chain.k
        self.i, self.j = chain.swaps[m]
        self.method = "swap"
        self.layers = (self.k, self.k + 1)

    @property
    def start(self) -> WeightVector:
        return self.chain.point(self.m)

    @property
    def end(self) -> WeightVector:
        if self.i == self.j:
            return self.start
        return self.chain.point(self.m + 1)

    def _moved(self, w: WeightVector, t):
        """Rows i, j of layer ``k`` and columns i, j of layer ``k+1`` at ``t``."""
        rows = w.layer(self.k)[[self.i, self.j]]
        cols = w.layer(self.k + 1)[:, [self.i, self.j]]
        return (1.0 - t) * rows + t * rows[::-1], (1.0 - t) * cols + t * cols[:, ::-1]

    def _interior(self, t):
        w = self.start
        if self.i == self.j:
            return w
        rows_t, cols_t = self._moved(w, t)
        wk = np.array(w.layer(self.k))
        wn = np.array(w.layer(self.k + 1))
        wk[[self.i, self.j]] = rows_t
        wn[:, [self.i, self.j]] = cols_t
        return w.with_layers({self.k: wk, self.k + 1: wn})

    def logits(self, spec: MlpSpec, x, ts, context: dict | None = None):
        """Only two neurons move, so update the next layer's input in place.

        ``context`` carries the hidden activations between consecutive swap
        legs of one chain so they are computed once per chain.
        """
        k = self.k
        w = self.start
        depth = len(w)
        key = ("swap-hidden", k, id(x))
        cached = None if context is None else context.get(key)
        if cached is not None and cached[0] == (id(self.chain), self.m):
            _, xa, h = cached
        else:
            xa = augment(activations(w, x, upto=k - 1)[-1])
            h = np.maximum(w.layer(k) @ xa, 0.0)
        z = w.layer(k + 1) @ augment(h)
        cols = w.layer(k + 1)[:, [self.i, self.j]]
        base = z - cols @ h[[self.i, self.j]]
        out = []
        for t in ts:
            if t == 0.0:
                zt = z
            else:
                rows_t, cols_t = self._moved(w, t)
                zt = base + cols_t @ np.maximum(rows_t @ xa, 0.0)
            out.append(zt if k + 1 == depth else forward_from(w, np.maximum(zt, 0.0), k + 2))
        if context is not None:
            h[[self.i, self.j]] = h[[self.j, self.i]]
            context[key] = ((id(self.chain), self.m + 1), xa, h)
        return out


def swap_leg(w: WeightVector, k: int, i: int, j: int) -> SwapLeg:
    return SwapLeg(w, k, i, j)


def swap_legs(w: WeightVector, k: int, schedule: SwapSchedule, end: WeightVector | None = None) -> list[SwapLeg]:
    """Chain of swap legs starting at ``w``; the last one ends at ``end`` if given.

    ``end`` must be bit-identical to the result of the swaps.
    """
    chain = _SwapChain(w, k, schedule)
    if end is not None and len(chain.swaps):
        if not chain.point(len(chain.swaps)).equals(end):
            raise AssertionError("swap chain does not land on the requested end point")
        chain.final = end
    return [SwapLeg._in_chain(chain, m) for m in range(len(chain.swaps))]


def particle_matching(pa: np.ndarray, pb: np.ndarray) -> Matching:
    """Assignment under squared Euclidean cost between particle rows."""
    return solve_assignment(cdist(pa, pb, metric="sqeuclidean"))


def ot_connect(a: WeightVector, b: WeightVector, k: int = 1) -> ConnectionPath:
    """OT leg on full particles of hidden layer ``k`` followed by the swap stage."""
    check_same_architecture(a, b)
    pa, pb = to_particles(a, k), to_particles(b, k)
    match = particle_matching(pa, pb)
    schedule = permutation_to_swaps(match.pi)
    if not len(schedule):
        return ConnectionPath([LinearLeg(a, b, "ot", layers=(k, k + 1))], "ot")
    # every parameter outside the layer-k particles already takes B's value
    mid = from_particles(pb[match.pi], b, k)
    legs = [LinearLeg(a, mid, "ot", layers=(k, k + 1))]
    legs += swap_legs(mid, k, schedule, end=b)
    return ConnectionPath(legs, "ot", info={"matching": match})
