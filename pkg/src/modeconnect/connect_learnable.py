"""Learned invertible maps over particle space (affine coupling flows).

A :class:`CouplingFlow` whitens its input and then applies a stack of affine
coupling layers with alternating half masks.  It can be fitted two ways:

* :func:`train_flow_nll` -- maximum likelihood, pushing particles to N(0, I);
* :func:`train_bijection` -- directly minimizing the network loss at points
  of the induced arc path between pairs of trained models.

Either way the result plugs into :func:`connect_with_flow`.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, replace
from pathlib import Path

import numpy as np

from modeconnect.connect_direct import arc_weights, nu_connect
from modeconnect.ndmath import autodiff as ad
from modeconnect.ndmath.random import make_rng
from modeconnect.netcore import (
    Dataset,
    WeightVector,
    check_same_architecture,
    forward_from,
    to_particles,
)
from modeconnect.paths import ConnectionPath

FLOW_FORMAT_VERSION = 1
SUBNETS = ("s", "t")


class FlowError(FloatingPointError):
    pass


def half_mask(dim: int, parity: int) -> np.ndarray:
    """1 on the first half of the coordinates (parity 0) or the second (parity 1)."""
    mask = np.zeros(dim)
    cut = (dim + 1) // 2
    if parity % 2 == 0:
        mask[:cut] = 1.0
    else:
        mask[cut:] = 1.0
    return mask


@dataclass
class CouplingFlow:
    dim: int
    masks: list[np.ndarray]
    params: list[dict[str, np.ndarray]]
    mean: np.ndarray
    std: np.ndarray
    scale_bound: float = 2.0

    @classmethod
    def create(cls, dim: int, layers: int = 6, hidden: int = 64, seed: int = 0, scale_bound: float = 2.0) -> "CouplingFlow":
        """Fresh flow equal to the identity: each subnet's last layer is zero."""
        rng = make_rng(seed)
        params = []
        for _ in range(layers):
            p = {}
            for net in SUBNETS:
                p[f"{net}.W1"] = rng.standard_normal((dim, hidden)) * math.sqrt(2.0 / dim)
                p[f"{net}.b1"] = np.zeros((1, hidden))
                p[f"{net}.W2"] = rng.standard_normal((hidden, hidden)) * math.sqrt(2.0 / hidden)
                p[f"{net}.b2"] = np.zeros((1, hidden))
                p[f"{net}.W3"] = np.zeros((hidden, dim))
                p[f"{net}.b3"] = np.zeros((1, dim))
            params.append(p)
        masks = [half_mask(dim, i) for i in range(layers)]
        return cls(dim, masks, params, np.zeros(dim), np.ones(dim), scale_bound)

    def copy(self) -> "CouplingFlow":
        return replace(
            self,
            masks=[m.copy() for m in self.masks],
            params=[{k: v.copy() for k, v in p.items()} for p in self.params],
            mean=self.mean.copy(),
            std=self.std.copy(),
        )

    def fit_whitening(self, x: np.ndarray) -> "CouplingFlow":
        """Copy whose whitening constants are the per-coordinate mean and std of ``x``."""
        x = np.atleast_2d(np.asarray(x, dtype=np.float64))
        std = x.std(axis=0)
        std[std <= 1e-12] = 1.0
        out = self.copy()
        out.mean, out.std = x.mean(axis=0), std
        return out

    # -- evaluation, with or without a tape ------------------------------

    def _check_dim(self, x):
        if ad._val(x).shape[-1] != self.dim:
            raise ValueError(f"flow dimension is {self.dim}, input has {ad._val(x).shape[-1]}")

    def forward(self, x, params=None):
        """``(y, logdet)`` for a batch of row vectors."""
        self._check_dim(x)
        params = self.params if params is None else params
        z = (x - self.mean) / self.std
        logdet = -np.sum(np.log(self.std))
        for i, (mask, p) in enumerate(zip(self.masks, params)):
            s, t = self._scale_shift(p, mask, z * mask)
            z = z * mask + (1.0 - mask) * (z * ad.exp(s) + t)
            logdet = logdet + ad.sum(s, axis=1)
            _check_finite(z, i)
        if not isinstance(logdet, ad.Var):
            logdet = np.broadcast_to(logdet, (ad._val(z).shape[0],)).copy()
        return z, logdet

    def inverse(self, y, params=None):
        self._check_dim(y)
        params = self.params if params is None else params
        z = y
        for i in range(len(self.masks) - 1, -1, -1):
            mask = self.masks[i]
            s, t = self._scale_shift(params[i], mask, z * mask)
            z = z * mask + (1.0 - mask) * ((z - t) * ad.exp(-s))
            _check_finite(z, i)
        return z * self.std + self.mean

    def transform(self, x, params=None):
        return self.forward(x, params)[0]

    def _scale_shift(self, p, mask, xm):
        out = []
        for net in SUBNETS:
            h = ad.relu(xm @ p[f"{net}.W1"] + p[f"{net}.b1"])
            h = ad.relu(h @ p[f"{net}.W2"] + p[f"{net}.b2"])
            out.append(h @ p[f"{net}.W3"] + p[f"{net}.b3"])
        s = self.scale_bound * ad.tanh(out[0]) * (1.0 - mask)
        return s, out[1] * (1.0 - mask)

    def nll(self, x, params=None):
        """Mean negative log-likelihood under a standard-normal base density."""
        y, logdet = self.forward(x, params)
        log_eta = -0.5 * ad.sum(ad.square(y), axis=1) - 0.5 * self.dim * math.log(2 * math.pi)
        return ad.mean(-(log_eta + logdet))

    # -- serialization ---------------------------------------------------

    def to_json(self) -> dict:
        return {
            "format_version": FLOW_FORMAT_VERSION,
            "dim": self.dim,
            "scale_bound": self.scale_bound,
            "whitening": {"mean": self.mean.tolist(), "std": self.std.tolist()},
            "layers": [
                {"mask": m.tolist(), "subnets": {k: v.tolist() for k, v in p.items()}}
                for m, p in zip(self.masks, self.params)
            ],
        }

    @classmethod
    def from_json(cls, doc: dict) -> "CouplingFlow":
        if doc.get("format_version") != FLOW_FORMAT_VERSION:
            raise ValueError(f"unsupported flow format {doc.get('format_version')!r}")
        layers = doc["layers"]
        return cls(
            dim=int(doc["dim"]),
            masks=[np.array(l["mask"], dtype=np.float64) for l in layers],
            params=[{k: np.array(v, dtype=np.float64) for k, v in l["subnets"].items()} for l in layers],
            mean=np.array(doc["whitening"]["mean"], dtype=np.float64),
            std=np.array(doc["whitening"]["std"], dtype=np.float64),
            scale_bound=float(doc.get("scale_bound", 2.0)),
        )

    def save(self, path) -> None:
        Path(path).write_text(json.dumps(self.to_json()))

    @classmethod
    def load(cls, path) -> "CouplingFlow":
        return cls.from_json(json.loads(Path(path).read_text()))


def _check_finite(z, layer: int) -> None:
    if not np.all(np.isfinite(ad._val(z))):
        raise FlowError(f"non-finite values after coupling layer {layer}")


@dataclass(frozen=True)
class FlowTrainConfig:
    steps: int = 500
    lr: float = 1e-3
    batch: int = 256
    seed: int = 0
    eval_every: int = 25

    def __post_init__(self):
        if self.steps < 0 or self.lr < 0 or self.batch < 1 or self.eval_every < 1:
            raise ValueError(f"invalid flow training config {self}")


def _traced_params(tape: ad.Tape, flow: CouplingFlow):
    leaves = [{k: tape.leaf(v) for k, v in p.items()} for p in flow.params]
    return leaves


class _Adam:
    """Adam updates applied in place to a flow's parameters."""

    def __init__(self, flow: CouplingFlow, lr: float, beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8):
        self.lr, self.beta1, self.beta2, self.eps = lr, beta1, beta2, eps
        self.m = [{k: np.zeros_like(v) for k, v in p.items()} for p in flow.params]
        self.v = [{k: np.zeros_like(v) for k, v in p.items()} for p in flow.params]
        self.steps = 0

    def step(self, flow: CouplingFlow, leaves, grads) -> None:
        if self.lr == 0:
            return
        self.steps += 1
        c1 = 1.0 - self.beta1**self.steps
        c2 = 1.0 - self.beta2**self.steps
        for p, lv, m, v in zip(flow.params, leaves, self.m, self.v):
            for name, var in lv.items():
                g = grads[var.id]
                m[name] = self.beta1 * m[name] + (1 - self.beta1) * g
                v[name] = self.beta2 * v[name] + (1 - self.beta2) * g * g
                p[name] -= self.lr * (m[name] / c1) / (np.sqrt(v[name] / c2) + self.eps)


def train_flow_nll(flow: CouplingFlow, particles: np.ndarray, config: FlowTrainConfig = FlowTrainConfig()) -> CouplingFlow:
    """Fit by minibatch Adam on the negative log-likelihood.

    Whitening is refit on ``particles``.  The full-data NLL is checked every
    ``eval_every`` steps and the best parameters seen are returned.
    """
    x = np.atleast_2d(np.asarray(particles, dtype=np.float64))
    if x.shape[0] < 1:
        raise ValueError("need at least one particle")
    rng = make_rng(config.seed)
    flow = flow.fit_whitening(x)
    opt = _Adam(flow, config.lr)
    best_nll = initial = float(flow.nll(x))
    best = flow.copy()
    for step in range(1, config.steps + 1):
        idx = rng.choice(x.shape[0], size=min(config.batch, x.shape[0]), replace=False)
        tape = ad.Tape()
        leaves = _traced_params(tape, flow)
        loss = flow.nll(x[idx], leaves)
        if not np.isfinite(loss.value):
            raise FlowError(f"negative log-likelihood diverged at step {step}")
        opt.step(flow, leaves, ad.backward(tape, loss))
        if step % config.eval_every == 0 or step == config.steps:
            current = float(flow.nll(x))
            if not math.isfinite(current):
                raise FlowError(f"negative log-likelihood diverged at step {step}")
            if current < best_nll:
                best_nll, best = current, flow.copy()
    if best_nll > initial:
        raise FlowError(f"training increased the NLL ({initial} -> {best_nll})")
    return best


@dataclass(frozen=True)
class ModelSet:
    members: tuple[WeightVector, ...]
    seeds: tuple[int, ...] = ()

    def __post_init__(self):
        members = tuple(self.members)
        for m in members[1:]:
            check_same_architecture(members[0], m)
        object.__setattr__(self, "members", members)

    def __len__(self):
        return len(self.members)

    def particles(self, k: int = 1) -> np.ndarray:
        return np.vstack([to_particles(m, k) for m in self.members])


@dataclass(frozen=True)
class BijectionConfig:
    steps: int = 300
    lr: float = 1e-3
    batch: int = 256
    seed: int = 0
    midpoint_only: bool = True
    k: int = 1

    def __post_init__(self):
        if self.steps < 0 or self.lr < 0 or self.batch < 1:
            raise ValueError(f"invalid bijection config {self}")


def _traced_weights(particles, a: WeightVector, b: WeightVector, k: int, t: float) -> list:
    """Layer list with hidden layer ``k`` rebuilt from (possibly traced) particles."""
    fan_in = a.layer(k).shape[1] - 1
    bias = particles[:, 0:1]
    incoming = particles[:, 1:1 + fan_in]
    outgoing = particles[:, 1 + fan_in:]
    next_bias = (1.0 - t) * a.layer(k + 1)[:, -1:] + t * b.layer(k + 1)[:, -1:]
    layers: list = [(1.0 - t) * x + t * y for x, y in zip(a, b)]
    layers[k - 1] = ad.concat([incoming, bias], axis=1)
    layers[k] = ad.concat([ad.transpose(outgoing), next_bias], axis=1)
    return layers


def path_point_loss(flow: CouplingFlow, a: WeightVector, b: WeightVector, t: float, x, labels, k: int = 1, params=None):
    """Cross-entropy of the flow-arc point ``psi(t)`` between ``a`` and ``b``."""
    pa, pb = to_particles(a, k), to_particles(b, k)
    c, s = arc_weights(t)
    mixed = flow.inverse(c * flow.transform(pa, params) + s * flow.transform(pb, params), params)
    logits = forward_from(_traced_weights(mixed, a, b, k, t), x, 1)
    return ad.cross_entropy(logits, labels)


def train_bijection(
    flow: CouplingFlow,
    models: ModelSet,
    data: Dataset,
    config: BijectionConfig = BijectionConfig(),
) -> CouplingFlow:
    """Fit the flow so arc paths through it have low loss between members of ``models``.

    Every step draws an ordered pair ``A != B`` uniformly, ``t`` uniform on
    (0, 1) or 0.5 with ``midpoint_only``, a data minibatch, and takes one
    Adam step through the flow, its inverse, the arc mixing and the network.
    The members of ``models`` are never modified.
    """
    if len(models) < 2:
        raise ValueError("bijection training needs at least two models")
    rng = make_rng(config.seed)
    flow = flow.fit_whitening(models.particles(config.k))
    opt = _Adam(flow, config.lr)
    n = len(data)
    for step in range(1, config.steps + 1):
        i = int(rng.integers(len(models)))
        j = int(rng.integers(len(models) - 1))
        j += j >= i
        t = 0.5 if config.midpoint_only else float(rng.uniform(0.0, 1.0))
        idx = rng.choice(n, size=min(config.batch, n), replace=False)
        tape = ad.Tape()
        leaves = _traced_params(tape, flow)
        loss = path_point_loss(
            flow, models.members[i], models.members[j], t,
            data.features[:, idx], data.labels[idx], config.k, leaves,
        )
        if not np.isfinite(loss.value):
            raise FlowError(f"bijection loss diverged at step {step}")
        if config.lr:
            opt.step(flow, leaves, ad.backward(tape, loss))
    return flow


def connect_with_flow(a: WeightVector, b: WeightVector, flow: CouplingFlow, k: int = 1) -> ConnectionPath:
    """Arc path in the flow's coordinates; no per-pair state is involved."""
    path = nu_connect(a, b, flow, k)
    path.method = "rnvp"
    return path
