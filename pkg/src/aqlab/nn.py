"""Small numpy feedforward networks with hand-written backprop.

Everything runs in float64 so gradient checks against central finite
differences are meaningful.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Sequence

import numpy as np

CHECKPOINT_MAGIC = b"AQLAB-PARAMS v1\n"


class DivergenceError(FloatingPointError):
    """Raised when a gradient or loss stops being finite."""


class MlpNet:
    """ReLU hidden layers, identity output. Weights are stored as (fan_in, fan_out)."""

    def __init__(self, weights: Sequence[np.ndarray], biases: Sequence[np.ndarray], flat: np.ndarray | None = None):
        if len(weights) != len(biases) or not weights:
            raise ValueError("need one bias per weight matrix and at least one layer")
        for i, (w, b) in enumerate(zip(weights, biases)):
            w, b = np.asarray(w), np.asarray(b)
            if w.ndim != 2 or b.shape != (w.shape[1],):
                raise ValueError(f"layer {i}: weight {w.shape} and bias {b.shape} do not match")
            if i and np.shape(weights[i - 1])[1] != w.shape[0]:
                raise ValueError(f"layer {i} expects {w.shape[0]} inputs, previous layer gives {np.shape(weights[i - 1])[1]}")
        shapes = []
        for w, b in zip(weights, biases):
            shapes += [np.shape(w), np.shape(b)]
        n = sum(int(np.prod(sh)) for sh in shapes)
        if flat is None:
            flat = np.concatenate([np.asarray(x, dtype=float).ravel() for pair in zip(weights, biases) for x in pair])
        elif flat.shape != (n,) or flat.dtype != np.float64:
            raise ValueError(f"flat buffer must be float64 of length {n}")
        # every parameter is a view into one contiguous vector
        self.flat = flat
        views, offset = [], 0
        for sh in shapes:
            size = int(np.prod(sh))
            views.append(flat[offset:offset + size].reshape(sh))
            offset += size
        self.weights = views[0::2]
        self.biases = views[1::2]

    @classmethod
    def from_flat(cls, flat: np.ndarray, layer_sizes: Sequence[int]) -> "MlpNet":
        """Net whose parameters are views into ``flat`` (no copy)."""
        ws = [np.empty((i, o)) for i, o in zip(layer_sizes[:-1], layer_sizes[1:])]
        bs = [np.empty(o) for o in layer_sizes[1:]]
        return cls(ws, bs, flat=flat)

    @classmethod
    def init(cls, layer_sizes: Sequence[int], rng: np.random.Generator) -> "MlpNet":
        """He-style uniform init, bound ``sqrt(6 / fan_in)``; zero biases."""
        if len(layer_sizes) < 2:
            raise ValueError("layer_sizes needs an input and an output size")
        weights, biases = [], []
        for fan_in, fan_out in zip(layer_sizes[:-1], layer_sizes[1:]):
            bound = np.sqrt(6.0 / fan_in)
            weights.append(rng.uniform(-bound, bound, size=(fan_in, fan_out)))
            biases.append(np.zeros(fan_out))
        return cls(weights, biases)

    @property
    def layer_sizes(self) -> list[int]:
        return [self.weights[0].shape[0]] + [w.shape[1] for w in self.weights]

    def params(self) -> list[np.ndarray]:
        """Parameter arrays (by reference), ordered W0, b0, W1, b1, ..."""
        out = []
        for w, b in zip(self.weights, self.biases):
            out += [w, b]
        return out

    def copy(self) -> "MlpNet":
        return MlpNet.from_flat(self.flat.copy(), self.layer_sizes)

    def flat_grad(self, grads: Sequence[np.ndarray]) -> np.ndarray:
        """Concatenate per-layer gradients in the layout of :attr:`flat`."""
        return np.concatenate([g.ravel() for g in grads])

    def __call__(self, x: np.ndarray) -> np.ndarray:
        return forward(self, x)[0]


@dataclass
class ForwardCache:
    net_id: int
    inputs: list  # input to each layer
    pre: list  # pre-activation of each hidden layer
    squeeze: bool


def forward(net: MlpNet, x: np.ndarray) -> tuple[np.ndarray, ForwardCache]:
    x = np.asarray(x, dtype=float)
    squeeze = x.ndim == 1
    h = x[None, :] if squeeze else x
    if h.shape[1] != net.weights[0].shape[0]:
        raise ValueError(f"input has {h.shape[1]} features, net expects {net.weights[0].shape[0]}")
    inputs, pre = [], []
    last = len(net.weights) - 1
    for i, (w, b) in enumerate(zip(net.weights, net.biases)):
        inputs.append(h)
        z = h @ w + b
        if i < last:
            pre.append(z)
            h = np.maximum(z, 0.0)
        else:
            h = z
    return (h[0] if squeeze else h), ForwardCache(id(net), inputs, pre, squeeze)


def backward(net: MlpNet, cache: ForwardCache, output_grad: np.ndarray) -> tuple[list[np.ndarray], np.ndarray]:
    """Gradients of a scalar loss given ``d loss / d output``.

    Returns parameter gradients in :meth:`MlpNet.params` order and the
    gradient with respect to the input.
    """
    if cache.net_id != id(net) or len(cache.inputs) != len(net.weights):
        raise ValueError("cache does not come from a forward pass of this net")
    g = np.asarray(output_grad, dtype=float)
    if cache.squeeze:
        g = g[None, :]
    if g.shape != (cache.inputs[0].shape[0], net.weights[-1].shape[1]):
        raise ValueError(f"output_grad shape {g.shape} does not match the cached forward pass")
    grads: list[np.ndarray] = [None] * (2 * len(net.weights))
    for i in range(len(net.weights) - 1, -1, -1):
        grads[2 * i] = cache.inputs[i].T @ g
        grads[2 * i + 1] = g.sum(axis=0)
        g = g @ net.weights[i].T
        if i > 0:
            g = g * (cache.pre[i - 1] > 0)
    return grads, (g[0] if cache.squeeze else g)


def check_finite(arrays: Sequence[np.ndarray], what: str) -> None:
    for i, a in enumerate(arrays):
        if not np.all(np.isfinite(a)):
            raise DivergenceError(f"non-finite values in {what} (array {i}, shape {np.shape(a)})")


@dataclass
class AdamState:
    learning_rate: float = 3e-4
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    m: list = field(default_factory=list)
    v: list = field(default_factory=list)
    step: int = 0


def adam_step(opt: AdamState, params: list[np.ndarray], grads: list[np.ndarray]) -> list[np.ndarray]:
    """Bias-corrected Adam update, applied to ``params`` in place (descent)."""
    if len(params) != len(grads):
        raise ValueError("params and grads differ in length")
    for p, g in zip(params, grads):
        if p.shape != np.shape(g):
            raise ValueError(f"gradient shape {np.shape(g)} does not match parameter {p.shape}")
    check_finite(grads, "gradients")
    if not opt.m:
        opt.m = [np.zeros_like(p) for p in params]
        opt.v = [np.zeros_like(p) for p in params]
    opt.step += 1
    c1 = 1.0 - opt.beta1**opt.step
    c2 = 1.0 - opt.beta2**opt.step
    for p, g, m, v in zip(params, grads, opt.m, opt.v):
        m *= opt.beta1
        m += (1.0 - opt.beta1) * g
        v *= opt.beta2
        v += (1.0 - opt.beta2) * g * g
        p -= opt.learning_rate * (m / c1) / (np.sqrt(v / c2) + opt.eps)
    return params


class TargetTracker:
    """Slow EMA copy of a parameter list: ``target <- rho * target + (1 - rho) * online``."""

    def __init__(self, params: Sequence[np.ndarray], ema_coeff: float = 0.995):
        if not 0.0 <= ema_coeff <= 1.0:
            raise ValueError("ema_coeff must lie in [0, 1]")
        self.params = [np.array(p, dtype=float) for p in params]
        self.ema_coeff = ema_coeff


def ema_update(tracker: TargetTracker, online_params: Sequence[np.ndarray]) -> TargetTracker:
    rho = tracker.ema_coeff
    if len(online_params) != len(tracker.params):
        raise ValueError("online and target parameter lists differ in length")
    for t, p in zip(tracker.params, online_params):
        if t.shape != p.shape:
            raise ValueError(f"shape mismatch {t.shape} vs {p.shape}")
        t *= rho
        t += (1.0 - rho) * p
    return tracker


def tracked_net(tracker: TargetTracker, layer_sizes: Sequence[int] | None = None) -> MlpNet:
    """View tracked parameters as a net, sharing storage with the tracker.

    Either the tracker holds per-layer arrays (W0, b0, ...) or a single flat
    vector, in which case ``layer_sizes`` is required.
    """
    p = tracker.params
    if len(p) == 1 and p[0].ndim == 1:
        if layer_sizes is None:
            raise ValueError("layer_sizes is needed to view a flat parameter vector")
        return MlpNet.from_flat(p[0], layer_sizes)
    return MlpNet(p[0::2], p[1::2])


def numerical_grad(f: Callable[[], float], params: Sequence[np.ndarray], h: float = 1e-6) -> list[np.ndarray]:
    """Central differences of ``f()`` with respect to every entry of ``params``."""
    out = []
    for p in params:
        g = np.zeros_like(p)
        flat, gflat = p.reshape(-1), g.reshape(-1)
        for i in range(flat.size):
            old = flat[i]
            flat[i] = old + h
            fp = f()
            flat[i] = old - h
            fm = f()
            flat[i] = old
            gflat[i] = (fp - fm) / (2.0 * h)
        out.append(g)
    return out


def max_grad_error(analytic, numeric, rel: float = 1e-4, abs_floor: float = 1e-6) -> float:
    """Largest violation ratio; values <= 1 mean every entry agrees.

    An entry agrees when its error is within ``rel`` of the larger magnitude
    or below ``abs_floor``.
    """
    worst = 0.0
    for a, n in zip(analytic, numeric):
        a, n = np.asarray(a, dtype=float), np.asarray(n, dtype=float)
        err = np.abs(a - n)
        allowed = np.maximum(rel * np.maximum(np.abs(a), np.abs(n)), abs_floor)
        worst = max(worst, float(np.max(err / allowed)) if err.size else 0.0)
    return worst


def save_params(path: str | Path, params: Sequence[np.ndarray]) -> None:
    """Write a checkpoint: magic line, JSON shape list line, raw float64 LE data."""
    shapes = [list(np.shape(p)) for p in params]
    with open(path, "wb") as fh:
        fh.write(CHECKPOINT_MAGIC)
        fh.write(json.dumps({"dtype": "<f8", "shapes": shapes}).encode() + b"\n")
        for p in params:
            fh.write(np.ascontiguousarray(p, dtype="<f8").tobytes())


def load_params(path: str | Path) -> list[np.ndarray]:
    with open(path, "rb") as fh:
        if fh.readline() != CHECKPOINT_MAGIC:
            raise ValueError(f"{path} is not a parameter checkpoint")
        header = json.loads(fh.readline())
        data = fh.read()
    out, offset = [], 0
    for shape in header["shapes"]:
        n = int(np.prod(shape)) if shape else 1
        out.append(np.frombuffer(data, dtype="<f8", count=n, offset=offset).reshape(shape).copy())
        offset += 8 * n
    if offset != len(data):
        raise ValueError(f"{path}: {len(data) - offset} trailing bytes after declared parameters")
    return out
