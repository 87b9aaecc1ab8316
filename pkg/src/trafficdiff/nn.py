"""Small dense networks with hand-written reverse-mode gradients.

Parameters are kept as a flat list ``[W0, b0, W1, b1, ...]`` so the
optimizer and checkpoint code can treat every network the same way.
Inputs may be a single vector or a ``(batch, features)`` matrix.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from numba import njit

ACTIVATIONS = ("identity", "silu", "tanh")


class ShapeError(ValueError):
    pass


@dataclass(frozen=True)
class NetSpec:
    """Layer widths including input and output; hidden layers share one nonlinearity."""

    sizes: tuple[int, ...]
    activation: str = "silu"

    def __post_init__(self):
        sizes = tuple(int(s) for s in self.sizes)
        object.__setattr__(self, "sizes", sizes)
        if len(sizes) < 2 or any(s <= 0 for s in sizes):
            raise ValueError(f"need at least one layer of positive widths, got {sizes}")
        if self.activation not in ACTIVATIONS:
            raise ValueError(f"unknown activation {self.activation!r}")

    @property
    def n_layers(self) -> int:
        return len(self.sizes) - 1

    @property
    def param_shapes(self) -> list[tuple[int, ...]]:
        shapes = []
        for fan_in, fan_out in zip(self.sizes[:-1], self.sizes[1:]):
            shapes += [(fan_in, fan_out), (fan_out,)]
        return shapes

    def param_names(self) -> list[str]:
        return [f"layer{k // 2}.{'weight' if k % 2 == 0 else 'bias'}"
                for k in range(2 * self.n_layers)]


@dataclass
class Tape:
    spec: NetSpec
    inputs: list
    preacts: list
    squeeze: bool


def init_params(spec: NetSpec, rng=None, scale: float = 1.0) -> list[np.ndarray]:
    """He/Glorot-style uniform init; ``rng=None`` gives all-zero parameters."""
    params = []
    for fan_in, fan_out in zip(spec.sizes[:-1], spec.sizes[1:]):
        if rng is None:
            params.append(np.zeros((fan_in, fan_out)))
        else:
            bound = scale * np.sqrt(3.0 / fan_in)
            params.append(rng.uniform(-bound, bound, size=(fan_in, fan_out)))
        params.append(np.zeros(fan_out))
    return params


def _act(name, x):
    if name == "identity":
        return x
    if name == "tanh":
        return np.tanh(x)
    return x / (1.0 + np.exp(-x))


def _act_grad(name, x):
    if name == "identity":
        return np.ones_like(x)
    if name == "tanh":
        return 1.0 - np.tanh(x) ** 2
    s = 1.0 / (1.0 + np.exp(-x))
    return s * (1.0 + x * (1.0 - s))


def check_params(spec: NetSpec, params) -> None:
    if len(params) != 2 * spec.n_layers:
        raise ShapeError(f"expected {2 * spec.n_layers} parameter arrays, got {len(params)}")
    for p, shape in zip(params, spec.param_shapes):
        if p.shape != shape:
            raise ShapeError(f"parameter shape {p.shape} does not match {shape}")


def forward(spec: NetSpec, params, x):
    """Evaluate the network; returns ``(output, tape)``."""
    x = np.asarray(x, dtype=np.float64)
    squeeze = x.ndim == 1
    h = x[None, :] if squeeze else x
    if h.ndim != 2 or h.shape[1] != spec.sizes[0]:
        raise ShapeError(f"input shape {x.shape} does not match input width {spec.sizes[0]}")
    inputs, preacts = [], []
    for k in range(spec.n_layers):
        W, b = params[2 * k], params[2 * k + 1]
        inputs.append(h)
        a = h @ W + b
        preacts.append(a)
        h = a if k == spec.n_layers - 1 else _act(spec.activation, a)
    return (h[0] if squeeze else h), Tape(spec, inputs, preacts, squeeze)


def backward(spec: NetSpec, params, tape: Tape, upstream, need_input_grad: bool = True):
    """Gradients of ``<upstream, output>``.

    Returns:
        ``(param_grads, input_grad)``; ``input_grad`` is None when not requested.
    """
    if tape.spec != spec or len(tape.inputs) != spec.n_layers:
        raise ShapeError("tape was produced by a different network")
    g = np.asarray(upstream, dtype=np.float64)
    if tape.squeeze:
        g = g[None, :]
    if g.shape != tape.preacts[-1].shape:
        raise ShapeError(f"upstream shape {g.shape} does not match output {tape.preacts[-1].shape}")
    grads = [None] * (2 * spec.n_layers)
    for k in range(spec.n_layers - 1, -1, -1):
        if k < spec.n_layers - 1:
            g = g * _act_grad(spec.activation, tape.preacts[k])
        grads[2 * k] = tape.inputs[k].T @ g
        grads[2 * k + 1] = g.sum(axis=0)
        if k > 0 or need_input_grad:
            g = g @ params[2 * k].T
    dx = None
    if need_input_grad:
        dx = g[0] if tape.squeeze else g
    return grads, dx


class Adam:
    """Adam with optional weight decay.

    ``decoupled=True`` gives AdamW (decay applied directly to the weights);
    otherwise the decay is added to the gradient as an L2 term.
    """

    def __init__(self, params, lr=1e-4, weight_decay=0.0, betas=(0.9, 0.999), eps=1e-8,
                 decoupled=True):
        self.lr = float(lr)
        self.weight_decay = float(weight_decay)
        self.beta1, self.beta2 = (float(b) for b in betas)
        self.eps = float(eps)
        self.decoupled = bool(decoupled)
        self.m = [np.zeros_like(p) for p in params]
        self.v = [np.zeros_like(p) for p in params]
        self.step_count = 0

    def step(self, params, grads) -> None:
        """Update ``params`` in place."""
        if len(grads) != len(params) or len(params) != len(self.m):
            raise ShapeError("parameter/gradient/state counts disagree")
        self.step_count += 1
        c1 = 1.0 - self.beta1 ** self.step_count
        c2 = 1.0 - self.beta2 ** self.step_count
        for p, g, m, v in zip(params, grads, self.m, self.v):
            if g.shape != p.shape or m.shape != p.shape:
                raise ShapeError(f"gradient shape {g.shape} does not match parameter {p.shape}")
            _adam_kernel(p.reshape(-1), np.ascontiguousarray(g).reshape(-1), m.reshape(-1),
                         v.reshape(-1), self.lr, self.beta1, self.beta2, self.eps, c1, c2,
                         self.weight_decay, self.decoupled)

    def state_arrays(self) -> dict[str, np.ndarray]:
        out = {}
        for k, (m, v) in enumerate(zip(self.m, self.v)):
            out[f"adam.m.{k}"] = m
            out[f"adam.v.{k}"] = v
        return out

    def load_state_arrays(self, arrays: dict, step_count: int) -> None:
        self.m = [np.array(arrays[f"adam.m.{k}"]) for k in range(len(self.m))]
        self.v = [np.array(arrays[f"adam.v.{k}"]) for k in range(len(self.v))]
        self.step_count = int(step_count)


@njit(cache=True)
def _adam_kernel(p, g, m, v, lr, b1, b2, eps, c1, c2, wd, decoupled):
    shrink = 1.0 - lr * wd if decoupled else 1.0
    step = lr / c1
    for i in range(p.size):
        gi = g[i]
        if not decoupled:
            gi += wd * p[i]
        m[i] = b1 * m[i] + (1.0 - b1) * gi
        v[i] = b2 * v[i] + (1.0 - b2) * gi * gi
        p[i] = p[i] * shrink - step * m[i] / (np.sqrt(v[i] / c2) + eps)
