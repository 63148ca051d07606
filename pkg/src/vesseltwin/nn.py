"""A small deterministic neural-network engine on numpy.

Dense and recurrent layers with hand-written backward passes, MSE loss,
Adam, gradient clipping and a central finite-difference checker. All
parameters are float64 arrays held in plain dicts so models serialize
trivially.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable

import numpy as np

RRELU_LOWER = 1.0 / 8.0
RRELU_UPPER = 1.0 / 3.0
RRELU_EVAL_SLOPE = 0.5 * (RRELU_LOWER + RRELU_UPPER)

ADAM_BETA1 = 0.9
ADAM_BETA2 = 0.999
ADAM_EPS = 1e-8

ACTIVATIONS = ("identity", "relu", "rrelu", "sigmoid")


class ShapeError(ValueError):
    pass


def init_uniform(rng: np.random.Generator, shape: tuple[int, ...], fan_in: int) -> np.ndarray:
    bound = 1.0 / np.sqrt(fan_in)
    return rng.uniform(-bound, bound, size=shape)


def sigmoid(z: np.ndarray) -> np.ndarray:
    # split by sign so exp never overflows
    out = np.empty_like(z)
    pos = z >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-z[pos]))
    ez = np.exp(z[~pos])
    out[~pos] = ez / (1.0 + ez)
    return out


def rrelu(x: np.ndarray, training: bool = False, rng: np.random.Generator | None = None
          ) -> tuple[np.ndarray, np.ndarray]:
    """Randomized leaky ReLU. Returns ``(y, slope)`` where ``slope`` is dy/dx."""
    if training:
        if rng is None:
            raise ValueError("rrelu in training mode needs an rng")
        a = rng.uniform(RRELU_LOWER, RRELU_UPPER, size=x.shape)
    else:
        a = RRELU_EVAL_SLOPE
    slope = np.where(x >= 0, 1.0, a)
    return x * slope, slope


def activation_forward(name: str, z: np.ndarray, training: bool = False,
                       rng: np.random.Generator | None = None):
    """Returns ``(a, aux)``; ``aux`` is whatever the backward pass needs."""
    if name == "identity":
        return z, None
    if name == "relu":
        a = np.maximum(z, 0.0)
        return a, None
    if name == "rrelu":
        return rrelu(z, training, rng)
    if name == "sigmoid":
        a = sigmoid(z)
        return a, a
    raise ValueError(f"unknown activation {name!r}")


def activation_backward(name: str, z: np.ndarray, aux, da: np.ndarray) -> np.ndarray:
    if name == "identity":
        return da
    if name == "relu":
        return da * (z > 0)
    if name == "rrelu":
        return da * aux
    if name == "sigmoid":
        return da * aux * (1.0 - aux)
    raise ValueError(f"unknown activation {name!r}")


class Dense:
    """Affine layer ``act(x @ W.T + b)`` with W shaped (out, in)."""

    def __init__(self, n_in: int, n_out: int, activation: str = "identity",
                 rng: np.random.Generator | None = None):
        if activation not in ACTIVATIONS:
            raise ValueError(f"unknown activation {activation!r}")
        rng = rng if rng is not None else np.random.default_rng(0)
        self.activation = activation
        self.params = {"W": init_uniform(rng, (n_out, n_in), n_in),
                       "b": init_uniform(rng, (n_out,), n_in)}

    @property
    def n_in(self) -> int:
        return self.params["W"].shape[1]

    @property
    def n_out(self) -> int:
        return self.params["W"].shape[0]

    def forward(self, x: np.ndarray, training: bool = False,
                rng: np.random.Generator | None = None):
        if x.shape[-1] != self.n_in:
            raise ShapeError(f"dense layer expects {self.n_in} inputs, got {x.shape[-1]}")
        z = x @ self.params["W"].T + self.params["b"]
        a, aux = activation_forward(self.activation, z, training, rng)
        return a, (x, z, aux)

    def backward(self, cache, da: np.ndarray):
        x, z, aux = cache
        if da.shape != z.shape:
            raise ShapeError(f"upstream gradient shape {da.shape} != output shape {z.shape}")
        dz = activation_backward(self.activation, z, aux, da)
        x2 = x.reshape(-1, x.shape[-1])
        dz2 = dz.reshape(-1, dz.shape[-1])
        grads = {"W": dz2.T @ x2, "b": dz2.sum(axis=0)}
        dx = dz @ self.params["W"]
        return dx, grads


def dense_forward(layer: Dense, x: np.ndarray, training: bool = False, rng=None):
    return layer.forward(x, training, rng)


def dense_backward(layer: Dense, cache, da: np.ndarray):
    return layer.backward(cache, da)


class Recurrent:
    """Elman layer ``h_t = relu(W_in x_t + W_rec h_{t-1} + b)``."""

    def __init__(self, n_in: int, n_hidden: int, rng: np.random.Generator | None = None,
                 activation: str = "relu"):
        rng = rng if rng is not None else np.random.default_rng(0)
        self.activation = activation
        self.params = {"W_in": init_uniform(rng, (n_hidden, n_in), n_in),
                       "W_rec": init_uniform(rng, (n_hidden, n_hidden), n_hidden),
                       "b": init_uniform(rng, (n_hidden,), n_in)}

    @property
    def n_in(self) -> int:
        return self.params["W_in"].shape[1]

    @property
    def n_hidden(self) -> int:
        return self.params["W_rec"].shape[0]

    def zero_grads(self) -> dict:
        return {k: np.zeros_like(v) for k, v in self.params.items()}

    def step(self, x: np.ndarray, h_prev: np.ndarray):
        if x.shape[-1] != self.n_in:
            raise ShapeError(f"recurrent layer expects {self.n_in} inputs, got {x.shape[-1]}")
        if h_prev.shape[-1] != self.n_hidden:
            raise ShapeError("hidden state size mismatch")
        p = self.params
        z = x @ p["W_in"].T + h_prev @ p["W_rec"].T + p["b"]
        h, aux = activation_forward(self.activation, z)
        return h, (x, h_prev, z, aux)

    def step_backward(self, cache, dh: np.ndarray, grads: dict):
        """Accumulate parameter gradients into ``grads``; return (dx, dh_prev)."""
        x, h_prev, z, aux = cache
        dz = activation_backward(self.activation, z, aux, dh)
        grads["W_in"] += dz.T @ x
        grads["W_rec"] += dz.T @ h_prev
        grads["b"] += dz.sum(axis=0)
        p = self.params
        return dz @ p["W_in"], dz @ p["W_rec"]


def rnn_forward(layers: list[Recurrent], xs: np.ndarray, h0: list[np.ndarray] | None = None):
    """Run stacked recurrent layers over ``xs`` shaped (T, B, n_in).

    Returns ``(outputs, hiddens, caches)``: the top layer's states (T, B, H),
    the final hidden state of each layer and per-step caches for BPTT.
    """
    if xs.ndim != 3 or len(xs) == 0:
        raise ShapeError("rnn_forward expects a non-empty (T, B, n_in) array")
    T, B, _ = xs.shape
    if h0 is None:
        h0 = [np.zeros((B, layer.n_hidden)) for layer in layers]
    hs = list(h0)
    caches = []
    outputs = np.empty((T, B, layers[-1].n_hidden))
    for t in range(T):
        inp = xs[t]
        step_caches = []
        for i, layer in enumerate(layers):
            hs[i], c = layer.step(inp, hs[i])
            step_caches.append(c)
            inp = hs[i]
        caches.append(step_caches)
        outputs[t] = inp
    return outputs, hs, caches


def rnn_backward(layers: list[Recurrent], caches, d_outputs: np.ndarray,
                 d_final: list[np.ndarray] | None = None):
    """Backpropagation through time for :func:`rnn_forward`.

    Returns ``(grads, d_xs, d_h0)`` with one grad dict per layer.
    """
    T = len(caches)
    grads = [layer.zero_grads() for layer in layers]
    B = d_outputs.shape[1]
    dh = [np.zeros((B, layer.n_hidden)) for layer in layers]
    if d_final is not None:
        dh = [d.copy() for d in d_final]
    d_xs = np.empty((T, B, layers[0].n_in))
    for t in range(T - 1, -1, -1):
        upstream = d_outputs[t]
        for i in range(len(layers) - 1, -1, -1):
            total = dh[i] + upstream
            dx, dh[i] = layers[i].step_backward(caches[t][i], total, grads[i])
            upstream = dx
        d_xs[t] = upstream
    return grads, d_xs, dh


def mse_loss(pred: np.ndarray, target: np.ndarray) -> tuple[float, np.ndarray]:
    if pred.shape != target.shape:
        raise ShapeError(f"prediction shape {pred.shape} != target shape {target.shape}")
    diff = pred - target
    n = diff.size
    return float(np.sum(diff * diff) / n), 2.0 * diff / n


def clip_by_global_norm(grads: dict[str, np.ndarray], max_norm: float) -> float:
    """Scale ``grads`` in place so their joint L2 norm is at most ``max_norm``."""
    norm = float(np.sqrt(sum(float(np.sum(g * g)) for g in grads.values())))
    if norm > max_norm > 0:
        scale = max_norm / norm
        for g in grads.values():
            g *= scale
    return norm


@dataclass
class AdamState:
    lr: float
    beta1: float = ADAM_BETA1
    beta2: float = ADAM_BETA2
    eps: float = ADAM_EPS
    step: int = 0
    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)


def adam_step(state: AdamState, params: dict[str, np.ndarray],
              grads: dict[str, np.ndarray]) -> None:
    """Bias-corrected Adam update, applied to ``params`` in place."""
    state.step += 1
    t = state.step
    b1, b2 = state.beta1, state.beta2
    c1 = 1.0 - b1 ** t
    c2 = 1.0 - b2 ** t
    for name, g in grads.items():
        p = params[name]
        if g.shape != p.shape:
            raise ShapeError(f"gradient for {name} has shape {g.shape}, parameter {p.shape}")
        if name not in state.m:
            state.m[name] = np.zeros_like(p)
            state.v[name] = np.zeros_like(p)
        m = state.m[name]
        v = state.v[name]
        m *= b1
        m += (1.0 - b1) * g
        v *= b2
        v += (1.0 - b2) * (g * g)
        p -= state.lr * (m / c1) / (np.sqrt(v / c2) + state.eps)


def numerical_gradient(f: Callable[[], float], x: np.ndarray, eps: float = 1e-5) -> np.ndarray:
    """Central finite differences of scalar ``f`` w.r.t. ``x`` (perturbed in place)."""
    grad = np.zeros_like(x)
    it = np.nditer(x, flags=["multi_index"])
    for _ in it:
        idx = it.multi_index
        old = x[idx]
        x[idx] = old + eps
        fp = f()
        x[idx] = old - eps
        fm = f()
        x[idx] = old
        grad[idx] = (fp - fm) / (2.0 * eps)
    return grad


def relative_error(a: np.ndarray, b: np.ndarray, floor: float = 1e-8) -> float:
    num = np.linalg.norm(a - b)
    den = max(np.linalg.norm(a) + np.linalg.norm(b), floor)
    return float(num / den)
