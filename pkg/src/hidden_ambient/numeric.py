"""Dense-tensor helpers, seeded randomness, small MLPs with hand-written backprop, Adam.

Tensors are plain ``numpy.ndarray`` objects. Networks are sequences of
:class:`DenseLayer` that cache their forward inputs so that :func:`backward`
can replay the chain rule in reverse.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

EPS_PROB = 1e-7
LEAKY_SLOPE = 0.2
ACTIVATIONS = ("leaky_relu", "sigmoid", "tanh", "identity")


class ShapeError(ValueError):
    """Raised when tensor extents are invalid or do not line up."""


class StateError(RuntimeError):
    """Raised when an operation needs state that was never recorded."""


def make_rng(seed: int) -> np.random.Generator:
    return np.random.Generator(np.random.PCG64(seed))


def rng_sample(rng: np.random.Generator, dist: str, shape, dtype=np.float64) -> np.ndarray:
    """Draw i.i.d. samples of ``shape`` from ``uniform01`` or ``standard_normal``."""
    shape = tuple(int(s) for s in np.atleast_1d(shape))
    if not shape or any(s <= 0 for s in shape):
        raise ShapeError(f"shape extents must be positive, got {shape}")
    if dist == "uniform01":
        return rng.random(shape, dtype=dtype)
    if dist == "standard_normal":
        return rng.standard_normal(shape, dtype=dtype)
    raise ValueError(f"unknown distribution {dist!r}")


def matmul(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[0]:
        raise ShapeError(f"cannot multiply {a.shape} by {b.shape}")
    return a @ b


def _activate(name: str, s: np.ndarray) -> np.ndarray:
    if name == "leaky_relu":
        return np.where(s > 0, s, LEAKY_SLOPE * s)
    if name == "sigmoid":
        # split by sign so large |s| never overflows exp
        out = np.empty_like(s)
        pos = s >= 0
        out[pos] = 1.0 / (1.0 + np.exp(-s[pos]))
        e = np.exp(s[~pos])
        out[~pos] = e / (1.0 + e)
        return out
    if name == "tanh":
        return np.tanh(s)
    if name == "identity":
        return s
    raise ValueError(f"unknown activation {name!r}")


def _activation_grad(name: str, s: np.ndarray, out: np.ndarray) -> np.ndarray:
    if name == "leaky_relu":
        return np.where(s > 0, 1.0, LEAKY_SLOPE).astype(s.dtype)
    if name == "sigmoid":
        return out * (1.0 - out)
    if name == "tanh":
        return 1.0 - out * out
    return np.ones_like(s)


class DenseLayer:
    """Fully connected layer ``activation(x @ W.T + b)``.

    ``weight`` has shape ``[out, in]`` and ``bias`` has shape ``[out]``.
    """

    def __init__(self, weight: np.ndarray, bias: np.ndarray, activation: str = "identity"):
        if activation not in ACTIVATIONS:
            raise ValueError(f"unknown activation {activation!r}")
        if weight.ndim != 2 or bias.shape != (weight.shape[0],):
            raise ShapeError(f"weight {weight.shape} and bias {bias.shape} disagree")
        self.weight = weight
        self.bias = bias
        self.activation = activation
        self._cache = None
        self.grad_weight = np.zeros_like(weight)
        self.grad_bias = np.zeros_like(bias)

    @classmethod
    def init(cls, n_in: int, n_out: int, activation: str, rng: np.random.Generator,
             dtype=np.float32) -> "DenseLayer":
        # Glorot-uniform weights, zero biases
        s = np.sqrt(6.0 / (n_in + n_out))
        w = rng.uniform(-s, s, size=(n_out, n_in)).astype(dtype)
        return cls(w, np.zeros(n_out, dtype=dtype), activation)

    @property
    def n_in(self) -> int:
        return self.weight.shape[1]

    @property
    def n_out(self) -> int:
        return self.weight.shape[0]

    def forward(self, x: np.ndarray) -> np.ndarray:
        if x.ndim != 2 or x.shape[1] != self.n_in:
            raise ShapeError(f"layer expects [batch x {self.n_in}], got {x.shape}")
        s = x @ self.weight.T + self.bias
        out = _activate(self.activation, s)
        self._cache = (x, s, out)
        return out

    def backward(self, grad_out: np.ndarray) -> np.ndarray:
        """Store parameter gradients and return the gradient w.r.t. the layer input."""
        if self._cache is None:
            raise StateError("backward called before forward")
        x, s, out = self._cache
        gs = grad_out * _activation_grad(self.activation, s, out)
        self.grad_weight = gs.T @ x
        self.grad_bias = gs.sum(axis=0)
        return gs @ self.weight

    def params(self) -> list[np.ndarray]:
        return [self.weight, self.bias]

    def grads(self) -> list[np.ndarray]:
        return [self.grad_weight, self.grad_bias]

    def astype(self, dtype) -> "DenseLayer":
        return DenseLayer(self.weight.astype(dtype), self.bias.astype(dtype), self.activation)


class MinibatchStdLayer:
    """Appends the batch-averaged feature standard deviation as one extra column.

    Lets a discriminator see sample diversity, which counters generator mode
    collapse. Has no parameters.
    """

    activation = "minibatch_std"

    def __init__(self, n_in: int, eps: float = 1e-8):
        self._n_in = n_in
        self.eps = eps
        self._cache = None

    @property
    def n_in(self) -> int:
        return self._n_in

    @property
    def n_out(self) -> int:
        return self._n_in + 1

    def forward(self, x: np.ndarray) -> np.ndarray:
        if x.ndim != 2 or x.shape[1] != self._n_in:
            raise ShapeError(f"layer expects [batch x {self._n_in}], got {x.shape}")
        centred = x - x.mean(axis=0)
        std = np.sqrt((centred ** 2).mean(axis=0) + self.eps)
        s = std.mean()
        self._cache = (centred, std)
        return np.hstack([x, np.full((x.shape[0], 1), s, dtype=x.dtype)])

    def backward(self, grad_out: np.ndarray) -> np.ndarray:
        if self._cache is None:
            raise StateError("backward called before forward")
        centred, std = self._cache
        B, n = centred.shape
        gs = grad_out[:, -1].sum()
        # d mean(std) / dx[b, j] = centred[b, j] / (n * B * std[j])
        return grad_out[:, :-1] + gs * centred / (n * B * std)

    def params(self) -> list[np.ndarray]:
        return []

    def grads(self) -> list[np.ndarray]:
        return []

    def astype(self, dtype) -> "MinibatchStdLayer":
        return MinibatchStdLayer(self._n_in, self.eps)


class DropoutLayer:
    """Inverted dropout. Inactive (identity) unless ``rng`` is set and ``active`` is true."""

    activation = "dropout"

    def __init__(self, n: int, rate: float, rng: np.random.Generator | None = None):
        if not 0.0 <= rate < 1.0:
            raise ValueError(f"dropout rate must lie in [0, 1), got {rate}")
        self._n = n
        self.rate = rate
        self.rng = rng
        self.active = True
        self._keep = None

    @property
    def n_in(self) -> int:
        return self._n

    @property
    def n_out(self) -> int:
        return self._n

    def forward(self, x: np.ndarray) -> np.ndarray:
        if x.ndim != 2 or x.shape[1] != self._n:
            raise ShapeError(f"layer expects [batch x {self._n}], got {x.shape}")
        if not self.active or self.rng is None or self.rate == 0.0:
            self._keep = None
            return x
        self._keep = (self.rng.random(x.shape, dtype=np.float32) >= self.rate).astype(x.dtype)
        self._keep /= x.dtype.type(1.0 - self.rate)
        return x * self._keep

    def backward(self, grad_out: np.ndarray) -> np.ndarray:
        return grad_out if self._keep is None else grad_out * self._keep

    def params(self) -> list[np.ndarray]:
        return []

    def grads(self) -> list[np.ndarray]:
        return []

    def astype(self, dtype) -> "DropoutLayer":
        return DropoutLayer(self._n, self.rate, self.rng)


def dense_forward(layer: DenseLayer, x: np.ndarray) -> np.ndarray:
    return layer.forward(x)


class Network:
    """A plain sequence of dense layers."""

    def __init__(self, layers: Sequence[DenseLayer]):
        self.layers = list(layers)

    @classmethod
    def mlp(cls, sizes: Sequence[int], activations: Sequence[str], rng: np.random.Generator,
            dtype=np.float32) -> "Network":
        if len(activations) != len(sizes) - 1:
            raise ValueError("need one activation per layer")
        return cls([DenseLayer.init(a, b, act, rng, dtype)
                    for a, b, act in zip(sizes[:-1], sizes[1:], activations)])

    @property
    def n_in(self) -> int:
        return self.layers[0].n_in

    @property
    def n_out(self) -> int:
        return self.layers[-1].n_out

    def forward(self, x: np.ndarray) -> np.ndarray:
        for layer in self.layers:
            x = layer.forward(x)
        return x

    def backward(self, grad_out: np.ndarray) -> np.ndarray:
        for layer in reversed(self.layers):
            grad_out = layer.backward(grad_out)
        return grad_out

    def params(self) -> list[np.ndarray]:
        return [p for layer in self.layers for p in layer.params()]

    def grads(self) -> list[np.ndarray]:
        return [g for layer in self.layers for g in layer.grads()]

    def astype(self, dtype) -> "Network":
        return Network([layer.astype(dtype) for layer in self.layers])


def backward(network: Network | Sequence[DenseLayer], grad_out: np.ndarray):
    """Reverse-mode pass through a recorded forward.

    Returns ``(param_grads, input_grad)`` where ``param_grads`` lists
    weight/bias gradients in layer order.
    """
    if not isinstance(network, Network):
        network = Network(network)
    grad_in = network.backward(grad_out)
    return network.grads(), grad_in


def gan_losses(d_real: np.ndarray, d_fake: np.ndarray, eps: float = EPS_PROB):
    """Discriminator loss and non-saturating generator loss from D outputs."""
    d_real = np.asarray(d_real, dtype=np.float64).ravel()
    d_fake = np.asarray(d_fake, dtype=np.float64).ravel()
    if d_real.size == 0 or d_fake.size == 0:
        raise ValueError("empty batch")
    r = np.clip(d_real, eps, 1 - eps)
    f = np.clip(d_fake, eps, 1 - eps)
    d_loss = -np.mean(np.log(r)) - np.mean(np.log1p(-f))
    g_loss = -np.mean(np.log(f))
    return float(d_loss), float(g_loss)


@dataclass
class AdamState:
    lr: float = 2e-4
    beta1: float = 0.5
    beta2: float = 0.999
    epsilon: float = 1e-8
    t: int = 0
    m: list = field(default_factory=list)
    v: list = field(default_factory=list)

    @classmethod
    def for_params(cls, params: Sequence[np.ndarray], **hyper) -> "AdamState":
        return cls(m=[np.zeros_like(p) for p in params],
                   v=[np.zeros_like(p) for p in params], **hyper)


def adam_step(state: AdamState, params: Sequence[np.ndarray], grads: Sequence[np.ndarray]) -> None:
    """Bias-corrected Adam update, applied to ``params`` in place."""
    if len(params) != len(grads) or len(params) != len(state.m):
        raise ShapeError("params, grads and optimizer moments differ in count")
    for p, g, m in zip(params, grads, state.m):
        if p.shape != g.shape or p.shape != m.shape:
            raise ShapeError(f"shape mismatch {p.shape} / {g.shape} / {m.shape}")
    state.t += 1
    b1, b2 = state.beta1, state.beta2
    c1 = 1.0 - b1 ** state.t
    c2 = 1.0 - b2 ** state.t
    for p, g, m, v in zip(params, grads, state.m, state.v):
        m *= b1
        m += (1 - b1) * g
        v *= b2
        v += (1 - b2) * g * g
        step = state.lr * (m / c1) / (np.sqrt(v / c2) + state.epsilon)
        p -= step.astype(p.dtype, copy=False)


def finite_diff_gradcheck(network: Network, x: np.ndarray,
                          loss: Callable[[np.ndarray], tuple[float, np.ndarray]],
                          h: float = 1e-5, coords_per_tensor: int | None = None,
                          rng: np.random.Generator | None = None) -> float:
    """Max relative error between backprop and central differences.

    ``loss(output)`` returns ``(value, d value / d output)``. The network is
    evaluated in double precision on a copy, and the input gradient is checked
    too. ``coords_per_tensor`` samples that many coordinates per tensor instead
    of checking all of them.
    """
    if h <= 0:
        raise ValueError("step must be positive")
    net = network.astype(np.float64)
    x = np.array(x, dtype=np.float64)

    def value() -> float:
        return loss(net.forward(x))[0]

    _, g_out = loss(net.forward(x))
    grads, g_in = backward(net, g_out)
    worst = 0.0
    for arr, analytic in list(zip(net.params(), grads)) + [(x, g_in)]:
        flat = arr.reshape(-1)
        an = np.asarray(analytic).reshape(-1)
        idx = range(flat.size)
        if coords_per_tensor is not None and flat.size > coords_per_tensor:
            idx = (rng or make_rng(0)).choice(flat.size, coords_per_tensor, replace=False)
        for i in idx:
            orig = flat[i]
            flat[i] = orig + h
            up = value()
            flat[i] = orig - h
            down = value()
            flat[i] = orig
            num = (up - down) / (2 * h)
            worst = max(worst, abs(an[i] - num) / max(1.0, abs(an[i])))
    return worst
