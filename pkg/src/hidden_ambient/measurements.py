"""Lossy measurement families, their random parameters, and uniqueness diagnostics.

Every measurement acts on a single item shaped ``(H, W)`` (an image) or
``(C, H, W)`` (a hidden feature map). Masking kinds draw one 2-D spatial mask
and broadcast it over channels.
"""
from __future__ import annotations

import itertools
import json
import math
from dataclasses import asdict, dataclass, field
from typing import Callable, Sequence

import numpy as np
from scipy import ndimage

from .numeric import ShapeError

KINDS = ("block_pixel", "block_patch", "keep_patch", "extract_patch",
         "gaussian_projection", "convolve_noise", "identity")
MASK_KINDS = ("block_pixel", "block_patch", "keep_patch", "identity")
PATCH_KINDS = ("block_patch", "keep_patch", "extract_patch")
CONTINUOUS_KINDS = ("gaussian_projection", "convolve_noise")
MAX_ENUM_STATES = 4096


class UnsupportedChannelError(ValueError):
    pass


def _default_kernel() -> list:
    g = np.exp(-0.5 * np.arange(-1, 2) ** 2)
    k = np.outer(g, g)
    return (k / k.sum()).tolist()


@dataclass
class MeasurementSpec:
    kind: str = "identity"
    p: float = 0.5
    k: int = 4
    m: int = 16
    noise_std: float = 0.1
    kernel: list = field(default_factory=_default_kernel)

    def __post_init__(self):
        if self.kind not in KINDS:
            raise ValueError(f"unknown measurement kind {self.kind!r}")
        if not 0.0 <= self.p <= 1.0:
            raise ValueError(f"p must lie in [0, 1], got {self.p}")
        if self.k < 1 or self.m < 1:
            raise ValueError("k and m must be >= 1")
        if self.noise_std < 0:
            raise ValueError("noise_std must be >= 0")

    def to_json(self) -> str:
        return json.dumps(asdict(self), sort_keys=True)

    @classmethod
    def from_dict(cls, d: dict) -> "MeasurementSpec":
        known = {f: d[f] for f in ("kind", "p", "k", "m", "noise_std", "kernel") if f in d}
        return cls(**known)

    @classmethod
    def from_json(cls, text: str) -> "MeasurementSpec":
        return cls.from_dict(json.loads(text))

    def output_shape(self, shape: tuple) -> tuple:
        shape = tuple(shape)
        if self.kind == "extract_patch":
            return shape[:-2] + (self.k, self.k)
        if self.kind == "gaussian_projection":
            return (self.m,)
        return shape


@dataclass
class ThetaSample:
    """One realization of the measurement parameters for one item."""
    kind: str
    shape: tuple
    mask: np.ndarray | None = None      # (H, W) in {0, 1}
    origin: tuple | None = None         # top-left corner of the k x k window
    k: int = 0
    matrix: np.ndarray | None = None    # (m, n) for gaussian_projection
    noise: np.ndarray | None = None     # same shape as input, convolve_noise
    kernel: np.ndarray | None = None
    noise_std: float = 0.0


def _spatial(shape) -> tuple[int, int]:
    shape = tuple(shape)
    if len(shape) not in (2, 3):
        raise ShapeError(f"expected (H, W) or (C, H, W), got {shape}")
    return shape[-2], shape[-1]


def _window_mask(hw, origin, k, keep: bool) -> np.ndarray:
    mask = np.zeros(hw) if keep else np.ones(hw)
    r, c = origin
    mask[r:r + k, c:c + k] = 1.0 if keep else 0.0
    return mask


def sample_theta(spec: MeasurementSpec, target_shape, rng: np.random.Generator) -> ThetaSample:
    """Draw one Θ ~ p_θ for an item of ``target_shape``."""
    return sample_thetas(spec, target_shape, 1, rng)[0]


def sample_thetas(spec: MeasurementSpec, target_shape, n: int,
                  rng: np.random.Generator) -> list[ThetaSample]:
    """Draw ``n`` independent Θ, using one vectorized RNG call per parameter."""
    shape = tuple(int(s) for s in target_shape)
    H, W = _spatial(shape) if spec.kind != "gaussian_projection" else (None, None)
    kind = spec.kind
    if kind == "identity":
        return [ThetaSample(kind, shape, mask=np.ones((H, W))) for _ in range(n)]
    if kind == "block_pixel":
        keep = (rng.random((n, H, W)) >= spec.p).astype(np.float64)
        return [ThetaSample(kind, shape, mask=keep[i]) for i in range(n)]
    if kind in PATCH_KINDS:
        k = spec.k
        if k > min(H, W):
            raise ValueError(f"patch side {k} exceeds spatial extent {(H, W)}")
        rows = rng.integers(0, H - k + 1, size=n)
        cols = rng.integers(0, W - k + 1, size=n)
        out = []
        for r, c in zip(rows, cols):
            origin = (int(r), int(c))
            mask = None if kind == "extract_patch" else _window_mask((H, W), origin, k, kind == "keep_patch")
            out.append(ThetaSample(kind, shape, mask=mask, origin=origin, k=k))
        return out
    if kind == "gaussian_projection":
        size = int(np.prod(shape))
        mats = rng.standard_normal((n, spec.m, size)) / math.sqrt(size)
        return [ThetaSample(kind, shape, matrix=mats[i]) for i in range(n)]
    # convolve_noise
    noise = rng.standard_normal((n,) + shape)
    kernel = np.asarray(spec.kernel, dtype=np.float64)
    return [ThetaSample(kind, shape, noise=noise[i], kernel=kernel, noise_std=spec.noise_std)
            for i in range(n)]


def _check_input(theta: ThetaSample, x: np.ndarray) -> None:
    if theta.kind == "gaussian_projection":
        if x.size != theta.matrix.shape[1]:
            raise ShapeError(f"projection expects {theta.matrix.shape[1]} values, got {x.shape}")
    elif _spatial(x.shape) != _spatial(theta.shape):
        raise ShapeError(f"Θ drawn for {theta.shape}, input is {x.shape}")


def _conv(x: np.ndarray, kernel: np.ndarray, adjoint: bool = False) -> np.ndarray:
    op = ndimage.correlate if adjoint else ndimage.convolve
    if x.ndim == 2:
        return op(x, kernel, mode="constant")
    return np.stack([op(ch, kernel, mode="constant") for ch in x])


def apply_measurement(theta: ThetaSample, x: np.ndarray) -> np.ndarray:
    """Compute y = f_Θ(x)."""
    x = np.asarray(x)
    _check_input(theta, x)
    if theta.mask is not None:
        return x * theta.mask.astype(x.dtype)
    if theta.kind == "extract_patch":
        r, c = theta.origin
        return x[..., r:r + theta.k, c:c + theta.k].copy()
    if theta.kind == "gaussian_projection":
        return theta.matrix @ x.reshape(-1)
    return _conv(x, theta.kernel) + theta.noise_std * theta.noise


def measurement_backward(theta: ThetaSample, grad_out: np.ndarray, input_shape=None) -> np.ndarray:
    """Vector-Jacobian product of :func:`apply_measurement` w.r.t. its input."""
    input_shape = tuple(input_shape) if input_shape is not None else theta.shape
    grad_out = np.asarray(grad_out)
    if theta.kind == "extract_patch":
        want = input_shape[:-2] + (theta.k, theta.k)
        if grad_out.shape != want:
            raise ShapeError(f"expected gradient of shape {want}, got {grad_out.shape}")
        g = np.zeros(input_shape, dtype=grad_out.dtype)
        r, c = theta.origin
        g[..., r:r + theta.k, c:c + theta.k] = grad_out
        return g
    if theta.kind == "gaussian_projection":
        if grad_out.shape != (theta.matrix.shape[0],):
            raise ShapeError(f"expected gradient of shape {(theta.matrix.shape[0],)}, got {grad_out.shape}")
        return (theta.matrix.T @ grad_out).reshape(input_shape)
    if grad_out.shape != input_shape:
        raise ShapeError(f"expected gradient of shape {input_shape}, got {grad_out.shape}")
    if theta.mask is not None:
        return grad_out * theta.mask.astype(grad_out.dtype)
    return _conv(grad_out, theta.kernel, adjoint=True)


# Batched forms used by the trainer. ``x`` carries a leading batch axis.

def batch_output_shape(thetas: Sequence[ThetaSample], item_shape) -> tuple:
    t = thetas[0]
    if t.kind == "extract_patch":
        return tuple(item_shape)[:-2] + (t.k, t.k)
    if t.kind == "gaussian_projection":
        return (t.matrix.shape[0],)
    return tuple(item_shape)


def apply_batch(thetas: Sequence[ThetaSample], x: np.ndarray) -> np.ndarray:
    if len(thetas) != x.shape[0]:
        raise ShapeError(f"{len(thetas)} Θ for a batch of {x.shape[0]}")
    if thetas[0].mask is not None:
        masks = np.stack([t.mask for t in thetas]).astype(x.dtype)
        if x.ndim == 4:
            masks = masks[:, None]
        return x * masks
    return np.stack([apply_measurement(t, xi) for t, xi in zip(thetas, x)])


def backward_batch(thetas: Sequence[ThetaSample], grad_out: np.ndarray, item_shape) -> np.ndarray:
    if thetas[0].mask is not None:
        masks = np.stack([t.mask for t in thetas]).astype(grad_out.dtype)
        if grad_out.ndim == 4:
            masks = masks[:, None]
        return grad_out * masks
    return np.stack([measurement_backward(t, g, item_shape) for t, g in zip(thetas, grad_out)])


# Uniqueness diagnostics

@dataclass
class UniquenessReport:
    identity_probability_estimate: float
    half_width: float
    n_samples: int
    n_identity: int
    channel_injective: bool | None = None

    def to_dict(self) -> dict:
        return asdict(self)


def wilson_interval(successes: int, n: int, z: float = 1.959963984540054) -> tuple[float, float]:
    """Wilson score interval centre and half-width."""
    if n == 0:
        return 0.0, 0.0
    phat = successes / n
    denom = 1 + z * z / n
    centre = (phat + z * z / (2 * n)) / denom
    half = z * math.sqrt(phat * (1 - phat) / n + z * z / (4 * n * n)) / denom
    return centre, half


def identity_probability_estimate(spec: MeasurementSpec, input_sampler: Callable[[np.random.Generator], np.ndarray],
                                  n_samples: int, rng: np.random.Generator) -> UniquenessReport:
    """Monte-Carlo estimate of Pr[f_Θ(x) == x] with a 95% Wilson half-width."""
    if n_samples < 1:
        raise ValueError("n_samples must be >= 1")
    hits = 0
    for _ in range(n_samples):
        x = np.asarray(input_sampler(rng))
        y = apply_measurement(sample_theta(spec, x.shape, rng), x)
        hits += bool(y.shape == x.shape and np.array_equal(y, x))
    _, half = wilson_interval(hits, n_samples)
    return UniquenessReport(hits / n_samples, half, n_samples, hits)


@dataclass
class DiscreteChannel:
    """Row-stochastic matrix ``K[i, j] = Pr[y_j | x_i]`` over enumerated states."""
    matrix: np.ndarray
    inputs: list | None = None
    outputs: list | None = None

    def __post_init__(self):
        self.matrix = np.asarray(self.matrix, dtype=np.float64)
        if self.matrix.ndim != 2:
            raise ValueError("channel matrix must be 2-D")
        if np.any(self.matrix < 0) or not np.allclose(self.matrix.sum(axis=1), 1.0, rtol=0, atol=1e-12):
            raise ValueError("channel matrix must be row-stochastic")

    @classmethod
    def identity(cls, n: int) -> "DiscreteChannel":
        return cls(np.eye(n))

    @property
    def n_inputs(self) -> int:
        return self.matrix.shape[0]

    @property
    def n_outputs(self) -> int:
        return self.matrix.shape[1]


def theta_support(spec: MeasurementSpec, shape) -> list[tuple[float, ThetaSample]]:
    """Finite support of p_θ for ``shape``, as (probability, Θ) pairs."""
    shape = tuple(shape)
    H, W = _spatial(shape)
    if spec.kind in CONTINUOUS_KINDS:
        raise UnsupportedChannelError(f"{spec.kind} has a continuous parameter distribution")
    if spec.kind == "identity":
        return [(1.0, ThetaSample("identity", shape, mask=np.ones((H, W))))]
    if spec.kind == "block_pixel":
        n = H * W
        if 2 ** n > MAX_ENUM_STATES:
            raise UnsupportedChannelError(f"{n} pixels give too many masks to enumerate")
        out = []
        for bits in itertools.product((0.0, 1.0), repeat=n):
            kept = int(sum(bits))
            prob = (1 - spec.p) ** kept * spec.p ** (n - kept)
            if prob > 0:
                out.append((prob, ThetaSample("block_pixel", shape, mask=np.array(bits).reshape(H, W))))
        return out
    k = spec.k
    if k > min(H, W):
        raise ValueError(f"patch side {k} exceeds spatial extent {(H, W)}")
    origins = [(r, c) for r in range(H - k + 1) for c in range(W - k + 1)]
    prob = 1.0 / len(origins)
    out = []
    for o in origins:
        mask = None if spec.kind == "extract_patch" else _window_mask((H, W), o, k, spec.kind == "keep_patch")
        out.append((prob, ThetaSample(spec.kind, shape, mask=mask, origin=o, k=k)))
    return out


def _state_key(y: np.ndarray) -> tuple:
    return (y.shape, tuple(float(v) for v in y.reshape(-1)))


def build_channel_matrix(spec: MeasurementSpec, inputs: Sequence[np.ndarray]) -> DiscreteChannel:
    """Exact channel over enumerated ``inputs``, marginalizing Θ over its finite support.

    Output states are every distinct measurement reached, sorted by (shape, values).
    """
    inputs = [np.asarray(x, dtype=np.float64) for x in inputs]
    if not inputs or len(inputs) > MAX_ENUM_STATES:
        raise ValueError(f"need between 1 and {MAX_ENUM_STATES} input states")
    support = theta_support(spec, inputs[0].shape)
    rows: list[dict] = []
    for x in inputs:
        row: dict = {}
        for prob, theta in support:
            key = _state_key(apply_measurement(theta, x))
            row[key] = row.get(key, 0.0) + prob
        rows.append(row)
    keys = sorted(set().union(*rows))
    index = {key: j for j, key in enumerate(keys)}
    K = np.zeros((len(inputs), len(keys)))
    for i, row in enumerate(rows):
        for key, prob in row.items():
            K[i, index[key]] = prob
    K /= K.sum(axis=1, keepdims=True)
    outputs = [np.array(vals).reshape(shape) for shape, vals in keys]
    return DiscreteChannel(K, inputs, outputs)


def binary_images(shape) -> list[np.ndarray]:
    """Every {0, 1} image of ``shape``, in lexicographic order."""
    n = int(np.prod(shape))
    if 2 ** n > MAX_ENUM_STATES:
        raise ValueError(f"{n} pixels give too many states to enumerate")
    return [np.array(bits, dtype=np.float64).reshape(shape)
            for bits in itertools.product((0.0, 1.0), repeat=n)]


def matrix_rank(a: np.ndarray, tol: float = 1e-9) -> int:
    """Rank by Gaussian elimination with partial pivoting."""
    a = np.array(a, dtype=np.float64)
    rows, cols = a.shape
    rank = 0
    for col in range(cols):
        if rank == rows:
            break
        pivot = rank + int(np.argmax(np.abs(a[rank:, col])))
        if abs(a[pivot, col]) <= tol:
            continue
        a[[rank, pivot]] = a[[pivot, rank]]
        a[rank + 1:] -= np.outer(a[rank + 1:, col] / a[rank, col], a[rank])
        rank += 1
    return rank


def injectivity_test(channel: DiscreteChannel, tol: float = 1e-9) -> bool:
    """True iff distinct input distributions always induce distinct output distributions."""
    return matrix_rank(channel.matrix, tol) == channel.n_inputs
