"""Exact minimax game on finite spaces.

The generator's distribution is searched exhaustively over a simplex grid, so
every statement about optimal generators here is checked by brute force.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .measurements import DiscreteChannel

LOG2 = float(np.log(2.0))
TIE_TOL = 1e-12


@dataclass
class DiscreteDistribution:
    probs: np.ndarray

    def __post_init__(self):
        self.probs = np.asarray(self.probs, dtype=np.float64)
        if self.probs.ndim != 1 or np.any(self.probs < 0) or abs(self.probs.sum() - 1.0) > 1e-12:
            raise ValueError("probabilities must be a nonnegative vector summing to 1")

    def __len__(self) -> int:
        return self.probs.size


def _probs(p) -> np.ndarray:
    return p.probs if isinstance(p, DiscreteDistribution) else np.asarray(p, dtype=np.float64)


def _matrix(channel) -> np.ndarray:
    return channel.matrix if isinstance(channel, DiscreteChannel) else np.asarray(channel, dtype=np.float64)


def pushforward(channel, p_x) -> np.ndarray:
    K, p = _matrix(channel), _probs(p_x)
    if K.shape[0] != p.shape[-1]:
        raise ValueError(f"channel has {K.shape[0]} inputs, distribution has {p.shape[-1]} states")
    return p @ K


def optimal_discriminator(p_y_r, p_y_g) -> np.ndarray:
    r, g = _probs(p_y_r), _probs(p_y_g)
    total = r + g
    with np.errstate(invalid="ignore", divide="ignore"):
        d = np.where(total > 0, r / total, 0.5)
    return d


def game_value(p_y_r, p_y_g, D, eps: float = 1e-12) -> float:
    r, g = _probs(p_y_r), _probs(p_y_g)
    D = np.clip(np.asarray(D, dtype=np.float64), eps, 1 - eps)
    return float(r @ np.log(D) + g @ np.log1p(-D))


def js_divergence(p, q) -> np.ndarray | float:
    """Jensen-Shannon divergence in nats. Broadcasts over leading axes of ``q``."""
    p, q = _probs(p), _probs(q)
    m = 0.5 * (p + q)

    def kl(a, b):
        with np.errstate(divide="ignore", invalid="ignore"):
            t = np.where(a > 0, a * np.log(a / np.where(b > 0, b, 1.0)), 0.0)
        return t.sum(axis=-1)

    js = np.clip(0.5 * kl(p, m) + 0.5 * kl(q, m), 0.0, LOG2)
    return float(js) if np.ndim(js) == 0 else js


def simplex_grid(n_states: int, grid_step: float) -> np.ndarray:
    """All points of the probability simplex whose coordinates are multiples of ``grid_step``."""
    steps = round(1.0 / grid_step)
    if steps < 1 or abs(steps * grid_step - 1.0) > 1e-9:
        raise ValueError(f"grid step {grid_step} must divide 1")
    if n_states == 1:
        return np.ones((1, 1))
    # stars and bars: compositions of `steps` into n_states parts, lexicographic
    def rec(n, total):
        if n == 1:
            return np.array([[total]])
        blocks = [np.hstack([np.full((len(sub), 1), first), sub])
                  for first in range(total + 1) for sub in [rec(n - 1, total - first)]]
        return np.vstack(blocks)

    return rec(n_states, steps) / steps


@dataclass
class MinimizerReport:
    minimizers: np.ndarray
    min_js: float

    def to_dict(self) -> dict:
        return {"minimizers": self.minimizers.tolist(), "min_js": self.min_js,
                "count": int(len(self.minimizers))}


def _minimize(K: np.ndarray, target: np.ndarray, grid: np.ndarray) -> MinimizerReport:
    js = js_divergence(target, grid @ K)
    best = float(js.min())
    return MinimizerReport(grid[js <= best + TIE_TOL], best)


def generator_optimum_grid_search(channel, p_y_r, grid_step: float = 0.01) -> MinimizerReport:
    """Every grid point p_x^g minimizing JS(p_y^r || K^T p_x^g), lexicographically ordered."""
    K = _matrix(channel)
    if K.shape[0] > 4:
        raise ValueError("grid search supports at most 4 input states")
    return _minimize(K, _probs(p_y_r), simplex_grid(K.shape[0], grid_step))


@dataclass
class MixtureGameConfig:
    """Hidden measurement acting as identity with probability ``p2``.

    ``target`` is the real measurement distribution p_y^r; when omitted it is
    taken as the mixture's pushforward of the real signal distribution.
    """
    p2: float
    channel_id: DiscreteChannel
    channel_noise: DiscreteChannel
    target: np.ndarray | None = None

    def __post_init__(self):
        if not 0.0 <= self.p2 <= 1.0:
            raise ValueError(f"p2 must lie in [0, 1], got {self.p2}")
        if _matrix(self.channel_id).shape != _matrix(self.channel_noise).shape:
            raise ValueError("component channels must have the same shape")

    @property
    def mixture_matrix(self) -> np.ndarray:
        return self.p2 * _matrix(self.channel_id) + (1 - self.p2) * _matrix(self.channel_noise)


def _sets_intersect(sets: list[np.ndarray], tol: float) -> bool:
    first, rest = sets[0], sets[1:]
    for point in first:
        if all(np.any(np.max(np.abs(s - point), axis=1) <= tol) for s in rest):
            return True
    return False


def mixture_optimum_analysis(config: MixtureGameConfig, p_x_r, grid_step: float = 0.01) -> dict:
    """Minimizers of each mixture component's objective and of the mixture itself.

    Components with zero weight are reported but do not take part in the
    agreement decision. Agreement means the participating minimizer sets share
    a point within one grid step.
    """
    p_x_r = _probs(p_x_r)
    mix = config.mixture_matrix
    target = pushforward(mix, p_x_r) if config.target is None else _probs(config.target)
    grid = simplex_grid(mix.shape[0], grid_step)
    identity = _minimize(_matrix(config.channel_id), target, grid)
    noise = _minimize(_matrix(config.channel_noise), target, grid)
    mixture = _minimize(mix, target, grid)
    active = [mixture.minimizers]
    if config.p2 > 0:
        active.append(identity.minimizers)
    if config.p2 < 1:
        active.append(noise.minimizers)
    return {
        "p2": config.p2,
        "target": target.tolist(),
        "identity_component": identity.to_dict(),
        "noise_component": noise.to_dict(),
        "mixture": mixture.to_dict(),
        "agreement": _sets_intersect(active, grid_step + 1e-9),
    }
