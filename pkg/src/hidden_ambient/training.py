"""Adversarial training with the measurement placed inside the generator.

The generator is split as ``G1 ∘ f_Θ ∘ G2``: ``G2`` maps noise to a
``(C, Hh, Wh)`` feature map, the hidden measurement corrupts it, and ``G1``
decodes to an image. Output-side measurement is optional and controlled by the
training mode.
"""
from __future__ import annotations

import csv
import logging
from dataclasses import asdict, dataclass, field
from typing import Sequence

import numpy as np
from scipy.spatial.distance import pdist, cdist

from . import measurements as meas
from .measurements import MeasurementSpec, ThetaSample
from .numeric import (EPS_PROB, AdamState, DenseLayer, DropoutLayer, MinibatchStdLayer, Network, adam_step,
                      gan_losses, make_rng)

log = logging.getLogger(__name__)

MODES = ("baseline", "ambient_output", "ambient_hidden", "ambient_both")
METRIC_FIELDS = ("step", "d_loss", "g_loss", "per_pixel_mean_error", "mmd2")


class ConfigError(ValueError):
    pass


class TrainingError(RuntimeError):
    pass


@dataclass
class TrainConfig:
    seed: int = 1
    noise_dim: int = 64
    image_shape: tuple = (16, 16)
    hidden_shape: tuple = (8, 8, 8)
    g2_hidden: tuple = ()
    g1_hidden: tuple = (256,)
    d_hidden: tuple = (128, 64)
    d_minibatch_std: int | None = None
    d_input_noise: float = 0.0
    d_dropout: float = 0.0
    d_label_smoothing: float = 0.0
    mode: str = "ambient_hidden"
    spec_output: MeasurementSpec | None = None
    spec_hidden: MeasurementSpec | None = None
    dataset_spec: MeasurementSpec | None = None
    dataset: str = "rectangles"
    dataset_size: int = 8000
    lr: float = 2e-4
    beta1: float = 0.5
    beta2: float = 0.999
    batch_size: int = 64
    steps: int = 20000
    d_steps_per_g_step: int = 1
    eval_every: int = 1000
    eval_samples: int = 1000

    def __post_init__(self):
        self.image_shape = tuple(self.image_shape)
        self.hidden_shape = tuple(self.hidden_shape)
        self.g2_hidden = tuple(self.g2_hidden)
        self.g1_hidden = tuple(self.g1_hidden)
        self.d_hidden = tuple(self.d_hidden)
        for name in ("spec_output", "spec_hidden", "dataset_spec"):
            v = getattr(self, name)
            if isinstance(v, dict):
                setattr(self, name, MeasurementSpec.from_dict(v))
        if self.mode not in MODES:
            raise ConfigError(f"unknown mode {self.mode!r}")
        if self.mode in ("ambient_hidden", "ambient_both") and self.spec_hidden is None:
            raise ConfigError(f"mode {self.mode} needs spec_hidden")
        if self.mode in ("ambient_output", "ambient_both") and self.spec_output is None:
            raise ConfigError(f"mode {self.mode} needs spec_output")
        if self.steps < 1 or self.batch_size < 1 or self.d_steps_per_g_step < 1 or self.eval_every < 1:
            raise ConfigError("steps, batch_size, d_steps_per_g_step and eval_every must be >= 1")
        if self.noise_dim < 1 or len(self.hidden_shape) != 3 or min(self.hidden_shape) < 1:
            raise ConfigError("noise_dim must be positive and hidden_shape a positive (C, H, W)")
        if len(self.image_shape) != 2 or min(self.image_shape) < 1:
            raise ConfigError("image_shape must be a positive (H, W)")
        if not (0 <= self.d_dropout < 1 and 0 <= self.d_label_smoothing < 1 and self.d_input_noise >= 0):
            raise ConfigError("d_dropout and d_label_smoothing must lie in [0, 1), d_input_noise >= 0")

    @property
    def uses_hidden(self) -> bool:
        return self.mode in ("ambient_hidden", "ambient_both")

    @property
    def uses_output(self) -> bool:
        return self.mode in ("ambient_output", "ambient_both")

    def to_dict(self) -> dict:
        d = asdict(self)
        for k in ("image_shape", "hidden_shape", "g2_hidden", "g1_hidden", "d_hidden"):
            d[k] = list(d[k])
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        known = {k: v for k, v in d.items() if k in cls.__dataclass_fields__}
        unknown = set(d) - set(known)
        if unknown:
            raise ConfigError(f"unknown config fields: {sorted(unknown)}")
        return cls(**known)


class GeneratorSplit:
    """``G1(f_Θ(G2(z)))`` with the hidden map exposed."""

    def __init__(self, g2: Network, g1: Network, hidden_shape, image_shape,
                 spec_hidden: MeasurementSpec | None = None):
        self.g2 = g2
        self.g1 = g1
        self.hidden_shape = tuple(hidden_shape)
        self.image_shape = tuple(image_shape)
        self.spec_hidden = spec_hidden
        if g2.n_out != int(np.prod(self.hidden_shape)):
            raise ConfigError(f"G2 emits {g2.n_out} values, hidden map holds {np.prod(self.hidden_shape)}")
        if g1.n_in != int(np.prod(self.g1_input_shape)):
            raise ConfigError(f"G1 expects {g1.n_in} inputs, hidden measurement yields {self.g1_input_shape}")
        if g1.n_out != int(np.prod(self.image_shape)):
            raise ConfigError(f"G1 emits {g1.n_out} values, image holds {np.prod(self.image_shape)}")

    @classmethod
    def build(cls, config: TrainConfig, rng: np.random.Generator, dtype=np.float32) -> "GeneratorSplit":
        hidden_n = int(np.prod(config.hidden_shape))
        spec_h = config.spec_hidden if config.uses_hidden else None
        g1_in = int(np.prod(spec_h.output_shape(config.hidden_shape))) if spec_h else hidden_n
        g2_sizes = [config.noise_dim, *config.g2_hidden, hidden_n]
        g1_sizes = [g1_in, *config.g1_hidden, int(np.prod(config.image_shape))]
        g2 = Network.mlp(g2_sizes, ["leaky_relu"] * (len(g2_sizes) - 1), rng, dtype)
        g1 = Network.mlp(g1_sizes, ["leaky_relu"] * (len(g1_sizes) - 2) + ["sigmoid"], rng, dtype)
        return cls(g2, g1, config.hidden_shape, config.image_shape, spec_h)

    @property
    def reshaping_hidden(self) -> bool:
        """True when the hidden measurement changes the map's shape (extract, projection)."""
        return (self.spec_hidden is not None
                and self.spec_hidden.output_shape(self.hidden_shape) != self.hidden_shape)

    @property
    def g1_input_shape(self) -> tuple:
        if self.reshaping_hidden:
            return self.spec_hidden.output_shape(self.hidden_shape)
        return self.hidden_shape

    def params(self) -> list[np.ndarray]:
        return self.g2.params() + self.g1.params()

    def grads(self) -> list[np.ndarray]:
        return self.g2.grads() + self.g1.grads()

    def astype(self, dtype) -> "GeneratorSplit":
        return GeneratorSplit(self.g2.astype(dtype), self.g1.astype(dtype), self.hidden_shape,
                              self.image_shape, self.spec_hidden)


def build_discriminator(n_in: int, hidden: Sequence[int], rng: np.random.Generator,
                        dtype=np.float32, minibatch_std: int | None = None,
                        dropout: float = 0.0) -> Network:
    """MLP ending in a sigmoid.

    ``minibatch_std`` inserts the diversity column after that many dense
    layers; ``dropout > 0`` follows every hidden layer with dropout.
    """
    sizes = [n_in, *hidden, 1]
    acts = ["leaky_relu"] * len(hidden) + ["sigmoid"]
    layers = []
    for i, (a, b, act) in enumerate(zip(sizes[:-1], sizes[1:], acts)):
        if minibatch_std is not None and i == minibatch_std:
            layers.append(MinibatchStdLayer(a))
            a += 1
        layers.append(DenseLayer.init(a, b, act, rng, dtype))
        if dropout > 0 and act != "sigmoid":
            layers.append(DropoutLayer(b, dropout))
    return Network(layers)


@dataclass
class GeneratorPass:
    """What a forward pass recorded, so the gradient can be routed back."""
    mode: str
    batch: int
    theta_hidden: list | None = None
    theta_output: list | None = None


def generator_forward(gen: GeneratorSplit, z: np.ndarray, mode: str,
                      theta_hidden: list[ThetaSample] | None = None,
                      theta_output: list[ThetaSample] | None = None,
                      spec_output: MeasurementSpec | None = None,
                      rng: np.random.Generator | None = None, clean: bool = True):
    """Return ``(training_sample, clean_sample, record)``.

    ``training_sample`` has a leading batch axis and the item shape the
    discriminator sees; ``clean_sample`` is ``G1(G2(z))`` shaped
    ``(batch, H, W)``. Missing Θ are drawn from ``rng``. The layer caches left
    behind belong to the training path, so ``generator_backward`` may follow.
    """
    if mode not in MODES:
        raise ConfigError(f"unknown mode {mode!r}")
    B = z.shape[0]
    hidden_on = mode in ("ambient_hidden", "ambient_both")
    output_on = mode in ("ambient_output", "ambient_both")
    if hidden_on and gen.spec_hidden is None:
        raise ConfigError(f"mode {mode} needs a hidden measurement")
    if output_on and theta_output is None and spec_output is None:
        raise ConfigError(f"mode {mode} needs an output measurement")
    if not hidden_on and gen.reshaping_hidden:
        raise ConfigError("a shape-changing hidden measurement cannot be skipped")

    h = gen.g2.forward(z).reshape((B,) + gen.hidden_shape)
    clean_img = None
    if clean and not gen.reshaping_hidden:
        clean_img = gen.g1.forward(h.reshape(B, -1)).reshape((B,) + gen.image_shape)
    if hidden_on:
        if theta_hidden is None:
            theta_hidden = meas.sample_thetas(gen.spec_hidden, gen.hidden_shape, B, rng)
        h = meas.apply_batch(theta_hidden, h)
    img = gen.g1.forward(h.reshape(B, -1)).reshape((B,) + gen.image_shape)
    if clean and gen.reshaping_hidden:
        # the stochastic composition is the generator here
        clean_img = img
    out = img
    if output_on:
        if theta_output is None:
            theta_output = meas.sample_thetas(spec_output, gen.image_shape, B, rng)
        out = meas.apply_batch(theta_output, img)
    record = GeneratorPass(mode, B, theta_hidden if hidden_on else None,
                           theta_output if output_on else None)
    return out, clean_img, record


def generator_backward(gen: GeneratorSplit, record: GeneratorPass, grad_out: np.ndarray) -> np.ndarray:
    """Backpropagate d loss / d training_sample into G1 and G2; returns d loss / d z."""
    B = record.batch
    g = grad_out.reshape((B,) + tuple(grad_out.shape[1:]))
    if record.theta_output is not None:
        g = meas.backward_batch(record.theta_output, g, gen.image_shape)
    g = gen.g1.backward(g.reshape(B, -1))
    if record.theta_hidden is not None:
        g = meas.backward_batch(record.theta_hidden, g.reshape((B,) + gen.g1_input_shape), gen.hidden_shape)
    return gen.g2.backward(g.reshape(B, -1))


@dataclass
class Metrics:
    step: int
    d_loss: float
    g_loss: float
    per_pixel_mean_error: float = float("nan")
    mmd2: float = float("nan")

    def row(self) -> list:
        return [self.step, self.d_loss, self.g_loss, self.per_pixel_mean_error, self.mmd2]


def rbf_mmd2_unbiased(x: np.ndarray, y: np.ndarray, bandwidth: float | None = None) -> float:
    """Unbiased squared MMD with an RBF kernel; bandwidth defaults to the pooled median distance."""
    x = np.asarray(x, dtype=np.float64).reshape(len(x), -1)
    y = np.asarray(y, dtype=np.float64).reshape(len(y), -1)
    m, n = len(x), len(y)
    if m < 2 or n < 2:
        raise ValueError("need at least two samples on each side")
    if bandwidth is None:
        bandwidth = float(np.median(pdist(np.vstack([x, y]))))
        if bandwidth <= 0:
            bandwidth = 1.0
    gamma = 1.0 / (2.0 * bandwidth ** 2)
    kxx = np.exp(-gamma * cdist(x, x, "sqeuclidean"))
    kyy = np.exp(-gamma * cdist(y, y, "sqeuclidean"))
    kxy = np.exp(-gamma * cdist(x, y, "sqeuclidean"))
    a = (kxx.sum() - np.trace(kxx)) / (m * (m - 1))
    b = (kyy.sum() - np.trace(kyy)) / (n * (n - 1))
    return float(a + b - 2.0 * kxy.mean())


def per_pixel_mean_error(generated: np.ndarray, clean: np.ndarray) -> float:
    return float(np.mean(np.abs(generated.mean(axis=0) - clean.mean(axis=0))))


def sample_grid(gen: GeneratorSplit, n: int, rng: np.random.Generator, noise_dim: int | None = None) -> np.ndarray:
    """``n`` clean generator samples in [0, 1], shaped ``(n, H, W)``."""
    if n < 1:
        raise ValueError("n must be >= 1")
    noise_dim = noise_dim or gen.g2.n_in
    dtype = gen.g2.layers[0].weight.dtype
    z = rng.standard_normal((n, noise_dim)).astype(dtype)
    if gen.reshaping_hidden:
        _, clean, _ = generator_forward(gen, z, "ambient_hidden", rng=rng)
    else:
        h = gen.g2.forward(z)
        clean = gen.g1.forward(h).reshape((n,) + gen.image_shape)
    return np.clip(clean, 0.0, 1.0)


def evaluate_metrics(gen: GeneratorSplit, clean_holdout: np.ndarray, n_generated: int,
                     rng: np.random.Generator, step: int = 0, d_loss: float = float("nan"),
                     g_loss: float = float("nan"), max_mmd_samples: int = 1000) -> Metrics:
    if clean_holdout is None or len(clean_holdout) == 0:
        raise ValueError("clean holdout is empty")
    if n_generated < 100:
        raise ValueError("n_generated must be >= 100")
    fake = sample_grid(gen, n_generated, rng)
    return metrics_from_samples(fake, clean_holdout, step, d_loss, g_loss, max_mmd_samples)


def metrics_from_samples(generated: np.ndarray, clean: np.ndarray, step: int = 0,
                         d_loss: float = float("nan"), g_loss: float = float("nan"),
                         max_mmd_samples: int = 1000) -> Metrics:
    err = per_pixel_mean_error(generated, clean)
    mmd = rbf_mmd2_unbiased(generated[:max_mmd_samples], clean[:max_mmd_samples])
    return Metrics(step, d_loss, g_loss, err, mmd)


class Trainer:
    """Holds the networks, optimizers and RNG streams of one training run."""

    def __init__(self, config: TrainConfig, d_input_shape: tuple):
        self.config = config
        init_ss, train_ss, eval_ss = np.random.SeedSequence(config.seed).spawn(3)
        init_rng = np.random.Generator(np.random.PCG64(init_ss))
        self.rng = np.random.Generator(np.random.PCG64(train_ss))
        self.eval_rng = np.random.Generator(np.random.PCG64(eval_ss))
        self.gen = GeneratorSplit.build(config, init_rng)
        out_shape = config.spec_output.output_shape(config.image_shape) if config.uses_output else config.image_shape
        self.d_input_shape = tuple(d_input_shape)
        if int(np.prod(out_shape)) != int(np.prod(self.d_input_shape)):
            raise ConfigError(f"generator training samples {out_shape} do not match measured data {d_input_shape}")
        self.disc = build_discriminator(int(np.prod(self.d_input_shape)), config.d_hidden, init_rng,
                                        minibatch_std=config.d_minibatch_std, dropout=config.d_dropout)
        for layer in self.disc.layers:
            if isinstance(layer, DropoutLayer):
                layer.rng = self.rng
        hyper = dict(lr=config.lr, beta1=config.beta1, beta2=config.beta2)
        self.adam_g = AdamState.for_params(self.gen.params(), **hyper)
        self.adam_d = AdamState.for_params(self.disc.params(), **hyper)
        self.step = 0

    def _fake(self, B: int):
        z = self.rng.standard_normal((B, self.config.noise_dim), dtype=np.float32)
        return generator_forward(self.gen, z, self.config.mode, spec_output=self.config.spec_output,
                                 rng=self.rng, clean=False)

    def _noisy(self, x: np.ndarray) -> np.ndarray:
        # instance noise on both discriminator inputs
        sigma = self.config.d_input_noise
        if sigma <= 0:
            return x
        return x + sigma * self.rng.standard_normal(x.shape, dtype=np.float32)

    def train_step(self, real: np.ndarray) -> Metrics:
        """``d_steps_per_g_step`` discriminator updates, then one generator update."""
        B = real.shape[0]
        real_flat = real.reshape(B, -1).astype(np.float32)
        for _ in range(self.config.d_steps_per_g_step):
            fake, _, _ = self._fake(B)
            fake_flat = self._noisy(fake.reshape(B, -1))
            real_flat = self._noisy(real.reshape(B, -1).astype(np.float32))
            d_real = self.disc.forward(real_flat)
            # one-sided label smoothing: real target 1 - a
            a = self.config.d_label_smoothing
            self.disc.backward((-(1.0 - a) / np.maximum(d_real, EPS_PROB)
                                + a / np.maximum(1.0 - d_real, EPS_PROB)) / B)
            grads_real = [g.copy() for g in self.disc.grads()]
            d_fake = self.disc.forward(fake_flat)
            self.disc.backward(1.0 / (B * np.maximum(1.0 - d_fake, EPS_PROB)))
            grads = [a + b for a, b in zip(grads_real, self.disc.grads())]
            d_loss, _ = gan_losses(d_real, d_fake)
            adam_step(self.adam_d, self.disc.params(), grads)

        fake, _, record = self._fake(B)
        d_fake = self.disc.forward(self._noisy(fake.reshape(B, -1)))
        _, g_loss = gan_losses(d_real, d_fake)
        grad_x = self.disc.backward(-1.0 / (B * np.maximum(d_fake, EPS_PROB)))
        generator_backward(self.gen, record, grad_x.reshape(fake.shape))
        adam_step(self.adam_g, self.gen.params(), self.gen.grads())
        if not (np.isfinite(d_loss) and np.isfinite(g_loss)):
            raise TrainingError(f"non-finite loss at step {self.step}: d_loss={d_loss} g_loss={g_loss}")
        self.step += 1
        return Metrics(self.step, d_loss, g_loss)

    def evaluate(self, holdout: np.ndarray, m: Metrics) -> Metrics:
        return evaluate_metrics(self.gen, holdout, self.config.eval_samples, self.eval_rng,
                                m.step, m.d_loss, m.g_loss)


def train_run(config: TrainConfig, dataset, metrics_path=None, progress: bool = False):
    """Train for ``config.steps`` on ``dataset.measured``; returns ``(trainer, metrics log)``.

    The clean holdout is only touched by evaluation, every ``eval_every``
    steps and after the final step.
    """
    measured = dataset.measured
    trainer = Trainer(config, measured.shape[1:])
    log_rows: list[Metrics] = []
    writer = None
    fh = None
    if metrics_path is not None:
        fh = open(metrics_path, "w", newline="")
        writer = csv.writer(fh)
        writer.writerow(METRIC_FIELDS)
    try:
        for step in range(1, config.steps + 1):
            idx = trainer.rng.integers(0, len(measured), size=config.batch_size)
            m = trainer.train_step(measured[idx])
            if step % config.eval_every == 0 or step == config.steps:
                m = trainer.evaluate(dataset.holdout, m)
                log_rows.append(m)
                if writer is not None:
                    writer.writerow([repr(v) if isinstance(v, float) else v for v in m.row()])
                    fh.flush()
                if progress:
                    log.info("step %d d_loss %.4f g_loss %.4f err %.4f mmd2 %.5f", *m.row())
    finally:
        if fh is not None:
            fh.close()
    return trainer, log_rows


def pipeline_gradcheck(gen: GeneratorSplit, disc: Network, z: np.ndarray, mode: str,
                       theta_hidden=None, theta_output=None, h: float = 1e-5,
                       coords_per_tensor: int | None = None,
                       rng: np.random.Generator | None = None) -> float:
    """Central-difference check of ``-mean log D(training_sample)`` in double precision.

    Covers every generator and discriminator parameter and the noise input.
    Θ stays fixed. ``coords_per_tensor`` limits the check to that many random
    coordinates per tensor (all coordinates when ``None``).
    """
    gen = gen.astype(np.float64)
    disc = disc.astype(np.float64)
    z = np.array(z, dtype=np.float64)
    B = z.shape[0]

    def loss():
        out, _, rec = generator_forward(gen, z, mode, theta_hidden, theta_output, clean=False)
        d = disc.forward(out.reshape(B, -1))
        return -np.mean(np.log(d)), d, out, rec

    _, d, out, rec = loss()
    gx = disc.backward(-1.0 / (B * d))
    gz = generator_backward(gen, rec, gx.reshape(out.shape))
    pairs = list(zip(gen.params() + disc.params(), [g.copy() for g in gen.grads() + disc.grads()]))
    pairs.append((z, gz))
    rng = rng or make_rng(0)
    worst = 0.0
    for arr, analytic in pairs:
        flat, an = arr.reshape(-1), analytic.reshape(-1)
        idx = np.arange(flat.size)
        if coords_per_tensor is not None and flat.size > coords_per_tensor:
            idx = rng.choice(flat.size, coords_per_tensor, replace=False)
        for i in idx:
            orig = flat[i]
            flat[i] = orig + h
            up = loss()[0]
            flat[i] = orig - h
            down = loss()[0]
            flat[i] = orig
            worst = max(worst, abs(an[i] - (up - down) / (2 * h)) / max(1.0, abs(an[i])))
    return worst
