"""Command-line entry point: ``python -m hidden_ambient <subcommand>``.

Exit codes: 0 success, 1 usage error, 2 runtime or format error.
"""
from __future__ import annotations

import argparse
import json
import logging
import os
import sys
from pathlib import Path

import numpy as np

from . import discrete_game as game
from . import measurements as meas
from .data import FormatError, load_idx, make_measured_dataset, synth_rectangles_dataset
from .imaging import write_image_grid
from .numeric import make_rng
from .persist import checkpoint_from_trainer, generator_from_checkpoint, load_checkpoint, save_checkpoint
from .training import (GeneratorSplit, TrainConfig, build_discriminator, pipeline_gradcheck,
                       sample_grid, train_run)

log = logging.getLogger("hidden_ambient")


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        raise UsageError(f"{self.prog}: error: {message}")


def _json_arg(text: str):
    """Inline JSON, or the path of a JSON file."""
    if os.path.exists(text):
        text = Path(text).read_text()
    try:
        return json.loads(text)
    except ValueError as exc:
        raise UsageError(f"invalid JSON argument: {exc}") from None


def _shape_arg(text: str) -> tuple[int, int]:
    try:
        h, w = (int(v) for v in text.lower().split("x"))
    except ValueError:
        raise UsageError(f"shape must look like HxW, got {text!r}") from None
    if h < 1 or w < 1:
        raise UsageError(f"shape extents must be positive, got {text!r}")
    return h, w


def build_dataset(config: TrainConfig):
    if config.dataset == "rectangles":
        H, W = config.image_shape
        clean = synth_rectangles_dataset(config.dataset_size, H, W, make_rng(config.seed))
    else:
        clean = load_idx(config.dataset)[:config.dataset_size]
        if clean.shape[1:] != config.image_shape:
            raise ValueError(f"IDX images are {clean.shape[1:]}, config says {config.image_shape}")
    spec = config.dataset_spec or meas.MeasurementSpec("identity")
    return make_measured_dataset(clean, spec, config.seed)


def cmd_train(args) -> int:
    config = TrainConfig.from_dict(_json_arg(args.config))
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    dataset = build_dataset(config)
    tmp_csv = out / "metrics.csv.tmp"
    trainer, rows = train_run(config, dataset, metrics_path=tmp_csv, progress=True)
    os.replace(tmp_csv, out / "metrics.csv")
    save_checkpoint(checkpoint_from_trainer(trainer), out / "checkpoint.hagn")
    samples = sample_grid(trainer.gen, 64, make_rng(config.seed))
    write_image_grid(samples, 8, out / "samples.pgm")
    print(json.dumps({"final": dict(zip(("step", "d_loss", "g_loss", "per_pixel_mean_error", "mmd2"),
                                        rows[-1].row()))}))
    return 0


def cmd_sample(args) -> int:
    gen, rng = generator_from_checkpoint(load_checkpoint(args.ckpt))
    if args.seed is not None:
        rng = make_rng(args.seed)
    if args.n < 1 or args.cols < 1:
        raise UsageError("--n and --cols must be >= 1")
    write_image_grid(sample_grid(gen, args.n, rng), args.cols, args.out)
    return 0


_INPUT_SAMPLERS = {
    "positive": lambda shape: (lambda rng: rng.uniform(0.01, 1.0, size=shape)),
    "zeros": lambda shape: (lambda rng: np.zeros(shape)),
    "binary": lambda shape: (lambda rng: rng.integers(0, 2, size=shape).astype(np.float64)),
}


def cmd_check_uniqueness(args) -> int:
    spec = meas.MeasurementSpec.from_dict(_json_arg(args.spec))
    shape = _shape_arg(args.shape)
    if args.samples < 1:
        raise UsageError("--samples must be >= 1")
    sampler = _INPUT_SAMPLERS[args.input](shape)
    report = meas.identity_probability_estimate(spec, sampler, args.samples, make_rng(args.seed))
    # exact channel only for tiny binary images with a finite Θ support
    if shape[0] * shape[1] <= 6 and spec.kind not in meas.CONTINUOUS_KINDS:
        channel = meas.build_channel_matrix(spec, meas.binary_images(shape))
        report.channel_injective = meas.injectivity_test(channel)
    print(json.dumps(report.to_dict()))
    return 0


def cmd_oracle(args) -> int:
    channel = meas.DiscreteChannel(np.asarray(_json_arg(args.channel), dtype=float))
    target = np.asarray(_json_arg(args.target), dtype=float)
    report = game.generator_optimum_grid_search(channel, target, args.grid_step)
    print(json.dumps(report.to_dict()))
    return 0


def cmd_mixture(args) -> int:
    noise = meas.DiscreteChannel(np.asarray(_json_arg(args.channel_noise), dtype=float))
    ident = (meas.DiscreteChannel(np.asarray(_json_arg(args.channel_id), dtype=float))
             if args.channel_id else meas.DiscreteChannel.identity(noise.n_inputs))
    target = np.asarray(_json_arg(args.target), dtype=float) if args.target else None
    config = game.MixtureGameConfig(args.p2, ident, noise, target)
    report = game.mixture_optimum_analysis(config, np.asarray(_json_arg(args.p_x), dtype=float),
                                           args.grid_step)
    print(json.dumps(report))
    return 0


def cmd_gradcheck(args) -> int:
    config = TrainConfig(mode=args.mode, spec_hidden=meas.MeasurementSpec("block_pixel", p=0.5),
                         spec_output=meas.MeasurementSpec("block_pixel", p=0.5))
    rng = make_rng(args.seed)
    gen = GeneratorSplit.build(config, rng, np.float64)
    disc = build_discriminator(int(np.prod(config.image_shape)), config.d_hidden, rng, np.float64)
    z = rng.standard_normal((args.batch, config.noise_dim))
    th = meas.sample_thetas(config.spec_hidden, config.hidden_shape, args.batch, rng)
    to = meas.sample_thetas(config.spec_output, config.image_shape, args.batch, rng)
    err = pipeline_gradcheck(gen, disc, z, args.mode, th, to, coords_per_tensor=args.coords, rng=rng)
    print(f"max relative error {err:.3e}")
    return 0 if err < 1e-5 else 2


def make_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="hidden_ambient", description=__doc__.splitlines()[0])
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    t = sub.add_parser("train", help="train a model and write metrics, checkpoint and samples")
    t.add_argument("--config", required=True, help="JSON object or path to a JSON file")
    t.add_argument("--out", required=True)
    t.set_defaults(func=cmd_train)

    s = sub.add_parser("sample", help="write a PGM grid of clean samples from a checkpoint")
    s.add_argument("--ckpt", required=True)
    s.add_argument("--n", type=int, default=64)
    s.add_argument("--cols", type=int, default=8)
    s.add_argument("--out", required=True)
    s.add_argument("--seed", type=int, default=None, help="default: the checkpoint's RNG state")
    s.set_defaults(func=cmd_sample)

    u = sub.add_parser("check-uniqueness", help="identity probability and channel injectivity")
    u.add_argument("--spec", required=True)
    u.add_argument("--shape", required=True, help="HxW")
    u.add_argument("--samples", type=int, required=True)
    u.add_argument("--input", choices=sorted(_INPUT_SAMPLERS), default="positive")
    u.add_argument("--seed", type=int, default=0)
    u.set_defaults(func=cmd_check_uniqueness)

    o = sub.add_parser("oracle", help="exhaustive generator optimum on a simplex grid")
    o.add_argument("--channel", required=True, help="row-stochastic matrix as JSON")
    o.add_argument("--target", required=True, help="measurement distribution p_y^r as JSON")
    o.add_argument("--grid-step", type=float, default=0.01)
    o.set_defaults(func=cmd_oracle)

    m = sub.add_parser("mixture", help="minimizers of a hidden identity/noise mixture game")
    m.add_argument("--p2", type=float, required=True)
    m.add_argument("--channel-noise", required=True)
    m.add_argument("--channel-id", default=None, help="default: identity")
    m.add_argument("--p-x", required=True, help="real signal distribution as JSON")
    m.add_argument("--target", default=None, help="p_y^r; default: mixture pushforward of --p-x")
    m.add_argument("--grid-step", type=float, default=0.01)
    m.set_defaults(func=cmd_mixture)

    g = sub.add_parser("gradcheck", help="finite-difference check of the full pipeline")
    g.add_argument("--mode", default="ambient_hidden",
                   choices=("baseline", "ambient_output", "ambient_hidden", "ambient_both"))
    g.add_argument("--seed", type=int, default=0)
    g.add_argument("--batch", type=int, default=4)
    g.add_argument("--coords", type=int, default=12, help="random coordinates checked per tensor")
    g.set_defaults(func=cmd_gradcheck)
    return p


def main(argv=None) -> int:
    logging.basicConfig(level=logging.INFO, format="%(message)s", stream=sys.stderr)
    try:
        args = make_parser().parse_args(argv)
        return args.func(args)
    except UsageError as exc:
        print(exc, file=sys.stderr)
        return 1
    except SystemExit as exc:  # --help
        return int(exc.code or 0)
    except (FormatError, ValueError, OSError, RuntimeError, KeyError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
