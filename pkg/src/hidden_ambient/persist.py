"""Checkpoint file format and atomic file writes.

Layout (all integers little-endian)::

    b"HAGN" | version u32 | header length u32 | JSON header | float32 tensor data

The header lists tensor names and shapes in storage order alongside the config
snapshot, optimizer scalars and RNG states.
"""
from __future__ import annotations

import json
import os
import struct
import tempfile
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .data import FormatError
from .numeric import AdamState
from .training import GeneratorSplit, TrainConfig, Trainer

MAGIC = b"HAGN"
VERSION = 1


@dataclass
class Checkpoint:
    config: dict
    tensors: dict = field(default_factory=dict)
    meta: dict = field(default_factory=dict)


def atomic_write_bytes(path, payload: bytes) -> None:
    path = Path(path)
    fd, tmp = tempfile.mkstemp(dir=path.parent or ".", prefix=path.name + ".", suffix=".tmp")
    try:
        with os.fdopen(fd, "wb") as fh:
            fh.write(payload)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def encode_checkpoint(ckpt: Checkpoint) -> bytes:
    entries = []
    blobs = []
    for name, arr in ckpt.tensors.items():
        arr = np.ascontiguousarray(arr, dtype="<f4")
        entries.append({"name": name, "shape": list(arr.shape)})
        blobs.append(arr.tobytes())
    header = {"config": ckpt.config, "meta": ckpt.meta, "tensors": entries}
    hb = json.dumps(header, sort_keys=True, separators=(",", ":")).encode()
    return MAGIC + struct.pack("<II", VERSION, len(hb)) + hb + b"".join(blobs)


def decode_checkpoint(raw: bytes) -> Checkpoint:
    if len(raw) < 12:
        raise FormatError("file too short for checkpoint preamble", len(raw))
    if raw[:4] != MAGIC:
        raise FormatError(f"bad magic {raw[:4]!r}", 0)
    version, hlen = struct.unpack("<II", raw[4:12])
    if version != VERSION:
        raise FormatError(f"unsupported checkpoint version {version}", 4)
    if 12 + hlen > len(raw):
        raise FormatError(f"header length {hlen} runs past end of file", 8)
    try:
        header = json.loads(raw[12:12 + hlen])
    except ValueError as exc:
        raise FormatError(f"header is not valid JSON: {exc}", 12) from None
    pos = 12 + hlen
    tensors = {}
    for entry in header.get("tensors", []):
        shape = tuple(int(s) for s in entry["shape"])
        nbytes = 4 * int(np.prod(shape, dtype=np.int64))
        if pos + nbytes > len(raw):
            raise FormatError(f"tensor {entry['name']!r} {shape} needs {nbytes} bytes, "
                              f"{len(raw) - pos} remain", pos)
        tensors[entry["name"]] = np.frombuffer(raw, dtype="<f4", count=nbytes // 4,
                                                offset=pos).reshape(shape).astype(np.float32)
        pos += nbytes
    if pos != len(raw):
        raise FormatError(f"{len(raw) - pos} trailing bytes after tensor data", pos)
    return Checkpoint(header["config"], tensors, header.get("meta", {}))


def save_checkpoint(ckpt: Checkpoint, path) -> None:
    atomic_write_bytes(path, encode_checkpoint(ckpt))


def load_checkpoint(path) -> Checkpoint:
    return decode_checkpoint(Path(path).read_bytes())


def _adam_meta(state: AdamState) -> dict:
    return {"t": state.t, "lr": state.lr, "beta1": state.beta1, "beta2": state.beta2,
            "epsilon": state.epsilon}


def _network_tensors(prefix: str, net) -> dict:
    out = {}
    for i, layer in enumerate(net.layers):
        for kind, arr in zip(("weight", "bias"), layer.params()):
            out[f"{prefix}.{i}.{kind}"] = arr
    return out


def checkpoint_from_trainer(trainer: Trainer) -> Checkpoint:
    tensors = {}
    tensors.update(_network_tensors("g2", trainer.gen.g2))
    tensors.update(_network_tensors("g1", trainer.gen.g1))
    tensors.update(_network_tensors("disc", trainer.disc))
    for tag, state in (("adam_g", trainer.adam_g), ("adam_d", trainer.adam_d)):
        for i, (m, v) in enumerate(zip(state.m, state.v)):
            tensors[f"{tag}.m.{i}"] = m
            tensors[f"{tag}.v.{i}"] = v
    meta = {
        "step": trainer.step,
        "d_input_shape": list(trainer.d_input_shape),
        "adam_g": _adam_meta(trainer.adam_g),
        "adam_d": _adam_meta(trainer.adam_d),
        "rng": trainer.rng.bit_generator.state,
        "eval_rng": trainer.eval_rng.bit_generator.state,
    }
    return Checkpoint(trainer.config.to_dict(), tensors, meta)


def _load_network(prefix: str, net, tensors: dict) -> None:
    for i, layer in enumerate(net.layers):
        if not layer.params():
            continue
        for kind in ("weight", "bias"):
            name = f"{prefix}.{i}.{kind}"
            if name not in tensors:
                raise FormatError(f"checkpoint lacks tensor {name!r}")
            current = getattr(layer, kind)
            if tensors[name].shape != current.shape:
                raise FormatError(f"tensor {name!r} has shape {tensors[name].shape}, "
                                  f"architecture needs {current.shape}")
            setattr(layer, kind, tensors[name].copy())


def trainer_from_checkpoint(ckpt: Checkpoint) -> Trainer:
    """Rebuild a trainer with every tensor, optimizer moment and RNG state restored."""
    config = TrainConfig.from_dict(ckpt.config)
    trainer = Trainer(config, tuple(ckpt.meta["d_input_shape"]))
    _load_network("g2", trainer.gen.g2, ckpt.tensors)
    _load_network("g1", trainer.gen.g1, ckpt.tensors)
    _load_network("disc", trainer.disc, ckpt.tensors)
    for tag, state in (("adam_g", trainer.adam_g), ("adam_d", trainer.adam_d)):
        params = trainer.gen.params() if tag == "adam_g" else trainer.disc.params()
        state.m = [ckpt.tensors[f"{tag}.m.{i}"].copy() for i in range(len(params))]
        state.v = [ckpt.tensors[f"{tag}.v.{i}"].copy() for i in range(len(params))]
        for key, value in ckpt.meta[tag].items():
            setattr(state, key, value)
    trainer.step = ckpt.meta["step"]
    trainer.rng.bit_generator.state = ckpt.meta["rng"]
    trainer.eval_rng.bit_generator.state = ckpt.meta["eval_rng"]
    return trainer


def generator_from_checkpoint(ckpt: Checkpoint) -> tuple[GeneratorSplit, np.random.Generator]:
    trainer = trainer_from_checkpoint(ckpt)
    return trainer.gen, trainer.eval_rng
