"""Versioned model checkpoints.

Layout: magic ``WGC1``, a little-endian u32 format version, a u64 manifest
length, the UTF-8 manifest, then one raw ``WGT1`` tensor blob per manifest
entry, in order.  The manifest carries run metadata (kind, epoch, config hash
and full config echo, optimizer step counts, rng states) plus the name and
shape of every tensor.  Tensor names are prefixed ``p.`` (parameters),
``b.`` (buffers), ``m.`` / ``v.`` (Adam moments).

Loading a checkpoint reproduces forward outputs bit-identically: parameters
are stored as raw float32.
"""

from __future__ import annotations

import os
import struct
from dataclasses import dataclass, field

import numpy as np

from .config import RunConfig
from .errors import FormatError
from .tensor import read_tensor, write_tensor

MAGIC = b"WGC1"
VERSION = 1


@dataclass
class Checkpoint:
    kind: str
    epoch: int
    config_hash: str
    config_text: str
    adam_t: tuple = (0,)
    rng_states: dict = field(default_factory=dict)
    params: dict = field(default_factory=dict)
    buffers: dict = field(default_factory=dict)
    moments: dict = field(default_factory=dict)

    def run_config(self) -> RunConfig:
        return RunConfig.from_sources(self.config_text)


def save_checkpoint(path, ck: Checkpoint) -> None:
    tensors = []
    for name, arr in ck.params.items():
        tensors.append((f"p.{name}", np.asarray(arr, np.float32)))
    for name, arr in ck.buffers.items():
        tensors.append((f"b.{name}", np.asarray(arr, np.float32)))
    for name, arr in ck.moments.items():
        tensors.append((name, np.asarray(arr, np.float32)))

    config_lines = ck.config_text.splitlines()
    lines = [
        f"kind={ck.kind}",
        f"epoch={ck.epoch}",
        f"config-hash={ck.config_hash}",
        f"adam-t={','.join(str(t) for t in ck.adam_t)}",
    ]
    for name, (seed, counter) in sorted(ck.rng_states.items()):
        lines.append(f"rng.{name}={seed},{counter}")
    lines.append(f"config-lines={len(config_lines)}")
    lines.extend(config_lines)
    lines.append(f"tensors={len(tensors)}")
    for name, arr in tensors:
        shape = "x".join(str(e) for e in arr.shape) or "scalar"
        lines.append(f"{name} {shape}")
    manifest = ("\n".join(lines) + "\n").encode("utf-8")

    tmp = str(path) + ".tmp"
    with open(tmp, "wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<I", VERSION))
        fh.write(struct.pack("<Q", len(manifest)))
        fh.write(manifest)
        for _, arr in tensors:
            write_tensor(fh, arr)
    os.replace(tmp, path)


def load_checkpoint(path) -> Checkpoint:
    with open(path, "rb") as fh:
        magic = fh.read(4)
        if magic != MAGIC:
            raise FormatError(f"bad checkpoint magic {magic!r}")
        (version,) = struct.unpack("<I", fh.read(4))
        if version != VERSION:
            raise FormatError(f"checkpoint version {version} unsupported (want {VERSION})")
        (mlen,) = struct.unpack("<Q", fh.read(8))
        manifest = fh.read(mlen).decode("utf-8")
        lines = manifest.splitlines()
        header = {}
        rng_states = {}
        i = 0
        while i < len(lines) and not lines[i].startswith("config-lines="):
            key, _, value = lines[i].partition("=")
            if key.startswith("rng."):
                seed, counter = value.split(",")
                rng_states[key[4:]] = (int(seed), int(counter))
            else:
                header[key] = value
            i += 1
        if i == len(lines):
            raise FormatError("checkpoint manifest missing config block")
        n_config = int(lines[i].split("=", 1)[1])
        config_text = "\n".join(lines[i + 1 : i + 1 + n_config]) + "\n"
        i += 1 + n_config
        if not lines[i].startswith("tensors="):
            raise FormatError("checkpoint manifest missing tensor table")
        n_tensors = int(lines[i].split("=", 1)[1])
        entries = []
        for line in lines[i + 1 : i + 1 + n_tensors]:
            name, _, shape = line.rpartition(" ")
            entries.append((name, shape))

        ck = Checkpoint(
            kind=header.get("kind", ""),
            epoch=int(header.get("epoch", 0)),
            config_hash=header.get("config-hash", ""),
            config_text=config_text,
            adam_t=tuple(int(t) for t in header.get("adam-t", "0").split(",")),
            rng_states=rng_states,
        )
        for name, shape in entries:
            arr = read_tensor(fh)
            want = "x".join(str(e) for e in arr.shape) or "scalar"
            if want != shape:
                raise FormatError(f"tensor {name}: shape {want} != manifest {shape}")
            if name.startswith("p."):
                ck.params[name[2:]] = arr
            elif name.startswith("b."):
                ck.buffers[name[2:]] = arr
            else:
                ck.moments[name] = arr
    return ck


def restore_into(model, ck: Checkpoint) -> None:
    """Copy checkpoint parameters and buffers into a freshly built model."""
    params = model.params()
    if set(params) != set(ck.params):
        missing = set(params) ^ set(ck.params)
        raise FormatError(f"checkpoint/model parameter mismatch: {sorted(missing)[:4]}")
    for name, tensor in params.items():
        arr = ck.params[name]
        if tensor.data.shape != arr.shape:
            raise FormatError(
                f"parameter {name}: checkpoint shape {arr.shape} != model {tensor.data.shape}"
            )
        tensor.data[...] = arr
    buffers = model.buffers()
    for name, buf in buffers.items():
        if name in ck.buffers:
            buf[...] = ck.buffers[name]


def build_from_checkpoint(ck: Checkpoint):
    """Reconstruct the (model, RunConfig) pair a checkpoint was trained with."""
    from .gan import WaveletGan
    from .models import build_model
    from .rng import Rng

    cfg = ck.run_config()
    spec = cfg.model_spec()
    rng = Rng(cfg.seed).spawn(1)
    if cfg.is_gan():
        model = WaveletGan(spec, cfg.gan_config(), rng)
    else:
        model = build_model(spec, rng)
    restore_into(model, ck)
    return model, cfg
