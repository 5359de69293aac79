"""Checkpoint files.

Layout (integers little-endian)::

    magic         8 bytes  b"EGMCKPT\\0"
    version       uint32   currently 1
    manifest_len  uint32
    manifest      UTF-8 JSON: builder arguments, layer manifest, tensor table
                  (name, group, shape), training counters, RNG seed/state,
                  optimiser hyper-parameters, free-form ``extra``
    tensors       float32 values of every tensor in manifest order

Tensor groups are ``param`` (weights), ``buffer`` (batch-norm running stats),
``adam_m`` and ``adam_v`` (optimiser moments, present when saved with an
optimiser). Stored at 32-bit precision, which is the training precision, so a
resumed run continues bit-exactly.
"""

from __future__ import annotations

import json
import os
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .model import ModelGraph, model_from_builder
from .optim import Adam

MAGIC = b"EGMCKPT\x00"
VERSION = 1


class CheckpointError(ValueError):
    pass


@dataclass
class Checkpoint:
    model: ModelGraph
    optimizer: Adam | None = None
    counters: dict = field(default_factory=dict)
    rng_state: dict | None = None
    extra: dict = field(default_factory=dict)


def encode_checkpoint(model: ModelGraph, optimizer: Adam | None = None, counters: dict | None = None,
                      rng_state: dict | None = None, extra: dict | None = None) -> bytes:
    table, blobs = [], []

    def add(name, group, arr):
        arr = np.ascontiguousarray(arr, dtype="<f4")
        table.append({"name": name, "group": group, "shape": list(arr.shape)})
        blobs.append(arr.tobytes())

    for name, p in model.parameters():
        add(name, "param", p.data)
    for name, b in model.buffers():
        add(name, "buffer", b)
    if optimizer is not None:
        for name, _ in model.parameters():
            add(name, "adam_m", optimizer.m[name])
        for name, _ in model.parameters():
            add(name, "adam_v", optimizer.v[name])

    manifest = {
        "builder": model.builder,
        "task": model.task,
        "layers": model.manifest(),
        "tensors": table,
        "counters": dict(counters or {}),
        "seed": model.builder.get("seed"),
        "rng_state": rng_state,
        "optimizer": None if optimizer is None else {**optimizer.hyper(), "step": optimizer.step_count},
        "extra": extra or {},
    }
    head = json.dumps(manifest, sort_keys=True).encode("utf-8")
    return MAGIC + struct.pack("<II", VERSION, len(head)) + head + b"".join(blobs)


def decode_checkpoint(data: bytes) -> Checkpoint:
    if data[:8] != MAGIC:
        raise CheckpointError("not a checkpoint file")
    version, head_len = struct.unpack_from("<II", data, 8)
    if version != VERSION:
        raise CheckpointError(f"unsupported checkpoint version {version}")
    manifest = json.loads(data[16 : 16 + head_len].decode("utf-8"))
    model = model_from_builder(manifest["builder"])
    model.task = manifest.get("task")
    if [layer["kind"] for layer in model.manifest()] != [layer["kind"] for layer in manifest["layers"]]:
        raise CheckpointError("layer manifest does not match the rebuilt model")

    params = dict(model.parameters())
    opt_cfg = manifest.get("optimizer")
    optimizer = None
    if opt_cfg is not None:
        optimizer = Adam(model.parameters(), lr=opt_cfg["lr"], beta1=opt_cfg["beta1"],
                         beta2=opt_cfg["beta2"], eps=opt_cfg["eps"])
        optimizer.step_count = opt_cfg["step"]

    pos = 16 + head_len
    for entry in manifest["tensors"]:
        count = int(np.prod(entry["shape"], dtype=np.int64))
        if len(data) < pos + 4 * count:
            raise CheckpointError("checkpoint truncated")
        arr = np.frombuffer(data, "<f4", count, pos).reshape(entry["shape"]).astype(np.float32)
        pos += 4 * count
        name, group = entry["name"], entry["group"]
        if group == "param":
            params[name].data[...] = arr
        elif group == "buffer":
            model.set_buffer(name, arr)
        elif group == "adam_m" and optimizer is not None:
            optimizer.m[name][...] = arr
        elif group == "adam_v" and optimizer is not None:
            optimizer.v[name][...] = arr
    return Checkpoint(model, optimizer, manifest["counters"], manifest.get("rng_state"), manifest["extra"])


def save_checkpoint(path: str | os.PathLike, model: ModelGraph, optimizer: Adam | None = None,
                    counters: dict | None = None, rng_state: dict | None = None,
                    extra: dict | None = None) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    tmp = path.with_suffix(path.suffix + ".tmp")
    tmp.write_bytes(encode_checkpoint(model, optimizer, counters, rng_state, extra))
    os.replace(tmp, path)


def load_checkpoint(path: str | os.PathLike) -> Checkpoint:
    return decode_checkpoint(Path(path).read_bytes())
