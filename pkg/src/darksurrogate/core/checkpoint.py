"""
Binary checkpoint format (all integers little-endian)::

    magic        8 bytes   b"DSMCKPT\\0"
    version      u32       FORMAT_VERSION
    arch id      u16 length + utf-8
    K            u32       class count
    meta         u32 length + utf-8 JSON  (input shape, constructor kwargs)
    n tensors    u32
    directory    per tensor: u16 name length + utf-8 name, u8 ndim, ndim x u32 dims
    payload      float32 arrays in directory order

Integer buffers (batch-norm step counters) are stored as float32 and cast
back on load.
"""

import io
import json
import struct
from pathlib import Path

import numpy as np
import torch

from .models import ARCHITECTURES, build_model

MAGIC = b"DSMCKPT\x00"
FORMAT_VERSION = 1


class CheckpointError(ValueError):
    pass


def _pack_str(s, width="H"):
    b = s.encode("utf-8")
    return struct.pack(f"<{width}", len(b)) + b


def dumps(model):
    arch = model.architecture_id
    if arch not in ARCHITECTURES:
        raise CheckpointError(f"architecture_id {arch!r} is not registered")
    state = model.state_dict()
    meta = json.dumps({"in_shape": list(model.in_shape), "kwargs": model.arch_kwargs()}, sort_keys=True)
    out = io.BytesIO()
    out.write(MAGIC)
    out.write(struct.pack("<I", FORMAT_VERSION))
    out.write(_pack_str(arch))
    out.write(struct.pack("<I", model.num_classes))
    out.write(_pack_str(meta, "I"))
    out.write(struct.pack("<I", len(state)))
    for name, t in state.items():
        out.write(_pack_str(name))
        out.write(struct.pack("<B", t.ndim))
        out.write(struct.pack(f"<{t.ndim}I", *t.shape))
    for t in state.values():
        out.write(t.detach().cpu().numpy().astype("<f4").tobytes())
    return out.getvalue()


def save_checkpoint(model, path):
    Path(path).write_bytes(dumps(model))
    return Path(path)


class _Reader:
    def __init__(self, raw):
        self.raw, self.pos = raw, 0

    def take(self, n):
        if self.pos + n > len(self.raw):
            raise CheckpointError("checkpoint truncated")
        chunk = self.raw[self.pos : self.pos + n]
        self.pos += n
        return chunk

    def unpack(self, fmt):
        return struct.unpack(fmt, self.take(struct.calcsize(fmt)))

    def string(self, width="H"):
        (n,) = self.unpack(f"<{width}")
        return self.take(n).decode("utf-8")


def loads(raw, num_classes=None):
    r = _Reader(raw)
    if r.take(8) != MAGIC:
        raise CheckpointError("not a checkpoint: bad magic")
    (version,) = r.unpack("<I")
    if version != FORMAT_VERSION:
        raise CheckpointError(f"unsupported checkpoint version {version} (expected {FORMAT_VERSION})")
    arch = r.string()
    if arch not in ARCHITECTURES:
        raise CheckpointError(f"unknown architecture_id {arch!r}")
    (k,) = r.unpack("<I")
    if num_classes is not None and k != num_classes:
        raise CheckpointError(f"shape mismatch: checkpoint has {k} classes, expected {num_classes}")
    meta = json.loads(r.string("I"))
    (count,) = r.unpack("<I")
    directory = []
    for _ in range(count):
        name = r.string()
        (ndim,) = r.unpack("<B")
        dims = r.unpack(f"<{ndim}I") if ndim else ()
        directory.append((name, dims))
    model = build_model(arch, k, tuple(meta["in_shape"]), **meta["kwargs"])
    target = model.state_dict()
    state = {}
    for name, dims in directory:
        n = int(np.prod(dims)) if dims else 1
        arr = np.frombuffer(r.take(4 * n), dtype="<f4").reshape(dims)
        if name not in target:
            raise CheckpointError(f"unexpected tensor {name!r} for {arch}")
        if tuple(target[name].shape) != tuple(dims):
            raise CheckpointError(f"shape mismatch for {name}: {tuple(dims)} vs {tuple(target[name].shape)}")
        state[name] = torch.from_numpy(arr.copy()).to(target[name].dtype)
    missing = set(target) - set(state)
    if missing:
        raise CheckpointError(f"checkpoint lacks tensors {sorted(missing)}")
    model.load_state_dict(state)
    return model.eval()


def load_checkpoint(path, num_classes=None):
    """Rebuild a model from a checkpoint file, optionally checking its class count."""
    return loads(Path(path).read_bytes(), num_classes=num_classes)
