"""Binary checkpoint format for :class:`~bocf.model.BocfModel`.

Layout (all integers little-endian)::

    8 bytes   magic  b"BOCFCKPT"
    uint32    format version (1)
    uint32    length L of the config JSON
    L bytes   UTF-8 JSON of BocfConfig (sorted keys, compact separators)
    uint32    number of tensors T
    T times:
      uint16  length of the name, then the UTF-8 name
      uint8   ndim, then ndim x uint32 dimensions
      float64 data, row-major, prod(dims) values

Loading a saved model reproduces every parameter bit for bit.
"""

from __future__ import annotations

import io
import json
import os
import struct
from pathlib import Path

import numpy as np

from .model import BocfConfig, BocfModel
from .tensor import Tensor

MAGIC = b"BOCFCKPT"
VERSION = 1


class CheckpointError(ValueError):
    pass


def dumps(model: BocfModel) -> bytes:
    buf = io.BytesIO()
    buf.write(MAGIC)
    buf.write(struct.pack("<I", VERSION))
    cfg = json.dumps(model.config.to_dict(), sort_keys=True, separators=(",", ":")).encode()
    buf.write(struct.pack("<I", len(cfg)))
    buf.write(cfg)
    buf.write(struct.pack("<I", len(model.params)))
    for name, t in model.params.items():
        raw = name.encode()
        buf.write(struct.pack("<H", len(raw)))
        buf.write(raw)
        buf.write(struct.pack("<B", t.data.ndim))
        buf.write(struct.pack(f"<{t.data.ndim}I", *t.data.shape))
        buf.write(np.ascontiguousarray(t.data, dtype="<f8").tobytes())
    return buf.getvalue()


def loads(blob: bytes) -> BocfModel:
    view = memoryview(blob)
    pos = 0

    def take(n: int) -> memoryview:
        nonlocal pos
        if pos + n > len(view):
            raise CheckpointError("truncated checkpoint")
        out = view[pos:pos + n]
        pos += n
        return out

    if bytes(take(8)) != MAGIC:
        raise CheckpointError("not a BoCF checkpoint (bad magic)")
    (version,) = struct.unpack("<I", take(4))
    if version != VERSION:
        raise CheckpointError(f"unsupported checkpoint version {version}")
    (clen,) = struct.unpack("<I", take(4))
    config = BocfConfig(**json.loads(bytes(take(clen)).decode()))
    (count,) = struct.unpack("<I", take(4))
    params = {}
    for _ in range(count):
        (nlen,) = struct.unpack("<H", take(2))
        name = bytes(take(nlen)).decode()
        (ndim,) = struct.unpack("<B", take(1))
        shape = struct.unpack(f"<{ndim}I", take(4 * ndim))
        size = int(np.prod(shape))
        data = np.frombuffer(take(8 * size), dtype="<f8").astype(np.float64).reshape(shape)
        params[name] = Tensor(data, requires_grad=True, name=name)
    if pos != len(view):
        raise CheckpointError("trailing bytes after checkpoint")
    return BocfModel(config, params)


def save(model: BocfModel, path: str | os.PathLike) -> None:
    Path(path).write_bytes(dumps(model))


def load(path: str | os.PathLike) -> BocfModel:
    path = Path(path)
    if not path.is_file():
        raise CheckpointError(f"{path}: checkpoint not found")
    try:
        return loads(path.read_bytes())
    except CheckpointError as exc:
        raise CheckpointError(f"{path}: {exc}") from None
