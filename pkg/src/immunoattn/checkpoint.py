"""Binary checkpoint: model config plus every parameter tensor.

Layout (little-endian)::

    b"VVCK" | version u32 = 1 | config_len u32 | config JSON (utf-8)
    | tensor_count u32
    per tensor: name_len u16 | name | ndim u8 | dims u32 * ndim | f64 data
"""

from __future__ import annotations

import io
import json
import os
import struct
from dataclasses import asdict, dataclass

import numpy as np

from .errors import FormatError
from .model import ModelConfig, ModelParams, param_shapes

MAGIC = b"VVCK"
VERSION = 1


@dataclass
class Checkpoint:
    config: ModelConfig
    params: ModelParams


def encode_checkpoint(ckpt: Checkpoint) -> bytes:
    out = io.BytesIO()
    cfg = json.dumps(asdict(ckpt.config), sort_keys=True).encode("utf-8")
    out.write(MAGIC)
    out.write(struct.pack("<II", VERSION, len(cfg)))
    out.write(cfg)
    items = ckpt.params.items()
    out.write(struct.pack("<I", len(items)))
    for name, arr in items:
        raw = name.encode("ascii")
        out.write(struct.pack("<HB", len(raw), arr.ndim))
        out.write(raw)
        out.write(struct.pack(f"<{arr.ndim}I", *arr.shape))
        out.write(np.ascontiguousarray(arr, dtype="<f8").tobytes())
    return out.getvalue()


def decode_checkpoint(buf: bytes) -> Checkpoint:
    view = memoryview(buf)
    pos = 0

    def take(n: int) -> memoryview:
        nonlocal pos
        if pos + n > len(view):
            raise FormatError("truncated checkpoint")
        chunk = view[pos : pos + n]
        pos += n
        return chunk

    if bytes(take(4)) != MAGIC:
        raise FormatError("not a checkpoint file")
    version, cfg_len = struct.unpack("<II", take(8))
    if version != VERSION:
        raise FormatError(f"unsupported checkpoint version {version}")
    try:
        config = ModelConfig(**json.loads(bytes(take(cfg_len)).decode("utf-8")))
    except (ValueError, TypeError) as exc:
        raise FormatError(f"bad checkpoint config: {exc}") from None
    expected = param_shapes(config)
    (count,) = struct.unpack("<I", take(4))
    tensors = {}
    for _ in range(count):
        name_len, ndim = struct.unpack("<HB", take(3))
        name = bytes(take(name_len)).decode("ascii", errors="replace")
        shape = struct.unpack(f"<{ndim}I", take(4 * ndim))
        if expected.get(name) != tuple(shape):
            raise FormatError(f"tensor {name!r} has unexpected shape {shape}")
        n = int(np.prod(shape))
        arr = np.frombuffer(take(8 * n), dtype="<f8").reshape(shape)
        tensors[name] = arr.astype(config.dtype)
    if set(tensors) != set(expected):
        raise FormatError(f"checkpoint tensors {sorted(set(expected) ^ set(tensors))} missing or extra")
    if pos != len(view):
        raise FormatError("trailing bytes in checkpoint")
    return Checkpoint(config, ModelParams(**tensors))


def save_checkpoint(ckpt: Checkpoint, path: str | os.PathLike) -> int:
    payload = encode_checkpoint(ckpt)
    with open(path, "wb") as fh:
        fh.write(payload)
    return len(payload)


def load_checkpoint(path: str | os.PathLike) -> Checkpoint:
    with open(path, "rb") as fh:
        return decode_checkpoint(fh.read())
