"""Binary model checkpoints with bit-exact round-trips.

Layout (all integers little-endian uint32 unless noted): format version,
architecture tag (length + UTF-8 bytes), vocab size, embedding dim, hidden
dim, attention dim, tensor count, then per tensor: name length + name bytes,
rank, dims, and the row-major float64 little-endian payload.
"""

from __future__ import annotations

import struct
from typing import BinaryIO

import numpy as np

from .model import ModelConfig, ModelParameters, zero_parameters

FORMAT_VERSION = 1


def _write_u32(f: BinaryIO, value: int) -> None:
    f.write(struct.pack("<I", value))


def _read_u32(f: BinaryIO) -> int:
    raw = f.read(4)
    if len(raw) != 4:
        raise ValueError("truncated checkpoint file")
    return struct.unpack("<I", raw)[0]


def _write_str(f: BinaryIO, s: str) -> None:
    raw = s.encode("utf-8")
    _write_u32(f, len(raw))
    f.write(raw)


def _read_str(f: BinaryIO) -> str:
    n = _read_u32(f)
    raw = f.read(n)
    if len(raw) != n:
        raise ValueError("truncated checkpoint file")
    return raw.decode("utf-8")


def _write_array(f: BinaryIO, name: str, arr: np.ndarray) -> None:
    _write_str(f, name)
    _write_u32(f, arr.ndim)
    for dim in arr.shape:
        _write_u32(f, dim)
    f.write(arr.astype("<f8", copy=False).tobytes(order="C"))


def _read_array(f: BinaryIO) -> tuple[str, np.ndarray]:
    name = _read_str(f)
    rank = _read_u32(f)
    shape = tuple(_read_u32(f) for _ in range(rank))
    count = int(np.prod(shape)) if shape else 1
    raw = f.read(8 * count)
    if len(raw) != 8 * count:
        raise ValueError(f"truncated tensor payload for {name!r}")
    return name, np.frombuffer(raw, dtype="<f8").astype(np.float64).reshape(shape)


def save_model(path, params: ModelParameters) -> None:
    cfg = params.config
    tensors = params.named_tensors()
    with open(path, "wb") as f:
        _write_u32(f, FORMAT_VERSION)
        _write_str(f, cfg.architecture)
        _write_u32(f, cfg.vocab_size)
        _write_u32(f, cfg.emb_dim)
        _write_u32(f, cfg.hidden_dim)
        _write_u32(f, cfg.attn_dim)
        _write_u32(f, len(tensors))
        for name, tensor in tensors:
            _write_array(f, name, tensor.array)


def load_model(path) -> ModelParameters:
    with open(path, "rb") as f:
        version = _read_u32(f)
        if version != FORMAT_VERSION:
            raise ValueError(f"unsupported checkpoint format version {version}")
        config = ModelConfig(
            architecture=_read_str(f),
            vocab_size=_read_u32(f),
            emb_dim=_read_u32(f),
            hidden_dim=_read_u32(f),
            attn_dim=_read_u32(f),
        )
        count = _read_u32(f)
        loaded = dict(_read_array(f) for _ in range(count))
    params = zero_parameters(config)
    expected = params.as_dict()
    if set(loaded) != set(expected):
        missing = sorted(set(expected) - set(loaded))
        extra = sorted(set(loaded) - set(expected))
        raise ValueError(f"checkpoint tensor names mismatch: missing {missing}, extra {extra}")
    for name, tensor in expected.items():
        arr = loaded[name]
        if arr.shape != tensor.array.shape:
            raise ValueError(f"tensor {name!r}: shape {arr.shape} != expected {tensor.array.shape}")
        tensor.array = arr
    return params
