"""Binary container for named float64 tensors.

Layout (all integers little-endian)::

    b"KDT1"
    u32  tensor count
    per tensor:
        u16  name length in bytes
        ...  UTF-8 name
        u8   rank
        u32  x rank dims
        f64  x prod(dims), row-major

Models are stored with one extra rank-1 tensor, ``_config``, holding the
integer architecture fields so a checkpoint is self-describing.
"""

from __future__ import annotations

import hashlib
import io
import os
import struct
from typing import BinaryIO, Mapping

import numpy as np

from .transformer import ModelConfig, TransformerModel, param_shapes

MAGIC = b"KDT1"
CONFIG_KEY = "_config"
_CONFIG_FIELDS = ("num_layers", "num_heads", "hidden_size", "ff_size", "vocab_size",
                  "max_seq_len", "dropout", "layer_norm_eps")


class CheckpointError(ValueError):
    pass


def write_tensors(stream: BinaryIO, tensors: Mapping[str, np.ndarray]) -> None:
    stream.write(MAGIC)
    stream.write(struct.pack("<I", len(tensors)))
    for name, value in tensors.items():
        value = np.asarray(value, dtype="<f8")
        raw = name.encode("utf-8")
        if len(raw) > 0xFFFF:
            raise CheckpointError(f"tensor name too long: {name[:40]}...")
        if value.ndim > 0xFF:
            raise CheckpointError(f"rank {value.ndim} too large for {name}")
        stream.write(struct.pack("<H", len(raw)))
        stream.write(raw)
        stream.write(struct.pack("<B", value.ndim))
        stream.write(struct.pack(f"<{value.ndim}I", *value.shape))
        stream.write(np.ascontiguousarray(value).tobytes())


def _read_exact(stream: BinaryIO, n: int) -> bytes:
    data = stream.read(n)
    if len(data) != n:
        raise CheckpointError("truncated checkpoint")
    return data


def read_tensors(stream: BinaryIO) -> dict[str, np.ndarray]:
    if _read_exact(stream, 4) != MAGIC:
        raise CheckpointError("bad magic bytes; not a KDT1 container")
    (count,) = struct.unpack("<I", _read_exact(stream, 4))
    out: dict[str, np.ndarray] = {}
    for _ in range(count):
        (name_len,) = struct.unpack("<H", _read_exact(stream, 2))
        name = _read_exact(stream, name_len).decode("utf-8")
        (rank,) = struct.unpack("<B", _read_exact(stream, 1))
        dims = struct.unpack(f"<{rank}I", _read_exact(stream, 4 * rank))
        n = int(np.prod(dims, dtype=np.int64))
        arr = np.frombuffer(_read_exact(stream, 8 * n), dtype="<f8").astype(np.float64)
        out[name] = arr.reshape(dims)
    if stream.read(1):
        raise CheckpointError("trailing bytes after last tensor")
    return out


def encode(tensors: Mapping[str, np.ndarray]) -> bytes:
    buf = io.BytesIO()
    write_tensors(buf, tensors)
    return buf.getvalue()


def decode(blob: bytes) -> dict[str, np.ndarray]:
    return read_tensors(io.BytesIO(blob))


def save_tensors(path, tensors: Mapping[str, np.ndarray]) -> None:
    with open(path, "wb") as fh:
        write_tensors(fh, tensors)


def load_tensors(path) -> dict[str, np.ndarray]:
    if not os.path.exists(path):
        raise FileNotFoundError(f"checkpoint not found: {path}")
    with open(path, "rb") as fh:
        return read_tensors(fh)


def config_tensor(config: ModelConfig) -> np.ndarray:
    return np.array([float(getattr(config, f)) for f in _CONFIG_FIELDS])


def config_from_tensor(values: np.ndarray) -> ModelConfig:
    kwargs = {}
    for name, value in zip(_CONFIG_FIELDS, values):
        kwargs[name] = float(value) if name in ("dropout", "layer_norm_eps") else int(value)
    return ModelConfig(**kwargs)


def model_tensors(model: TransformerModel,
                  extra: Mapping[str, np.ndarray] | None = None) -> dict[str, np.ndarray]:
    tensors = {CONFIG_KEY: config_tensor(model.config)}
    tensors.update((k, v.data) for k, v in model.params.items())
    if extra:
        clash = set(extra) & set(tensors)
        if clash:
            raise CheckpointError(f"extra tensors clash with model names: {sorted(clash)}")
        tensors.update(extra)
    return tensors


def save_model(path, model: TransformerModel,
               extra: Mapping[str, np.ndarray] | None = None) -> None:
    save_tensors(path, model_tensors(model, extra))


def split_model_tensors(tensors: dict[str, np.ndarray]):
    if CONFIG_KEY not in tensors:
        raise CheckpointError("container has no _config tensor; not a model checkpoint")
    config = config_from_tensor(tensors[CONFIG_KEY])
    names = set(param_shapes(config))
    model_part = {k: v for k, v in tensors.items() if k in names}
    extra = {k: v for k, v in tensors.items() if k not in names and k != CONFIG_KEY}
    return TransformerModel(config, model_part, copy=False), extra


def load_model(path) -> tuple[TransformerModel, dict[str, np.ndarray]]:
    """Load a model checkpoint; returns the model and any extra tensors."""
    return split_model_tensors(load_tensors(path))


def file_digest(path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()
