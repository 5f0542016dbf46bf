"""
Weight Files
Save and load toy denoiser weights.

Layout (all integers little-endian):
    magic "L2DW" | version u16 | config length u32 | config JSON (utf-8)
    | tensor count u32 | per tensor: name length u16, name, ndim u8, dims u32...
    | payload: every tensor as little-endian float32, in table order
"""

import json
import struct
from pathlib import Path
from typing import Dict, List, Tuple

import numpy as np

from src.diffusion.denoiser import DenoiserConfig, ToyDenoiser
from src.utils.errors import FormatError, ParameterError

MAGIC = b"L2DW"
VERSION = 1


def save_weights(model: ToyDenoiser, path: str) -> int:
    """
    Write a model to disk.

    Returns:
        Number of bytes written
    """
    config_blob = json.dumps(model.config.to_dict(), sort_keys=True).encode("utf-8")
    tensors = model.named_tensors()
    parts = [MAGIC, struct.pack("<HI", VERSION, len(config_blob)), config_blob,
             struct.pack("<I", len(tensors))]
    for name, arr in tensors.items():
        encoded = name.encode("utf-8")
        parts.append(struct.pack("<H", len(encoded)) + encoded)
        parts.append(struct.pack(f"<B{arr.ndim}I", arr.ndim, *arr.shape))
    for arr in tensors.values():
        parts.append(np.ascontiguousarray(arr, dtype="<f4").tobytes())
    data = b"".join(parts)
    Path(path).write_bytes(data)
    return len(data)


class _Reader:
    def __init__(self, data: bytes):
        self.data = data
        self.offset = 0

    def take(self, fmt: str, what: str) -> Tuple:
        size = struct.calcsize(fmt)
        if self.offset + size > len(self.data):
            raise FormatError(f"truncated {what}", offset=self.offset)
        values = struct.unpack_from(fmt, self.data, self.offset)
        self.offset += size
        return values

    def take_bytes(self, size: int, what: str) -> bytes:
        if self.offset + size > len(self.data):
            raise FormatError(f"truncated {what}", offset=self.offset)
        chunk = self.data[self.offset:self.offset + size]
        self.offset += size
        return chunk


def load_weights(path: str) -> ToyDenoiser:
    """Read a model written by save_weights."""
    reader = _Reader(Path(path).read_bytes())
    if reader.take_bytes(4, "magic") != MAGIC:
        raise FormatError("bad magic, expected 'L2DW'", offset=0)
    version_offset = reader.offset
    version, config_len = reader.take("<HI", "header")
    if version != VERSION:
        raise FormatError(f"unsupported version {version}", offset=version_offset)

    config_offset = reader.offset
    try:
        config = DenoiserConfig(**json.loads(reader.take_bytes(config_len, "config").decode("utf-8")))
    except (UnicodeDecodeError, json.JSONDecodeError, TypeError, ParameterError) as e:
        raise FormatError(f"invalid config block ({e})", offset=config_offset)

    (count,) = reader.take("<I", "tensor count")
    table: List[Tuple[str, Tuple[int, ...]]] = []
    for _ in range(count):
        (name_len,) = reader.take("<H", "tensor name length")
        name = reader.take_bytes(name_len, "tensor name").decode("utf-8", errors="replace")
        (ndim,) = reader.take("<B", "tensor rank")
        table.append((name, reader.take(f"<{ndim}I", "tensor shape")))

    tensors: Dict[str, np.ndarray] = {}
    for name, shape in table:
        start = reader.offset
        size = int(np.prod(shape, dtype=np.int64)) * 4
        raw = reader.take_bytes(size, f"payload of {name}")
        tensors[name] = np.frombuffer(raw, dtype="<f4").reshape(shape)
        if not np.isfinite(tensors[name]).all():
            raise FormatError(f"non-finite values in {name}", offset=start)
    if reader.offset != len(reader.data):
        raise FormatError("trailing bytes after payload", offset=reader.offset)
    return ToyDenoiser.from_tensors(config, tensors)
