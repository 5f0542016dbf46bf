"""
Frame Container
Reads and writes the raw frame container.

Layout: magic "L2DF" | version u16 | width, height, channels, frame_count u32
(little-endian, 22-byte header) | frames in order, row-major H x W x channels,
little-endian float32.
"""

import struct
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence, Union

import numpy as np

from src.utils.errors import DimensionError, FormatError

MAGIC = b"L2DF"
VERSION = 1
_HEADER = struct.Struct("<4sH4I")
HEADER_SIZE = _HEADER.size


@dataclass(frozen=True)
class FrameContainer:
    """Frames [N x H x W x C] plus their header extents."""

    width: int
    height: int
    channels: int
    frames: np.ndarray

    @property
    def frame_count(self) -> int:
        return self.frames.shape[0]

    def __len__(self) -> int:
        return self.frame_count

    @classmethod
    def from_frames(cls, frames: Union[np.ndarray, Sequence[np.ndarray]], width: int = None,
                    height: int = None, channels: int = None) -> "FrameContainer":
        """Wrap frames ([H x W] or [H x W x C] each); an empty stream needs explicit extents."""
        if len(frames) == 0:
            if None in (width, height, channels):
                raise DimensionError("an empty stream needs explicit width, height and channels")
            return cls(width, height, channels, np.zeros((0, height, width, channels), dtype=np.float32))
        stacked = np.stack([np.asarray(f, dtype=np.float32) for f in frames])
        if stacked.ndim == 3:
            stacked = stacked[..., None]
        if stacked.ndim != 4:
            raise DimensionError(f"frames must be [H x W] or [H x W x C], got {stacked.shape[1:]}")
        _, h, w, c = stacked.shape
        return cls(width=w, height=h, channels=c, frames=stacked)


def write_container(path: str, frames, width: int = None, height: int = None, channels: int = None) -> int:
    """
    Write frames to a container file.

    Args:
        path: Destination
        frames: FrameContainer, array [N x H x W x C] or a list of frames
        width, height, channels: Extents for an empty stream

    Returns:
        Number of bytes written
    """
    container = frames if isinstance(frames, FrameContainer) else FrameContainer.from_frames(
        frames, width, height, channels
    )
    header = _HEADER.pack(MAGIC, VERSION, container.width, container.height,
                          container.channels, container.frame_count)
    payload = np.ascontiguousarray(container.frames, dtype="<f4").tobytes()
    Path(path).write_bytes(header + payload)
    return len(header) + len(payload)


def read_container(path: str) -> FrameContainer:
    """
    Read a container file.

    Raises:
        FormatError: Bad magic (offset 0), unsupported version (offset 4),
            truncated header, or a payload whose size disagrees with the header
    """
    data = Path(path).read_bytes()
    if len(data) >= 4 and data[:4] != MAGIC:
        raise FormatError(f"bad magic {data[:4]!r}, expected {MAGIC!r}", offset=0)
    if len(data) < HEADER_SIZE:
        raise FormatError(f"truncated header ({len(data)} of {HEADER_SIZE} bytes)", offset=len(data))
    _, version, width, height, channels, count = _HEADER.unpack_from(data, 0)
    if version != VERSION:
        raise FormatError(f"unsupported version {version}", offset=4)

    expected = count * height * width * channels * 4
    payload = len(data) - HEADER_SIZE
    if payload < expected:
        raise FormatError(f"truncated payload: {payload} of {expected} bytes", offset=len(data))
    if payload > expected:
        raise FormatError(f"{payload - expected} trailing bytes after payload", offset=HEADER_SIZE + expected)

    if expected == 0:
        frames = np.zeros((count, height, width, channels), dtype=np.float32)
    else:
        frames = np.frombuffer(data, dtype="<f4", offset=HEADER_SIZE, count=expected // 4)
        frames = frames.reshape(count, height, width, channels).astype(np.float32)
    return FrameContainer(width=width, height=height, channels=channels, frames=frames)
