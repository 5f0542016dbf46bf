"""
Attention Masks
Builds the temporal attention masks used for training-style batches, the
per-row masks used while streaming, positional-encoding index compaction and
the chunk plan for the overlapped sliding-window baseline.
"""

from dataclasses import dataclass
from enum import Enum
from typing import List, Union

import numpy as np

from src.utils.errors import DimensionError, DomainError, ParameterError, StateError


class MaskKind(str, Enum):
    BIDIRECTIONAL_CHUNK = "bidirectional_chunk"
    SLIDING_OVERLAP = "sliding_overlap"
    UNIDIRECTIONAL = "unidirectional"
    UNIDIRECTIONAL_WARMUP = "unidirectional_warmup"


@dataclass(frozen=True)
class MaskMode:
    """
    Temporal attention layout.

    `size` is the overlap L_s for SLIDING_OVERLAP and the warmup length L_w
    for UNIDIRECTIONAL_WARMUP; it is unused otherwise.
    """

    kind: MaskKind
    size: int = 0

    def __post_init__(self):
        if self.kind in (MaskKind.SLIDING_OVERLAP, MaskKind.UNIDIRECTIONAL_WARMUP) and self.size < 1:
            raise ParameterError(f"{self.kind.value} needs size >= 1, got {self.size}")

    @classmethod
    def bidirectional_chunk(cls) -> "MaskMode":
        return cls(MaskKind.BIDIRECTIONAL_CHUNK)

    @classmethod
    def sliding_overlap(cls, overlap: int) -> "MaskMode":
        return cls(MaskKind.SLIDING_OVERLAP, overlap)

    @classmethod
    def unidirectional(cls) -> "MaskMode":
        return cls(MaskKind.UNIDIRECTIONAL)

    @classmethod
    def unidirectional_warmup(cls, warmup: int) -> "MaskMode":
        return cls(MaskKind.UNIDIRECTIONAL_WARMUP, warmup)


@dataclass(frozen=True)
class AttentionMask:
    """
    Query x key mask; True marks an allowed (attended) entry.

    Every row must allow at least one key.
    """

    allowed: np.ndarray

    def __post_init__(self):
        allowed = np.asarray(self.allowed, dtype=bool)
        if allowed.ndim != 2:
            raise DimensionError(f"AttentionMask must be 2-D, got shape {allowed.shape}")
        if not allowed.any(axis=1).all():
            raise DomainError("AttentionMask has a row with no allowed entry")
        allowed.flags.writeable = False
        object.__setattr__(self, "allowed", allowed)

    @property
    def rows(self) -> int:
        return self.allowed.shape[0]

    @property
    def cols(self) -> int:
        return self.allowed.shape[1]

    def additive(self, dtype=np.float32) -> np.ndarray:
        """0 where attention is allowed, -inf where it is blocked."""
        return np.where(self.allowed, 0.0, -np.inf).astype(dtype)

    @classmethod
    def from_additive(cls, values) -> "AttentionMask":
        arr = np.atleast_2d(np.asarray(values, dtype=np.float64))
        return cls(arr == 0.0)

    @classmethod
    def full(cls, rows: int, cols: int = None) -> "AttentionMask":
        return cls(np.ones((rows, cols if cols is not None else rows), dtype=bool))

    def as_bits(self) -> List[str]:
        """Rows rendered as '1'/'0' strings, handy for logs and tests."""
        return ["".join("1" if v else "0" for v in row) for row in self.allowed]


MaskRowLike = Union[AttentionMask, np.ndarray, list]


def build_training_mask(mode: MaskMode, window: int) -> AttentionMask:
    """
    Build the L x L mask for a batch of frames processed together.

    BIDIRECTIONAL_CHUNK allows everything, UNIDIRECTIONAL is causal (lower
    triangular), UNIDIRECTIONAL_WARMUP lets the first L_w frames see each other
    and every later frame see the warmup block plus itself and its
    predecessors. SLIDING_OVERLAP allows |i - j| <= L_s (a temporal
    neighbourhood in both directions).

    Args:
        mode: Mask layout
        window: Window length L

    Returns:
        AttentionMask [L x L]
    """
    if window < 1:
        raise ParameterError(f"window must be >= 1, got {window}")
    rows = np.arange(window)[:, None]
    cols = np.arange(window)[None, :]

    if mode.kind is MaskKind.BIDIRECTIONAL_CHUNK:
        allowed = np.ones((window, window), dtype=bool)
    elif mode.kind is MaskKind.UNIDIRECTIONAL:
        allowed = cols <= rows
    elif mode.kind is MaskKind.UNIDIRECTIONAL_WARMUP:
        warmup = mode.size
        if warmup >= window:
            raise ParameterError(f"warmup ({warmup}) must be < window ({window})")
        allowed = (cols < warmup) | ((cols <= rows) & (rows >= warmup))
    elif mode.kind is MaskKind.SLIDING_OVERLAP:
        allowed = np.abs(rows - cols) <= mode.size
    else:
        raise ParameterError(f"Unknown mask kind: {mode.kind}")
    return AttentionMask(allowed)


def recent_count(frame_index: int, window: int, warmup: int) -> int:
    """Number of recent (non-warmup) frames a streaming frame attends, itself included."""
    return min(frame_index - warmup + 1, window - warmup)


def streaming_row_mask(
    frame_index: int,
    window: int,
    warmup: int,
    steps_into_stream: int = 0,
    attend_warmup: bool = True,
) -> AttentionMask:
    """
    Mask row for one streaming query over the L cache slots.

    Slots [0, L_w) hold the warmup frames; the recent frames sit at the end of
    the window with the newest (the query itself) in slot L-1.

    Args:
        frame_index: Index of the newest ingested frame
        window: Window length L
        warmup: Warmup length L_w
        steps_into_stream: How many ingests ago this row's latent entered; the
            row belongs to frame `frame_index - steps_into_stream`
        attend_warmup: Block the warmup slots when False

    Returns:
        AttentionMask [1 x L]
    """
    if not 1 <= warmup < window:
        raise ParameterError(f"need 1 <= warmup < window, got warmup={warmup}, window={window}")
    if steps_into_stream < 0:
        raise ParameterError(f"steps_into_stream must be >= 0, got {steps_into_stream}")
    frame = frame_index - steps_into_stream
    if frame < warmup:
        raise StateError(
            f"Frame {frame} is a warmup frame (warmup={warmup}); use build_training_mask"
        )
    row = np.zeros(window, dtype=bool)
    row[:warmup] = attend_warmup
    row[window - recent_count(frame, window, warmup):] = True
    return AttentionMask(row[None, :])


def _row_allowed(mask_row: MaskRowLike) -> np.ndarray:
    if isinstance(mask_row, AttentionMask):
        if mask_row.rows != 1:
            raise DimensionError(f"expected a single mask row, got {mask_row.rows} rows")
        return mask_row.allowed[0]
    arr = np.asarray(mask_row)
    if arr.ndim != 1:
        raise DimensionError(f"expected a 1-D mask row, got shape {arr.shape}")
    if arr.dtype == bool:
        return arr
    return arr == 0


def pe_index_compaction(mask_row: MaskRowLike) -> np.ndarray:
    """
    Map every slot to the rank of the attended slots up to and including it.

    Blocked slots repeat the previous rank (they are never read since their
    attention weight is zero). The query position is the last entry.

    Args:
        mask_row: Single mask row (AttentionMask with one row, boolean row, or
            additive 0/-inf row)

    Returns:
        Integer array of PE indices, one per slot
    """
    allowed = _row_allowed(mask_row)
    if not allowed.any():
        raise DomainError("Mask row has no allowed slot")
    return np.maximum(np.cumsum(allowed) - 1, 0).astype(np.int64)


@dataclass(frozen=True)
class ChunkPlan:
    start: int
    length: int
    weights: np.ndarray


def sliding_window_plan(total_frames: int, window: int, overlap: int) -> List[ChunkPlan]:
    """
    Plan overlapping chunks for the sliding-window baseline.

    Chunks advance by L - L_s; a final chunk is aligned to the end when the
    stride does not land on it. Each frame's fusion weights across the chunks
    covering it are uniform and sum to 1.

    Args:
        total_frames: Number of frames F
        window: Chunk length L
        overlap: Overlap L_s

    Returns:
        List of ChunkPlan, in start order
    """
    if not 0 < overlap < window:
        raise ParameterError(f"need 0 < overlap < window, got overlap={overlap}, window={window}")
    if window > total_frames:
        raise ParameterError(f"window ({window}) exceeds frame count ({total_frames})")

    stride = window - overlap
    starts = list(range(0, total_frames - window + 1, stride))
    if starts[-1] + window < total_frames:
        starts.append(total_frames - window)

    coverage = np.zeros(total_frames, dtype=np.int64)
    for start in starts:
        coverage[start:start + window] += 1

    return [
        ChunkPlan(start=start, length=window, weights=(1.0 / coverage[start:start + window]).astype(np.float32))
        for start in starts
    ]
