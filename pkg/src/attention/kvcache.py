"""
KV-Cache
Per-layer key/value cache with one row of window slots per denoising step.

Slot layout per step: [0, L_w) holds the warmup frames, written once; the
recent region [L_w, L) is a queue with the newest entry in slot L-1. With
rolling_warmup the warmup region instead takes over the frames evicted from
the recent region, so it always holds the L_w frames just before it. Cached
entries are pure mapped features (W_K f, W_V f); positional encodings are
re-attached at read time through compacted indices.
"""

import logging
import struct
from pathlib import Path
from typing import Dict, Tuple

import numpy as np

from src.attention.attnmask import MaskRowLike, _row_allowed, pe_index_compaction
from src.attention.temporal_attention import AttentionWeights, PeProjections, multi_head_attention
from src.core.tensorcore import Tensor, as_tensor, linear_nobias
from src.utils.errors import ConsistencyError, DimensionError, FormatError, ParameterError, StateError

logger = logging.getLogger(__name__)

_DUMP_HEADER = struct.Struct("<5I")


class _SlotBank:
    """
    Slot bookkeeping shared by the cache variants.

    Subclasses name their buffers in `buffer_names`; every buffer has shape
    [T x S x L x C].
    """

    buffer_names: Tuple[str, ...] = ()

    def __init__(self, steps: int, positions: int, window: int, channels: int, warmup: int,
                 dtype=np.float32, rolling_warmup: bool = False):
        if min(steps, positions, channels) < 1:
            raise ParameterError(f"T, S, C must be >= 1, got T={steps}, S={positions}, C={channels}")
        if not 1 <= warmup < window:
            raise ParameterError(f"need 1 <= warmup < window, got warmup={warmup}, window={window}")
        self.steps = steps
        self.positions = positions
        self.window = window
        self.channels = channels
        self.warmup_size = warmup
        self.rolling_warmup = rolling_warmup
        self.buffers: Dict[str, np.ndarray] = {
            name: np.zeros((steps, positions, window, channels), dtype=dtype)
            for name in self.buffer_names
        }
        self._occupancy = np.zeros(steps, dtype=np.int64)
        self._warmup_written = np.zeros(steps, dtype=bool)

    @property
    def recent_capacity(self) -> int:
        return self.window - self.warmup_size

    @property
    def nbytes(self) -> int:
        return sum(buf.nbytes for buf in self.buffers.values())

    def occupancy(self, step: int) -> int:
        """Number of valid recent slots at this step."""
        self._check_step(step)
        return int(self._occupancy[step])

    def warmup_written(self, step: int) -> bool:
        self._check_step(step)
        return bool(self._warmup_written[step])

    def valid_slots(self, step: int) -> np.ndarray:
        """Indices of slots holding real entries: warmup plus the occupied recent tail."""
        occ = self.occupancy(step)
        return np.concatenate([np.arange(self.warmup_size), np.arange(self.window - occ, self.window)])

    def _check_step(self, step: int):
        if not 0 <= step < self.steps:
            raise ParameterError(f"step {step} out of range [0, {self.steps})")

    def _check_entry(self, name: str, value: Tensor, frames: int) -> np.ndarray:
        value = as_tensor(value)
        expected = (self.positions, frames, self.channels)
        if value.shape != expected:
            raise DimensionError(f"{name} must have shape {expected}, got {value.shape}")
        return value

    def _write_warmup(self, step: int, entries: Dict[str, Tensor]):
        self._check_step(step)
        if self._warmup_written[step]:
            raise StateError(f"Warmup slots at step {step} are already written")
        for name, value in entries.items():
            self.buffers[name][step, :, :self.warmup_size] = self._check_entry(name, value, self.warmup_size)
        self._warmup_written[step] = True

    def _shift_in(self, window: np.ndarray, value: np.ndarray, full: bool):
        """Shift a [S x L x C] window left by one and put value in slot L-1."""
        lo = 0 if self.rolling_warmup and full else self.warmup_size
        window[:, lo:] = np.roll(window[:, lo:], shift=-1, axis=1)
        window[:, -1:] = value

    def _roll_and_write(self, step: int, entries: Dict[str, Tensor]):
        self._check_step(step)
        if not self._warmup_written[step]:
            raise StateError(f"roll_and_write at step {step} before its warmup write")
        full = self._occupancy[step] == self.recent_capacity
        for name, value in entries.items():
            self._shift_in(self.buffers[name][step], self._check_entry(name, value, 1), full)
        self._occupancy[step] = min(self._occupancy[step] + 1, self.recent_capacity)

    def _preview(self, step: int, entries: Dict[str, Tensor]) -> Tuple[Dict[str, np.ndarray], int]:
        """What roll_and_write would leave at this step, without touching the bank."""
        self._check_step(step)
        if not self._warmup_written[step]:
            raise StateError(f"read at step {step} before its warmup write")
        full = self._occupancy[step] == self.recent_capacity
        preview = {}
        for name, value in entries.items():
            buf = self.buffers[name][step].copy()
            self._shift_in(buf, self._check_entry(name, value, 1), full)
            preview[name] = buf
        return preview, min(int(self._occupancy[step]) + 1, self.recent_capacity)

    def snapshot_warmup(self, step: int) -> Dict[str, bytes]:
        """Raw bytes of the warmup region at a step, for permanence checks."""
        self._check_step(step)
        return {name: buf[step, :, :self.warmup_size].tobytes() for name, buf in self.buffers.items()}


class KVCacheBank(_SlotBank):
    """Cache of mapped keys and values, one bank per temporal attention layer."""

    buffer_names = ("k", "v")

    @property
    def k_cache(self) -> np.ndarray:
        return self.buffers["k"]

    @property
    def v_cache(self) -> np.ndarray:
        return self.buffers["v"]

    def read(self, step: int) -> Tuple[np.ndarray, np.ndarray]:
        """Views of the K and V windows [S x L x C] at a step."""
        self._check_step(step)
        return self.k_cache[step], self.v_cache[step]

    def write_warmup(self, step: int, k: Tensor, v: Tensor):
        """
        Store the warmup frames' mapped keys/values permanently.

        Args:
            step: Denoising step index
            k, v: Tensors [S x L_w x C]
        """
        self._write_warmup(step, {"k": k, "v": v})

    def roll_and_write(self, step: int, k: Tensor, v: Tensor):
        """
        Shift the recent slots left by one and put the new entry in slot L-1.

        Args:
            step: Denoising step index
            k, v: Tensors [S x 1 x C]
        """
        self._roll_and_write(step, {"k": k, "v": v})

    def admit_warmup(self, step: int, feat: Tensor, w: AttentionWeights):
        """Map the warmup frames' layer inputs [S x L_w x C] and store them."""
        self.write_warmup(step, linear_nobias(w.w_k, feat), linear_nobias(w.w_v, feat))

    def admit(self, step: int, feat: Tensor, w: AttentionWeights, commit: bool, allowed: np.ndarray):
        """Project the current frame, store it (or preview storing it) and return the window."""
        entries = {"k": linear_nobias(w.w_k, feat), "v": linear_nobias(w.w_v, feat)}
        if commit:
            self._roll_and_write(step, entries)
            return self.k_cache[step], self.v_cache[step], self.occupancy(step), 1
        preview, occ = self._preview(step, entries)
        return preview["k"], preview["v"], occ, 1


class FeatureHistoryBank(_SlotBank):
    """
    Same slot discipline, but stores the raw layer inputs and re-projects
    every valid slot the mask admits on each read (the cache-less reference).
    """

    buffer_names = ("feat",)

    def write_warmup(self, step: int, feat: Tensor):
        self._write_warmup(step, {"feat": feat})

    def roll_and_write(self, step: int, feat: Tensor):
        self._roll_and_write(step, {"feat": feat})

    def admit_warmup(self, step: int, feat: Tensor, w: AttentionWeights):
        self.write_warmup(step, feat)

    def admit(self, step: int, feat: Tensor, w: AttentionWeights, commit: bool, allowed: np.ndarray):
        if commit:
            self._roll_and_write(step, {"feat": feat})
            stored, occ = self.buffers["feat"][step], self.occupancy(step)
        else:
            preview, occ = self._preview(step, {"feat": feat})
            stored = preview["feat"]
        valid = np.concatenate([np.arange(self.warmup_size), np.arange(self.window - occ, self.window)])
        valid = valid[allowed[valid]]
        keys = np.zeros_like(stored)
        values = np.zeros_like(stored)
        keys[:, valid] = linear_nobias(w.w_k, stored[:, valid])
        values[:, valid] = linear_nobias(w.w_v, stored[:, valid])
        return keys, values, occ, len(valid)


def allocate(steps: int, positions: int, window: int, channels: int, warmup: int,
             recompute: bool = False, dtype=np.float32, rolling_warmup: bool = False) -> _SlotBank:
    """
    Allocate a zero-filled bank of shape [T x S x L x C] per buffer.

    Args:
        steps: Denoising steps T
        positions: Spatial positions S
        window: Window length L
        channels: Channels C
        warmup: Warmup slots L_w
        recompute: Allocate a FeatureHistoryBank instead of a KVCacheBank
        dtype: Buffer dtype (float64 for reference runs)
        rolling_warmup: Refill the warmup slots with the frames evicted from
            the recent region instead of keeping the first L_w frames

    Returns:
        The new bank, occupancy 0 at every step
    """
    cls = FeatureHistoryBank if recompute else KVCacheBank
    bank = cls(steps, positions, window, channels, warmup, dtype=dtype, rolling_warmup=rolling_warmup)
    logger.debug("✓ Allocated %s T=%d S=%d L=%d C=%d L_w=%d (%d bytes)",
                 cls.__name__, steps, positions, window, channels, warmup, bank.nbytes)
    return bank


def _check_mask_against_bank(allowed: np.ndarray, bank: _SlotBank, occupancy: int):
    if not allowed[-1]:
        raise ConsistencyError("mask row must allow the current frame in slot L-1")
    stale = allowed[bank.warmup_size:bank.window - occupancy]
    if stale.any():
        raise ConsistencyError(
            f"mask allows recent slots with no entry (occupancy {occupancy} of {bank.recent_capacity})"
        )


def attend_streaming(
    bank: _SlotBank,
    step: int,
    feat_current: Tensor,
    w: AttentionWeights,
    mask_row: MaskRowLike,
    pe_proj: PeProjections,
    commit: bool = True,
    counters=None,
) -> Tensor:
    """
    Single-query temporal attention for the newest frame, reading history from the cache.

    The current frame's mapped key/value is rolled into the bank first
    (skipped when commit is False, e.g. for pipeline placeholders), then the
    window is read, compacted PE projections are added and one masked
    attention row is computed.

    Args:
        bank: Layer cache
        step: Denoising step index of this query
        feat_current: Tensor [S x 1 x C]
        w: Attention weights
        mask_row: Mask over the L slots
        pe_proj: Precomputed PE projections
        commit: Persist the current entry in the bank
        counters: Optional OpCounters to record projection and flop counts

    Returns:
        Tensor [S x 1 x C]
    """
    feat_current = as_tensor(feat_current)
    if feat_current.shape != (bank.positions, 1, bank.channels):
        raise DimensionError(
            f"feat_current must be [{bank.positions} x 1 x {bank.channels}], got {feat_current.shape}"
        )
    allowed = _row_allowed(mask_row)
    if allowed.shape != (bank.window,):
        raise DimensionError(f"mask row must have {bank.window} slots, got {allowed.shape}")
    keys, values, occupancy, projections = bank.admit(step, feat_current, w, commit, allowed)
    _check_mask_against_bank(allowed, bank, occupancy)

    pe_idx = pe_index_compaction(allowed)
    dtype = feat_current.dtype
    k_full = keys + pe_proj.k_pe[pe_idx].astype(dtype)
    v_full = values + pe_proj.v_pe[pe_idx].astype(dtype)
    query = linear_nobias(w.w_q, feat_current) + pe_proj.q_pe[pe_idx[-1]].astype(dtype)

    if counters is not None:
        attended = int(allowed.sum())
        counters.record_query(
            projections=projections,
            window=bank.warmup_size + occupancy,
            attended=attended,
            positions=bank.positions,
            channels=bank.channels,
            placeholder=not commit,
        )
    return multi_head_attention(query, k_full, v_full, allowed[None, :], w)


# ---- Debug dump ---------------------------------------------------------------

def dump_bank(bank: KVCacheBank, path: str) -> int:
    """
    Write a bank as header (T, S, L, C, L_w as little-endian u32) then raw k and v.

    Returns:
        Number of bytes written
    """
    header = _DUMP_HEADER.pack(bank.steps, bank.positions, bank.window, bank.channels, bank.warmup_size)
    payload = bank.k_cache.astype("<f4").tobytes() + bank.v_cache.astype("<f4").tobytes()
    Path(path).write_bytes(header + payload)
    return len(header) + len(payload)


def load_bank(path: str) -> KVCacheBank:
    """
    Read a bank written by dump_bank.

    Occupancy is not part of the format and comes back as 0; warmup slots
    are marked written.
    """
    data = Path(path).read_bytes()
    if len(data) < _DUMP_HEADER.size:
        raise FormatError("truncated cache dump header", offset=len(data))
    steps, positions, window, channels, warmup = _DUMP_HEADER.unpack_from(data, 0)
    count = steps * positions * window * channels
    expected = _DUMP_HEADER.size + 2 * count * 4
    if len(data) != expected:
        raise FormatError(f"cache dump payload is {len(data)} bytes, expected {expected}",
                          offset=min(len(data), expected))
    bank = KVCacheBank(steps, positions, window, channels, warmup)
    shape = bank.k_cache.shape
    offset = _DUMP_HEADER.size
    bank.k_cache[:] = np.frombuffer(data, dtype="<f4", count=count, offset=offset).reshape(shape)
    bank.v_cache[:] = np.frombuffer(data, dtype="<f4", count=count, offset=offset + count * 4).reshape(shape)
    bank._warmup_written[:] = True
    return bank
