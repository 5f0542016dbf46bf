"""
Tensor Core
Dense linear algebra and counter-based randomness shared by every other module.

Tensors are numpy arrays. float32 inputs give float32 results; float64 inputs
stay float64 so reference oracles can run at higher precision.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence, Union

import numpy as np

from src.utils.errors import DimensionError, DomainError

Tensor = np.ndarray
Shape = Union[int, Sequence[int]]

_COUNTER_BITS = 256


def as_tensor(x) -> Tensor:
    """Cast to a float tensor, keeping float64 and converting everything else to float32."""
    arr = np.asarray(x)
    if arr.dtype == np.float64 or arr.dtype == np.float32:
        return arr
    return arr.astype(np.float32)


def _result_dtype(*arrays: np.ndarray) -> np.dtype:
    if any(a.dtype == np.float64 for a in arrays):
        return np.dtype(np.float64)
    return np.dtype(np.float32)


def identity(n: int, dtype=np.float32) -> Tensor:
    return np.eye(n, dtype=dtype)


def matmul(a: Tensor, b: Tensor) -> Tensor:
    """
    Standard matrix product of two 2-D tensors.

    Args:
        a: Tensor [m x k]
        b: Tensor [k x n]

    Returns:
        Tensor [m x n]
    """
    a = as_tensor(a)
    b = as_tensor(b)
    if a.ndim != 2 or b.ndim != 2:
        raise DimensionError(f"matmul expects 2-D tensors, got {a.shape} and {b.shape}")
    if a.shape[1] != b.shape[0]:
        raise DimensionError(f"matmul inner extents differ: {a.shape} x {b.shape}")
    dtype = _result_dtype(a, b)
    return np.matmul(a.astype(dtype, copy=False), b.astype(dtype, copy=False))


def linear_nobias(weight: Tensor, x: Tensor) -> Tensor:
    """
    Apply a bias-free linear map to the last axis of x.

    Strictly additive, which is what lets mapped features be cached apart
    from their positional encoding.

    Args:
        weight: Tensor [C_out x C_in]
        x: Tensor [... x C_in]

    Returns:
        Tensor [... x C_out]
    """
    weight = as_tensor(weight)
    x = as_tensor(x)
    if weight.ndim != 2:
        raise DimensionError(f"weight must be 2-D, got shape {weight.shape}")
    if x.shape[-1] != weight.shape[1]:
        raise DimensionError(f"last extent of x ({x.shape[-1]}) != C_in ({weight.shape[1]})")
    dtype = _result_dtype(weight, x)
    flat = x.reshape(-1, x.shape[-1]).astype(dtype, copy=False)
    out = flat @ weight.astype(dtype, copy=False).T
    return out.reshape(*x.shape[:-1], weight.shape[0])


def masked_softmax(scores: Tensor, mask) -> Tensor:
    """
    Softmax over the last axis restricted to allowed keys.

    Blocked positions get a weight of exactly 0 rather than an underflowed
    exponential.

    Args:
        scores: Tensor [... x Q x KV]
        mask: AttentionMask [Q x KV] (or a boolean array of allowed entries)

    Returns:
        Tensor [... x Q x KV] of row-stochastic weights
    """
    scores = as_tensor(scores)
    allowed = np.asarray(getattr(mask, "allowed", mask), dtype=bool)
    if allowed.shape != scores.shape[-2:]:
        raise DimensionError(f"mask shape {allowed.shape} does not match scores {scores.shape[-2:]}")
    if not allowed.any(axis=-1).all():
        raise DomainError("Attention mask has a fully blocked query row")

    masked = np.where(allowed, scores, -np.inf)
    row_max = masked.max(axis=-1, keepdims=True)
    exp = np.where(allowed, np.exp(masked - row_max), 0.0).astype(scores.dtype, copy=False)
    return exp / exp.sum(axis=-1, keepdims=True)


# ---- Counter-based randomness ------------------------------------------------

def _counter_value(words: np.ndarray) -> int:
    return sum(int(w) << (64 * i) for i, w in enumerate(words))


@dataclass
class RngStream:
    """
    Counter-based random stream fully determined by (seed, counter).

    Draws come from the Philox generator keyed by the seed; every call to
    gaussian() moves the counter past the blocks it consumed.
    """

    seed: int
    counter: int = 0

    def __post_init__(self):
        if self.seed < 0:
            raise DomainError(f"seed must be non-negative, got {self.seed}")

    def spawn(self, *keys: int) -> "RngStream":
        """Derive an independent stream for a sub-task (e.g. one frame's noise)."""
        entropy = np.random.SeedSequence([self.seed, *[int(k) for k in keys]])
        return RngStream(seed=int(entropy.generate_state(1, np.uint64)[0]))


def gaussian(rng: RngStream, shape: Shape, dtype=np.float32) -> Tensor:
    """
    Draw i.i.d. standard normal values and advance the stream.

    Args:
        rng: Stream to draw from (mutated: its counter advances)
        shape: Output shape

    Returns:
        Tensor of the requested shape
    """
    bit_gen = np.random.Philox(key=rng.seed, counter=rng.counter)
    draws = np.random.Generator(bit_gen).standard_normal(size=shape, dtype=dtype)
    used = _counter_value(bit_gen.state["state"]["counter"])
    rng.counter = (used + 1) % (1 << _COUNTER_BITS)
    return draws

