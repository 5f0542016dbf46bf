"""
Temporal Self-Attention
Multi-head attention across the frame axis, computed independently at every
spatial position, with sinusoidal positional encoding added before the
bias-free query/key/value projections.
"""

import math
from dataclasses import dataclass
from typing import Optional, Sequence

import numpy as np
from einops import rearrange

from src.attention.attnmask import AttentionMask
from src.core.tensorcore import Tensor, as_tensor, linear_nobias, masked_softmax
from src.utils.errors import DimensionError, ParameterError


@dataclass(frozen=True)
class AttentionWeights:
    """
    Bias-free projection matrices of one temporal attention layer.

    Attributes:
        w_q, w_k, w_v, w_out: Square [C x C] matrices
        head_count: Number of heads, divides C
    """

    w_q: Tensor
    w_k: Tensor
    w_v: Tensor
    w_out: Tensor
    head_count: int = 1

    def __post_init__(self):
        shapes = {name: np.shape(getattr(self, name)) for name in ("w_q", "w_k", "w_v", "w_out")}
        channels = shapes["w_q"][0] if shapes["w_q"] else 0
        for name, shape in shapes.items():
            if len(shape) != 2 or shape[0] != shape[1] or shape[0] != channels:
                raise DimensionError(f"{name} must be square [{channels} x {channels}], got {shape}")
        if self.head_count < 1 or channels % self.head_count:
            raise ParameterError(f"head_count {self.head_count} must divide channels {channels}")

    @property
    def channels(self) -> int:
        return self.w_q.shape[0]

    @property
    def head_dim(self) -> int:
        return self.channels // self.head_count


@dataclass(frozen=True)
class PositionalEncoding:
    table: Tensor

    @property
    def max_len(self) -> int:
        return self.table.shape[0]

    @property
    def channels(self) -> int:
        return self.table.shape[1]


@dataclass(frozen=True)
class PeProjections:
    """Positional encodings pushed through W_Q, W_K, W_V, each [L_max x C]."""

    q_pe: Tensor
    k_pe: Tensor
    v_pe: Tensor


def make_positional_encoding(max_len: int, channels: int) -> PositionalEncoding:
    """
    Sinusoidal table: row p, column 2i is sin(p / 10000^(2i/C)), column 2i+1 the cosine.

    Args:
        max_len: Maximum window length L_max
        channels: Channel count C (even)

    Returns:
        PositionalEncoding with a float32 [L_max x C] table
    """
    if channels % 2:
        raise ParameterError(f"channels must be even, got {channels}")
    if max_len < 1:
        raise ParameterError(f"max_len must be >= 1, got {max_len}")
    position = np.arange(max_len, dtype=np.float64)[:, None]
    div_term = np.power(10000.0, np.arange(0, channels, 2, dtype=np.float64) / channels)
    table = np.zeros((max_len, channels), dtype=np.float64)
    table[:, 0::2] = np.sin(position / div_term)
    table[:, 1::2] = np.cos(position / div_term)
    return PositionalEncoding(table=table.astype(np.float32))


def precompute_pe_projections(w: AttentionWeights, pe: PositionalEncoding) -> PeProjections:
    if pe.channels != w.channels:
        raise DimensionError(f"PE channels ({pe.channels}) != attention channels ({w.channels})")
    return PeProjections(
        q_pe=linear_nobias(w.w_q, pe.table),
        k_pe=linear_nobias(w.w_k, pe.table),
        v_pe=linear_nobias(w.w_v, pe.table),
    )


@dataclass(frozen=True)
class TemporalAttentionLayer:
    """Weights of one layer together with its encoding and projected encodings."""

    weights: AttentionWeights
    pe: PositionalEncoding
    pe_proj: PeProjections

    @classmethod
    def build(cls, weights: AttentionWeights, pe: PositionalEncoding) -> "TemporalAttentionLayer":
        return cls(weights=weights, pe=pe, pe_proj=precompute_pe_projections(weights, pe))


# ---- Shared attention core ---------------------------------------------------

def multi_head_attention(q: Tensor, k: Tensor, v: Tensor, mask, w: AttentionWeights) -> Tensor:
    """
    Scaled dot-product attention over already position-encoded projections.

    Args:
        q: [S x Q x C], k and v: [S x KV x C]
        mask: AttentionMask [Q x KV]
        w: Weights (head count and output projection)

    Returns:
        [S x Q x C] after W_out
    """
    heads = w.head_count
    qh = rearrange(q, "s f (h d) -> s h f d", h=heads)
    kh = rearrange(k, "s g (h d) -> s h g d", h=heads)
    vh = rearrange(v, "s g (h d) -> s h g d", h=heads)
    scores = np.einsum("shfd,shgd->shfg", qh, kh) / math.sqrt(w.head_dim)
    probs = masked_softmax(scores, mask)
    out = np.einsum("shfg,shgd->shfd", probs, vh)
    return linear_nobias(w.w_out, rearrange(out, "s h f d -> s f (h d)"))


def _check_batch(feat: Tensor, mask: AttentionMask, pe: PositionalEncoding, positions) -> np.ndarray:
    if feat.ndim != 3:
        raise DimensionError(f"feat must be [S x F x C], got shape {feat.shape}")
    frames = feat.shape[1]
    if frames > pe.max_len:
        raise ParameterError(f"{frames} frames exceed the positional encoding length {pe.max_len}")
    if mask.allowed.shape != (frames, frames):
        raise DimensionError(f"mask must be [{frames} x {frames}], got {mask.allowed.shape}")
    if positions is None:
        return np.arange(frames)
    positions = np.asarray(positions, dtype=np.int64)
    if positions.shape != (frames,) or positions.min() < 0 or positions.max() >= pe.max_len:
        raise ParameterError(f"positions must be {frames} indices in [0, {pe.max_len})")
    return positions


def _project(feat: Tensor, w: AttentionWeights, proj: PeProjections, positions: np.ndarray):
    dtype = feat.dtype
    q = linear_nobias(w.w_q, feat) + proj.q_pe[positions].astype(dtype)
    k = linear_nobias(w.w_k, feat) + proj.k_pe[positions].astype(dtype)
    v = linear_nobias(w.w_v, feat) + proj.v_pe[positions].astype(dtype)
    return q, k, v


def attend_layer(
    feat: Tensor,
    layer: TemporalAttentionLayer,
    mask: AttentionMask,
    positions: Optional[Sequence[int]] = None,
) -> Tensor:
    """attend_full with the layer's precomputed PE projections."""
    feat = as_tensor(feat)
    positions = _check_batch(feat, mask, layer.pe, positions)
    q, k, v = _project(feat, layer.weights, layer.pe_proj, positions)
    return multi_head_attention(q, k, v, mask, layer.weights)


def attend_full(
    feat: Tensor,
    w: AttentionWeights,
    mask: AttentionMask,
    pe: PositionalEncoding,
    positions: Optional[Sequence[int]] = None,
) -> Tensor:
    """
    Masked temporal attention over a whole batch of frames.

    Every spatial position s is an independent sequence over F frames. PE
    indices default to 0..F-1; a compacted layout can be passed explicitly.

    Args:
        feat: Tensor [S x F x C]
        w: Attention weights
        mask: AttentionMask [F x F]
        pe: Positional encoding with L_max >= F
        positions: Optional PE index per frame

    Returns:
        Tensor [S x F x C]
    """
    return attend_layer(feat, TemporalAttentionLayer.build(w, pe), mask, positions)


def attend_backward(
    feat: Tensor,
    w: AttentionWeights,
    mask: AttentionMask,
    pe: PositionalEncoding,
    upstream_grad: Tensor,
    positions: Optional[Sequence[int]] = None,
) -> Tensor:
    """
    Gradient of sum(attend_full(feat) * upstream_grad) with respect to feat.

    Args:
        feat: Tensor [S x F x C]
        w, mask, pe, positions: As for attend_full
        upstream_grad: Tensor [S x F x C]

    Returns:
        Tensor [S x F x C]
    """
    feat = as_tensor(feat)
    upstream_grad = as_tensor(upstream_grad).astype(feat.dtype, copy=False)
    if upstream_grad.shape != feat.shape:
        raise DimensionError(f"upstream_grad {upstream_grad.shape} does not match feat {feat.shape}")
    positions = _check_batch(feat, mask, pe, positions)
    proj = precompute_pe_projections(w, pe)
    q, k, v = _project(feat, w, proj, positions)

    heads = w.head_count
    scale = 1.0 / math.sqrt(w.head_dim)
    qh = rearrange(q, "s f (h d) -> s h f d", h=heads)
    kh = rearrange(k, "s g (h d) -> s h g d", h=heads)
    vh = rearrange(v, "s g (h d) -> s h g d", h=heads)
    probs = masked_softmax(np.einsum("shfd,shgd->shfg", qh, kh) * scale, mask)

    w_out = w.w_out.astype(feat.dtype, copy=False)
    d_merged = upstream_grad @ w_out  # grad w.r.t. the pre-W_out attention output
    d_out = rearrange(d_merged, "s f (h d) -> s h f d", h=heads)

    d_probs = np.einsum("shfd,shgd->shfg", d_out, vh)
    d_vh = np.einsum("shfg,shfd->shgd", probs, d_out)
    d_scores = probs * (d_probs - (d_probs * probs).sum(axis=-1, keepdims=True))
    d_qh = np.einsum("shfg,shgd->shfd", d_scores, kh) * scale
    d_kh = np.einsum("shfg,shfd->shgd", d_scores, qh) * scale

    d_q = rearrange(d_qh, "s h f d -> s f (h d)")
    d_k = rearrange(d_kh, "s h g d -> s g (h d)")
    d_v = rearrange(d_vh, "s h g d -> s g (h d)")
    return (
        d_q @ w.w_q.astype(feat.dtype, copy=False)
        + d_k @ w.w_k.astype(feat.dtype, copy=False)
        + d_v @ w.w_v.astype(feat.dtype, copy=False)
    )
