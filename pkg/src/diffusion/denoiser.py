"""
Toy Denoiser
A small noise-prediction network standing in for the video U-Net.

Each call maps noisy latents to an x0 estimate through per-frame spatial
mixing blocks, each followed by a temporal attention layer, and converts
that estimate to a noise prediction for the sampler. Temporal layers run in
one of three modes: a plain masked batch, a warmup batch that also fills the
per-step caches, or single-query streaming reads from those caches.
"""

import logging
from dataclasses import asdict, dataclass, fields
from typing import Dict, Optional, Sequence, Tuple, Union

import numpy as np
from einops import rearrange, reduce

from src.attention.attnmask import AttentionMask
from src.attention.kvcache import attend_streaming
from src.attention.temporal_attention import (
    AttentionWeights,
    TemporalAttentionLayer,
    attend_layer,
    make_positional_encoding,
)
from src.core.tensorcore import RngStream, Tensor, as_tensor, gaussian, identity, linear_nobias
from src.diffusion.schedule import alpha_bar_table
from src.utils.config import _get_cfg
from src.utils.errors import DimensionError, ParameterError

logger = logging.getLogger(__name__)


@dataclass(frozen=True)
class DenoiserConfig:
    """
    Network dimensions.

    Attributes:
        latent_channels: Channels c of a latent pixel
        channels: Hidden width C (even, divisible by head_count, >= latent_channels)
        head_count: Attention heads per temporal layer
        temporal_layers: Number of blocks, each ending in a temporal layer
        grid_height, grid_width: Latent grid; S = height * width
        n_styles: Rows of the style table
        cond_channels: Channels of the structure map
        adapter_hidden: Width of the adapter's first stage
        max_window: Longest frame sequence a temporal layer accepts
        temporal_blend: Share of the attention output mixed into the features
        mixer_gain: Scale of the spatial mixer's residual update
    """

    latent_channels: int = 4
    channels: int = 16
    head_count: int = 2
    temporal_layers: int = 2
    grid_height: int = 8
    grid_width: int = 8
    n_styles: int = 4
    cond_channels: int = 1
    adapter_hidden: int = 8
    max_window: int = 16
    temporal_blend: float = 0.5
    mixer_gain: float = 0.1
    n_train_steps: int = 1000
    beta_min: float = 1e-4
    beta_max: float = 0.02

    def __post_init__(self):
        if self.channels < 2 or self.channels % 2:
            raise ParameterError(f"channels must be even and >= 2, got {self.channels}")
        if self.head_count < 1 or self.channels % self.head_count:
            raise ParameterError(f"head_count {self.head_count} must divide channels {self.channels}")
        if not 1 <= self.latent_channels <= self.channels:
            raise ParameterError(
                f"latent_channels must be in [1, channels], got {self.latent_channels}"
            )
        if self.temporal_layers < 1:
            raise ParameterError(f"temporal_layers must be >= 1, got {self.temporal_layers}")
        if min(self.grid_height, self.grid_width, self.n_styles, self.cond_channels,
               self.adapter_hidden, self.max_window) < 1:
            raise ParameterError("grid, styles, cond channels, adapter width and max_window must be >= 1")
        if not 0.0 <= self.temporal_blend <= 1.0:
            raise ParameterError(f"temporal_blend must be in [0, 1], got {self.temporal_blend}")

    @property
    def positions(self) -> int:
        return self.grid_height * self.grid_width

    @classmethod
    def from_app_config(cls, cfg: dict, path: Sequence[str] = ("model",), **defaults) -> "DenoiserConfig":
        """
        Build from a YAML section, ignoring keys that are not dimensions (e.g. seed).

        Args:
            cfg: Parsed YAML configuration
            path: Key path of the section
            **defaults: Values used where the section is silent
        """
        values = _get_cfg(cfg, list(path), {}) or {}
        known = {f.name for f in fields(cls)}
        kwargs = dict(defaults)
        kwargs.update({k: v for k, v in values.items() if k in known})
        sched = _get_cfg(cfg, ["schedule"], {}) or {}
        for key in ("n_train_steps", "beta_min", "beta_max"):
            if key in sched and key not in kwargs:
                kwargs[key] = sched[key]
        return cls(**kwargs)

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass(frozen=True)
class ConditionAdapter:
    """
    Two-stage channel mixer for the structure map: stage2 @ tanh(stage1 @ cond).

    stage2 starts at zero, so a fresh adapter contributes nothing.
    """

    stage1: Tensor
    stage2: Tensor

    def __call__(self, cond: Tensor) -> Tensor:
        return linear_nobias(self.stage2, np.tanh(linear_nobias(self.stage1, cond)))


@dataclass(frozen=True)
class ToyDenoiser:
    config: DenoiserConfig
    in_proj: Tensor
    time_table: Tensor
    style_table: Tensor
    mixers: Tuple[Tensor, ...]
    layers: Tuple[TemporalAttentionLayer, ...]
    adapter: ConditionAdapter
    alpha_bar: np.ndarray

    @property
    def out_proj(self) -> Tensor:
        return self.in_proj.T

    def named_tensors(self) -> Dict[str, Tensor]:
        """Every learned tensor by a stable name, in storage order."""
        tensors = {
            "in_proj": self.in_proj,
            "time_table": self.time_table,
            "style_table": self.style_table,
            "adapter.stage1": self.adapter.stage1,
            "adapter.stage2": self.adapter.stage2,
        }
        for b, (mixer, layer) in enumerate(zip(self.mixers, self.layers)):
            tensors[f"block{b}.mixer"] = mixer
            w = layer.weights
            tensors[f"block{b}.attn.w_q"] = w.w_q
            tensors[f"block{b}.attn.w_k"] = w.w_k
            tensors[f"block{b}.attn.w_v"] = w.w_v
            tensors[f"block{b}.attn.w_out"] = w.w_out
        return tensors

    @classmethod
    def from_tensors(cls, config: DenoiserConfig, tensors: Dict[str, Tensor]) -> "ToyDenoiser":
        """Assemble a model from named tensors (the inverse of named_tensors)."""
        try:
            pe = make_positional_encoding(config.max_window, config.channels)
            layers = []
            mixers = []
            for b in range(config.temporal_layers):
                mixers.append(_frozen(tensors[f"block{b}.mixer"]))
                weights = AttentionWeights(
                    w_q=_frozen(tensors[f"block{b}.attn.w_q"]),
                    w_k=_frozen(tensors[f"block{b}.attn.w_k"]),
                    w_v=_frozen(tensors[f"block{b}.attn.w_v"]),
                    w_out=_frozen(tensors[f"block{b}.attn.w_out"]),
                    head_count=config.head_count,
                )
                layers.append(TemporalAttentionLayer.build(weights, pe))
            model = cls(
                config=config,
                in_proj=_frozen(tensors["in_proj"]),
                time_table=_frozen(tensors["time_table"]),
                style_table=_frozen(tensors["style_table"]),
                mixers=tuple(mixers),
                layers=tuple(layers),
                adapter=ConditionAdapter(_frozen(tensors["adapter.stage1"]), _frozen(tensors["adapter.stage2"])),
                alpha_bar=_frozen(alpha_bar_table(config.n_train_steps, config.beta_min, config.beta_max), np.float64),
            )
        except KeyError as e:
            raise ParameterError(f"Missing model tensor: {e}")
        _check_shapes(model)
        return model


def _frozen(arr: np.ndarray, dtype=np.float32) -> np.ndarray:
    arr = np.array(arr, dtype=dtype)
    arr.flags.writeable = False
    return arr


def _check_shapes(model: ToyDenoiser):
    cfg = model.config
    C = cfg.channels
    expected = {
        "in_proj": (C, cfg.latent_channels),
        "time_table": (cfg.n_train_steps, C),
        "style_table": (cfg.n_styles, C),
        "adapter.stage1": (cfg.adapter_hidden, cfg.cond_channels),
        "adapter.stage2": (C, cfg.adapter_hidden),
    }
    for b in range(cfg.temporal_layers):
        expected[f"block{b}.mixer"] = (C, C)
    tensors = model.named_tensors()
    for name, shape in expected.items():
        if tensors[name].shape != shape:
            raise DimensionError(f"{name} must have shape {shape}, got {tensors[name].shape}")


def init_model(config: DenoiserConfig, seed: int = 0) -> ToyDenoiser:
    """
    Deterministic random initialization.

    The latent projection has orthonormal columns (its transpose reads the x0
    estimate back out). Attention value/output maps start near identity and
    query/key maps small, so fresh layers average over the attended frames.
    The adapter's second stage is all zeros.

    Args:
        config: Network dimensions
        seed: Initialization seed

    Returns:
        ToyDenoiser with read-only weights
    """
    rng = RngStream(seed)
    C = config.channels
    basis, _ = np.linalg.qr(gaussian(rng, (C, config.latent_channels), dtype=np.float64))

    steps = np.arange(config.n_train_steps, dtype=np.float64)[:, None]
    freqs = np.power(10000.0, -np.arange(0, C, 2, dtype=np.float64) / C)
    time_table = np.zeros((config.n_train_steps, C))
    time_table[:, 0::2] = np.sin(steps * freqs)
    time_table[:, 1::2] = np.cos(steps * freqs)

    tensors = {
        "in_proj": basis,
        "time_table": 0.05 * time_table,
        "style_table": 0.1 * gaussian(rng, (config.n_styles, C)),
        "adapter.stage1": gaussian(rng, (config.adapter_hidden, config.cond_channels)),
        "adapter.stage2": np.zeros((C, config.adapter_hidden)),
    }
    qk_scale = 0.3 / np.sqrt(C)
    for b in range(config.temporal_layers):
        tensors[f"block{b}.mixer"] = gaussian(rng, (C, C)) / np.sqrt(C)
        tensors[f"block{b}.attn.w_q"] = qk_scale * gaussian(rng, (C, C))
        tensors[f"block{b}.attn.w_k"] = qk_scale * gaussian(rng, (C, C))
        tensors[f"block{b}.attn.w_v"] = identity(C) + 0.05 * gaussian(rng, (C, C))
        tensors[f"block{b}.attn.w_out"] = identity(C) + 0.05 * gaussian(rng, (C, C))

    model = ToyDenoiser.from_tensors(config, tensors)
    logger.info("✓ Initialized toy denoiser (C=%d, layers=%d, S=%d, seed=%d)",
                C, config.temporal_layers, config.positions, seed)
    return model


# ---- Temporal attention modes ------------------------------------------------

@dataclass(frozen=True)
class WarmupCacheWrite:
    """Bidirectional batch over the warmup frames that also fills each layer's warmup slots at `step`."""

    banks: Sequence
    step: int


@dataclass(frozen=True)
class CacheSlot:
    """Streaming read for one latent of the batch."""

    step: int
    mask_row: AttentionMask
    commit: bool = True


@dataclass(frozen=True)
class StreamingCacheRead:
    """One single-query cache read per latent, in batch order."""

    banks: Sequence
    slots: Tuple[CacheSlot, ...]


AttentionMode = Union[AttentionMask, WarmupCacheWrite, StreamingCacheRead, None]


def _blur3x3(h: np.ndarray, grid: Tuple[int, int]) -> np.ndarray:
    """Binomial 3x3 blur over the latent grid with edge padding, per frame and channel."""
    frames, _, channels = h.shape
    img = h.reshape(frames, grid[0], grid[1], channels)
    padded = np.pad(img, ((0, 0), (1, 1), (1, 1), (0, 0)), mode="edge")
    rows = padded[:, :-2] + 2.0 * padded[:, 1:-1] + padded[:, 2:]
    out = rows[:, :, :-2] + 2.0 * rows[:, :, 1:-1] + rows[:, :, 2:]
    return (out / 16.0).reshape(frames, -1, channels).astype(h.dtype, copy=False)


def _temporal(h: np.ndarray, model: ToyDenoiser, index: int, attn: AttentionMode,
              positions, counters) -> np.ndarray:
    layer = model.layers[index]
    feat = rearrange(h, "f s c -> s f c")

    if isinstance(attn, AttentionMask):
        out = attend_layer(feat, layer, attn, positions)
    elif isinstance(attn, WarmupCacheWrite):
        attn.banks[index].admit_warmup(attn.step, feat, layer.weights)
        if counters is not None:
            counters.record_warmup_projections(feat.shape[1])
        out = attend_layer(feat, layer, AttentionMask.full(feat.shape[1]), positions)
    elif isinstance(attn, StreamingCacheRead):
        if len(attn.slots) != feat.shape[1]:
            raise DimensionError(f"{len(attn.slots)} cache slots for {feat.shape[1]} latents")
        out = np.concatenate([
            attend_streaming(attn.banks[index], slot.step, feat[:, i:i + 1], layer.weights,
                             slot.mask_row, layer.pe_proj, commit=slot.commit, counters=counters)
            for i, slot in enumerate(attn.slots)
        ], axis=1)
    else:
        raise ParameterError(f"Unsupported attention mode: {type(attn).__name__}")
    return rearrange(out, "s f c -> f s c")


def forward_batch(
    model: ToyDenoiser,
    latents: Tensor,
    t_indices: Sequence[int],
    style_id: int = 0,
    cond: Optional[Tensor] = None,
    attn: AttentionMode = None,
    counters=None,
    positions: Optional[Sequence[int]] = None,
) -> Tensor:
    """
    Predict the noise in a batch of latents.

    Args:
        model: Denoiser
        latents: Tensor [F x S x c]
        t_indices: Training step index per frame
        style_id: Row of the style table
        cond: Optional structure maps [F x S x c_cond], injected before the first block
        attn: AttentionMask [F x F], WarmupCacheWrite, StreamingCacheRead, or None
            to skip the temporal layers
        counters: Optional OpCounters
        positions: Explicit PE indices for mask mode

    Returns:
        eps [F x S x c], same dtype as latents
    """
    cfg = model.config
    z = as_tensor(latents)
    if z.ndim != 3 or z.shape[1:] != (cfg.positions, cfg.latent_channels):
        raise DimensionError(
            f"latents must be [F x {cfg.positions} x {cfg.latent_channels}], got {z.shape}"
        )
    t_idx = np.asarray(t_indices, dtype=np.int64).reshape(-1)
    if t_idx.shape != (z.shape[0],):
        raise DimensionError(f"need one step index per frame, got {t_idx.shape} for {z.shape[0]} frames")
    if t_idx.min(initial=0) < 0 or t_idx.max(initial=0) >= cfg.n_train_steps:
        raise ParameterError(f"step indices must be in [0, {cfg.n_train_steps})")
    if not 0 <= style_id < cfg.n_styles:
        raise ParameterError(f"style_id must be in [0, {cfg.n_styles}), got {style_id}")

    ab = model.alpha_bar[t_idx][:, None, None]
    h = linear_nobias(model.in_proj, (np.sqrt(ab) * z).astype(z.dtype))
    h = h + model.time_table[t_idx][:, None, :] + model.style_table[style_id]
    if cond is not None:
        cond = as_tensor(cond)
        if cond.shape != (z.shape[0], cfg.positions, cfg.cond_channels):
            raise DimensionError(
                f"cond must be [{z.shape[0]} x {cfg.positions} x {cfg.cond_channels}], got {cond.shape}"
            )
        h = h + model.adapter(cond)
    h = h.astype(z.dtype, copy=False)

    grid = (cfg.grid_height, cfg.grid_width)
    beta = cfg.temporal_blend
    for b, mixer in enumerate(model.mixers):
        h = h + cfg.mixer_gain * np.tanh(linear_nobias(mixer, _blur3x3(h, grid)))
        if attn is not None:
            h = (1.0 - beta) * h + beta * _temporal(h, model, b, attn, positions, counters)
        h = h.astype(z.dtype, copy=False)

    x0_hat = linear_nobias(model.out_proj, h).astype(np.float64)
    eps = (z.astype(np.float64) - np.sqrt(ab) * x0_hat) / np.sqrt(1.0 - ab)
    return eps.astype(z.dtype)


# ---- Frame codec and structure prior -----------------------------------------

def encode_frame(frame: Tensor, config: DenoiserConfig) -> Tensor:
    """Identity latent codec: a [H x W x c] frame at latent resolution becomes [S x c]."""
    frame = as_tensor(frame)
    if frame.ndim == 2:
        frame = frame[:, :, None]
    expected = (config.grid_height, config.grid_width, config.latent_channels)
    if frame.shape != expected:
        raise DimensionError(f"frame must be {expected}, got {frame.shape}")
    return frame.reshape(config.positions, config.latent_channels)


def decode_latent(latent: Tensor, config: DenoiserConfig) -> Tensor:
    latent = as_tensor(latent)
    return latent.reshape(config.grid_height, config.grid_width, config.latent_channels)


def structure_map(frame: Tensor, config: DenoiserConfig) -> Tensor:
    """
    Gradient-magnitude structure prior on the latent grid.

    The frame is reduced to luminance (channel mean), differentiated with
    central differences (edges replicated), and block-averaged down to the
    latent grid.

    Args:
        frame: Tensor [H x W] or [H x W x channels]; H and W multiples of the grid
        config: Network dimensions

    Returns:
        Tensor [S x c_cond] (the map repeated across condition channels)
    """
    frame = as_tensor(frame)
    gray = frame.mean(axis=-1) if frame.ndim == 3 else frame
    if gray.ndim != 2:
        raise DimensionError(f"frame must be 2-D or 3-D, got shape {frame.shape}")
    height, width = gray.shape
    if height % config.grid_height or width % config.grid_width:
        raise DimensionError(
            f"frame {height}x{width} is not a multiple of the latent grid "
            f"{config.grid_height}x{config.grid_width}"
        )
    padded = np.pad(gray, 1, mode="edge")
    gx = (padded[1:-1, 2:] - padded[1:-1, :-2]) / 2.0
    gy = (padded[2:, 1:-1] - padded[:-2, 1:-1]) / 2.0
    magnitude = np.sqrt(gx * gx + gy * gy)
    pooled = reduce(
        magnitude, "(gh bh) (gw bw) -> (gh gw)", "mean", gh=config.grid_height, gw=config.grid_width
    )
    return np.repeat(pooled[:, None], config.cond_channels, axis=1).astype(frame.dtype, copy=False)
