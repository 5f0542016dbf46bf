"""
Synthetic Sources
Deterministic test clips with known motion, used in place of recorded video.

    moving_bar     vertical bar shifting `velocity` pixels per frame (period width / velocity)
    drifting_sine  sinusoidal grating whose phase drifts each frame
    static         one smooth random image repeated
    random_walk    Gaussian blob whose centre takes a seeded random walk
"""

from dataclasses import dataclass, replace
from typing import Iterator, List

import numpy as np

from src.core.tensorcore import RngStream, gaussian
from src.utils.config import SOURCE_KINDS, _get_cfg
from src.utils.errors import ParameterError


@dataclass(frozen=True)
class SourceParams:
    height: int = 8
    width: int = 8
    channels: int = 4
    frames: int = 64
    velocity: int = 1
    period: float = 8.0
    bar_width: int = 2
    noise: float = 0.0

    def __post_init__(self):
        if min(self.height, self.width, self.channels) < 1:
            raise ParameterError("source height, width and channels must be >= 1")
        if self.frames < 0:
            raise ParameterError(f"frames must be >= 0, got {self.frames}")
        if self.period <= 0:
            raise ParameterError(f"period must be > 0, got {self.period}")
        if not 1 <= self.bar_width <= self.width:
            raise ParameterError(f"bar_width must be in [1, width], got {self.bar_width}")
        if self.noise < 0:
            raise ParameterError(f"noise must be >= 0, got {self.noise}")

    @classmethod
    def from_app_config(cls, cfg: dict, height: int, width: int, channels: int, **overrides) -> "SourceParams":
        """Source section of the YAML config at the given frame size."""
        section = _get_cfg(cfg, ["source"], {}) or {}
        params = cls(
            height=height,
            width=width,
            channels=channels,
            frames=int(section.get("frames", 64)),
            velocity=int(section.get("velocity", 1)),
            period=float(section.get("period", 8.0)),
            bar_width=int(section.get("bar_width", 2)),
            noise=float(section.get("noise", 0.0)),
        )
        return replace(params, **overrides) if overrides else params


def _channel_gains(channels: int) -> np.ndarray:
    # distinct but fixed per-channel scaling so channels are not copies
    return np.linspace(1.0, 0.5, channels, dtype=np.float32)


def _moving_bar(p: SourceParams, rng: RngStream) -> Iterator[np.ndarray]:
    cols = np.arange(p.width)
    for f in range(p.frames):
        left = (f * p.velocity) % p.width
        on = ((cols - left) % p.width) < p.bar_width
        frame = np.broadcast_to(on.astype(np.float32)[None, :, None], (p.height, p.width, p.channels))
        yield frame * _channel_gains(p.channels)


def _drifting_sine(p: SourceParams, rng: RngStream) -> Iterator[np.ndarray]:
    phase0 = float(gaussian(rng, (1,), dtype=np.float64)[0])
    yy, xx = np.mgrid[0:p.height, 0:p.width].astype(np.float64)
    for f in range(p.frames):
        grating = np.sin(2.0 * np.pi * (xx + 0.5 * yy - p.velocity * f) / p.period + phase0)
        yield (grating[:, :, None] * _channel_gains(p.channels)).astype(np.float32)


def _smooth_image(p: SourceParams, rng: RngStream) -> np.ndarray:
    img = gaussian(rng, (p.height, p.width, p.channels), dtype=np.float64)
    for _ in range(2):
        padded = np.pad(img, ((1, 1), (1, 1), (0, 0)), mode="edge")
        img = sum(padded[dy:dy + p.height, dx:dx + p.width] for dy in range(3) for dx in range(3)) / 9.0
    return (img / (np.abs(img).max() + 1e-12)).astype(np.float32)


def _static(p: SourceParams, rng: RngStream) -> Iterator[np.ndarray]:
    image = _smooth_image(p, rng)
    for _ in range(p.frames):
        yield image.copy()


def _random_walk(p: SourceParams, rng: RngStream) -> Iterator[np.ndarray]:
    yy, xx = np.mgrid[0:p.height, 0:p.width].astype(np.float64)
    centre = np.array([p.height / 2.0, p.width / 2.0])
    sigma = max(p.height, p.width) / 6.0
    for _ in range(p.frames):
        blob = np.exp(-((yy - centre[0]) ** 2 + (xx - centre[1]) ** 2) / (2.0 * sigma ** 2))
        yield (blob[:, :, None] * _channel_gains(p.channels)).astype(np.float32)
        step = gaussian(rng, (2,), dtype=np.float64) * p.velocity * 0.5
        centre = np.clip(centre + step, 0.0, [p.height - 1, p.width - 1])


_GENERATORS = {
    "moving_bar": _moving_bar,
    "drifting_sine": _drifting_sine,
    "static": _static,
    "random_walk": _random_walk,
}


def synthetic_source(kind: str, params: SourceParams, seed: int = 0) -> Iterator[np.ndarray]:
    """
    Yield frames [H x W x C] of a synthetic clip.

    Args:
        kind: One of SOURCE_KINDS
        params: Frame size, length and motion parameters
        seed: Seed for every random element (same seed, same clip)

    Returns:
        Iterator over float32 frames
    """
    if kind not in SOURCE_KINDS:
        raise ParameterError(f"Unknown source: '{kind}'. Must be one of {list(SOURCE_KINDS)}")
    rng = RngStream(seed)
    noise_rng = rng.spawn(1)
    for frame in _GENERATORS[kind](p=params, rng=rng.spawn(0)):
        if params.noise > 0:
            frame = frame + params.noise * gaussian(noise_rng, frame.shape)
        yield np.ascontiguousarray(frame, dtype=np.float32)


def generate_frames(kind: str, params: SourceParams, seed: int = 0) -> List[np.ndarray]:
    return list(synthetic_source(kind, params, seed))
