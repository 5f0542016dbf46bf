"""
Metrics
Desk-scale quality and timing measures for a translated stream, plus the
X-T slice export used to eyeball temporal flicker.
"""

from dataclasses import asdict, dataclass
from pathlib import Path
from typing import Dict, Optional, Sequence

import numpy as np

from src.diffusion.denoiser import DenoiserConfig, structure_map
from src.utils.errors import ParameterError


@dataclass(frozen=True)
class MetricsReport:
    frames: int
    flicker: float
    structure_mse: float
    latency_mean_s: float
    latency_std_s: float

    def as_dict(self) -> Dict[str, float]:
        return asdict(self)


def flicker(frames: Sequence[np.ndarray]) -> float:
    """Mean over consecutive pairs of the mean absolute frame difference (0 for < 2 frames)."""
    if len(frames) < 2:
        return 0.0
    stack = np.stack([np.asarray(f, dtype=np.float64) for f in frames])
    diffs = np.abs(np.diff(stack, axis=0)).reshape(len(frames) - 1, -1).mean(axis=1)
    return float(diffs.mean())


def structure_mse(outputs: Sequence[np.ndarray], inputs: Sequence[np.ndarray], config: DenoiserConfig) -> float:
    """Mean squared difference between the structure maps of inputs and outputs."""
    if len(outputs) != len(inputs):
        raise ParameterError(f"{len(outputs)} outputs for {len(inputs)} inputs")
    if not outputs:
        return 0.0
    errors = [
        np.mean((structure_map(np.asarray(o, dtype=np.float64), config)
                 - structure_map(np.asarray(i, dtype=np.float64), config)) ** 2)
        for o, i in zip(outputs, inputs)
    ]
    return float(np.mean(errors))


def compute_metrics(outputs: Sequence[np.ndarray], inputs: Sequence[np.ndarray], config: DenoiserConfig,
                    counters=None) -> MetricsReport:
    """
    Quality and latency report for one run.

    Args:
        outputs: Output frames, in input order
        inputs: Input frames
        config: Model dimensions (latent grid for the structure maps)
        counters: Optional OpCounters for latency statistics

    Returns:
        MetricsReport
    """
    if len(outputs) != len(inputs):
        raise ParameterError(f"{len(outputs)} outputs for {len(inputs)} inputs")
    mean, std = counters.latency_stats() if counters is not None else (0.0, 0.0)
    return MetricsReport(
        frames=len(outputs),
        flicker=flicker(outputs),
        structure_mse=structure_mse(outputs, inputs, config),
        latency_mean_s=mean,
        latency_std_s=std,
    )


def xt_slice(frames: Sequence[np.ndarray], row_index: int) -> np.ndarray:
    """
    8-bit X-T slice: column f holds row `row_index` of frame f (channel mean),
    min-max normalized over the whole slice.
    """
    if not len(frames):
        raise ParameterError("X-T slice needs at least one frame")
    stack = np.stack([np.asarray(f, dtype=np.float64) for f in frames])
    if stack.ndim == 4:
        stack = stack.mean(axis=-1)
    height = stack.shape[1]
    if not 0 <= row_index < height:
        raise ParameterError(f"row {row_index} out of range [0, {height})")
    values = stack[:, row_index, :].T
    lo, hi = values.min(), values.max()
    scaled = (values - lo) / (hi - lo) if hi > lo else np.zeros_like(values)
    return np.round(scaled * 255.0).astype(np.uint8)


def export_xt_slice(frames: Sequence[np.ndarray], row_index: int, path: str) -> np.ndarray:
    """Write the X-T slice as a binary PGM (P5) and return the pixel array."""
    image = xt_slice(frames, row_index)
    height, width = image.shape
    Path(path).write_bytes(f"P5\n{width} {height}\n255\n".encode("ascii") + image.tobytes())
    return image


def read_pgm(path: str) -> np.ndarray:
    """Parse a binary PGM written by export_xt_slice."""
    data = Path(path).read_bytes()
    magic, dims, maxval, pixels = data.split(b"\n", 3)
    if magic != b"P5" or maxval != b"255":
        raise ParameterError(f"{path} is not an 8-bit binary PGM")
    width, height = (int(v) for v in dims.split())
    return np.frombuffer(pixels, dtype=np.uint8).reshape(height, width)
