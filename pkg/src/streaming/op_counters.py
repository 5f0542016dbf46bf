"""
Operation Counters
Work and latency accounting for a streaming run.

All counts are monotone; `as_dict` flattens them for reports.
"""

from dataclasses import dataclass, field
from fractions import Fraction
from typing import Dict, List, Tuple, Union

import numpy as np


@dataclass
class OpCounters:
    """
    Counters accumulated by one pipeline.

    kv_projection_count only counts projections made for real streamed
    frames; warmup and pipeline-fill placeholders have their own counters.
    """

    kv_projection_count: int = 0
    warmup_projection_count: int = 0
    placeholder_projection_count: int = 0
    attended_window_total: int = 0
    attention_queries: int = 0
    attention_flop_estimate: int = 0
    denoiser_calls: int = 0
    warmup_denoiser_calls: int = 0
    frame_latencies: List[float] = field(default_factory=list)
    call_latencies: List[float] = field(default_factory=list)

    def record_query(self, projections: int, window: int, attended: int, positions: int,
                     channels: int, placeholder: bool = False):
        """
        Account for one streaming attention query at one layer and step.

        Args:
            projections: Frames whose K/V were projected for this query
            window: Valid slots in the window (warmup plus occupied recent)
            attended: Slots allowed by the mask
            positions: Spatial positions S
            channels: Channels C
            placeholder: Query belongs to a pipeline-fill placeholder
        """
        # q/k/v/out projections plus score and weighted-sum products
        flops = 2 * positions * channels * channels * (2 + 2 * projections)
        flops += 4 * positions * attended * channels
        self.attention_flop_estimate += flops
        if placeholder:
            self.placeholder_projection_count += projections
            return
        self.kv_projection_count += projections
        self.attended_window_total += window
        self.attention_queries += 1

    def record_warmup_projections(self, frames: int):
        self.warmup_projection_count += frames

    def record_call(self, seconds: float, warmup: bool = False):
        if warmup:
            self.warmup_denoiser_calls += 1
        else:
            self.denoiser_calls += 1
        self.call_latencies.append(seconds)

    def record_frame_latency(self, seconds: float):
        self.frame_latencies.append(seconds)

    def mean_window(self) -> Fraction:
        """Mean valid window length over real streaming queries, exact."""
        if self.attention_queries == 0:
            return Fraction(0)
        return Fraction(self.attended_window_total, self.attention_queries)

    def latency_stats(self) -> Tuple[float, float]:
        """Mean and standard deviation of per-frame latency in seconds."""
        if not self.frame_latencies:
            return 0.0, 0.0
        samples = np.asarray(self.frame_latencies, dtype=np.float64)
        return float(samples.mean()), float(samples.std())

    def as_dict(self) -> Dict[str, Union[int, float]]:
        mean, std = self.latency_stats()
        return {
            "kv_projection_count": self.kv_projection_count,
            "warmup_projection_count": self.warmup_projection_count,
            "placeholder_projection_count": self.placeholder_projection_count,
            "attended_window_total": self.attended_window_total,
            "attention_queries": self.attention_queries,
            "attention_flop_estimate": self.attention_flop_estimate,
            "denoiser_calls": self.denoiser_calls,
            "warmup_denoiser_calls": self.warmup_denoiser_calls,
            "frames_timed": len(self.frame_latencies),
            "latency_mean_s": mean,
            "latency_std_s": std,
        }
