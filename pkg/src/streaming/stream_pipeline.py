"""
Stream Pipeline
Live inference engine: warmup stage, then pipelined denoising where every
denoiser call advances each in-flight latent by one step.

Frames are numbered from 0 in arrival order; the first L_w frames form the
warmup batch. Per-layer cache banks hold one row per inference step and are
owned by the engine.
"""

import logging
import time
from abc import ABC, abstractmethod
from dataclasses import dataclass, field
from enum import Enum
from typing import List, Optional, Sequence, Tuple

import numpy as np

from src.attention.attnmask import AttentionMask, streaming_row_mask
from src.attention.kvcache import allocate
from src.core.tensorcore import RngStream, Tensor, gaussian
from src.diffusion.denoiser import (
    CacheSlot,
    StreamingCacheRead,
    ToyDenoiser,
    WarmupCacheWrite,
    decode_latent,
    encode_frame,
    forward_batch,
    structure_map,
)
from src.diffusion.schedule import Schedule, add_noise, denoise_step, make_schedule, start_step_index
from src.streaming.op_counters import OpCounters
from src.utils.config import RunConfig
from src.utils.errors import ConsistencyError, ParameterError, StateError

logger = logging.getLogger(__name__)

# rng.spawn keys: per-frame SDEdit noise and pipeline-fill placeholders
FRAME_NOISE = 0
PLACEHOLDER_NOISE = 1


class PipelinePhase(str, Enum):
    COLLECTING_WARMUP = "collecting_warmup"
    WARMUP = "warmup"
    STREAMING = "streaming"


@dataclass
class InFlightLatent:
    """A latent inside the pipeline; step_index is the next inference step it runs."""

    frame_index: int
    latent: np.ndarray
    step_index: int
    cond: Optional[np.ndarray]
    placeholder: bool
    ingest_time: float
    step_log: List[int] = field(default_factory=list)


@dataclass(frozen=True)
class StreamOutput:
    frame_index: int
    frame: np.ndarray
    step_log: Tuple[int, ...]
    latency: float


@dataclass
class PipelineState:
    phase: PipelinePhase
    rng: RngStream
    banks: list
    in_flight: List[InFlightLatent] = field(default_factory=list)
    frame_counter: int = 0
    placeholder_counter: int = 0
    warmup_buffer: List[Tuple[np.ndarray, float]] = field(default_factory=list)


class _StreamEngine(ABC):
    """
    Warmup and bookkeeping shared by the pipelined and the sequential engine.

    Args:
        model: Denoiser (read-only, may be shared)
        config: Run settings
        counters: OpCounters to accumulate into (a fresh one by default)
        recompute: Keep raw feature history and re-project it every step
        attend_warmup: Let streaming frames attend the warmup slots
        temporal: Run the temporal layers (False gives frame-independent processing)
        rolling_warmup: Warmup slots follow the stream (the frames just before
            the recent window) instead of holding the first L_w frames
    """

    def __init__(
        self,
        model: ToyDenoiser,
        config: RunConfig,
        counters: Optional[OpCounters] = None,
        recompute: bool = False,
        attend_warmup: bool = True,
        temporal: bool = True,
        rolling_warmup: bool = False,
    ):
        if config.n_train_steps != model.config.n_train_steps:
            raise ParameterError(
                f"schedule length {config.n_train_steps} != model's {model.config.n_train_steps}"
            )
        if config.window > model.config.max_window:
            raise ParameterError(f"window {config.window} exceeds the model's max_window {model.config.max_window}")
        self.model = model
        self.config = config
        self.counters = counters if counters is not None else OpCounters()
        self.attend_warmup = attend_warmup
        self.temporal = temporal
        self.sched: Schedule = make_schedule(config.n_train_steps, config.steps, config.beta_min, config.beta_max)
        self.start_index = start_step_index(config.strength, self.sched)
        self.depth = self.sched.n_infer_steps - self.start_index

        mcfg = model.config
        banks = []
        if temporal:
            banks = [
                allocate(config.steps, mcfg.positions, config.window, mcfg.channels, config.warmup,
                         recompute=recompute, rolling_warmup=rolling_warmup)
                for _ in model.layers
            ]
        self.state = PipelineState(
            phase=PipelinePhase.COLLECTING_WARMUP, rng=RngStream(config.seed), banks=banks
        )
        logger.info(
            "✓ %s ready (L=%d, L_w=%d, T=%d, depth=%d, cache=%s)",
            type(self).__name__, config.window, config.warmup, config.steps, self.depth,
            "recompute" if recompute else ("kv" if temporal else "off"),
        )

    # ---- helpers ---------------------------------------------------------

    @property
    def phase(self) -> PipelinePhase:
        return self.state.phase

    @property
    def banks(self) -> list:
        return self.state.banks

    def _encode(self, frame: Tensor) -> Tuple[np.ndarray, Optional[np.ndarray]]:
        cfg = self.model.config
        cond = structure_map(frame, cfg) if self.config.cond else None
        return encode_frame(frame, cfg), cond

    def _noised(self, frame_index: int, z0: np.ndarray) -> np.ndarray:
        z_t, _ = add_noise(z0, self.config.strength, self.sched, self.state.rng.spawn(FRAME_NOISE, frame_index))
        return z_t

    def _placeholder(self, step_index: int) -> InFlightLatent:
        cfg = self.model.config
        n = self.state.placeholder_counter
        self.state.placeholder_counter += 1
        noise = gaussian(self.state.rng.spawn(PLACEHOLDER_NOISE, n), (cfg.positions, cfg.latent_channels))
        cond = np.zeros((cfg.positions, cfg.cond_channels), dtype=np.float32) if self.config.cond else None
        return InFlightLatent(frame_index=-1, latent=noise, step_index=step_index, cond=cond,
                              placeholder=True, ingest_time=time.perf_counter())

    def _row(self, latent: InFlightLatent) -> AttentionMask:
        window, warmup = self.config.window, self.config.warmup
        if latent.placeholder:
            row = np.zeros(window, dtype=bool)
            row[:warmup] = self.attend_warmup
            row[-1] = True
            return AttentionMask(row[None, :])
        newest = self.state.frame_counter - 1
        return streaming_row_mask(newest, window, warmup, steps_into_stream=newest - latent.frame_index,
                                  attend_warmup=self.attend_warmup)

    def _denoise(self, batch: Sequence[InFlightLatent], attn, warmup: bool = False) -> None:
        """One denoiser call advancing every latent in the batch by one step."""
        latents = np.stack([l.latent for l in batch])
        t_indices = [int(self.sched.infer_steps[l.step_index]) for l in batch]
        cond = np.stack([l.cond for l in batch]) if self.config.cond else None
        started = time.perf_counter()
        eps = forward_batch(self.model, latents, t_indices, self.config.style_id, cond, attn, self.counters)
        self.counters.record_call(time.perf_counter() - started, warmup=warmup)
        for latent, e in zip(batch, eps):
            latent.latent = denoise_step(latent.latent, e, latent.step_index, self.sched)
            latent.step_log.append(latent.step_index)
            latent.step_index += 1

    def _emit(self, latent: InFlightLatent) -> StreamOutput:
        latency = time.perf_counter() - latent.ingest_time
        self.counters.record_frame_latency(latency)
        return StreamOutput(
            frame_index=latent.frame_index,
            frame=decode_latent(latent.latent, self.model.config),
            step_log=tuple(latent.step_log),
            latency=latency,
        )

    def _streaming_slots(self, batch: Sequence[InFlightLatent]):
        if not self.temporal:
            return None
        slots = tuple(CacheSlot(l.step_index, self._row(l), commit=not l.placeholder) for l in batch)
        return StreamingCacheRead(self.state.banks, slots)

    def _admit(self, frame: Tensor) -> InFlightLatent:
        if self.state.phase is not PipelinePhase.STREAMING:
            raise StateError(f"ingest called in phase '{self.state.phase.value}'; run warmup first")
        now = time.perf_counter()
        index = self.state.frame_counter
        self.state.frame_counter += 1
        z0, cond = self._encode(frame)
        return InFlightLatent(frame_index=index, latent=self._noised(index, z0), step_index=self.start_index,
                              cond=cond, placeholder=False, ingest_time=now)

    # ---- public operations ----------------------------------------------------

    def warmup(self, frames: Sequence[Tensor], arrival_times: Optional[Sequence[float]] = None) -> List[StreamOutput]:
        """
        Denoise the warmup frames completely with bidirectional attention.

        At every step the layer inputs of the batch are mapped and written to
        the warmup slots of that step's cache row.

        Args:
            frames: The first L_w frames
            arrival_times: perf_counter stamps to measure latency from

        Returns:
            The L_w fully denoised frames
        """
        if self.state.phase is not PipelinePhase.COLLECTING_WARMUP:
            raise StateError(f"warmup called in phase '{self.state.phase.value}'")
        if len(frames) != self.config.warmup:
            raise ParameterError(f"warmup needs {self.config.warmup} frames, got {len(frames)}")
        self.state.phase = PipelinePhase.WARMUP
        now = time.perf_counter()
        times = list(arrival_times) if arrival_times is not None else [now] * len(frames)

        batch = []
        for index, (frame, stamp) in enumerate(zip(frames, times)):
            z0, cond = self._encode(frame)
            batch.append(InFlightLatent(frame_index=index, latent=self._noised(index, z0),
                                        step_index=self.start_index, cond=cond, placeholder=False,
                                        ingest_time=stamp))
        for step in range(self.start_index, self.sched.n_infer_steps):
            attn = WarmupCacheWrite(self.state.banks, step) if self.temporal else None
            self._denoise(batch, attn, warmup=True)

        self.state.frame_counter = len(frames)
        self.state.phase = PipelinePhase.STREAMING
        logger.debug("Warmup done over %d frames, %d steps", len(frames), self.depth)
        return [self._emit(latent) for latent in batch]

    def push(self, frame: Tensor) -> List[StreamOutput]:
        """Feed one frame in any phase; warmup runs once L_w frames are collected."""
        if self.state.phase is PipelinePhase.COLLECTING_WARMUP:
            self.state.warmup_buffer.append((frame, time.perf_counter()))
            if len(self.state.warmup_buffer) < self.config.warmup:
                return []
            frames, stamps = zip(*self.state.warmup_buffer)
            self.state.warmup_buffer = []
            return self.warmup(frames, stamps)
        out = self.ingest(frame)
        return [out] if out is not None else []

    @abstractmethod
    def ingest(self, frame: Tensor) -> Optional[StreamOutput]:
        """Admit one streamed frame; returns a finished frame if one completed."""

    @abstractmethod
    def flush(self) -> List[StreamOutput]:
        """Drain whatever is still in flight."""


class StreamPipeline(_StreamEngine):
    """
    Pipelined engine: the in-flight latents sit at staggered steps and one
    batched call per ingest advances all of them.

    Pipeline fill uses pure-noise placeholder latents. They attend the
    warmup slots and themselves only and never write the caches; their
    outputs are dropped.
    """

    def _check_stagger(self):
        steps = [l.step_index for l in self.state.in_flight]
        if any(a <= b for a, b in zip(steps, steps[1:])):
            raise ConsistencyError(f"in-flight steps are not strictly staggered: {steps}")

    def _advance(self) -> List[StreamOutput]:
        in_flight = self.state.in_flight
        self._check_stagger()
        self._denoise(in_flight, self._streaming_slots(in_flight))
        done = []
        while in_flight and in_flight[0].step_index == self.sched.n_infer_steps:
            latent = in_flight.pop(0)
            if not latent.placeholder:
                done.append(self._emit(latent))
        return done

    def ingest(self, frame: Tensor) -> Optional[StreamOutput]:
        """
        Admit one frame and run one batched denoiser call.

        Returns:
            The oldest frame if it finished its last step, else None
        """
        latent = self._admit(frame)
        if self.depth == 0:
            return self._emit(latent)
        if not self.state.in_flight:
            for step in range(self.sched.n_infer_steps - 1, self.start_index, -1):
                self.state.in_flight.append(self._placeholder(step))
        self.state.in_flight.append(latent)
        done = self._advance()
        if len(done) > 1:
            raise ConsistencyError(f"{len(done)} frames completed in one call")
        return done[0] if done else None

    def flush(self) -> List[StreamOutput]:
        """Drain the in-flight frames by feeding placeholders; returns them in order."""
        if self.state.phase is not PipelinePhase.STREAMING:
            raise StateError(f"flush called in phase '{self.state.phase.value}'")
        outputs = []
        while any(not l.placeholder for l in self.state.in_flight):
            self.state.in_flight.append(self._placeholder(self.start_index))
            outputs.extend(self._advance())
        self.state.in_flight.clear()
        return outputs


class SequentialReferenceEngine(_StreamEngine):
    """Denoises each frame through all of its steps before admitting the next one."""

    def ingest(self, frame: Tensor) -> Optional[StreamOutput]:
        latent = self._admit(frame)
        while latent.step_index < self.sched.n_infer_steps:
            self._denoise([latent], self._streaming_slots([latent]))
        return self._emit(latent)

    def flush(self) -> List[StreamOutput]:
        return []
