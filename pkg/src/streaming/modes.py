"""
Run Modes
Runs a frame sequence through the streaming engine or one of the baselines:

    live2diff               warmup + pipelined cached streaming
    live2diff_nocache       same outputs, K/V recomputed from feature history each step
    live2diff_nowarmup      streaming rows block the warmup slots
    live2diff_recentwarmup  warmup slots hold the frames just before the recent window
    perframe                temporal layers off, every frame independent
    chunked                 independent L-frame chunks with bidirectional attention
    sliding                 overlapping chunks, noise predictions fused uniformly
"""

import logging
import queue
import threading
import time
from dataclasses import dataclass, field
from typing import Callable, Iterable, List, Optional, Sequence, Tuple

import numpy as np

from src.attention.attnmask import AttentionMask, ChunkPlan, sliding_window_plan
from src.core.tensorcore import RngStream, Tensor
from src.diffusion.denoiser import ToyDenoiser, decode_latent, encode_frame, forward_batch, structure_map
from src.diffusion.schedule import add_noise, denoise_step, make_schedule, start_step_index
from src.streaming.op_counters import OpCounters
from src.streaming.stream_pipeline import FRAME_NOISE, StreamOutput, StreamPipeline
from src.utils.config import RUN_MODES, RunConfig
from src.utils.errors import ParameterError

logger = logging.getLogger(__name__)

STREAMING_MODES = {
    "live2diff": dict(recompute=False, attend_warmup=True, temporal=True),
    "live2diff_nocache": dict(recompute=True, attend_warmup=True, temporal=True),
    "live2diff_nowarmup": dict(recompute=False, attend_warmup=False, temporal=True),
    "live2diff_recentwarmup": dict(recompute=False, attend_warmup=True, temporal=True, rolling_warmup=True),
    "perframe": dict(recompute=False, attend_warmup=True, temporal=False),
}


@dataclass
class ModeResult:
    mode: str
    outputs: List[StreamOutput]
    counters: OpCounters
    wall_time: float = 0.0
    extra: dict = field(default_factory=dict)

    @property
    def frames(self) -> List[np.ndarray]:
        return [out.frame for out in self.outputs]


def build_engine(model: ToyDenoiser, mode: str, config: RunConfig,
                 counters: Optional[OpCounters] = None) -> StreamPipeline:
    """Streaming engine configured for one of the streaming modes."""
    if mode not in STREAMING_MODES:
        raise ParameterError(f"'{mode}' is not a streaming mode; expected one of {list(STREAMING_MODES)}")
    return StreamPipeline(model, config, counters=counters, **STREAMING_MODES[mode])


@dataclass(frozen=True)
class _Failure:
    """An exception raised on a worker thread, carried through a queue."""

    error: BaseException


def stream_threaded(engine: StreamPipeline, frames: Iterable[Tensor], flush: bool = True,
                    queue_size: int = 4, sink: Optional[Callable[[StreamOutput], None]] = None,
                    poll_s: float = 0.05) -> List[StreamOutput]:
    """
    Run an engine between a producer thread and a consumer thread.

    The producer feeds frames through a bounded queue; the calling thread owns
    the engine; the consumer drains outputs (and hands each to `sink`). An
    exception on any of the three threads stops the other two and is
    re-raised here.

    Returns:
        Outputs in emission order
    """
    frames_in: "queue.Queue" = queue.Queue(maxsize=queue_size)
    frames_out: "queue.Queue" = queue.Queue(maxsize=queue_size)
    done = object()
    stop = threading.Event()
    collected: List[StreamOutput] = []
    failures: List[BaseException] = []

    def put(q: "queue.Queue", item) -> bool:
        while not stop.is_set():
            try:
                q.put(item, timeout=poll_s)
                return True
            except queue.Full:
                continue
        return False

    def get(q: "queue.Queue"):
        while not stop.is_set():
            try:
                return q.get(timeout=poll_s)
            except queue.Empty:
                continue
        return done

    def produce():
        try:
            for frame in frames:
                if not put(frames_in, frame):
                    return
        except Exception as e:
            put(frames_in, _Failure(e))
        finally:
            put(frames_in, done)

    def consume():
        try:
            while True:
                item = get(frames_out)
                if item is done:
                    return
                collected.append(item)
                if sink is not None:
                    sink(item)
        except Exception as e:
            failures.append(e)
            stop.set()

    producer = threading.Thread(target=produce, name="frame-source", daemon=True)
    consumer = threading.Thread(target=consume, name="frame-sink", daemon=True)
    producer.start()
    consumer.start()
    try:
        while True:
            item = get(frames_in)
            if item is done:
                break
            if isinstance(item, _Failure):
                raise item.error
            for out in engine.push(item):
                put(frames_out, out)
        if flush and engine.state.in_flight and not stop.is_set():
            for out in engine.flush():
                put(frames_out, out)
        put(frames_out, done)
    except BaseException:
        stop.set()
        raise
    finally:
        consumer.join()
        producer.join(timeout=1.0)
    if failures:
        raise failures[0]
    return collected


def _run_streaming(frames: Sequence[Tensor], mode: str, config: RunConfig, model: ToyDenoiser,
                   counters: OpCounters, threaded: bool) -> Tuple[List[StreamOutput], StreamPipeline]:
    if 0 < len(frames) < config.warmup:
        raise ParameterError(f"{mode} needs at least {config.warmup} frames for warmup, got {len(frames)}")
    engine = build_engine(model, mode, config, counters)
    if threaded:
        return stream_threaded(engine, frames, flush=config.flush), engine
    outputs: List[StreamOutput] = []
    for frame in frames:
        outputs.extend(engine.push(frame))
    if config.flush and len(frames):
        outputs.extend(engine.flush())
    return outputs, engine


class _OfflineBatch:
    """Noised latents of a whole clip for the chunk-based baselines."""

    def __init__(self, frames: Sequence[Tensor], config: RunConfig, model: ToyDenoiser):
        self.model = model
        self.config = config
        self.sched = make_schedule(config.n_train_steps, config.steps, config.beta_min, config.beta_max)
        self.start_index = start_step_index(config.strength, self.sched)
        rng = RngStream(config.seed)
        latents = []
        for index, frame in enumerate(frames):
            z_t, _ = add_noise(encode_frame(frame, model.config), config.strength, self.sched,
                               rng.spawn(FRAME_NOISE, index))
            latents.append(z_t)
        self.latents = np.stack(latents)
        self.cond = np.stack([structure_map(f, model.config) for f in frames]) if config.cond else None

    def eps(self, lo: int, hi: int, step: int, counters: OpCounters) -> np.ndarray:
        t = [int(self.sched.infer_steps[step])] * (hi - lo)
        cond = self.cond[lo:hi] if self.cond is not None else None
        started = time.perf_counter()
        out = forward_batch(self.model, self.latents[lo:hi], t, self.config.style_id, cond,
                            AttentionMask.full(hi - lo), counters)
        counters.record_call(time.perf_counter() - started)
        return out

    def outputs(self, lo: int, hi: int, latency: float, counters: OpCounters) -> List[StreamOutput]:
        steps = tuple(range(self.start_index, self.sched.n_infer_steps))
        result = []
        for index in range(lo, hi):
            counters.record_frame_latency(latency)
            result.append(StreamOutput(index, decode_latent(self.latents[index].copy(), self.model.config), steps, latency))
        return result


def _run_chunked(frames, config: RunConfig, model: ToyDenoiser, counters: OpCounters) -> List[StreamOutput]:
    if not len(frames):
        return []
    batch = _OfflineBatch(frames, config, model)
    outputs = []
    for lo in range(0, len(frames), config.window):
        hi = min(lo + config.window, len(frames))
        started = time.perf_counter()
        for step in range(batch.start_index, batch.sched.n_infer_steps):
            batch.latents[lo:hi] = denoise_step(batch.latents[lo:hi], batch.eps(lo, hi, step, counters),
                                                step, batch.sched)
        outputs.extend(batch.outputs(lo, hi, time.perf_counter() - started, counters))
    return outputs


def _run_sliding(frames, config: RunConfig, model: ToyDenoiser, counters: OpCounters) -> List[StreamOutput]:
    if not len(frames):
        return []
    batch = _OfflineBatch(frames, config, model)
    total = len(frames)
    if total > config.window:
        plans = sliding_window_plan(total, config.window, config.sliding_overlap)
    else:
        plans = [ChunkPlan(start=0, length=total, weights=np.ones(total, dtype=np.float32))]

    started = time.perf_counter()
    for step in range(batch.start_index, batch.sched.n_infer_steps):
        fused = np.zeros(batch.latents.shape, dtype=np.float64)
        for plan in plans:
            lo, hi = plan.start, plan.start + plan.length
            fused[lo:hi] += plan.weights[:, None, None] * batch.eps(lo, hi, step, counters)
        batch.latents = denoise_step(batch.latents, fused.astype(batch.latents.dtype), step, batch.sched)
    return batch.outputs(0, total, time.perf_counter() - started, counters)


def run_mode(
    frames: Sequence[Tensor],
    mode: str,
    config: RunConfig,
    model: ToyDenoiser,
    counters: Optional[OpCounters] = None,
    threaded: bool = False,
) -> ModeResult:
    """
    Translate a frame sequence in the given mode.

    Args:
        frames: Input frames [H x W x c] at latent resolution
        mode: One of RUN_MODES
        config: Run settings (window, warmup, steps, strength, ...)
        model: Denoiser
        counters: OpCounters to accumulate into
        threaded: Run streaming modes between producer/consumer threads

    Returns:
        ModeResult with outputs in frame order and the counters
    """
    if mode not in RUN_MODES:
        raise ParameterError(f"Unknown mode: '{mode}'. Must be one of {list(RUN_MODES)}")
    counters = counters if counters is not None else OpCounters()
    frames = list(frames)
    started = time.perf_counter()
    extra = {}
    if mode in STREAMING_MODES:
        outputs, engine = _run_streaming(frames, mode, config, model, counters, threaded)
        extra["banks"] = engine.banks
    elif mode == "chunked":
        outputs = _run_chunked(frames, config, model, counters)
    else:
        outputs = _run_sliding(frames, config, model, counters)
    elapsed = time.perf_counter() - started
    logger.info("✓ %s: %d frames in, %d out (%.2fs)", mode, len(frames), len(outputs), elapsed)
    return ModeResult(mode=mode, outputs=outputs, counters=counters, wall_time=elapsed, extra=extra)
