"""
Verification Oracles
Reference computations and the property checks run by `stream_cli.py verify`.

Every check compares the engine against an independent recomputation:
brute-force mask enumeration, from-scratch attention over a reconstructed
window, finite differences, the exact-noise sampler, or the sequential
engine.
"""

import logging
import time
from dataclasses import dataclass
from fractions import Fraction
from typing import Callable, List, Optional, Sequence, Tuple

import numpy as np

from src.attention.attnmask import (
    AttentionMask,
    MaskMode,
    build_training_mask,
    pe_index_compaction,
    recent_count,
    streaming_row_mask,
)
from src.attention.kvcache import allocate, attend_streaming
from src.attention.temporal_attention import (
    AttentionWeights,
    attend_backward,
    attend_full,
    make_positional_encoding,
    precompute_pe_projections,
)
from src.core.tensorcore import RngStream, gaussian, linear_nobias
from src.diffusion.denoiser import DenoiserConfig, forward_batch, init_model
from src.diffusion.schedule import denoise_step, make_schedule, perfect_eps
from src.media.metrics import flicker
from src.media.synthetic_source import SourceParams, generate_frames
from src.streaming.modes import run_mode
from src.streaming.stream_pipeline import SequentialReferenceEngine, StreamPipeline
from src.utils.config import RunConfig

logger = logging.getLogger(__name__)

BENCH_MODEL_DEFAULTS = dict(grid_height=16, grid_width=16, channels=64, head_count=4)


@dataclass(frozen=True)
class CheckResult:
    name: str
    passed: bool
    detail: str
    seconds: float = 0.0

    def as_row(self) -> dict:
        return {"check": self.name, "passed": self.passed, "detail": self.detail, "seconds": round(self.seconds, 3)}


def bench_model_config(app_config: Optional[dict] = None) -> DenoiserConfig:
    """Larger latent grid used for latency comparisons (bench.model in the YAML)."""
    return DenoiserConfig.from_app_config(app_config or {}, path=("bench", "model"), **BENCH_MODEL_DEFAULTS)


# ---- Reference computations --------------------------------------------------

def brute_force_mask(kind: str, window: int, size: int = 0) -> np.ndarray:
    """Element-by-element enumeration of the training masks."""
    allowed = np.zeros((window, window), dtype=bool)
    for i in range(window):
        for j in range(window):
            if kind == "bidirectional_chunk":
                allowed[i, j] = True
            elif kind == "unidirectional":
                allowed[i, j] = j <= i
            elif kind == "unidirectional_warmup":
                allowed[i, j] = j < size if i < size else (j < size or j <= i)
            elif kind == "sliding_overlap":
                allowed[i, j] = abs(i - j) <= size
            else:
                raise ValueError(kind)
    return allowed


def random_weights(rng: RngStream, channels: int, heads: int, dtype=np.float32) -> AttentionWeights:
    scale = 1.0 / np.sqrt(channels)
    return AttentionWeights(
        *(scale * gaussian(rng, (channels, channels), dtype=dtype) for _ in range(4)),
        head_count=heads,
    )


def window_oracle(history: Sequence[np.ndarray], frame_index: int, window: int, warmup: int,
                  w: AttentionWeights, pe) -> np.ndarray:
    """
    Last-row attention recomputed from scratch over [warmup frames + recent frames].

    Args:
        history: Layer inputs [S x C] of every frame so far
        frame_index: The query frame
    """
    recent = recent_count(frame_index, window, warmup)
    indices = list(range(warmup)) + list(range(frame_index - recent + 1, frame_index + 1))
    feat = np.stack([history[i] for i in indices], axis=1)
    out = attend_full(feat, w, AttentionMask.full(len(indices)), pe)
    return out[:, -1:]


def finite_difference_grad(fn: Callable[[np.ndarray], float], x: np.ndarray, h: float = 1e-6) -> np.ndarray:
    grad = np.zeros_like(x)
    flat = x.reshape(-1)
    out = grad.reshape(-1)
    for i in range(flat.size):
        saved = flat[i]
        flat[i] = saved + h
        up = fn(x)
        flat[i] = saved - h
        down = fn(x)
        flat[i] = saved
        out[i] = (up - down) / (2.0 * h)
    return grad


# ---- Checks ----------------------------------------------------------------------

def check_cache_equivalence(seed: int = 0) -> Tuple[bool, str]:
    """Streaming reads from the cache against from-scratch window attention."""
    rng = RngStream(seed)
    positions, channels, heads = 2, 8, 2
    pe = make_positional_encoding(16, channels)
    worst = 0.0
    cases = 0
    for window in (4, 8, 16):
        for warmup in sorted({1, window // 4, window // 2}):
            for steps in (1, 2, 4):
                w = random_weights(rng, channels, heads)
                proj = precompute_pe_projections(w, pe)
                bank = allocate(steps, positions, window, channels, warmup)
                for step in range(steps):
                    history = [gaussian(rng, (positions, channels)) for _ in range(3 * window)]
                    warm = np.stack(history[:warmup], axis=1)
                    bank.write_warmup(step, linear_nobias(w.w_k, warm), linear_nobias(w.w_v, warm))
                    for f in range(warmup, len(history)):
                        got = attend_streaming(bank, step, history[f][:, None], w,
                                               streaming_row_mask(f, window, warmup), proj)
                        want = window_oracle(history, f, window, warmup, w, pe)
                        worst = max(worst, float(np.abs(got - want).max()))
                cases += 1
    return worst <= 1e-5, f"{cases} configurations, max abs diff {worst:.2e}"


def check_pe_compaction() -> Tuple[bool, str]:
    inf = -np.inf
    rows = [
        ([0, 0, 0, 0, inf, inf, 0, 0], [0, 1, 2, 3, 3, 3, 4, 5]),
        ([0, 0, 0, 0, inf, inf, inf, 0], [0, 1, 2, 3, 3, 3, 3, 4]),
    ]
    ok = all(pe_index_compaction(np.array(row)).tolist() == want for row, want in rows)
    return ok, "worked example rows"


def check_pe_linearity(seed: int = 0, trials: int = 100) -> Tuple[bool, str]:
    rng = RngStream(seed)
    worst = 0.0
    for _ in range(trials):
        channels = 8
        w_k = gaussian(rng, (channels, channels), dtype=np.float64)
        pe_row = gaussian(rng, (channels,), dtype=np.float64)
        feat = gaussian(rng, (channels,), dtype=np.float64)
        lhs = linear_nobias(w_k, pe_row + feat)
        rhs = linear_nobias(w_k, pe_row) + linear_nobias(w_k, feat)
        worst = max(worst, float(np.abs(lhs - rhs).max()))
    return worst <= 1e-6, f"{trials} instances, max abs diff {worst:.2e}"


def check_zero_adapter(seed: int = 0) -> Tuple[bool, str]:
    config = DenoiserConfig()
    model = init_model(config, seed)
    rng = RngStream(seed + 1)
    frames = 4
    latents = gaussian(rng, (frames, config.positions, config.latent_channels))
    cond = gaussian(rng, (frames, config.positions, config.cond_channels))
    mask = AttentionMask.full(frames)
    plain = forward_batch(model, latents, [500] * frames, 0, None, mask)
    conditioned = forward_batch(model, latents, [500] * frames, 0, cond, mask)
    return bool(np.array_equal(plain, conditioned)), "outputs compared bit-exactly"


def check_causality(seed: int = 0, trials: int = 50) -> Tuple[bool, str]:
    config = DenoiserConfig(temporal_layers=2)
    model = init_model(config, seed)
    rng = RngStream(seed + 2)
    window = 8
    worst = 0.0
    for trial in range(trials):
        warmup = 1 + trial % (window - 1)
        mask = build_training_mask(MaskMode.unidirectional_warmup(warmup), window)
        latents = gaussian(rng, (window, config.positions, config.latent_channels), dtype=np.float64)
        t = [250] * window
        base = forward_batch(model, latents, t, 0, None, mask)
        j = warmup + trial % (window - warmup)
        bumped = latents.copy()
        bumped[j] += gaussian(rng, bumped[j].shape, dtype=np.float64)
        moved = forward_batch(model, bumped, t, 0, None, mask)
        worst = max(worst, float(np.abs(moved[:j] - base[:j]).max()))
    return worst <= 1e-8, f"{trials} perturbations, max leak {worst:.2e}"


def check_perfect_recovery(seed: int = 0) -> Tuple[bool, str]:
    rng = RngStream(seed)
    worst = 0.0
    for steps in (1, 2, 4, 8):
        sched = make_schedule(1000, steps)
        x0 = gaussian(rng, (64, 4), dtype=np.float64)
        z = 3.0 * gaussian(rng, (64, 4), dtype=np.float64)
        for k in range(steps):
            z = denoise_step(z, perfect_eps(z, x0, k, sched), k, sched)
        worst = max(worst, float(np.abs(z - x0).max()))
    return worst <= 1e-4, f"T in 1,2,4,8, max abs diff {worst:.2e}"


def _source_frames(kind: str, config: DenoiserConfig, frames: int, seed: int = 0) -> List[np.ndarray]:
    params = SourceParams(height=config.grid_height, width=config.grid_width,
                          channels=config.latent_channels, frames=frames)
    return generate_frames(kind, params, seed)


def check_pipeline_sequential(seed: int = 0) -> Tuple[bool, str]:
    config = DenoiserConfig()
    model = init_model(config, seed)
    run = RunConfig(window=16, warmup=8, steps=4, strength=1.0, seed=seed)
    frames = _source_frames("drifting_sine", config, 48)
    pipelined = StreamPipeline(model, run)
    sequential = SequentialReferenceEngine(model, run)
    got, want = [], []
    for frame in frames:
        got.extend(pipelined.push(frame))
        want.extend(sequential.push(frame))
    got.extend(pipelined.flush())
    if [o.frame_index for o in got] != [o.frame_index for o in want]:
        return False, "output order or count differs"
    worst = max(float(np.abs(a.frame - b.frame).max()) for a, b in zip(got, want))
    return worst <= 1e-5, f"{len(got)} frames, max abs diff {worst:.2e}"


def check_cache_ablation(quick: bool = True, app_config: Optional[dict] = None, seed: int = 0) -> Tuple[bool, str]:
    config = bench_model_config(app_config)
    model = init_model(config, seed)
    frames = _source_frames("drifting_sine", config, 48 if quick else 128)
    run = RunConfig(window=16, warmup=8, steps=4, seed=seed)
    cached = run_mode(frames, "live2diff", run, model)
    nocache = run_mode(frames, "live2diff_nocache", run, model)

    ratio = Fraction(nocache.counters.kv_projection_count, cached.counters.kv_projection_count)
    exact = ratio == cached.counters.mean_window()
    diff = max(float(np.abs(a - b).max()) for a, b in zip(cached.frames, nocache.frames))
    speedup = nocache.counters.latency_stats()[0] / max(cached.counters.latency_stats()[0], 1e-12)
    passed = exact and diff <= 1e-6 and speedup >= 2.0
    return passed, (f"projection ratio {float(ratio):.3f} (mean window {float(cached.counters.mean_window()):.3f}), "
                    f"output diff {diff:.2e}, latency ratio {speedup:.2f}x")


def check_throughput(seed: int = 0) -> Tuple[bool, str]:
    config = DenoiserConfig(grid_height=4, grid_width=4)
    model = init_model(config, seed)
    frames = _source_frames("moving_bar", config, 24)
    details = []
    ok = True
    for steps in (1, 2, 4):
        run = RunConfig(window=8, warmup=4, steps=steps, strength=1.0, seed=seed)
        engine = StreamPipeline(model, run)
        engine.warmup(frames[:4])
        first = None
        for n, frame in enumerate(frames[4:], start=1):
            if engine.ingest(frame) is not None and first is None:
                first = n
        calls = engine.counters.denoiser_calls
        ok &= first == steps and calls == len(frames) - 4
        details.append(f"T={steps}: first output at ingest {first}, {calls} calls")
    return ok, "; ".join(details)


def check_gradient(seed: int = 0, trials: int = 20) -> Tuple[bool, str]:
    rng = RngStream(seed)
    positions, frames, channels = 2, 4, 8
    pe = make_positional_encoding(frames, channels)
    worst = 0.0
    for trial in range(trials):
        w = random_weights(rng, channels, 2, dtype=np.float64)
        mask = build_training_mask(MaskMode.unidirectional_warmup(1 + trial % (frames - 1)), frames)
        feat = gaussian(rng, (positions, frames, channels), dtype=np.float64)
        upstream = gaussian(rng, (positions, frames, channels), dtype=np.float64)
        analytic = attend_backward(feat, w, mask, pe, upstream)
        numeric = finite_difference_grad(lambda x: float((attend_full(x, w, mask, pe) * upstream).sum()), feat)
        rel = np.linalg.norm(analytic - numeric) / max(np.linalg.norm(analytic), np.linalg.norm(numeric), 1e-12)
        worst = max(worst, float(rel))
    return worst <= 1e-3, f"{trials} instances, max relative error {worst:.2e}"


FLICKER_MODES = ("perframe", "live2diff", "live2diff_nowarmup", "live2diff_recentwarmup")


def flicker_table(quick: bool = True, seed: int = 0) -> dict:
    """Flicker of every warmup variant and the per-frame baseline on a static source."""
    config = DenoiserConfig()
    model = init_model(config, seed)
    frames = _source_frames("static", config, 32 if quick else 64)
    run = RunConfig(seed=seed)
    return {mode: flicker(run_mode(frames, mode, run, model).frames) for mode in FLICKER_MODES}


def check_flicker_direction(quick: bool = True, seed: int = 0) -> Tuple[bool, str]:
    table = flicker_table(quick, seed)
    detail = ", ".join(f"{mode} {value:.4f}" for mode, value in table.items())
    return table["perframe"] > table["live2diff"], detail


def check_mask_oracles() -> Tuple[bool, str]:
    checked = 0
    for window in range(1, 17):
        layouts = [("bidirectional_chunk", MaskMode.bidirectional_chunk(), 0),
                   ("unidirectional", MaskMode.unidirectional(), 0)]
        layouts += [("unidirectional_warmup", MaskMode.unidirectional_warmup(n), n) for n in range(1, window)]
        layouts += [("sliding_overlap", MaskMode.sliding_overlap(n), n) for n in range(1, window)]
        for kind, mode, size in layouts:
            if not np.array_equal(build_training_mask(mode, window).allowed, brute_force_mask(kind, window, size)):
                return False, f"{kind} differs at L={window}, size={size}"
            checked += 1
    return True, f"{checked} masks enumerated"


def run_verification_suite(quick: bool = True, app_config: Optional[dict] = None,
                           seed: int = 0) -> List[CheckResult]:
    """
    Run every property check.

    Args:
        quick: Use shorter streams for the slow checks
        app_config: Parsed YAML (bench model dimensions)
        seed: Base seed

    Returns:
        One CheckResult per check, in a fixed order
    """
    checks = [
        ("cache_equivalence", lambda: check_cache_equivalence(seed)),
        ("pe_compaction", check_pe_compaction),
        ("pe_linearity", lambda: check_pe_linearity(seed)),
        ("zero_init_adapter", lambda: check_zero_adapter(seed)),
        ("causality", lambda: check_causality(seed)),
        ("perfect_denoiser_recovery", lambda: check_perfect_recovery(seed)),
        ("pipeline_sequential", lambda: check_pipeline_sequential(seed)),
        ("cache_ablation", lambda: check_cache_ablation(quick, app_config, seed)),
        ("throughput_shape", lambda: check_throughput(seed)),
        ("gradient", lambda: check_gradient(seed)),
        ("flicker_direction", lambda: check_flicker_direction(quick, seed)),
        ("mask_oracles", check_mask_oracles),
    ]
    results = []
    for name, fn in checks:
        started = time.perf_counter()
        try:
            passed, detail = fn()
        except Exception as e:  # a crashing check is a failed check
            passed, detail = False, f"{type(e).__name__}: {e}"
        results.append(CheckResult(name, bool(passed), detail, time.perf_counter() - started))
        logger.info("%s %s: %s", "✓" if passed else "⚠", name, detail)
    return results
