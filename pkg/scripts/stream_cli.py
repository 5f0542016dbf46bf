"""
Stream CLI
Command-line front end for the streaming video translation engine.

Subcommands:
    run     translate a stream (synthetic source or frame container)
    bench   cached vs recomputed K/V latency table
    verify  run the equivalence and property checks
    xt      export an X-T slice of a frame container
"""

import argparse
import sys
from pathlib import Path
from typing import List, Optional

from dotenv import load_dotenv

load_dotenv()
project_root = Path(__file__).resolve().parents[1]
sys.path.insert(0, str(project_root))

import numpy as np  # noqa: E402

from src.attention.kvcache import KVCacheBank, dump_bank  # noqa: E402
from src.diffusion.denoiser import DenoiserConfig, ToyDenoiser, init_model  # noqa: E402
from src.diffusion.weights_io import load_weights, save_weights  # noqa: E402
from src.media.frame_container import read_container, write_container  # noqa: E402
from src.media.metrics import compute_metrics, export_xt_slice  # noqa: E402
from src.media.report_exporter import ReportExporter  # noqa: E402
from src.media.synthetic_source import SourceParams, generate_frames  # noqa: E402
from src.streaming.modes import run_mode  # noqa: E402
from src.utils.config import RUN_MODES, SOURCE_KINDS, RunConfig, _get_cfg, build_run_config, load_config  # noqa: E402
from src.utils.errors import FormatError, ParameterError, StreamDiffusionError  # noqa: E402
from src.utils.logging_setup import configure_logging  # noqa: E402
from src.verification.oracles import bench_model_config, run_verification_suite  # noqa: E402

EXIT_OK = 0
EXIT_FAILURE = 1
EXIT_USAGE = 2

# flag dest -> RunConfig key
RUN_FLAGS = ("window", "warmup", "steps", "strength", "mode", "style", "seed", "no_cond",
             "no_kv_cache", "source", "frames", "input", "output", "xt_row", "overlap")


def print_sep():
    print("=" * 70)


# ---- shared helpers ----------------------------------------------------------

def _run_config(app_config: dict, args) -> RunConfig:
    overrides = {key: getattr(args, key, None) for key in RUN_FLAGS}
    if getattr(args, "no_flush", None):
        overrides["flush"] = False
    return build_run_config(app_config, args.config, overrides)


def _model(app_config: dict, args, config: Optional[DenoiserConfig] = None) -> ToyDenoiser:
    if getattr(args, "weights", None):
        model = load_weights(args.weights)
        print(f"✓ Loaded weights from {args.weights}")
        return model
    config = config or DenoiserConfig.from_app_config(app_config)
    return init_model(config, int(_get_cfg(app_config, ["model", "seed"], 0)))


def _frames(app_config: dict, run: RunConfig, model_config: DenoiserConfig) -> List[np.ndarray]:
    if run.input:
        container = read_container(run.input)
        print(f"✓ Read {container.frame_count} frames ({container.width}x{container.height}x"
              f"{container.channels}) from {run.input}")
        return list(container.frames)
    params = SourceParams.from_app_config(
        app_config, model_config.grid_height, model_config.grid_width, model_config.latent_channels,
        frames=run.frames,
    )
    return generate_frames(run.source, params, run.seed)


def _add_run_flags(parser: argparse.ArgumentParser):
    parser.add_argument("--config", help="Flat key=value run file (flags override it)")
    parser.add_argument("--window", type=int, help="Attention window L")
    parser.add_argument("--warmup", type=int, help="Warmup frames L_w")
    parser.add_argument("--steps", type=int, help="Denoising steps T")
    parser.add_argument("--strength", type=float, help="Noise strength in [0, 1]")
    parser.add_argument("--mode", choices=RUN_MODES, help="Run mode")
    parser.add_argument("--style", type=int, help="Style id")
    parser.add_argument("--seed", type=int, help="Noise seed")
    parser.add_argument("--no-cond", action="store_true", default=None, help="Disable the structure prior")
    parser.add_argument("--no-kv-cache", action="store_true", default=None, help="Recompute K/V every step")
    parser.add_argument("--source", choices=SOURCE_KINDS, help="Synthetic source kind")
    parser.add_argument("--frames", type=int, help="Synthetic source length")
    parser.add_argument("--input", help="Frame container to translate instead of a synthetic source")
    parser.add_argument("--weights", help="Load denoiser weights (L2DW file)")


# ---- subcommands ------------------------------------------------------------------

def cmd_run(app_config: dict, args) -> int:
    run = _run_config(app_config, args)
    model = _model(app_config, args)
    frames = _frames(app_config, run, model.config)
    mode = run.effective_mode

    print_sep()
    print(f" RUN  mode={mode}  L={run.window}  L_w={run.warmup}  T={run.steps}  strength={run.strength}")
    print_sep()
    threaded = bool(_get_cfg(app_config, ["stream", "threaded"], True))
    result = run_mode(frames, mode, run, model, threaded=threaded)
    by_index = {out.frame_index: out.frame for out in result.outputs}
    inputs = [frames[i] for i in sorted(by_index)]
    outputs = [by_index[i] for i in sorted(by_index)]
    report = compute_metrics(outputs, inputs, model.config, result.counters)

    print(f"✓ {len(outputs)} of {len(frames)} frames translated in {result.wall_time:.2f}s")
    print(f"  flicker        {report.flicker:.5f}")
    print(f"  structure_mse  {report.structure_mse:.5f}")
    print(f"  latency        {report.latency_mean_s * 1000:.2f}ms (±{report.latency_std_s * 1000:.2f})")
    for key, value in result.counters.as_dict().items():
        print(f"  {key:<30s} {value}")

    if run.output:
        mcfg = model.config
        write_container(run.output, outputs, width=mcfg.grid_width, height=mcfg.grid_height,
                        channels=mcfg.latent_channels)
        print(f"✓ Wrote {len(outputs)} frames to {run.output}")
    if run.xt_row is not None:
        xt_path = args.xt_output or str(Path(run.output or "stream").with_suffix("")) + "_xt.pgm"
        export_xt_slice(outputs, run.xt_row, xt_path)
        print(f"✓ Wrote X-T slice (row {run.xt_row}) to {xt_path}")
    if args.dump_cache:
        banks = result.extra.get("banks") or []
        dumpable = [b for b in banks if isinstance(b, KVCacheBank)]
        if not dumpable:
            print("⚠ This mode keeps no K/V cache; nothing dumped")
        for layer, bank in enumerate(dumpable):
            path = f"{args.dump_cache}.layer{layer}"
            size = dump_bank(bank, path)
            print(f"✓ Dumped layer {layer} cache ({size} bytes) to {path}")
    if args.save_weights:
        save_weights(model, args.save_weights)
        print(f"✓ Saved weights to {args.save_weights}")
    if args.export_csv:
        ReportExporter(_get_cfg(app_config, ["exports", "dir"], "data/exports/")).export_frames(result)
    return EXIT_OK


def cmd_bench(app_config: dict, args) -> int:
    run = _run_config(app_config, args)
    if args.frames is None:
        run = run.with_overrides(frames=int(_get_cfg(app_config, ["bench", "frames"], 128)))
    model = _model(app_config, args, bench_model_config(app_config))
    frames = _frames(app_config, run, model.config)
    modes = args.modes or ["live2diff", "live2diff_nocache"]

    print_sep()
    print(f" BENCH  {len(frames)} frames  S={model.config.positions}  C={model.config.channels}  "
          f"L={run.window}  L_w={run.warmup}  T={run.steps}")
    print_sep()
    rows = []
    for mode in modes:
        result = run_mode(frames, mode, run, model)
        mean, std = result.counters.latency_stats()
        rows.append({
            "mode": mode,
            "frames": len(result.outputs),
            "latency_mean_ms": mean * 1000.0,
            "latency_std_ms": std * 1000.0,
            "fps": len(result.outputs) / result.wall_time if result.wall_time > 0 else 0.0,
            "kv_projection_count": result.counters.kv_projection_count,
            "denoiser_calls": result.counters.denoiser_calls,
            "mean_window": float(result.counters.mean_window()),
        })
        print(f"  {mode:<20s} {mean * 1000:8.2f}ms (±{std * 1000:.2f})  "
              f"{rows[-1]['fps']:7.1f} fps  kv={result.counters.kv_projection_count}")
    if args.csv:
        ReportExporter(_get_cfg(app_config, ["exports", "dir"], "data/exports/")).export_bench(rows)
    return EXIT_OK


def cmd_verify(app_config: dict, args) -> int:
    print_sep()
    print(" VERIFY" + ("" if args.full else "  (quick)"))
    print_sep()
    results = run_verification_suite(quick=not args.full, app_config=app_config, seed=args.seed or 0)
    for r in results:
        print(f"{'PASS' if r.passed else 'FAIL'}  {r.name:<28s} {r.seconds:6.2f}s  {r.detail}")
    failed = [r for r in results if not r.passed]
    print_sep()
    print(f"{len(results) - len(failed)}/{len(results)} checks passed")
    if args.csv:
        ReportExporter(_get_cfg(app_config, ["exports", "dir"], "data/exports/")).export_verification(
            [r.as_row() for r in results]
        )
    return EXIT_OK if not failed else EXIT_FAILURE


def cmd_xt(app_config: dict, args) -> int:
    if args.xt_row is None:
        raise ParameterError("xt needs --xt-row")
    container = read_container(args.input)
    image = export_xt_slice(list(container.frames), args.xt_row, args.output)
    print(f"✓ Wrote {image.shape[1]}x{image.shape[0]} X-T slice to {args.output}")
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(description="Streaming video diffusion engine")
    parser.add_argument("--app-config", help="YAML application config (default: config/app_config.yaml)")
    sub = parser.add_subparsers(dest="command", required=True)

    run = sub.add_parser("run", help="Translate a stream")
    _add_run_flags(run)
    run.add_argument("--output", help="Write output frames to this container")
    run.add_argument("--xt-row", type=int, help="Also export an X-T slice of this row")
    run.add_argument("--xt-output", help="Path of the X-T slice (PGM)")
    run.add_argument("--overlap", type=int, help="Chunk overlap for the sliding mode")
    run.add_argument("--no-flush", action="store_true", help="Leave the pipeline residue undrained")
    run.add_argument("--dump-cache", help="Dump each layer's K/V cache to <path>.layer<i>")
    run.add_argument("--save-weights", help="Save the denoiser weights (L2DW file)")
    run.add_argument("--export-csv", action="store_true", help="Write per-frame latency CSV")
    run.set_defaults(handler=cmd_run)

    bench = sub.add_parser("bench", help="Cached vs recomputed K/V latency")
    _add_run_flags(bench)
    bench.add_argument("--modes", nargs="+", choices=RUN_MODES, help="Modes to compare")
    bench.add_argument("--csv", action="store_true", help="Write the table as CSV")
    bench.set_defaults(handler=cmd_bench)

    verify = sub.add_parser("verify", help="Run the property checks")
    verify.add_argument("--full", action="store_true", help="Full-length streams for the slow checks")
    verify.add_argument("--seed", type=int, help="Base seed")
    verify.add_argument("--csv", action="store_true", help="Write results as CSV")
    verify.set_defaults(handler=cmd_verify)

    xt = sub.add_parser("xt", help="Export an X-T slice")
    xt.add_argument("--input", required=True, help="Frame container")
    xt.add_argument("--xt-row", type=int, help="Pixel row to slice")
    xt.add_argument("--output", required=True, help="Destination PGM")
    xt.set_defaults(handler=cmd_xt)
    return parser


def main(argv: Optional[List[str]] = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        app_config = load_config(args.app_config)
        configure_logging(app_config)
        return args.handler(app_config, args)
    except StreamDiffusionError as e:
        print(f"error: {e.kind}: {e}", file=sys.stderr)
        return EXIT_USAGE if isinstance(e, (ParameterError, FormatError)) else EXIT_FAILURE
    except OSError as e:
        print(f"error: IOError: {e}", file=sys.stderr)
        return EXIT_FAILURE
    except Exception as e:
        print(f"error: {type(e).__name__}: {e}", file=sys.stderr)
        return EXIT_FAILURE


if __name__ == "__main__":
    sys.exit(main())
