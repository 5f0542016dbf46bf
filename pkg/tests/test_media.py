import numpy as np
import pandas as pd
import pytest

from src.media.frame_container import HEADER_SIZE, FrameContainer, read_container, write_container
from src.media.metrics import compute_metrics, export_xt_slice, flicker, read_pgm, structure_mse, xt_slice
from src.media.report_exporter import ReportExporter
from src.media.synthetic_source import SourceParams, generate_frames, synthetic_source
from src.streaming.modes import run_mode
from src.streaming.op_counters import OpCounters
from src.utils.errors import DimensionError, FormatError, ParameterError


# ---- frame container ---------------------------------------------------------

def test_container_round_trip(tmp_path, make_frames):
    frames = make_frames(count=5)
    path = tmp_path / "clip.l2df"
    size = write_container(str(path), frames)
    assert size == HEADER_SIZE + 5 * 4 * 4 * 4 * 4
    container = read_container(str(path))
    assert (container.width, container.height, container.channels, len(container)) == (4, 4, 4, 5)
    np.testing.assert_array_equal(container.frames, np.stack(frames))


def test_container_grayscale_frames(tmp_path):
    path = tmp_path / "gray.l2df"
    write_container(str(path), [np.eye(3, 2, dtype=np.float32)])
    container = read_container(str(path))
    assert (container.width, container.height, container.channels) == (2, 3, 1)


def test_empty_container(tmp_path):
    path = tmp_path / "empty.l2df"
    assert write_container(str(path), [], width=4, height=4, channels=4) == HEADER_SIZE
    container = read_container(str(path))
    assert container.frame_count == 0
    with pytest.raises(DimensionError):
        FrameContainer.from_frames([])


def _corrupt(tmp_path, make_frames, edit):
    path = tmp_path / "clip.l2df"
    write_container(str(path), make_frames(count=2))
    path.write_bytes(edit(path.read_bytes()))
    with pytest.raises(FormatError) as info:
        read_container(str(path))
    return info.value


def test_container_bad_magic(tmp_path, make_frames):
    assert _corrupt(tmp_path, make_frames, lambda d: b"RIFF" + d[4:]).offset == 0


def test_container_bad_version(tmp_path, make_frames):
    assert _corrupt(tmp_path, make_frames, lambda d: d[:4] + b"\x02\x00" + d[6:]).offset == 4


def test_container_truncated_header(tmp_path, make_frames):
    assert _corrupt(tmp_path, make_frames, lambda d: d[:10]).offset == 10


def test_container_truncated_payload(tmp_path, make_frames):
    err = _corrupt(tmp_path, make_frames, lambda d: d[:-4])
    assert "truncated" in str(err)


def test_container_trailing_bytes(tmp_path, make_frames):
    err = _corrupt(tmp_path, make_frames, lambda d: d + b"\x00" * 8)
    assert err.offset == HEADER_SIZE + 2 * 4 * 4 * 4 * 4


# ---- synthetic sources ---------------------------------------------------------

@pytest.mark.parametrize("kind", ["moving_bar", "drifting_sine", "static", "random_walk"])
def test_sources_are_deterministic(kind):
    params = SourceParams(height=6, width=8, channels=3, frames=5)
    a = generate_frames(kind, params, seed=2)
    b = generate_frames(kind, params, seed=2)
    assert len(a) == 5
    assert all(f.shape == (6, 8, 3) and f.dtype == np.float32 for f in a)
    for x, y in zip(a, b):
        np.testing.assert_array_equal(x, y)


def test_moving_bar_is_periodic():
    params = SourceParams(height=4, width=8, channels=1, frames=10, velocity=1, bar_width=2)
    frames = generate_frames("moving_bar", params)
    np.testing.assert_array_equal(frames[0], frames[8])
    assert not np.array_equal(frames[0], frames[1])
    assert frames[0][:, :, 0].sum() == 4 * 2


def test_static_source_repeats_one_image():
    frames = generate_frames("static", SourceParams(frames=4))
    assert all(np.array_equal(frames[0], f) for f in frames[1:])
    assert np.abs(frames[0]).max() == pytest.approx(1.0)


def test_source_noise_is_seeded():
    params = SourceParams(frames=3, noise=0.1)
    noisy = generate_frames("static", params, seed=1)
    assert not np.array_equal(noisy[0], noisy[1])
    np.testing.assert_array_equal(noisy[2], generate_frames("static", params, seed=1)[2])


def test_source_validation():
    with pytest.raises(ParameterError):
        list(synthetic_source("checkerboard", SourceParams()))
    with pytest.raises(ParameterError):
        SourceParams(period=0.0)
    with pytest.raises(ParameterError):
        SourceParams(width=4, bar_width=5)


def test_source_params_from_app_config():
    cfg = {"source": {"frames": 7, "velocity": 2, "period": 4.0}}
    params = SourceParams.from_app_config(cfg, 8, 8, 4, frames=3)
    assert (params.frames, params.velocity, params.period) == (3, 2, 4.0)


# ---- metrics -------------------------------------------------------------------------

def test_flicker_values():
    frames = [np.zeros((2, 2)), np.ones((2, 2)), np.ones((2, 2))]
    assert flicker(frames) == pytest.approx(0.5)
    assert flicker(frames[:1]) == 0.0


def test_structure_mse(tiny_config, make_frames):
    frames = make_frames(count=3)
    assert structure_mse(frames, frames, tiny_config) == 0.0
    assert structure_mse([f * 2.0 for f in frames], frames, tiny_config) > 0.0
    with pytest.raises(ParameterError):
        structure_mse(frames, frames[:2], tiny_config)


def test_compute_metrics(tiny_config, make_frames):
    frames = make_frames(count=4)
    counters = OpCounters(frame_latencies=[0.1, 0.3])
    report = compute_metrics(frames, frames, tiny_config, counters)
    assert report.frames == 4
    assert report.structure_mse == 0.0
    assert report.latency_mean_s == pytest.approx(0.2)
    assert report.latency_std_s == pytest.approx(0.1)


def test_xt_slice_layout():
    frames = [np.full((3, 5), float(f)) for f in range(4)]
    for f, frame in enumerate(frames):
        frame[1, :] = np.arange(5) + 10 * f
    image = xt_slice(frames, 1)
    assert image.shape == (5, 4)
    assert image.dtype == np.uint8
    assert image.min() == 0 and image.max() == 255
    # columns advance in time, rows run along x
    assert image[0, 0] == 0 and image[-1, -1] == 255
    assert (np.diff(image[0].astype(int)) > 0).all()


def test_xt_slice_constant_is_black():
    assert xt_slice([np.ones((2, 2, 3))] * 3, 0).max() == 0


def test_xt_slice_bad_row():
    with pytest.raises(ParameterError):
        xt_slice([np.zeros((2, 2))], 2)
    with pytest.raises(ParameterError):
        xt_slice([], 0)


def test_export_xt_slice(tmp_path, make_frames):
    path = tmp_path / "xt.pgm"
    image = export_xt_slice(make_frames(count=6), 2, str(path))
    assert path.read_bytes().startswith(b"P5\n6 4\n255\n")
    np.testing.assert_array_equal(read_pgm(str(path)), image)


# ---- report exporter -----------------------------------------------------------------

def test_export_frames(tmp_path, tiny_model, run_config, make_frames):
    result = run_mode(make_frames(count=8), "live2diff", run_config, tiny_model)
    exporter = ReportExporter(str(tmp_path / "exports"))
    path = exporter.export_frames(result, filename="frames.csv")
    table = pd.read_csv(path)
    assert table["frame_index"].tolist() == list(range(8))
    assert (table["steps"] == 4).all()
    assert set(table["mode"]) == {"live2diff"}


def test_export_bench_and_verification(tmp_path):
    exporter = ReportExporter(str(tmp_path))
    bench = pd.read_csv(exporter.export_bench([{"mode": "live2diff", "latency_mean_ms": 1.5}], filename="b.csv"))
    assert bench.loc[0, "latency_mean_ms"] == 1.5
    checks = pd.read_csv(exporter.export_verification([{"check": "a", "passed": True}], filename="v.csv"))
    assert bool(checks.loc[0, "passed"])


def test_xt_slice_of_moving_bar_is_diagonal():
    params = SourceParams(height=2, width=8, channels=1, frames=8, velocity=1, bar_width=1)
    image = xt_slice(generate_frames("moving_bar", params), 0)
    np.testing.assert_array_equal(image, 255 * np.eye(8, dtype=np.uint8))


def test_xt_slice_single_frame_is_one_column():
    assert xt_slice([np.arange(12.0).reshape(3, 4)], 1).shape == (4, 1)
