"""
Shared fixtures for the test suite.
"""

import sys
from pathlib import Path

import numpy as np
import pytest
import yaml

project_root = Path(__file__).resolve().parents[1]
sys.path.insert(0, str(project_root))

from src.attention.attnmask import AttentionMask  # noqa: E402
from src.core.tensorcore import RngStream  # noqa: E402
from src.diffusion.denoiser import (  # noqa: E402
    DenoiserConfig,
    decode_latent,
    encode_frame,
    forward_batch,
    init_model,
    structure_map,
)
from src.diffusion.schedule import add_noise, denoise_step, make_schedule, start_step_index  # noqa: E402
from src.media.synthetic_source import SourceParams, generate_frames  # noqa: E402
from src.streaming.stream_pipeline import FRAME_NOISE  # noqa: E402
from src.utils.config import RunConfig  # noqa: E402


def pytest_configure(config):
    config.addinivalue_line("markers", "slow: timing-sensitive or long-running checks")


@pytest.fixture
def rng():
    return RngStream(1234)


@pytest.fixture
def tiny_config():
    return DenoiserConfig(grid_height=4, grid_width=4, channels=8, head_count=2, max_window=8)


@pytest.fixture
def tiny_model(tiny_config):
    return init_model(tiny_config, seed=0)


@pytest.fixture
def schedule():
    return make_schedule(1000, 4)


@pytest.fixture
def run_config():
    """Full-strength run so every frame takes all four steps."""
    return RunConfig(window=8, warmup=4, steps=4, strength=1.0, seed=0)


@pytest.fixture
def make_frames(tiny_config):
    def _make(kind="drifting_sine", count=16, seed=0, config=None):
        cfg = config or tiny_config
        params = SourceParams(height=cfg.grid_height, width=cfg.grid_width,
                              channels=cfg.latent_channels, frames=count)
        return generate_frames(kind, params, seed)
    return _make


@pytest.fixture
def batch_denoise():
    """Denoise a whole clip with one bidirectional denoiser call per step."""
    def _denoise(model, frames, run):
        sched = make_schedule(run.n_train_steps, run.steps, run.beta_min, run.beta_max)
        rng = RngStream(run.seed)
        latents = np.stack([
            add_noise(encode_frame(frame, model.config), run.strength, sched, rng.spawn(FRAME_NOISE, index))[0]
            for index, frame in enumerate(frames)
        ])
        cond = np.stack([structure_map(f, model.config) for f in frames]) if run.cond else None
        mask = AttentionMask.full(len(frames))
        for step in range(start_step_index(run.strength, sched), sched.n_infer_steps):
            t = [int(sched.infer_steps[step])] * len(frames)
            eps = forward_batch(model, latents, t, run.style_id, cond, mask)
            latents = denoise_step(latents, eps, step, sched)
        return [decode_latent(z, model.config) for z in latents]
    return _denoise


@pytest.fixture
def app_config_file(tmp_path):
    """Quiet YAML config with tiny model dimensions and exports under tmp_path."""
    config = {
        "model": {"seed": 0, "grid_height": 4, "grid_width": 4, "channels": 8, "head_count": 2,
                  "max_window": 8},
        "schedule": {"n_train_steps": 1000, "steps": 4},
        "stream": {"window": 8, "warmup": 4, "strength": 0.5, "threaded": False},
        "source": {"kind": "drifting_sine", "frames": 12},
        "bench": {"frames": 12, "model": {"grid_height": 4, "grid_width": 4, "channels": 8,
                                          "head_count": 2, "max_window": 16}},
        "logging": {"enabled": False},
        "exports": {"dir": str(tmp_path / "exports")},
    }
    path = tmp_path / "app_config.yaml"
    path.write_text(yaml.safe_dump(config), encoding="utf-8")
    return str(path)

