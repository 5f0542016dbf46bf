"""
Configuration
Loads the YAML application config and the flat key=value run files, and
validates the per-run settings.

Precedence for a run: command-line flags > run file > YAML > built-in defaults.
"""

import os
from dataclasses import dataclass, field, fields, replace
from pathlib import Path
from typing import Any, Dict, List, Optional

import yaml
from dotenv import dotenv_values

from src.utils.errors import FormatError, ParameterError

DEFAULT_CONFIG_PATH = "config/app_config.yaml"

RUN_MODES = (
    "live2diff",
    "live2diff_nocache",
    "live2diff_nowarmup",
    "live2diff_recentwarmup",
    "perframe",
    "chunked",
    "sliding",
)

SOURCE_KINDS = ("moving_bar", "drifting_sine", "static", "random_walk")

# modes the kv_cache switch applies to
KV_CACHE_MODES = ("live2diff", "live2diff_nocache")


# ---- Utility helpers ---------------------------------------------------------

def _get_cfg(cfg: dict, path: List[str], default=None):
    cur = cfg or {}
    for key in path:
        if not isinstance(cur, dict) or key not in cur:
            return default
        cur = cur[key]
    return cur


def _as_bool(value: Any) -> bool:
    if isinstance(value, bool):
        return value
    text = str(value).strip().lower()
    if text in ("1", "true", "yes", "on"):
        return True
    if text in ("0", "false", "no", "off", ""):
        return False
    raise ParameterError(f"Not a boolean value: '{value}'")


def load_config(config_path: Optional[str] = None) -> dict:
    """
    Load application configuration from YAML file.

    Args:
        config_path: Path to config file. Falls back to $STREAM_CONFIG, then
            config/app_config.yaml

    Returns:
        Configuration dictionary (empty if the file does not exist)

    Raises:
        FormatError: The file is not valid YAML or its top level is not a mapping
    """
    path = config_path or os.getenv("STREAM_CONFIG") or DEFAULT_CONFIG_PATH
    if not Path(path).exists():
        return {}
    with open(path, "r", encoding="utf-8") as f:
        try:
            config = yaml.safe_load(f)
        except yaml.YAMLError as e:
            mark = getattr(e, "problem_mark", None)
            problem = getattr(e, "problem", None) or "invalid YAML"
            raise FormatError(f"{path}: {problem}", offset=mark.index if mark is not None else None) from e
    if config is None:
        return {}
    if not isinstance(config, dict):
        raise FormatError(f"{path}: top level must be a mapping, got {type(config).__name__}")
    return config


def load_run_file(path: str) -> Dict[str, str]:
    """
    Read a flat key=value run file.

    Keys may use dashes or underscores ("no-kv-cache" and "no_kv_cache" are the
    same key). Blank values are dropped.

    Args:
        path: Path to the run file

    Returns:
        Dictionary of normalized keys to raw string values
    """
    if not Path(path).exists():
        raise ParameterError(f"Run file not found: {path}")
    raw = dotenv_values(path)
    return {
        key.strip().lower().replace("-", "_"): value
        for key, value in raw.items()
        if value is not None and value != ""
    }


# ---- RunConfig ---------------------------------------------------------------

@dataclass(frozen=True)
class RunConfig:
    """
    Settings for one streaming run.

    Attributes:
        window: Attention window length L
        warmup: Warmup frame count L_w
        steps: Inference denoising steps T
        strength: SDEdit noise strength in [0, 1]
        mode: One of RUN_MODES
        overlap: Chunk overlap for the sliding mode (defaults to window // 2)
    """

    window: int = 16
    warmup: int = 8
    steps: int = 4
    strength: float = 0.5
    mode: str = "live2diff"
    style_id: int = 0
    seed: int = 0
    cond: bool = True
    kv_cache: bool = True
    source: str = "drifting_sine"
    frames: int = 64
    input: Optional[str] = None
    output: Optional[str] = None
    xt_row: Optional[int] = None
    overlap: Optional[int] = None
    flush: bool = True
    n_train_steps: int = 1000
    beta_min: float = 1e-4
    beta_max: float = 0.02
    extra: Dict[str, Any] = field(default_factory=dict, compare=False)

    def __post_init__(self):
        if self.window < 2:
            raise ParameterError(f"window must be >= 2, got {self.window}")
        if not 1 <= self.warmup < self.window:
            raise ParameterError(
                f"warmup must satisfy 1 <= warmup < window, got warmup={self.warmup}, window={self.window}"
            )
        if self.steps < 1:
            raise ParameterError(f"steps must be >= 1, got {self.steps}")
        if self.steps > self.n_train_steps:
            raise ParameterError(f"steps ({self.steps}) exceeds n_train_steps ({self.n_train_steps})")
        if not 0.0 <= self.strength <= 1.0:
            raise ParameterError(f"strength must be in [0, 1], got {self.strength}")
        if self.mode not in RUN_MODES:
            raise ParameterError(f"Unknown mode: '{self.mode}'. Must be one of {list(RUN_MODES)}")
        if self.source not in SOURCE_KINDS:
            raise ParameterError(f"Unknown source: '{self.source}'. Must be one of {list(SOURCE_KINDS)}")
        if self.frames < 0:
            raise ParameterError(f"frames must be >= 0, got {self.frames}")
        if self.style_id < 0:
            raise ParameterError(f"style must be >= 0, got {self.style_id}")
        if self.overlap is not None and not 0 < self.overlap < self.window:
            raise ParameterError(f"overlap must satisfy 0 < overlap < window, got {self.overlap}")
        if not self.kv_cache and self.mode not in KV_CACHE_MODES:
            raise ParameterError(
                f"kv_cache=false only applies to {list(KV_CACHE_MODES)}, not mode '{self.mode}'"
            )

    @property
    def effective_mode(self) -> str:
        """Mode after applying the kv_cache flag (live2diff without cache is nocache)."""
        if self.mode == "live2diff" and not self.kv_cache:
            return "live2diff_nocache"
        return self.mode

    @property
    def sliding_overlap(self) -> int:
        return self.overlap if self.overlap is not None else max(1, self.window // 2)

    def with_overrides(self, **overrides) -> "RunConfig":
        return replace(self, **overrides)


_INT_KEYS = {"window", "warmup", "steps", "style_id", "seed", "frames", "xt_row", "overlap", "n_train_steps"}
_FLOAT_KEYS = {"strength", "beta_min", "beta_max"}
_BOOL_KEYS = {"cond", "kv_cache", "flush"}
_ALIASES = {"style": "style_id", "no_cond": "cond", "no_kv_cache": "kv_cache"}


def _coerce(key: str, value: Any) -> Any:
    try:
        if key in _INT_KEYS:
            return int(value)
        if key in _FLOAT_KEYS:
            return float(value)
        if key in _BOOL_KEYS:
            return _as_bool(value)
    except (TypeError, ValueError) as e:
        raise ParameterError(f"Invalid value for '{key}': {value!r} ({e})")
    return value


def _normalize(settings: Dict[str, Any]) -> Dict[str, Any]:
    known = {f.name for f in fields(RunConfig)} - {"extra"}
    out: Dict[str, Any] = {}
    for raw_key, value in settings.items():
        if value is None:
            continue
        key = raw_key.strip().lower().replace("-", "_")
        if key in ("no_cond", "no_kv_cache"):
            # negated flags flip the stored boolean
            out[_ALIASES[key]] = not _as_bool(value)
            continue
        key = _ALIASES.get(key, key)
        if key in known:
            out[key] = _coerce(key, value)
    return out


def build_run_config(
    app_config: Optional[dict] = None,
    run_file: Optional[str] = None,
    overrides: Optional[Dict[str, Any]] = None,
) -> RunConfig:
    """
    Merge YAML defaults, an optional run file and flag overrides into a RunConfig.

    Args:
        app_config: Parsed YAML configuration
        run_file: Optional path to a key=value run file
        overrides: Values from command-line flags (None entries are ignored)

    Returns:
        Validated RunConfig
    """
    cfg = app_config or {}
    merged: Dict[str, Any] = {}
    merged.update(_normalize(_get_cfg(cfg, ["stream"], {}) or {}))
    merged.update(_normalize(_get_cfg(cfg, ["schedule"], {}) or {}))
    source_cfg = _get_cfg(cfg, ["source"], {}) or {}
    if "kind" in source_cfg:
        merged["source"] = source_cfg["kind"]
    if "frames" in source_cfg:
        merged["frames"] = int(source_cfg["frames"])
    if run_file:
        merged.update(_normalize(load_run_file(run_file)))
    if overrides:
        merged.update(_normalize(overrides))
    return RunConfig(**merged)
