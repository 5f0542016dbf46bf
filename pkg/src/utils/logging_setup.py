"""
Logging Setup
Configures console and file logging from the `logging` section of the app config.
"""

import logging
import os
from pathlib import Path

from src.utils.config import _get_cfg

LOG_FORMAT = "%(asctime)s %(levelname)-7s %(name)s: %(message)s"


def configure_logging(config: dict, log_file: str = "stream.log") -> logging.Logger:
    """
    Install handlers on the root logger.

    STREAM_LOG_LEVEL in the environment wins over the configured level.

    Args:
        config: Application configuration dictionary
        log_file: File name created under logging.log_path

    Returns:
        The configured root logger
    """
    root = logging.getLogger()
    enabled = bool(_get_cfg(config, ["logging", "enabled"], True))
    level_name = os.getenv("STREAM_LOG_LEVEL") or _get_cfg(config, ["logging", "level"], "INFO")
    level = getattr(logging, str(level_name).upper(), logging.INFO)

    # Drop handlers from an earlier call so repeated CLI invocations don't duplicate lines
    for handler in list(root.handlers):
        root.removeHandler(handler)
        handler.close()

    if not enabled:
        root.addHandler(logging.NullHandler())
        root.setLevel(logging.CRITICAL)
        return root

    formatter = logging.Formatter(LOG_FORMAT)
    console = logging.StreamHandler()
    console.setFormatter(formatter)
    root.addHandler(console)

    log_path = _get_cfg(config, ["logging", "log_path"], None)
    if log_path:
        try:
            Path(log_path).mkdir(parents=True, exist_ok=True)
            file_handler = logging.FileHandler(Path(log_path) / log_file, encoding="utf-8")
            file_handler.setFormatter(formatter)
            root.addHandler(file_handler)
        except OSError as e:
            root.warning("⚠ File logging disabled, cannot open %s: %s", log_path, e)

    root.setLevel(level)
    return root
