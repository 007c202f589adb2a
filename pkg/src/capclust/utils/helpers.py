# src/capclust/utils/helpers.py
import hashlib
import json
import logging
import os
import sys
import zlib
from datetime import datetime, timezone
from typing import Any, Optional, Union

import numpy as np
import pandas as pd

from .constants import LOGGER_NAME
from .errors import CapclustError, InvalidInput

logger: logging.Logger = logging.getLogger(LOGGER_NAME)

LOG_FORMAT = "%(asctime)s - %(name)s - %(levelname)s - %(message)s"
CSV_FLOAT_FORMAT = "%.17g"


def setup_logging(level: Union[int, str] = logging.INFO, log_file: Optional[str] = None) -> None:
    """
    Set up logging configuration

    Args:
        level (int | str): Logging level, numeric or a name such as "DEBUG"
        log_file (optional, str): Optional path to a log file
    """
    if isinstance(level, str):
        level = logging.getLevelName(level.upper())
        if not isinstance(level, int):
            raise InvalidInput(f"Unknown log level: {level}")

    handlers: list[logging.Handler] = [logging.StreamHandler(sys.stdout)]
    if log_file:
        handlers.append(logging.FileHandler(log_file))

    logging.basicConfig(level=level, format=LOG_FORMAT, handlers=handlers, force=True)
    logger.setLevel(level)


def ensure_directory_exists(directory_path: str) -> None:
    """
    Ensure that a directory exists, creating it if necessary

    Args:
        directory_path (str): Path to the directory
    """
    if directory_path and not os.path.exists(directory_path):
        os.makedirs(directory_path)
        logger.info(f"Created directory: {directory_path}")


def _json_default(value: Any) -> Any:
    if isinstance(value, np.ndarray):
        return value.tolist()
    if isinstance(value, np.generic):
        return value.item()
    raise TypeError(f"Object of type {type(value).__name__} is not JSON serializable")


def dumps_json(data: Any, indent: Optional[int] = 2) -> str:
    """Serialize to JSON; floats use the shortest repr that round-trips exactly"""
    return json.dumps(data, indent=indent, default=_json_default, allow_nan=False)


def save_json(data: Any, filepath: str) -> None:
    """
    Save data to a JSON file

    Args:
        data: Data to save
        filepath (str): Path to the output file
    """
    ensure_directory_exists(os.path.dirname(filepath))

    with open(filepath, "w") as f:
        f.write(dumps_json(data))

    logger.info(f"Saved JSON data to: {filepath}")


def load_json(filepath: str) -> Any:
    """
    Load data from a JSON file

    Args:
        filepath: Path to the JSON file

    Returns:
        Loaded data
    """
    with open(filepath) as f:
        data = json.load(f)

    return data


def save_csv(frame: pd.DataFrame, filepath: str) -> None:
    """Write a table with 17 significant digits so every float round-trips"""
    ensure_directory_exists(os.path.dirname(filepath))
    frame.to_csv(filepath, index=False, float_format=CSV_FLOAT_FORMAT)
    logger.info(f"Saved CSV table to: {filepath}")


def utc_now_iso() -> str:
    return datetime.now(timezone.utc).isoformat(timespec="seconds")


def file_digest(filepath: str) -> str:
    """SHA-256 hex digest of a file"""
    sha = hashlib.sha256()
    with open(filepath, "rb") as f:
        for chunk in iter(lambda: f.read(1 << 20), b""):
            sha.update(chunk)
    return sha.hexdigest()


def _encode_key(key: Union[int, str]) -> int:
    if isinstance(key, (int, np.integer)):
        if key < 0:
            raise InvalidInput(f"Stream keys must be non-negative, got {key}")
        return int(key)
    return zlib.crc32(str(key).encode("utf-8"))


def derive_seed_sequence(seed: int, *keys: Union[int, str]) -> np.random.SeedSequence:
    """Counter-based substream: the same (seed, keys) always yields the same stream"""
    return np.random.SeedSequence([int(seed), *(_encode_key(k) for k in keys)])


def derive_rng(seed: int, *keys: Union[int, str]) -> np.random.Generator:
    """
    Independent random generator for one stage of a run

    Args:
        seed: Manifest seed
        keys: Stage labels and counters, e.g. ("restart", 3)

    Returns:
        numpy Generator owned by that stage
    """
    return np.random.default_rng(derive_seed_sequence(seed, *keys))


def derive_seed(seed: int, *keys: Union[int, str]) -> int:
    """Integer seed for a substream, for APIs that accept an int"""
    return int(derive_seed_sequence(seed, *keys).generate_state(1, dtype=np.uint32)[0])


def format_error_message(error: Exception) -> str:
    """
    Format an exception into a user-friendly error message

    Args:
        error (Exception): Exception object

    Returns:
        str: Formatted error message
    """
    if isinstance(error, CapclustError):
        return f"{type(error).__name__}: {error!s}"
    elif isinstance(error, PermissionError):
        return f"Permission denied: {error!s}"
    elif isinstance(error, FileNotFoundError):
        return f"File not found: {error!s}"
    else:
        return f"Error: {error!s}"


class OutputTracker:
    """
    Records files written by a command and removes them if the command fails

    Usage:
        with OutputTracker(out_dir) as outputs:
            save_json(data, outputs.path("components.json"))
    """

    def __init__(self, directory: str) -> None:
        self.directory = directory
        self.written: list[str] = []
        self._created_directory = False

    def __enter__(self) -> "OutputTracker":
        if not os.path.exists(self.directory):
            os.makedirs(self.directory)
            self._created_directory = True
        return self

    def path(self, name: str) -> str:
        filepath = os.path.join(self.directory, name)
        self.written.append(filepath)
        return filepath

    def __exit__(self, exc_type: Any, exc: Any, tb: Any) -> None:
        if exc_type is None:
            return
        for filepath in self.written:
            if os.path.exists(filepath):
                os.remove(filepath)
                logger.warning(f"Removed partial output: {filepath}")
        if self._created_directory and not os.listdir(self.directory):
            os.rmdir(self.directory)
