"""
Utility functions for logging, persistence and seeding
"""
import logging
from logging.handlers import RotatingFileHandler
import os
import json
import csv
from typing import Any, Iterable, Sequence

import numpy as np

from app.utils.exceptions import PersistenceError

_UINT64_MASK = (1 << 64) - 1


def setup_logging(log_file: str = "logs/fddm.log", level: int = logging.INFO) -> None:
    """
    Configure application logging

    Args:
        log_file: Path to log file
        level: Logging level
    """
    # Create logs directory if it doesn't exist
    log_dir = os.path.dirname(log_file)
    if log_dir and not os.path.exists(log_dir):
        os.makedirs(log_dir)

    logger = logging.getLogger()
    logger.setLevel(level)
    logger.handlers = []

    formatter = logging.Formatter(
        '%(asctime)s - %(name)s - %(levelname)s - %(message)s',
        datefmt='%Y-%m-%d %H:%M:%S'
    )

    console_handler = logging.StreamHandler()
    console_handler.setLevel(level)
    console_handler.setFormatter(formatter)
    logger.addHandler(console_handler)

    file_handler = RotatingFileHandler(
        log_file,
        maxBytes=10*1024*1024,  # 10MB
        backupCount=5
    )
    file_handler.setLevel(level)
    file_handler.setFormatter(formatter)
    logger.addHandler(file_handler)

    # Suppress noisy loggers
    logging.getLogger('matplotlib').setLevel(logging.WARNING)
    logging.getLogger('PIL').setLevel(logging.WARNING)


def save_to_json(data, filename: str, strict: bool = False) -> None:
    """Persist Python data to a JSON file.

    - Creates parent directories if they don't exist
    - Uses ``default=str`` so paths and numpy scalars are stringified
    - Best-effort unless ``strict``; strict writes raise PersistenceError
    """
    try:
        os.makedirs(os.path.dirname(filename) or ".", exist_ok=True)
        with open(filename, "w", encoding="utf-8") as f:
            json.dump(data, f, indent=2, default=str)
        logging.getLogger(__name__).info(f"Saved JSON snapshot to {filename}")
    except Exception as exc:
        logging.getLogger(__name__).error(f"Failed to save JSON to {filename}: {exc}")
        if strict:
            raise PersistenceError(f"Failed to save JSON to {filename}: {exc}") from exc


def load_json(filename: str) -> Any:
    """Read a JSON document, mapping I/O and syntax failures to PersistenceError."""
    try:
        with open(filename, "r", encoding="utf-8") as f:
            return json.load(f)
    except (OSError, json.JSONDecodeError) as exc:
        raise PersistenceError(f"Failed to read JSON from {filename}: {exc}") from exc


def save_text(content: str, filename: str) -> None:
    """Persist raw text content to a file, creating parent dirs if needed."""
    try:
        os.makedirs(os.path.dirname(filename) or ".", exist_ok=True)
        with open(filename, "w", encoding="utf-8") as f:
            f.write(content)
        logging.getLogger(__name__).info(f"Saved text snapshot to {filename}")
    except OSError as exc:
        raise PersistenceError(f"Failed to save text to {filename}: {exc}") from exc


class CsvAppender:
    """Append rows to a CSV file, writing the header once.

    Used for the per-step training log so an interrupted run keeps every row
    written so far.
    """

    def __init__(self, filename: str, header: Sequence[str], truncate: bool = False):
        self.filename = filename
        self.header = list(header)
        os.makedirs(os.path.dirname(filename) or ".", exist_ok=True)
        if truncate or not os.path.exists(filename) or os.path.getsize(filename) == 0:
            with open(filename, "w", encoding="utf-8", newline="") as f:
                csv.writer(f).writerow(self.header)

    def append(self, rows: Iterable[Sequence[Any]]) -> None:
        with open(self.filename, "a", encoding="utf-8", newline="") as f:
            writer = csv.writer(f)
            for row in rows:
                writer.writerow(row)


def derive_seed(*parts: int) -> int:
    """
    Child seed of SeedSequence(parts[0]) at spawn key parts[1:] (e.g. run seed, slice index)

    derive_seed(s, i) equals the i-th child of SeedSequence(s).spawn(i + 1).
    Negative parts are read as their 64-bit two's complement.
    """
    root, *key = (int(p) & _UINT64_MASK for p in parts)
    state = np.random.SeedSequence(root, spawn_key=tuple(key)).generate_state(1, np.uint64)[0]
    return int(state) & ((1 << 63) - 1)


def format_seconds(seconds: float) -> str:
    """
    Format a duration into a short human-readable string

    Args:
        seconds: Duration in seconds

    Returns:
        Formatted string (e.g., "1.50 ms")
    """
    for unit, scale in (("s", 1.0), ("ms", 1e-3), ("us", 1e-6)):
        if seconds >= scale:
            return f"{seconds / scale:.2f} {unit}"
    return f"{seconds / 1e-9:.2f} ns"
