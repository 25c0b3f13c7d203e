from __future__ import annotations

from datetime import datetime, timezone
import hashlib
import json
from pathlib import Path
from typing import Any, Optional

import numpy as np
from numpy.typing import NDArray
import pandas as pd
import structlog

from ..config import ExperimentConfig


logger = structlog.get_logger(__name__)

MATRIX_HEADER_DTYPE = np.dtype([("rows", "<u8"), ("cols", "<u8")])


def _checksum(path: Path) -> str:
    return hashlib.sha256(path.read_bytes()).hexdigest()


def run_directory(config: ExperimentConfig) -> Path:
    run_path = config.run_path()
    run_path.mkdir(parents=True, exist_ok=True)
    return run_path


def csv_comment(config: ExperimentConfig) -> str:
    return f"# config_hash={config.config_hash()} seed={config.seed}"


def write_csv(frame: pd.DataFrame, name: str, config: ExperimentConfig) -> Path:
    """Write ``frame`` below the run directory, preceded by the config-hash comment row."""
    path = run_directory(config) / name
    with path.open("w", newline="", encoding="utf-8") as handle:
        handle.write(csv_comment(config) + "\n")
        frame.to_csv(handle, index=False)
    logger.info("csv_written", path=str(path), rows=len(frame), checksum=_checksum(path))
    return path


def read_csv(path: Path) -> pd.DataFrame:
    return pd.read_csv(path, comment="#")


def write_matrix_bin(matrix: NDArray[np.float64], name: str, config: ExperimentConfig) -> Path:
    """Flat binary matrix: little-endian uint64 rows, uint64 cols, then row-major float64 entries."""
    path = run_directory(config) / name
    header = np.zeros(1, dtype=MATRIX_HEADER_DTYPE)
    header["rows"], header["cols"] = matrix.shape
    path.write_bytes(header.tobytes() + np.ascontiguousarray(matrix, dtype="<f8").tobytes())
    logger.info("matrix_written", path=str(path), shape=matrix.shape, checksum=_checksum(path))
    return path


def read_matrix_bin(path: Path) -> NDArray[np.float64]:
    payload = path.read_bytes()
    header = np.frombuffer(payload, dtype=MATRIX_HEADER_DTYPE, count=1)[0]
    rows, cols = int(header["rows"]), int(header["cols"])
    values = np.frombuffer(payload, dtype="<f8", offset=MATRIX_HEADER_DTYPE.itemsize)
    if values.size != rows * cols:
        raise ValueError(f"{path} holds {values.size} values, header says {rows} x {cols}")
    return values.reshape(rows, cols).astype(np.float64)


def write_text(text: str, name: str, config: ExperimentConfig) -> Path:
    path = run_directory(config) / name
    path.write_text(text, encoding="utf-8")
    logger.info("text_written", path=str(path), checksum=_checksum(path))
    return path


def write_meta_json(*, config: ExperimentConfig, command: str, extra: Optional[dict[str, Any]] = None) -> Path:
    path = run_directory(config) / "meta.json"
    payload: dict[str, Any] = {
        "run_name": config.run_name,
        "command": command,
        "created_at": datetime.now(timezone.utc).isoformat(),
        "config_hash": config.config_hash(),
        "seed": config.seed,
        "config": config.model_dump(mode="json"),
    }
    if extra:
        payload.update(extra)
    path.write_text(json.dumps(payload, indent=2), encoding="utf-8")
    logger.info("meta_written", path=str(path), checksum=_checksum(path))
    return path


__all__ = [
    "csv_comment",
    "read_csv",
    "read_matrix_bin",
    "run_directory",
    "write_csv",
    "write_matrix_bin",
    "write_meta_json",
    "write_text",
]
