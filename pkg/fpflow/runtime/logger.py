from __future__ import annotations

import json
import logging
import struct
import time
from pathlib import Path
from typing import Any, Dict, Optional

import numpy as np
import pandas as pd

from fpflow.errors import InputError

SNAPSHOT_MAGIC = b"FPFS"
SNAPSHOT_VERSION = 1


class JsonlLogger:
    def __init__(self, path: str) -> None:
        self.path = Path(path)
        self.path.parent.mkdir(parents=True, exist_ok=True)

    def write(self, record: Dict[str, Any]) -> None:
        payload = {"ts_ms": int(time.time() * 1000), **record}
        with self.path.open("a", encoding="utf-8") as f:
            f.write(json.dumps(payload, ensure_ascii=False) + "\n")


def log_event(run_log: Optional[JsonlLogger], event: str, **fields: Any) -> None:
    if run_log is not None:
        run_log.write({"event": event, **fields})


def write_frame(path: Path, frame: pd.DataFrame) -> Path:
    path.parent.mkdir(parents=True, exist_ok=True)
    frame.to_csv(path, index=False)
    return path


def write_snapshot(path: Path, x: np.ndarray, l: np.ndarray, s: np.ndarray) -> Path:
    """Little-endian: magic, u32 version, u32 n, u32 dim, then f64 x (n*dim), l (n), s (n*dim)."""
    x = np.ascontiguousarray(x, dtype="<f8")
    s = np.ascontiguousarray(s, dtype="<f8")
    l = np.ascontiguousarray(l, dtype="<f8")
    n, dim = x.shape
    path.parent.mkdir(parents=True, exist_ok=True)
    with path.open("wb") as f:
        f.write(SNAPSHOT_MAGIC)
        f.write(struct.pack("<III", SNAPSHOT_VERSION, n, dim))
        f.write(x.tobytes())
        f.write(l.tobytes())
        f.write(s.tobytes())
    return path


def read_snapshot(path: Path) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    raw = Path(path).read_bytes()
    if raw[:4] != SNAPSHOT_MAGIC:
        raise InputError(f"{path} is not a snapshot file", code="snapshot_bad_magic")
    version, n, dim = struct.unpack("<III", raw[4:16])
    if version != SNAPSHOT_VERSION:
        raise InputError(f"unsupported snapshot version {version}", code="snapshot_bad_version")
    body = np.frombuffer(raw[16:], dtype="<f8")
    x = body[: n * dim].reshape(n, dim)
    l = body[n * dim : n * dim + n]
    s = body[n * dim + n : 2 * n * dim + n].reshape(n, dim)
    return x.copy(), l.copy(), s.copy()


def configure_logging(level: int = logging.INFO) -> None:
    logging.basicConfig(level=level, format="%(asctime)s %(levelname)s %(name)s: %(message)s")
