"""FPFLOW_* environment defaults: .env discovery, recognised keys and the log level."""

from __future__ import annotations

import logging
import os
import sys
from pathlib import Path
from typing import Iterable, Optional

logger = logging.getLogger(__name__)

ENV_PREFIX = "FPFLOW_"
# environment suffix -> experiment config key
CONFIG_KEYS = {"OUTPUT_DIR": "output_dir", "SEED": "seed", "THREADS": "threads"}
LOG_LEVEL_KEY = "LOG_LEVEL"
KNOWN_KEYS = (*CONFIG_KEYS, LOG_LEVEL_KEY)


def env_file_candidates(search_dirs: Optional[Iterable[Path]] = None) -> list[Path]:
    """.env paths in lookup order: working directory, interpreter directory, project root."""
    if search_dirs is None:
        search_dirs = (Path.cwd(), Path(sys.executable).resolve().parent, Path(__file__).resolve().parents[2])
    return list(dict.fromkeys(Path(base).resolve() / ".env" for base in search_dirs))


def parse_env_file(path: Path) -> dict[str, str]:
    """FPFLOW_* assignments of one .env file; other keys, comments and `export` prefixes are skipped."""
    try:
        lines = Path(path).read_text(encoding="utf-8").splitlines()
    except OSError:
        return {}
    pairs: dict[str, str] = {}
    for raw_line in lines:
        line = raw_line.strip()
        if line.startswith("export "):
            line = line[len("export ") :].lstrip()
        if not line or line.startswith("#") or "=" not in line:
            continue
        key, value = (part.strip() for part in line.split("=", 1))
        if not key.startswith(ENV_PREFIX):
            continue
        if len(value) >= 2 and value[0] == value[-1] and value[0] in ("'", '"'):
            value = value[1:-1]
        pairs[key] = value
    return pairs


def load_env_defaults(search_dirs: Optional[Iterable[Path]] = None) -> dict[str, Path]:
    """Copy recognised .env keys into os.environ without overriding it; returns the file each applied key came from."""
    applied: dict[str, Path] = {}
    for env_path in env_file_candidates(search_dirs):
        if not env_path.is_file():
            continue
        for key, value in parse_env_file(env_path).items():
            if key[len(ENV_PREFIX) :] not in KNOWN_KEYS:
                logger.warning("ignoring unknown %s in %s", key, env_path)
                continue
            if key in os.environ:
                continue
            os.environ[key] = value
            applied[key] = env_path
    return applied


def env_value(name: str, default: str = "") -> str:
    return os.getenv(f"{ENV_PREFIX}{name}", default).strip()


def env_config_overrides() -> dict[str, tuple[str, str]]:
    """Config key -> (variable name, raw text) for every recognised variable that is set and non-empty."""
    out: dict[str, tuple[str, str]] = {}
    for suffix, key in CONFIG_KEYS.items():
        text = env_value(suffix)
        if text:
            out[key] = (f"{ENV_PREFIX}{suffix}", text)
    return out


def env_log_level(default: int = logging.INFO) -> int:
    text = env_value(LOG_LEVEL_KEY).upper()
    if not text:
        return default
    level = logging.getLevelName(text)
    if isinstance(level, int):
        return level
    logger.warning("ignoring %s%s=%r", ENV_PREFIX, LOG_LEVEL_KEY, text)
    return default
