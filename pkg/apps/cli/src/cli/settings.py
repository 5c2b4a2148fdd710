"""Process-level runtime settings.

Values come from environment variables, optionally set in .env.local or
.env at the working directory (.env.local wins). Every setting has a
default; a malformed value fails fast with the variable name.

Environment variables:
- SPARSEFACTOR_LOG_LEVEL: logging level name (default INFO)
- SPARSEFACTOR_THREADS: worker count for chains, trials and relabelling (default 1)
- SPARSEFACTOR_OUT: default output directory (default runs/latest)
"""

import logging
import os
from dataclasses import dataclass
from pathlib import Path

from dotenv import load_dotenv
from shared.errors import ConfigurationError

LOG_LEVELS = ("DEBUG", "INFO", "WARNING", "ERROR", "CRITICAL")
ENV_FILES = (".env.local", ".env")


def _invalid(key: str, value: str, description: str) -> ConfigurationError:
    return ConfigurationError(
        f"Invalid value for environment variable: {key}={value!r}\n"
        f"Description: {description}\n"
        f"Please fix this in your .env.local file or shell environment."
    )


def _env_log_level(key: str, default: str) -> str:
    value = os.getenv(key, default).strip().upper()
    if value not in LOG_LEVELS:
        raise _invalid(key, value, f"one of {', '.join(LOG_LEVELS)}")
    return value


def _env_positive_int(key: str, default: int, description: str) -> int:
    raw = os.getenv(key)
    if raw is None or not raw.strip():
        return default
    try:
        value = int(raw)
    except ValueError:
        raise _invalid(key, raw, description) from None
    if value < 1:
        raise _invalid(key, raw, description)
    return value


@dataclass(frozen=True)
class RuntimeSettings:
    """Settings that never change numeric results."""

    log_level: str = "INFO"
    threads: int = 1
    out: Path = Path("runs/latest")

    @classmethod
    def from_env(cls, env_files: tuple[str, ...] = ENV_FILES) -> "RuntimeSettings":
        """Load dotenv files (earlier files win), then read the environment."""
        for env_file in env_files:
            load_dotenv(env_file, override=False)
        return cls(
            log_level=_env_log_level("SPARSEFACTOR_LOG_LEVEL", cls.log_level),
            threads=_env_positive_int(
                "SPARSEFACTOR_THREADS", cls.threads, "positive number of worker threads"
            ),
            out=Path(os.getenv("SPARSEFACTOR_OUT") or cls.out),
        )


def configure_logging(level: str) -> None:
    """Configure the root handler once for the whole process."""
    logging.basicConfig(
        level=getattr(logging, level.upper()),
        format="%(asctime)s %(levelname)s %(name)s: %(message)s",
        force=True,
    )
