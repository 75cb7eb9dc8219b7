# t3d/settings.py
from __future__ import annotations

import os
import tempfile
from dataclasses import dataclass
from pathlib import Path
from typing import Optional

from dotenv import load_dotenv

load_dotenv()


@dataclass(frozen=True)
class Settings:
    runs_dir: Path
    log_level: str
    debug_errors: bool
    run_slow: bool


_settings: Optional[Settings] = None


def get_settings() -> Settings:
    global _settings
    if _settings is not None:
        return _settings

    default_dir = Path(tempfile.gettempdir()) / "t3d_runs"
    runs_dir = Path(os.getenv("T3D_RUNS_DIR", str(default_dir))).resolve()

    _settings = Settings(
        runs_dir=runs_dir,
        log_level=os.getenv("T3D_LOG_LEVEL", "INFO").strip().upper() or "INFO",
        debug_errors=os.getenv("T3D_DEBUG_ERRORS", "0").strip() == "1",
        run_slow=os.getenv("T3D_RUN_SLOW", "0").strip() == "1",
    )
    return _settings


def reset_settings() -> None:
    """Drop the cached settings (tests change the environment)."""
    global _settings
    _settings = None
