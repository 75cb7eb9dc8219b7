# t3d/config.py
from __future__ import annotations

import logging
try:
    import tomllib
except ModuleNotFoundError:  # Python < 3.11
    import tomli as tomllib
from pathlib import Path
from typing import Any, Optional, Union

from pydantic import BaseModel, ValidationError

from t3d.common import ConfigError
from t3d.schemas import RunConfig
from t3d.settings import get_settings

logger = logging.getLogger(__name__)


def _errors(e: ValidationError) -> list:
    return [{"loc": ".".join(str(p) for p in err["loc"]), "msg": err["msg"]} for err in e.errors()]


def load_config(path: Optional[Union[str, Path]] = None) -> RunConfig:
    """
    Parse a TOML run config. Unknown tables or keys, bad values and
    unreadable files all surface as ConfigError. No path gives the defaults.
    """
    if path is None:
        return RunConfig()
    p = Path(path)
    try:
        raw = tomllib.loads(p.read_text(encoding="utf-8"))
    except FileNotFoundError:
        raise ConfigError(f"config file not found: {p}", {"path": str(p)})
    except (OSError, UnicodeDecodeError) as e:
        raise ConfigError(f"cannot read config {p}: {e}", {"path": str(p)})
    except tomllib.TOMLDecodeError as e:
        raise ConfigError(f"{p}: {e}", {"path": str(p)})
    try:
        cfg = RunConfig.model_validate(raw)
    except ValidationError as e:
        raise ConfigError(f"{p}: invalid config", {"path": str(p), "errors": _errors(e)})
    logger.debug("loaded config %s", p)
    return cfg


def with_overrides(cfg: BaseModel, **values: Any) -> Any:
    """Copy of `cfg` with the non-None `values` applied and re-validated."""
    update = {k: v for k, v in values.items() if v is not None}
    if not update:
        return cfg
    data = cfg.model_dump()
    data.update(update)
    try:
        return type(cfg).model_validate(data)
    except ValidationError as e:
        raise ConfigError(f"invalid override for {type(cfg).__name__}", {"errors": _errors(e)})


def run_dir(out: Optional[Union[str, Path]], command: str, seed: int) -> Path:
    path = Path(out) if out is not None else get_settings().runs_dir / command / f"seed{seed}"
    path.mkdir(parents=True, exist_ok=True)
    return path
