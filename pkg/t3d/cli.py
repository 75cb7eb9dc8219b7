# t3d/cli.py
from __future__ import annotations

import argparse
import json
import logging
import sys
import traceback
from typing import List, NoReturn, Optional

from t3d.commands import audit, evaluate, finetune, gen_data, gradcheck, train, transfer
from t3d.common import ConfigError, T3DError
from t3d.settings import get_settings

logger = logging.getLogger("t3d")

COMMANDS = (gen_data, train, transfer, finetune, evaluate, audit, gradcheck)


class _Parser(argparse.ArgumentParser):
    """Usage errors become ConfigError so they reach the JSON error line."""

    def error(self, message: str) -> NoReturn:
        raise ConfigError(message, {"usage": self.format_usage().strip()})


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="t3d", description="Temporal 3D ConvNet kernel")
    parser.add_argument("-v", "--verbose", action="store_true", help="debug logging")
    sub = parser.add_subparsers(dest="command", required=True)
    for module in COMMANDS:
        module.register(sub)
    return parser


def _fail(payload: dict, code: int) -> int:
    if get_settings().debug_errors:
        payload["trace"] = traceback.format_exc()[-2500:]
    print(json.dumps(payload, default=str), file=sys.stderr)
    return code


def main(argv: Optional[List[str]] = None) -> int:
    settings = get_settings()
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except ConfigError as e:
        return _fail(e.to_payload(), e.exit_code)
    logging.basicConfig(
        level=logging.DEBUG if args.verbose else settings.log_level,
        format="[%(name)s] %(message)s",
    )
    try:
        return int(args.func(args) or 0)
    except T3DError as e:
        logger.debug("%s failed", args.command, exc_info=True)
        return _fail(e.to_payload(), e.exit_code)
    except KeyboardInterrupt:
        return _fail({"error": "Interrupted", "code": 130, "msg": "interrupted", "detail": {}}, 130)
    except Exception as e:
        return _fail({"error": "unhandled", "code": 1, "msg": repr(e), "detail": {}}, 1)
