# t3d/common.py
from __future__ import annotations

from typing import Any, Callable, Dict, Optional


class T3DError(RuntimeError):
    """
    Base error. `exit_code` is what the CLI returns, `detail` is the
    machine-readable payload printed on the error line.
    """

    exit_code: int = 1

    def __init__(self, msg: str, detail: Optional[Dict[str, Any]] = None, exit_code: Optional[int] = None):
        super().__init__(msg)
        self.msg = msg
        self.detail: Dict[str, Any] = dict(detail or {})
        if exit_code is not None:
            self.exit_code = exit_code

    def to_payload(self) -> Dict[str, Any]:
        return {
            "error": type(self).__name__,
            "code": self.exit_code,
            "msg": self.msg,
            "detail": self.detail,
        }


class ConfigError(T3DError):
    exit_code = 2


class SpecError(T3DError):
    exit_code = 2


class CheckpointError(T3DError):
    exit_code = 2


class DimensionError(T3DError, ValueError):
    exit_code = 3

    def __init__(self, msg: str, axis: str, detail: Optional[Dict[str, Any]] = None):
        payload = {"axis": axis}
        payload.update(detail or {})
        super().__init__(msg, payload)
        self.axis = axis


class NumericError(T3DError):
    exit_code = 3


class InvariantError(T3DError):
    exit_code = 4


class ContractError(InvariantError):
    pass


def execute_or_fail(fn: Callable[[], Any], msg: str) -> Any:
    """
    Run `fn`; our own errors pass through untouched, anything else is
    wrapped so the CLI can still print one structured line.
    """
    try:
        return fn()
    except T3DError:
        raise
    except Exception as e:
        raise T3DError(f"{msg}: {e}", {"exception": repr(e)})


def axis_name(index: int) -> str:
    return ("batch", "channel", "time", "height", "width")[index]
