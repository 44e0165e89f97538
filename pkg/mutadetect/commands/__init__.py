"""Command package for the mutadetect CLI."""

import functools
from typing import Any, Callable, Dict

from pydantic import ValidationError

from mutadetect.errors import ConfigError, MutaDetectError
from mutadetect.utils.pylogger import get_python_logger

logger = get_python_logger()


def cli_command(func: Callable[..., Dict[str, Any]]) -> Callable[..., Dict[str, Any]]:
    """Decorator that provides consistent error handling for CLI commands.

    Catches MutaDetectError, pydantic ValidationError, and unexpected
    exceptions, returning a standardized error dict with an exit code
    instead of raising.
    """

    @functools.wraps(func)
    def wrapper(*args: Any, **kwargs: Any) -> Dict[str, Any]:
        try:
            result = func(*args, **kwargs)
            result.setdefault("status", "success")
            result.setdefault("exit_code", 0)
            return result
        except MutaDetectError as e:
            logger.error(f"{type(e).__name__} in {func.__name__}: {e.message}")
            return e.to_dict()
        except ValidationError as e:
            logger.error(f"Configuration error in {func.__name__}: {e}")
            return ConfigError(str(e)).to_dict() | {"error_type": "ValidationError"}
        except Exception as e:
            logger.error(f"Unexpected error in {func.__name__}: {e}", exc_info=True)
            return {
                "status": "error",
                "error": str(e),
                "error_type": type(e).__name__,
                "hint": "",
                "exit_code": 1,
            }

    return wrapper
