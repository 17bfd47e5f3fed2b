import logging
import os
import sys
from typing import Callable, Optional

LOG_ENV_VAR = "STREP_LOG"

ProgressCallback = Callable[[float, Optional[float], Optional[str]], None]

_LEVEL_MARKS = {
    "DEBUG": "🔍",
    "INFO": "📰",
    "WARNING": "⚠️",
    "ERROR": "❌",
}


class LevelFormatter(logging.Formatter):
    """Formats records as `<mark> [LEVEL] [logger] message`."""

    def format(self, record: logging.LogRecord) -> str:
        mark = _LEVEL_MARKS.get(record.levelname, "📝")
        message = record.getMessage()
        if record.exc_info:
            message = f"{message}\n{self.formatException(record.exc_info)}"
        return f"{mark} [{record.levelname}] [{record.name}] {message}"


def level_from_env(default: str = "info") -> int:
    name = os.getenv(LOG_ENV_VAR, default).strip().lower()
    levels = {"debug": logging.DEBUG, "info": logging.INFO}
    if name not in levels:
        # only debug|info are meaningful; anything else falls back quietly
        return logging.INFO
    return levels[name]


def configure_logging(level: int | None = None) -> logging.Logger:
    """Install the console handler on the `strep` logger tree (idempotent)."""
    logger = logging.getLogger("strep")
    logger.setLevel(level if level is not None else level_from_env())
    console = [h for h in logger.handlers if getattr(h, "_strep_console", False)]
    if console:
        # follow sys.stderr when it has been swapped since the first call
        console[0].stream = sys.stderr  # type: ignore[attr-defined]
    else:
        handler = logging.StreamHandler(sys.stderr)
        handler.setFormatter(LevelFormatter())
        handler._strep_console = True  # type: ignore[attr-defined]
        logger.addHandler(handler)
    logger.propagate = False
    return logger


def logging_progress(logger: logging.Logger, every: int = 100) -> ProgressCallback:
    """Progress callback for non-interactive runs: one INFO record every `every` steps."""

    def report(progress: float, total: float | None, message: str | None) -> None:
        step = int(progress)
        if total and (step % every == 0 or step >= total):
            percentage = (progress / total) * 100
            logger.info(f"{percentage:5.1f}% - {message or 'Working...'}")

    return report
