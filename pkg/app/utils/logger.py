"""
Structured logging configuration using structlog.
"""

import logging
import sys
from typing import Any, Optional, TextIO

import structlog


def configure_logging(log_level: str = "INFO", stream: Optional[TextIO] = None) -> None:
    """
    Configure structured logging for PromptReID.

    Logs go to stderr by default so command output on stdout (summaries,
    schedule tables) stays machine-readable.

    Args:
        log_level: Logging level (DEBUG, INFO, WARNING, ERROR, CRITICAL)
        stream: Destination stream for rendered log lines
    """
    level = getattr(logging, log_level.upper())
    logging.basicConfig(
        format="%(message)s",
        stream=stream or sys.stderr,
        level=level,
    )

    structlog.configure(
        processors=[
            structlog.contextvars.merge_contextvars,
            structlog.processors.add_log_level,
            structlog.processors.StackInfoRenderer(),
            structlog.dev.set_exc_info,
            structlog.processors.TimeStamper(fmt="iso"),
            structlog.processors.JSONRenderer()
        ],
        wrapper_class=structlog.make_filtering_bound_logger(level),
        context_class=dict,
        logger_factory=structlog.stdlib.LoggerFactory(),
        cache_logger_on_first_use=True,
    )


def bind_run_context(run_id: str, command: str) -> None:
    """
    Attach the run identity to every subsequent log line of this process.

    Args:
        run_id: Registry identifier of the run
        command: CLI command being executed
    """
    structlog.contextvars.clear_contextvars()
    structlog.contextvars.bind_contextvars(run_id=run_id, command=command)


def get_logger(name: str) -> Any:
    """
    Get a structured logger instance.

    Args:
        name: Logger name (typically __name__)

    Returns:
        Structured logger instance
    """
    return structlog.get_logger(name)
