"""Logging configuration for flowmesh.

Records carry the node and run they were emitted for. Several nodes can share
one process (the test networks do), so both travel in context variables that
every task spawned on behalf of a node or a run inherits.
"""

import json
import logging
import sys
from contextvars import ContextVar
from pathlib import Path
from typing import Any, Dict, Optional

# Package logger name
LOGGER_NAME = "flowmesh"
LOG_FORMAT = "%(asctime)s %(levelname)-7s [%(node)s %(run)s] %(name)s: %(message)s"
NO_CONTEXT = "-"

_node: ContextVar[str] = ContextVar("flowmesh_node", default=NO_CONTEXT)
_run: ContextVar[str] = ContextVar("flowmesh_run", default=NO_CONTEXT)


def bind_node(node_id: str) -> None:
    """Tag records logged from the current task (and its children) with a node."""
    _node.set(node_id[:8])


def bind_run(run_id: str) -> None:
    """Tag records logged from the current task (and its children) with a run."""
    _run.set(run_id[:8])


class ContextFilter(logging.Filter):
    """Adds ``node`` and ``run`` attributes for LOG_FORMAT."""

    def filter(self, record: logging.LogRecord) -> bool:
        record.node = _node.get()
        record.run = _run.get()
        return True


def get_logger(name: str) -> logging.Logger:
    """Get a logger for a module.

    Args:
        name: Module name, typically __name__.

    Returns:
        Logger instance configured under the package logger.
    """
    if name.startswith(LOGGER_NAME):
        return logging.getLogger(name)
    return logging.getLogger(f"{LOGGER_NAME}.{name}")


def setup_logging(
    level: str = "INFO",
    log_file: Optional[Path] = None,
    console_output: bool = False,
) -> None:
    """Configure logging for the application.

    Args:
        level: Log level (DEBUG, INFO, WARNING, ERROR, CRITICAL).
        log_file: Optional path to log file.
        console_output: If True, also log to stderr (useful with --verbose).
            Rich console output and ``--json`` documents go to stdout, so
            logging to stderr avoids interference.
    """
    logger = logging.getLogger(LOGGER_NAME)
    logger.setLevel(getattr(logging, level.upper(), logging.INFO))

    logger.handlers.clear()
    context = ContextFilter()

    formatter = logging.Formatter(LOG_FORMAT, datefmt="%Y-%m-%d %H:%M:%S")

    if log_file:
        log_file = Path(log_file)
        log_file.parent.mkdir(parents=True, exist_ok=True)
        file_handler = logging.FileHandler(log_file)
        file_handler.setFormatter(formatter)
        file_handler.addFilter(context)
        logger.addHandler(file_handler)

    if console_output:
        console_handler = logging.StreamHandler(sys.stderr)
        console_handler.setFormatter(formatter)
        console_handler.addFilter(context)
        logger.addHandler(console_handler)

    # If no handlers configured, add null handler to avoid warnings
    if not logger.handlers:
        logger.addHandler(logging.NullHandler())


def event_line(event: Dict[str, Any]) -> str:
    """Render an engine event as one line of the monitoring channel."""
    return json.dumps(event, sort_keys=True, separators=(",", ":"))
