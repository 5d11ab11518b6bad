"""Logging configuration for arcane-sim.

Human-readable text by default, logfmt when LOG_FORMAT=logfmt so sweep logs
can be grepped and parsed.
"""

import logging
import os
import sys


class LogfmtFormatter(logging.Formatter):
    """Format logs in logfmt style for easy machine parsing.

    Records logged with ``extra={"cycle": n}`` carry the simulated cycle.
    Example: time=2026-02-11T20:00:00Z level=debug logger=runtime cycle=1204 msg="kernel start"
    """

    def format(self, record):
        """Format a log record as logfmt."""
        timestamp = self.formatTime(record, "%Y-%m-%dT%H:%M:%SZ")
        level = record.levelname.lower()
        logger_name = record.name.split(".")[-1]
        msg = record.getMessage().replace('"', '\\"')

        logfmt_parts = [
            f"time={timestamp}",
            f"level={level}",
            f"logger={logger_name}",
        ]
        cycle = getattr(record, "cycle", None)
        if cycle is not None:
            logfmt_parts.append(f"cycle={cycle}")
        logfmt_parts.append(f'msg="{msg}"')

        if record.exc_info:
            exc_text = self.formatException(record.exc_info).replace("\n", "\\n")
            logfmt_parts.append(f'exc="{exc_text}"')

        return " ".join(logfmt_parts)


class CycleTextFormatter(logging.Formatter):
    """Plain text formatter that prefixes the simulated cycle when present."""

    def format(self, record):
        text = super().format(record)
        cycle = getattr(record, "cycle", None)
        return text if cycle is None else f"[{cycle:>10}] {text}"


def setup_logging(log_level=None, use_logfmt=None):
    """Set up logging for the simulator.

    Args:
        log_level: Logging level (DEBUG, INFO, WARNING, ERROR).
                  If None, uses LOG_LEVEL env var or defaults to INFO.
        use_logfmt: Use logfmt structured format.
                   If None, uses LOG_FORMAT env var. Defaults to False.

    Returns:
        The configured root logger.

    Raises:
        ValueError: If the log level is not a known level name.
    """
    if log_level is None:
        log_level = os.getenv("LOG_LEVEL", "info")
    log_level = log_level.upper()

    numeric_level = getattr(logging, log_level, None)
    if not isinstance(numeric_level, int):
        raise ValueError(f"Invalid log level: {log_level}")

    if use_logfmt is None:
        use_logfmt = os.getenv("LOG_FORMAT", "text").lower() == "logfmt"

    root_logger = logging.getLogger()
    root_logger.setLevel(numeric_level)
    root_logger.handlers.clear()

    if use_logfmt:
        formatter = LogfmtFormatter()
    else:
        formatter = CycleTextFormatter(fmt="%(levelname)-8s | %(name)s | %(message)s")

    # stderr keeps stdout free for CSV output
    console_handler = logging.StreamHandler(sys.stderr)
    console_handler.setLevel(numeric_level)
    console_handler.setFormatter(formatter)
    root_logger.addHandler(console_handler)

    return root_logger


def get_logger(name):
    """Get a logger instance for a module.

    Args:
        name: Module name (typically __name__)

    Returns:
        logging.Logger instance
    """
    return logging.getLogger(name)
