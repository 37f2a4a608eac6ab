#!/usr/bin/env python3
import logging
import os
import sys
from datetime import datetime


class Colors:
    """ANSI color codes for terminal output"""
    RED = '\033[91m'
    GREEN = '\033[92m'
    YELLOW = '\033[93m'
    BLUE = '\033[94m'
    CYAN = '\033[96m'

    BOLD = '\033[1m'
    DIM = '\033[2m'

    END = '\033[0m'

    SUCCESS = GREEN
    ERROR = RED
    WARNING = YELLOW
    INFO = BLUE

    @classmethod
    def is_supported(cls, stream=None) -> bool:
        """Check if the target stream supports ANSI colors"""
        stream = stream or sys.stderr
        if os.environ.get('NO_COLOR'):
            return False
        if any(env in os.environ for env in ['COLORTERM', 'FORCE_COLOR']):
            return True
        if not hasattr(stream, "isatty") or not stream.isatty():
            return False
        term = os.environ.get('TERM', '').lower()
        if term in ('dumb', ''):
            return False
        color_terms = ['xterm', 'screen', 'tmux', 'linux', 'ansi', 'color']
        return any(color_term in term for color_term in color_terms)

    @classmethod
    def colorize(cls, text: str, color: str, enabled: bool = True) -> str:
        """Apply color to text if colors are enabled and supported"""
        if not enabled or not cls.is_supported(sys.stdout):
            return text
        return f"{color}{text}{cls.END}"

    @classmethod
    def bold(cls, text: str, enabled: bool = True) -> str:
        return cls.colorize(text, cls.BOLD, enabled)

    @classmethod
    def success(cls, text: str, enabled: bool = True) -> str:
        return cls.colorize(text, cls.SUCCESS, enabled)

    @classmethod
    def error(cls, text: str, enabled: bool = True) -> str:
        return cls.colorize(text, cls.ERROR, enabled)

    @classmethod
    def warning(cls, text: str, enabled: bool = True) -> str:
        return cls.colorize(text, cls.WARNING, enabled)

    @classmethod
    def info(cls, text: str, enabled: bool = True) -> str:
        return cls.colorize(text, cls.INFO, enabled)

    @classmethod
    def dim(cls, text: str, enabled: bool = True) -> str:
        return cls.colorize(text, cls.DIM, enabled)


_LEVEL_COLORS = {
    logging.DEBUG: Colors.DIM,
    logging.INFO: Colors.SUCCESS,
    logging.WARNING: Colors.WARNING,
    logging.ERROR: Colors.ERROR,
    logging.CRITICAL: Colors.ERROR + Colors.BOLD,
}


class ColorFormatter(logging.Formatter):
    """`[iso-timestamp] LEVEL logger: message`, level colored when the stream allows it."""

    def __init__(self, colored: bool = True):
        super().__init__()
        self.colored = colored

    def format(self, record: logging.LogRecord) -> str:
        ts = datetime.fromtimestamp(record.created).isoformat(timespec="seconds")
        level = record.levelname
        if self.colored:
            color = _LEVEL_COLORS.get(record.levelno, "")
            level = f"{color}{level}{Colors.END}" if color else level
        text = f"[{ts}] {level} {record.name}: {record.getMessage()}"
        if record.exc_info:
            text += "\n" + self.formatException(record.exc_info)
        return text


def setup_logging(level: str = "INFO", colored: bool = True, stream=None) -> None:
    """Install a single colored handler on the root logger (idempotent)."""
    stream = stream or sys.stderr
    root = logging.getLogger()
    for handler in list(root.handlers):
        if getattr(handler, "_hype_handler", False):
            root.removeHandler(handler)
    handler = logging.StreamHandler(stream)
    handler.setFormatter(ColorFormatter(colored and Colors.is_supported(stream)))
    handler._hype_handler = True
    root.addHandler(handler)
    root.setLevel(getattr(logging, str(level).upper(), logging.INFO))


def colorize_metric(name: str, value: float, enabled: bool = True) -> str:
    """Color a fraction-valued metric: green >= 0.8, yellow >= 0.6, red otherwise."""
    text = f"{name}={value:.3f}"
    if value >= 0.8:
        return Colors.success(text, enabled)
    if value >= 0.6:
        return Colors.warning(text, enabled)
    return Colors.error(text, enabled)
