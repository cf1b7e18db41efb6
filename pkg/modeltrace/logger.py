import json, logging, os, threading, time
from typing import Any, Optional

from rich.logging import RichHandler

from . import config

_CONFIGURED = False


def get_logger(name: str) -> logging.Logger:
    return logging.getLogger(f"modeltrace.{name}")


def setup_logging(verbosity: int = 0):
    """0 -> WARNING, 1 -> INFO, 2+ -> DEBUG; installs the rich handler once."""
    global _CONFIGURED
    level = {0: logging.WARNING, 1: logging.INFO}.get(verbosity, logging.DEBUG)
    root = logging.getLogger("modeltrace")
    if not _CONFIGURED:
        handler = RichHandler(show_path=False, rich_tracebacks=True)
        handler.setFormatter(logging.Formatter("%(message)s"))
        root.addHandler(handler)
        root.propagate = False
        _CONFIGURED = True
    root.setLevel(level)


class RunLogger:
    """
    Structured run record: one JSON object per line, each stamped with `t`.
    Events are written through so a crashed run still leaves its trail.
    """

    def __init__(self, name: str = "run", log_dir: Optional[str] = None):
        ts = time.strftime("%Y%m%d_%H%M%S")
        log_dir = log_dir or config.LOG_DIR
        os.makedirs(log_dir, exist_ok=True)
        self.path = os.path.join(log_dir, f"{name}_{ts}_{os.getpid()}.ndjson")
        self._lock = threading.Lock()
        self._fh = open(self.path, "a", encoding="utf-8")
        self.event(op="run_start", name=name)

    def event(self, **kwargs: Any):
        kwargs["t"] = time.time()
        line = json.dumps(kwargs, default=str, sort_keys=False)
        with self._lock:
            if self._fh.closed:
                return
            self._fh.write(line + "\n")
            self._fh.flush()

    def close(self):
        self.event(op="run_end")
        with self._lock:
            self._fh.close()

    def __enter__(self):
        return self

    def __exit__(self, *exc):
        self.close()
