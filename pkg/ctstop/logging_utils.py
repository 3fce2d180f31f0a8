"""Structured JSON logging shared by the simulator, trainer and CLI."""
import logging
import json
import os
import time
from typing import Any, Dict, Optional

_ROOT = "ctstop"
RUN_LOG_NAME = "run.log.jsonl"


class JsonFormatter(logging.Formatter):
    """One JSON object per record; `event` and `data` come from `extra=`."""
    def format(self, record: logging.LogRecord) -> str:
        payload: Dict[str, Any] = {
            "level": record.levelname,
            "time": int(record.created * 1000),
            "logger": record.name,
            "message": record.getMessage(),
        }
        if hasattr(record, "event"):
            payload["event"] = getattr(record, "event")
        if hasattr(record, "data"):
            payload["data"] = getattr(record, "data")
        if record.exc_info:
            payload["exception"] = self.formatException(record.exc_info)
        return json.dumps(payload, ensure_ascii=False, default=_to_jsonable)


def _to_jsonable(value: Any) -> Any:
    # numpy scalars and arrays end up in `data` payloads regularly
    if hasattr(value, "tolist"):
        return value.tolist()
    return str(value)


def _root_logger() -> logging.Logger:
    root = logging.getLogger(_ROOT)
    if not root.handlers:
        root.setLevel(logging.INFO)
        handler = logging.StreamHandler()
        handler.setFormatter(JsonFormatter())
        root.addHandler(handler)
        root.propagate = False
    return root


def get_logger(name: str) -> logging.Logger:
    """Return `ctstop.<name>`; all of them share the JSON handler on the package root."""
    _root_logger()
    return logging.getLogger(f"{_ROOT}.{name}")


def set_level(level: str) -> None:
    _root_logger().setLevel(getattr(logging, level.upper()))


def attach_run_log(run_dir: str) -> str:
    """Mirror every record into `<run_dir>/run.log.jsonl`."""
    root = _root_logger()
    path = os.path.join(run_dir, RUN_LOG_NAME)
    for h in root.handlers:
        if isinstance(h, logging.FileHandler) and os.path.abspath(h.baseFilename) == os.path.abspath(path):
            return path
    handler = logging.FileHandler(path, encoding="utf-8")
    handler.setFormatter(JsonFormatter())
    root.addHandler(handler)
    return path


def detach_run_logs(run_dir: Optional[str] = None) -> None:
    root = _root_logger()
    for h in list(root.handlers):
        if not isinstance(h, logging.FileHandler):
            continue
        if run_dir is None or os.path.dirname(os.path.abspath(h.baseFilename)) == os.path.abspath(run_dir):
            root.removeHandler(h)
            h.close()


class Timer:
    """Elapsed wall time since construction."""
    def __init__(self):
        self.start_ts = time.perf_counter()

    def elapsed_ms(self) -> int:
        return int((time.perf_counter() - self.start_ts) * 1000)
