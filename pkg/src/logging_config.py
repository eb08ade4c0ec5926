import logging
import sys
from contextlib import contextmanager
from logging.handlers import RotatingFileHandler
from pathlib import Path

from src.config import settings

ROOT = "meta_cs"
FORMAT = '%(asctime)s - %(name)s - %(levelname)s - %(message)s'


def _root_logger() -> logging.Logger:
    root = logging.getLogger(ROOT)
    if root.handlers:
        return root
    root.setLevel(settings.LOG_LEVEL)
    root.propagate = False
    formatter = logging.Formatter(FORMAT)

    # Console
    c_handler = logging.StreamHandler(sys.stdout)
    c_handler.setFormatter(formatter)
    root.addHandler(c_handler)

    # File (Rotating)
    f_handler = RotatingFileHandler(settings.LOG_FILE, maxBytes=5*1024*1024, backupCount=3)
    f_handler.setFormatter(formatter)
    root.addHandler(f_handler)
    return root


def setup_logger(name: str) -> logging.Logger:
    """Module logger under the shared `meta_cs` hierarchy (handlers live on the root once)."""
    _root_logger()
    short = name[4:] if name.startswith("src.") else name
    return logging.getLogger(f"{ROOT}.{short}")


@contextmanager
def run_log(out_dir: Path):
    """Mirror everything logged during one experiment into `<out_dir>/run.log`."""
    root = _root_logger()
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    handler = logging.FileHandler(out_dir / "run.log", encoding="utf-8")
    handler.setFormatter(logging.Formatter(FORMAT))
    root.addHandler(handler)
    try:
        yield handler
    finally:
        root.removeHandler(handler)
        handler.close()
