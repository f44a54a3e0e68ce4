import logging
import os
from pathlib import Path

import numpy as np
from dotenv import load_dotenv

from errors import NonFiniteValue

load_dotenv()

# Path configuration
BASE_DIR    = Path(__file__).parent
DATA_DIR    = Path(os.getenv("CLASTER_DATA_DIR", BASE_DIR / 'data'))
MODELS_DIR  = Path(os.getenv("CLASTER_MODELS_DIR", BASE_DIR / 'models'))
OUTPUTS_DIR = Path(os.getenv("CLASTER_OUTPUTS_DIR", BASE_DIR / 'outputs'))

LOG_FORMAT = "%(asctime)s %(levelname)-7s %(name)s: %(message)s"

_configured = False


def configure_logging(level=None):
    """
    Configure the root logger once.

    The level comes from the argument, else CLASTER_LOG_LEVEL, else INFO.
    """
    global _configured
    level = (level or os.getenv("CLASTER_LOG_LEVEL", "INFO")).upper()
    root = logging.getLogger()
    if not _configured:
        handler = logging.StreamHandler()
        handler.setFormatter(logging.Formatter(LOG_FORMAT))
        root.addHandler(handler)
        _configured = True
    root.setLevel(getattr(logging, level, logging.INFO))


def get_logger(name):
    return logging.getLogger(name)


def format_float(value):
    """Shortest decimal that parses back to the same 64-bit float."""
    return repr(float(value))


def format_vector(values):
    return ",".join(format_float(v) for v in np.ravel(values))


def parse_vector(text):
    """Parse `v1,v2,...` into a float64 vector. Raises ValueError on junk."""
    parts = [p.strip() for p in str(text).split(",")]
    if not parts or any(p == "" for p in parts):
        raise ValueError(f"empty value in vector '{text}'")
    return np.array([float(p) for p in parts], dtype=np.float64)


def ensure_finite(array, what):
    """Raise NonFiniteValue naming `what` if any entry is NaN or infinite."""
    if not np.all(np.isfinite(array)):
        raise NonFiniteValue(f"non-finite value in {what}")
    return array


def save_output(content, path):
    """Write a text file, creating parent folders. Returns the path."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, 'w', encoding='utf-8', newline='\n') as f:
        f.write(content)
    get_logger(__name__).debug(f"Saved: {path}")
    return path


def save_outputs(contents):
    """
    Write several files as one unit.

    `contents` maps path -> text. If any write fails, the files this call
    already created are removed before the error propagates, so a failed
    call leaves no partial output behind.
    """
    written = []
    try:
        for path, text in contents.items():
            existed = Path(path).exists()
            save_output(text, path)
            if not existed:
                written.append(Path(path))
    except OSError:
        for path in written:
            path.unlink(missing_ok=True)
        raise
    return list(contents)
