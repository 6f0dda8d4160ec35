import os
from typing import Optional

from dotenv import load_dotenv

load_dotenv()


def _env_first(*keys: str) -> Optional[str]:
    for key in keys:
        value = os.environ.get(key)
        if value:
            return value
    return None


def _env_int(key: str, default: int) -> int:
    raw = os.environ.get(key)
    if not raw:
        return default
    try:
        value = int(raw)
    except ValueError:
        return default
    return value if value > 0 else default


def worker_count() -> int:
    # Read at call time so tests and wrappers can override the env.
    return _env_int("PZ_THREADS", os.cpu_count() or 1)


def shard_size() -> int:
    return _env_int("PZ_SHARD_SIZE", 16)


def checked_ops_default() -> bool:
    return (_env_first("PZ_CHECKED") or "0").lower() in ("1", "true", "yes")


LOG_LEVEL = _env_first("PZ_LOG_LEVEL", "LOG_LEVEL") or "INFO"

# Binarization threshold and Adam learning rates.
DEFAULT_EPS_P = 0.5
DEFAULT_LR = 1e-4
DEFAULT_CLASSIFIER_LR = 3e-3
DEFAULT_SURROGATE_K = 50.0
DEFAULT_DILATION_RADIUS = 2
DEFAULT_IMAGE_SIZE = 32
DEFAULT_CLASSES = ("circle", "square", "triangle", "cross")

CHECKPOINT_MAGIC = b"PZCK"
CHECKPOINT_VERSION = 1
PACKAGE_VERSION = "0.1.0"
