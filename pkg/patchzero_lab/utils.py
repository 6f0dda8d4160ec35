import logging
import subprocess
import time
from concurrent.futures import ThreadPoolExecutor
from contextlib import contextmanager
from pathlib import Path
from typing import Callable, Dict, Iterator, List, Sequence, TypeVar

from .config import PACKAGE_VERSION, worker_count

T = TypeVar("T")
R = TypeVar("R")


def setup_logging(level: int | str = logging.INFO) -> None:
    if isinstance(level, str):
        level = logging.getLevelName(level.upper())
        if not isinstance(level, int):
            level = logging.INFO
    logging.basicConfig(
        level=level,
        format="%(asctime)s [%(levelname)s] %(name)s - %(message)s",
    )


def parallel_map(func: Callable[[T], R], items: Sequence[T], max_workers: int | None = None) -> List[R]:
    """Run `func` over `items` on a thread pool; results keep input order."""
    workers = max(1, min(max_workers or worker_count(), len(items) or 1))
    if workers == 1 or len(items) <= 1:
        return [func(item) for item in items]
    with ThreadPoolExecutor(max_workers=workers) as executor:
        return list(executor.map(func, items))


def chunk_ranges(total: int, size: int) -> List[range]:
    return [range(start, min(start + size, total)) for start in range(0, total, size)]


@contextmanager
def timed(timings: Dict[str, float], key: str) -> Iterator[None]:
    start = time.perf_counter()
    try:
        yield
    finally:
        timings[key] = timings.get(key, 0.0) + time.perf_counter() - start


def version_string(repo_dir: Path | None = None) -> str:
    """git-describe style version, falling back to the package version outside a checkout."""
    try:
        out = subprocess.run(
            ["git", "describe", "--always", "--dirty", "--tags"],
            cwd=repo_dir or Path(__file__).resolve().parent,
            capture_output=True,
            text=True,
            timeout=5,
        )
    except (OSError, subprocess.SubprocessError):
        return f"v{PACKAGE_VERSION}"
    described = out.stdout.strip()
    if out.returncode != 0 or not described:
        return f"v{PACKAGE_VERSION}"
    return f"v{PACKAGE_VERSION}-{described}"
