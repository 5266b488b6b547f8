import csv
import math
from concurrent.futures import ThreadPoolExecutor
from pathlib import Path
from typing import Callable, Iterable, TypeVar

from config import get_runtime_settings

T = TypeVar("T")
R = TypeVar("R")

TRACE_HEADER = ["run", "iter", "distance", "ms"]


def map_concurrently(
    fn: Callable[[T], R], items: Iterable[T], workers: int | None = None
) -> list[R]:
    """
    Apply fn to every item on a thread pool. Results keep the input order,
    so reductions over them do not depend on scheduling.
    """
    items = list(items)
    if workers is None:
        workers = get_runtime_settings().threads
    if workers <= 1 or len(items) <= 1:
        return [fn(item) for item in items]
    with ThreadPoolExecutor(max_workers=min(workers, len(items))) as pool:
        return list(pool.map(fn, items))


def error_message(source: str, message: str) -> dict:
    return {
        "type": "error",
        "source": source,
        "error_message": message,
    }


def format_float(value: float) -> str:
    if isinstance(value, bool):
        return "true" if value else "false"
    if math.isnan(value):
        return "nan"
    if math.isinf(value):
        return "inf" if value > 0 else "-inf"
    return f"{value:.12g}"


def make_trace_row(
    run: str, iteration: int, distance: float, ms: float | None = None
) -> dict:
    return {
        "run": run,
        "iter": iteration,
        "distance": format_float(distance),
        "ms": "" if ms is None else f"{ms:.3f}",
    }


def write_trace_csv(path: Path, rows: list[dict]) -> None:
    with open(path, "w", newline="") as f:
        writer = csv.DictWriter(f, fieldnames=TRACE_HEADER, lineterminator="\n")
        writer.writeheader()
        writer.writerows(rows)


def format_summary(summary: dict) -> str:
    lines = []
    for key, value in summary.items():
        if isinstance(value, (bool, float)):
            value = format_float(value)
        lines.append(f"{key} = {value}")
    return "\n".join(lines) + "\n"


def write_summary(path: Path, summary: dict) -> None:
    with open(path, "w") as f:
        f.write(format_summary(summary))
