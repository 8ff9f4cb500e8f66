"""Thread fan-out with a fixed, worker-count independent partition."""

from concurrent.futures import ThreadPoolExecutor
import threading

_pools: dict[int, ThreadPoolExecutor] = {}
_lock = threading.Lock()


def _pool(threads: int) -> ThreadPoolExecutor:
    with _lock:
        pool = _pools.get(threads)
        if pool is None:
            pool = ThreadPoolExecutor(max_workers=threads, thread_name_prefix=f"spct{threads}")
            _pools[threads] = pool
        return pool


def chunk_bounds(n: int, parts: int) -> list[tuple[int, int]]:
    """Split ``range(n)`` into at most ``parts`` contiguous half-open chunks."""
    parts = max(1, min(parts, n))
    if n <= 0:
        return []
    base, extra = divmod(n, parts)
    out = []
    start = 0
    for i in range(parts):
        stop = start + base + (1 if i < extra else 0)
        out.append((start, stop))
        start = stop
    return out


def _in_worker() -> bool:
    # nested fan-out from inside a pool worker runs inline (avoids pool starvation)
    return threading.current_thread().name.startswith("spct")


def run_chunks(fn, n: int, threads: int) -> None:
    """Call ``fn(start, stop)`` over a partition of ``range(n)``.

    Chunks write disjoint output so the result never depends on scheduling.
    """
    bounds = chunk_bounds(n, threads)
    if threads <= 1 or len(bounds) <= 1 or _in_worker():
        for start, stop in bounds:
            fn(start, stop)
        return
    futures = [_pool(threads).submit(fn, start, stop) for start, stop in bounds]
    for fut in futures:
        fut.result()


def map_ordered(fn, items, threads: int) -> list:
    """``[fn(x) for x in items]`` evaluated on ``threads`` workers, results in input order."""
    items = list(items)
    if threads <= 1 or len(items) <= 1 or _in_worker():
        return [fn(x) for x in items]
    return list(_pool(threads).map(fn, items))
