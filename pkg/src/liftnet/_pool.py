import os
from concurrent.futures import ThreadPoolExecutor

# Row-chunk size for batched solves. Fixed so results do not depend on the
# number of workers.
CHUNK_ROWS = 512


def worker_count() -> int:
    try:
        return max(1, int(os.environ.get("LIFTNET_THREADS", "1")))
    except ValueError:
        return 1


def map_ordered(fn, items):
    items = list(items)
    workers = min(worker_count(), len(items))
    if workers <= 1:
        return [fn(it) for it in items]
    with ThreadPoolExecutor(max_workers=workers) as ex:
        return list(ex.map(fn, items))


def row_chunks(n: int, size: int = CHUNK_ROWS):
    return [slice(i, min(i + size, n)) for i in range(0, n, size)]
