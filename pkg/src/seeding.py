'''seeding.py'''

import hashlib
from concurrent.futures import ProcessPoolExecutor
from typing import Callable, Iterable, Iterator, List, TypeVar

T = TypeVar("T")
R = TypeVar("R")


def derive_seed(*parts: object) -> int:
    '''stable 63-bit seed from a master seed and any identifying parts'''
    key = "|".join(str(p) for p in parts)
    digest = hashlib.sha256(key.encode("utf-8")).hexdigest()[:16]
    return int(digest, 16) & 0x7FFFFFFFFFFFFFFF


def parallel_map(fn: Callable[[T], R], items: Iterable[T], jobs: int = 1) -> List[R]:
    '''
    order-preserving map; results never depend on jobs because every work item
    carries its own derived seed. fn must be a module level function (pickled).
    '''
    items = list(items)
    if jobs <= 1 or len(items) <= 1:
        return [fn(it) for it in items]
    with ProcessPoolExecutor(max_workers=jobs) as pool:
        return list(pool.map(fn, items, chunksize=max(1, len(items) // (jobs * 4))))


def parallel_imap(fn: Callable[[T], R], items: Iterable[T], jobs: int = 1) -> Iterator[R]:
    '''like parallel_map but yields each result, in input order, as soon as it is ready'''
    items = list(items)
    if jobs <= 1 or len(items) <= 1:
        for it in items:
            yield fn(it)
        return
    with ProcessPoolExecutor(max_workers=jobs) as pool:
        yield from pool.map(fn, items)
