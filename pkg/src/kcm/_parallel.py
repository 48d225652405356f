"""Replica execution with per-replica seeds and order-independent results."""

from __future__ import annotations

import os
from concurrent.futures import ThreadPoolExecutor
from typing import Callable

__all__ = ["ReplicaError", "thread_count", "run_replicas"]


class ReplicaError(RuntimeError):
    def __init__(self, index: int, cause: BaseException):
        super().__init__(f"replica {index} failed: {cause!r}")
        self.index = index
        self.cause = cause


def thread_count() -> int:
    """Worker threads from ``KCM_THREADS`` (default 1). Never changes results."""
    try:
        n = int(os.environ.get("KCM_THREADS", "1"))
    except ValueError:
        n = 1
    return max(n, 1)


def run_replicas(task: Callable, count: int, master_seed: int, threads: int | None = None,
                 order=None) -> list:
    """Run ``task(replica, (master_seed, replica))`` for every replica.

    Results come back indexed by replica, whatever the execution order or
    thread count, so any reduction over them is deterministic.
    """
    if count < 1:
        raise ValueError("need at least one replica")
    threads = thread_count() if threads is None else max(int(threads), 1)
    indices = list(range(count)) if order is None else list(order)
    if sorted(indices) != list(range(count)):
        raise ValueError("order must be a permutation of the replica indices")
    results: list = [None] * count

    def one(i):
        try:
            results[i] = task(i, (master_seed, i))
        except Exception as exc:  # noqa: BLE001
            raise ReplicaError(i, exc) from exc

    if threads == 1:
        for i in indices:
            one(i)
    else:
        with ThreadPoolExecutor(max_workers=threads) as pool:
            for fut in [pool.submit(one, i) for i in indices]:
                fut.result()
    return results
