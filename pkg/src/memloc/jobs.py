"""Per-sequence job fan-out over a shared read-only model.

Every job runs with BLAS pinned to one thread, in the serial path too, so
serial and process-parallel runs execute the same floating-point
operations and give bit-identical results.
"""

from __future__ import annotations

import multiprocessing as mp
import os
from concurrent.futures import ProcessPoolExecutor
from typing import Callable, Sequence

from threadpoolctl import threadpool_limits

from .lm import TransformerLM

_shared: dict = {}


def _init_worker(blob: bytes):
    _shared["model"] = TransformerLM.from_bytes(blob)


def _run_one(fn, args):
    with threadpool_limits(limits=1):
        return fn(_shared["model"], *args)


def default_workers() -> int:
    return os.cpu_count() or 1


def map_jobs(fn: Callable, model: TransformerLM, jobs: Sequence[tuple], workers: int = 1) -> list:
    """``[fn(model, *args) for args in jobs]``, optionally across processes; order is preserved."""
    jobs = list(jobs)
    if workers < 1:
        raise ValueError("workers must be >= 1")
    if workers == 1 or len(jobs) <= 1:
        with threadpool_limits(limits=1):
            return [fn(model, *args) for args in jobs]
    ctx = mp.get_context("spawn")
    with ProcessPoolExecutor(max_workers=min(workers, len(jobs)), mp_context=ctx,
                             initializer=_init_worker, initargs=(model.to_bytes(),)) as ex:
        return list(ex.map(_run_one, [fn] * len(jobs), jobs))
