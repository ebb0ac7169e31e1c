"""Order-preserving parallel map over replicate tasks.

Results depend only on each task's own seed material, so the output is
identical for any n_jobs; chunking keeps argument pickling cheap.
"""

from __future__ import annotations

import os

import numpy as np


def _run_chunk(fn, args_chunk):
    return [fn(*args) for args in args_chunk]


def parallel_starmap(fn, args_list, n_jobs: int = 1) -> list:
    if n_jobs in (None, 1) or len(args_list) <= 1:
        return [fn(*args) for args in args_list]
    from joblib import Parallel, delayed

    workers = n_jobs if n_jobs > 0 else (os.cpu_count() or 1)
    n_chunks = min(len(args_list), 4 * workers)
    chunk_ids = np.array_split(np.arange(len(args_list)), n_chunks)
    chunks = Parallel(n_jobs=n_jobs)(
        delayed(_run_chunk)(fn, [args_list[i] for i in ids]) for ids in chunk_ids
    )
    return [result for chunk in chunks for result in chunk]
