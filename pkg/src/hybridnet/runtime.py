"""Worker-count and BLAS threading policy.

``HYBRIDNET_THREADS`` caps the number of per-image workers. BLAS itself is
always pinned to one thread so GEMM reduction order, and therefore every
output bit, does not depend on the worker count.
"""
from __future__ import annotations

import contextlib
import os

from threadpoolctl import threadpool_limits

ENV_THREADS = "HYBRIDNET_THREADS"


def worker_count() -> int:
    raw = os.environ.get(ENV_THREADS, "").strip()
    if not raw:
        return 1
    try:
        n = int(raw)
    except ValueError:
        raise ValueError(f"{ENV_THREADS} must be a positive integer, got {raw!r}") from None
    if n < 1:
        raise ValueError(f"{ENV_THREADS} must be a positive integer, got {raw!r}")
    return n


@contextlib.contextmanager
def pinned_blas():
    with threadpool_limits(limits=1, user_api="blas"):
        yield
