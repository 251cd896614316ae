"""BLAS thread-pool pinning.

Every dense factorization in this package is small (hundreds to a few
thousand rows), a regime where multi-threaded BLAS loses far more to pool
synchronization than it gains; on a two-core box a warm Newton step runs
about twenty times slower under the default pool.  Importing the package
pins the BLAS pools to ``STRATAPC_BLAS_THREADS`` threads (default 1); set
the variable to 0 to leave the pools untouched.
"""

from __future__ import annotations

import os


def pin_blas_threads() -> None:
    raw = os.environ.get("STRATAPC_BLAS_THREADS", "1").strip()
    try:
        n = int(raw)
    except ValueError:
        return
    if n <= 0:
        return
    try:
        import threadpoolctl
    except ImportError:  # pragma: no cover - threadpoolctl ships with scipy stacks
        return
    threadpoolctl.threadpool_limits(limits=n, user_api="blas")
